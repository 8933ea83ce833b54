//! Filter feedback delay networks (FFDN).
//!
//! The crate is organised bottom-up:
//!
//! - [`polymat`]: FIR polynomial matrices, frequency sampling, determinant and
//!   McMillan degree.
//! - [`ffm`]: lossless (paraunitary) filter feedback matrix families in their
//!   factorised cascade form, plus operation counts.
//! - [`engine`]: impulse response rendering (time-domain cascade and
//!   frequency-domain block convolution) and attenuation design.
//! - [`modal`]: pole/residue decomposition of the network with an
//!   Ehrlich-Aberth iteration driven by matrix Newton corrections.
//! - [`density`]: echo paths, normalized echo density, mixing time and the
//!   Monte-Carlo mixing-time study.

pub mod density;
pub mod engine;
pub mod error;
pub mod ffm;
pub mod modal;
pub mod polymat;
mod util;

pub use error::{Error, Result};
pub use nalgebra::{DMatrix, DVector};
pub use num_complex::Complex64;

/// Version of the flat `key=value` job/FFM configuration format.
pub const CONFIG_FORMAT_VERSION: u32 = 1;
