use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

pub(crate) fn next_pow2(n: usize) -> usize {
    n.max(1).next_power_of_two()
}

pub(crate) struct FftPair {
    pub forward: Arc<dyn Fft<f64>>,
    pub inverse: Arc<dyn Fft<f64>>,
    pub len: usize,
}

impl FftPair {
    pub fn new(len: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            forward: planner.plan_fft_forward(len),
            inverse: planner.plan_fft_inverse(len),
            len,
        }
    }

    /// Unnormalized forward transform, `X[k] = sum x[n] e^{-j 2 pi k n / len}`.
    pub fn forward(&self, buf: &mut [Complex64]) {
        self.forward.process(buf);
    }

    /// Normalized inverse transform.
    pub fn inverse(&self, buf: &mut [Complex64]) {
        self.inverse.process(buf);
        let scale = 1.0 / self.len as f64;
        buf.iter_mut().for_each(|v| *v *= scale);
    }
}

/// Real sequence sampled on a uniform grid of `len` points; coefficients past
/// `len` fold onto the grid, which is exact for evaluation at the grid points.
pub(crate) fn spectrum_of(seq: &[f64], fft: &FftPair) -> Vec<Complex64> {
    let mut buf = vec![Complex64::new(0.0, 0.0); fft.len];
    for (n, &v) in seq.iter().enumerate() {
        buf[n % fft.len].re += v;
    }
    fft.forward(&mut buf);
    buf
}

pub(crate) fn to_complex(m: &DMatrix<f64>) -> DMatrix<Complex64> {
    m.map(|v| Complex64::new(v, 0.0))
}

/// Induced infinity norm (max absolute row sum).
pub(crate) fn inf_norm(m: &DMatrix<Complex64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub(crate) fn inf_norm_real(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}
