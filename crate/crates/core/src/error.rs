use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("evaluation at z = 0 is undefined for a matrix of order {order}")]
    DomainError { order: usize },

    #[error("sampling grid of {count} points is too coarse (need at least {required})")]
    InsufficientGrid { count: usize, required: usize },

    #[error("matrix is not paraunitary (max deviation {deviation:.3e})")]
    NotParaunitary { deviation: f64 },

    #[error("matrix is not orthogonal (max deviation {deviation:.3e})")]
    NotOrthogonal { deviation: f64 },

    #[error("vector is not unit norm (norm {norm})")]
    NotUnitNorm { norm: f64 },

    #[error("no Hadamard matrix of size {0} is available (powers of two only)")]
    NoHadamard(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unstable render: |y[{sample}]| = {value:.3e} exceeds the instability threshold")]
    Unstable { sample: usize, value: f64 },

    #[error("matrix is singular at z = {re} + {im}i")]
    Singular { re: f64, im: f64 },

    #[error("{unconverged} of {total} poles did not converge after {iterations} sweeps")]
    NotConverged {
        unconverged: usize,
        total: usize,
        iterations: usize,
    },

    #[error("near-defective pole cluster: distance {distance:.3e} between poles {a} and {b}")]
    IllConditioned { a: usize, b: usize, distance: f64 },

    #[error("every entry is flagged at frequency index {0}")]
    AllFlagged(usize),

    #[error("echo density of an all-zero impulse response is undefined")]
    ZeroSignal,
}
