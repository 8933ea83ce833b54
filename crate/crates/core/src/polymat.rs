//! FIR polynomial matrices `A(z) = F_0 + F_1 z^-1 + ... + F_L z^-L`.
//!
//! This is the verification substrate: dense coefficient storage, exact
//! convolution products, sampling on the unit circle, the FFT-interpolated
//! determinant and the McMillan degree of lossless matrices. The renderers
//! work on the factorised cascade form instead (see [`crate::ffm`]).

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::util::{inf_norm, next_pow2, spectrum_of, to_complex, FftPair};
use crate::{Error, Result};

/// Relative threshold below which trailing determinant coefficients are dropped.
pub const DETERMINANT_TRIM: f64 = 1e-9;

/// Paraunitarity tolerance used when a lossless input is required.
pub const LOSSLESS_TOL: f64 = 1e-8;

/// An `N x N` FIR matrix stored as its coefficient matrices, index = delay.
#[derive(Clone, Debug, PartialEq)]
pub struct PolynomialMatrix {
    size: usize,
    coeffs: Vec<DMatrix<f64>>,
}

impl PolynomialMatrix {
    /// Builds a matrix from coefficient matrices `F_0..F_L`, trimming trailing
    /// all-zero coefficients.
    pub fn new(coeffs: Vec<DMatrix<f64>>) -> Result<Self> {
        let Some(first) = coeffs.first() else {
            return Err(Error::InvalidParameter(
                "a polynomial matrix needs at least one coefficient".into(),
            ));
        };
        let size = first.nrows();
        if size == 0 {
            return Err(Error::InvalidParameter("matrix size must be positive".into()));
        }
        for c in &coeffs {
            if c.nrows() != size || c.ncols() != size {
                return Err(Error::DimensionMismatch {
                    expected: size,
                    found: if c.nrows() != size { c.nrows() } else { c.ncols() },
                });
            }
        }
        let mut m = Self { size, coeffs };
        m.trim();
        Ok(m)
    }

    pub fn identity(size: usize) -> Self {
        Self::from_scalar(DMatrix::identity(size, size))
    }

    pub fn zero(size: usize) -> Self {
        Self::from_scalar(DMatrix::zeros(size, size))
    }

    /// Order-zero matrix.
    pub fn from_scalar(m: DMatrix<f64>) -> Self {
        assert_eq!(m.nrows(), m.ncols(), "scalar matrix must be square");
        Self {
            size: m.nrows(),
            coeffs: vec![m],
        }
    }

    /// `diag(z^-m_1, ..., z^-m_N)`.
    pub fn delay_diag(delays: &[usize]) -> Self {
        let n = delays.len();
        let order = delays.iter().copied().max().unwrap_or(0);
        let mut coeffs = vec![DMatrix::zeros(n, n); order + 1];
        for (i, &m) in delays.iter().enumerate() {
            coeffs[m][(i, i)] = 1.0;
        }
        Self { size: n, coeffs }
    }

    fn trim(&mut self) {
        while self.coeffs.len() > 1 && self.coeffs.last().is_some_and(|c| c.iter().all(|&v| v == 0.0)) {
            self.coeffs.pop();
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Largest delay index with a nonzero coefficient matrix.
    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coeffs(&self) -> &[DMatrix<f64>] {
        &self.coeffs
    }

    pub fn coeff(&self, k: usize) -> Option<&DMatrix<f64>> {
        self.coeffs.get(k)
    }

    /// Impulse response of entry `(i, j)`.
    pub fn entry(&self, i: usize, j: usize) -> Vec<f64> {
        self.coeffs.iter().map(|c| c[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Self {
        Self {
            size: self.size,
            coeffs: self.coeffs.iter().map(|c| c.transpose()).collect(),
        }
    }

    pub fn scale(&self, factor: f64) -> Self {
        let mut out = Self {
            size: self.size,
            coeffs: self.coeffs.iter().map(|c| c * factor).collect(),
        };
        out.trim();
        out
    }

    /// Polynomial (convolution) product `self(z) * other(z)`.
    pub fn multiply(&self, other: &Self) -> Result<Self> {
        if self.size != other.size {
            return Err(Error::DimensionMismatch {
                expected: self.size,
                found: other.size,
            });
        }
        let n = self.size;
        let mut coeffs = vec![DMatrix::zeros(n, n); self.order() + other.order() + 1];
        for (i, a) in self.coeffs.iter().enumerate() {
            if a.iter().all(|&v| v == 0.0) {
                continue;
            }
            for (j, b) in other.coeffs.iter().enumerate() {
                if b.iter().all(|&v| v == 0.0) {
                    continue;
                }
                coeffs[i + j] += a * b;
            }
        }
        let mut out = Self { size: n, coeffs };
        out.trim();
        Ok(out)
    }

    /// `sum_k F_k z^-k` by Horner evaluation in `z^-1`.
    pub fn evaluate(&self, z: Complex64) -> Result<DMatrix<Complex64>> {
        if z == Complex64::new(0.0, 0.0) {
            if self.order() > 0 {
                return Err(Error::DomainError { order: self.order() });
            }
            return Ok(to_complex(&self.coeffs[0]));
        }
        let zinv = z.inv();
        let mut acc = DMatrix::<Complex64>::zeros(self.size, self.size);
        for c in self.coeffs.iter().rev() {
            acc *= zinv;
            acc += to_complex(c);
        }
        Ok(acc)
    }

    /// Derivative `dA/dz = sum_k -k F_k z^{-k-1}`.
    pub fn evaluate_derivative(&self, z: Complex64) -> Result<DMatrix<Complex64>> {
        if z == Complex64::new(0.0, 0.0) {
            return Err(Error::DomainError { order: self.order() });
        }
        let zinv = z.inv();
        let mut acc = DMatrix::<Complex64>::zeros(self.size, self.size);
        for (k, c) in self.coeffs.iter().enumerate().rev() {
            acc *= zinv;
            acc += to_complex(c) * Complex64::new(-(k as f64), 0.0);
        }
        Ok(acc * zinv)
    }

    /// Responses at `e^{j 2 pi k / fft_size}` for `k = 0..fft_size`.
    pub fn frequency_response(&self, fft_size: usize) -> Vec<DMatrix<Complex64>> {
        let n = self.size;
        let fft = FftPair::new(fft_size);
        let mut out = vec![DMatrix::<Complex64>::zeros(n, n); fft_size];
        for i in 0..n {
            for j in 0..n {
                let spec = spectrum_of(&self.entry(i, j), &fft);
                for (k, v) in spec.into_iter().enumerate() {
                    out[k][(i, j)] = v;
                }
            }
        }
        out
    }

    /// Checks `A(e^jw)^H A(e^jw) = I` on every grid point.
    pub fn is_paraunitary(&self, grid: &FrequencyGrid, tol: f64) -> Result<ParaunitaryReport> {
        let required = 2 * self.order() + 1;
        if grid.count() < required {
            return Err(Error::InsufficientGrid {
                count: grid.count(),
                required,
            });
        }
        let eye = DMatrix::<Complex64>::identity(self.size, self.size);
        let max_deviation = self
            .frequency_response(grid.count())
            .iter()
            .map(|e| inf_norm(&(e.adjoint() * e - &eye)))
            .fold(0.0, f64::max);
        Ok(ParaunitaryReport {
            paraunitary: max_deviation <= tol,
            max_deviation,
        })
    }

    /// Paraunitarity on the smallest power-of-two grid that certifies it.
    pub fn check_paraunitary(&self, tol: f64) -> ParaunitaryReport {
        let grid = FrequencyGrid::uniform(next_pow2(2 * self.order() + 1).max(2));
        self.is_paraunitary(&grid, tol)
            .expect("grid is sized from the matrix order")
    }

    /// Coefficients of `det A(z)` in powers of `z^-1`, interpolated from
    /// determinants on a power-of-two unit-circle grid of at least `N L + 1`
    /// points.
    pub fn determinant(&self) -> Vec<f64> {
        let grid = next_pow2(self.size * self.order() + 1);
        let fft = FftPair::new(grid);
        let mut dets: Vec<Complex64> = self
            .frequency_response(grid)
            .into_iter()
            .map(|m| m.lu().determinant())
            .collect();
        fft.inverse(&mut dets);
        let mut coeffs: Vec<f64> = dets.iter().map(|c| c.re).collect();
        let peak = coeffs.iter().fold(0.0_f64, |a, &b| a.max(b.abs()));
        if peak == 0.0 {
            return vec![0.0];
        }
        let cut = peak * DETERMINANT_TRIM;
        while coeffs.len() > 1 && coeffs.last().is_some_and(|c| c.abs() < cut) {
            coeffs.pop();
        }
        coeffs
    }

    /// McMillan degree of a causal lossless matrix, `deg det A(z)`.
    pub fn mcmillan_degree(&self) -> Result<usize> {
        let report = self.check_paraunitary(LOSSLESS_TOL);
        if !report.paraunitary {
            return Err(Error::NotParaunitary {
                deviation: report.max_deviation,
            });
        }
        Ok(self.determinant().len() - 1)
    }

    /// Number of nonzero coefficients in entry `(i, j)`.
    pub fn pulse_count(&self, i: usize, j: usize) -> usize {
        self.coeffs.iter().filter(|c| c[(i, j)] != 0.0).count()
    }
}

/// Result of a paraunitarity check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParaunitaryReport {
    pub paraunitary: bool,
    pub max_deviation: f64,
}

/// Uniformly spaced points `e^{j 2 pi k / K}` on the unit circle.
#[derive(Clone, Debug)]
pub struct FrequencyGrid {
    points: Vec<Complex64>,
}

impl FrequencyGrid {
    pub fn uniform(count: usize) -> Self {
        assert!(count >= 1, "grid needs at least one point");
        let points = (0..count)
            .map(|k| Complex64::from_polar(1.0, std::f64::consts::TAU * k as f64 / count as f64))
            .collect();
        Self { points }
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    pub fn points(&self) -> &[Complex64] {
        &self.points
    }

    /// Angular frequency of point `k`.
    pub fn omega(&self, k: usize) -> f64 {
        std::f64::consts::TAU * k as f64 / self.count() as f64
    }
}

/// Plain-text form: a header line `N L`, then `L + 1` blocks of `N` rows.
/// Values use the shortest representation that parses back bit-exactly.
impl fmt::Display for PolynomialMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} {}", self.size, self.order())?;
        for (k, c) in self.coeffs.iter().enumerate() {
            if k > 0 {
                writeln!(f)?;
            }
            for row in c.row_iter() {
                let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                writeln!(f, "{}", line.join(" "))?;
            }
        }
        Ok(())
    }
}

impl FromStr for PolynomialMatrix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut lines = s
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (hline, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "missing header".into(),
        })?;
        let parse_usize = |tok: Option<&str>, what: &str| -> Result<usize> {
            tok.and_then(|t| t.parse().ok()).ok_or_else(|| Error::Parse {
                line: hline,
                message: format!("header must be `N L` ({what})"),
            })
        };
        let mut toks = header.split_whitespace();
        let n = parse_usize(toks.next(), "N")?;
        let order = parse_usize(toks.next(), "L")?;
        if n == 0 {
            return Err(Error::Parse {
                line: hline,
                message: "N must be positive".into(),
            });
        }
        let mut coeffs = Vec::with_capacity(order + 1);
        for _ in 0..=order {
            let mut m = DMatrix::zeros(n, n);
            for i in 0..n {
                let (lno, line) = lines.next().ok_or(Error::Parse {
                    line: hline,
                    message: format!("expected {} coefficient blocks", order + 1),
                })?;
                let vals: Vec<f64> = line
                    .split_whitespace()
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Parse {
                        line: lno,
                        message: e.to_string(),
                    })?;
                if vals.len() != n {
                    return Err(Error::Parse {
                        line: lno,
                        message: format!("expected {n} values, found {}", vals.len()),
                    });
                }
                for (j, v) in vals.into_iter().enumerate() {
                    m[(i, j)] = v;
                }
            }
            coeffs.push(m);
        }
        if let Some((lno, _)) = lines.next() {
            return Err(Error::Parse {
                line: lno,
                message: "trailing data after the last block".into(),
            });
        }
        Self::new(coeffs)
    }
}
