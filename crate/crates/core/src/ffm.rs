//! Lossless filter feedback matrices.
//!
//! Every family is built in the factorised cascade form
//! `A(z) = D_{m_K} U_K ... D_{m_1} U_1 D_{m_0}` where `D_m(z) = diag(z^-m)`.
//! A [`Stage`] is one `(U_k, m_k)` pair: the signal is mixed by `U_k` and
//! then delayed by `m_k`. [`FfmCascade::expand`] multiplies the factors out
//! into a [`PolynomialMatrix`] for inspection and verification.
//!
//! IIR allpass feedback matrices are not provided.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::polymat::PolynomialMatrix;
use crate::util::inf_norm_real;
use crate::{Error, Result};

/// Orthogonality tolerance for stage matrices.
pub const ORTHOGONALITY_TOL: f64 = 1e-10;

/// Unit-norm tolerance for elemental vectors.
pub const UNIT_NORM_TOL: f64 = 1e-12;

/// One mixing-then-delay section of a cascade.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub unitary: DMatrix<f64>,
    pub delays: Vec<usize>,
}

impl Stage {
    pub fn new(unitary: DMatrix<f64>, delays: Vec<usize>) -> Self {
        Self { unitary, delays }
    }
}

/// Factorised paraunitary FIR matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FfmCascade {
    size: usize,
    pre_delays: Vec<usize>,
    stages: Vec<Stage>,
}

impl FfmCascade {
    /// Validates dimensions and stage orthogonality.
    pub fn new(pre_delays: Vec<usize>, stages: Vec<Stage>) -> Result<Self> {
        let size = pre_delays.len();
        if size == 0 {
            return Err(Error::InvalidParameter("matrix size must be positive".into()));
        }
        for s in &stages {
            if s.unitary.nrows() != size || s.unitary.ncols() != size {
                return Err(Error::DimensionMismatch {
                    expected: size,
                    found: s.unitary.nrows(),
                });
            }
            if s.delays.len() != size {
                return Err(Error::DimensionMismatch {
                    expected: size,
                    found: s.delays.len(),
                });
            }
            check_orthogonal(&s.unitary)?;
        }
        Ok(Self {
            size,
            pre_delays,
            stages,
        })
    }

    /// Memoryless feedback matrix `A(z) = U`.
    pub fn scalar(u: DMatrix<f64>) -> Result<Self> {
        let n = u.nrows();
        Self::new(vec![0; n], vec![Stage::new(u, vec![0; n])])
    }

    pub fn identity(size: usize) -> Self {
        Self {
            size,
            pre_delays: vec![0; size],
            stages: Vec::new(),
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pre_delays(&self) -> &[usize] {
        &self.pre_delays
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    /// Sum of all internal delays, which is the McMillan degree.
    pub fn total_delay(&self) -> usize {
        self.pre_delays.iter().sum::<usize>()
            + self
                .stages
                .iter()
                .map(|s| s.delays.iter().sum::<usize>())
                .sum::<usize>()
    }

    /// Upper bound on the order of the expanded matrix.
    pub fn order_bound(&self) -> usize {
        let max = |d: &[usize]| d.iter().copied().max().unwrap_or(0);
        max(&self.pre_delays) + self.stages.iter().map(|s| max(&s.delays)).sum::<usize>()
    }

    /// Multiplies the cascade out into its polynomial matrix.
    pub fn expand(&self) -> PolynomialMatrix {
        self.expand_with_gains(None)
    }

    /// Expansion with a per-channel gain after every delay vector:
    /// `gains[0]` follows the pre-delays and `gains[k]` the delays of stage `k`.
    pub fn expand_with_gains(&self, gains: Option<&[Vec<f64>]>) -> PolynomialMatrix {
        let n = self.size;
        let scale_rows = |coeffs: &mut [DMatrix<f64>], k: usize, used: usize| {
            if let Some(g) = gains.map(|g| &g[k]) {
                for c in coeffs.iter_mut().take(used) {
                    for (i, &gi) in g.iter().enumerate() {
                        c.row_mut(i).scale_mut(gi);
                    }
                }
            }
        };
        let mut coeffs = vec![DMatrix::zeros(n, n); self.order_bound() + 1];
        for (i, &m) in self.pre_delays.iter().enumerate() {
            coeffs[m][(i, i)] = 1.0;
        }
        let mut used = self.pre_delays.iter().copied().max().unwrap_or(0) + 1;
        scale_rows(&mut coeffs, 0, used);
        for (k, stage) in self.stages.iter().enumerate() {
            for c in coeffs.iter_mut().take(used) {
                if c.iter().any(|&v| v != 0.0) {
                    *c = &stage.unitary * &*c;
                }
            }
            used = shift_rows(&mut coeffs, &stage.delays, used);
            scale_rows(&mut coeffs, k + 1, used);
        }
        PolynomialMatrix::new(coeffs).expect("coefficients share one size")
    }

    /// Cascade of `A^T(z)`. For a paraunitary `A` this evaluates to
    /// `A^{-1}(1/z)`: each factor is inverted in place and the order reversed.
    pub fn invert(&self) -> FfmCascade {
        let mut pre = self.pre_delays.clone();
        let mut stages = Vec::with_capacity(self.stages.len());
        if let Some(last) = self.stages.last() {
            pre = last.delays.clone();
            for k in (0..self.stages.len()).rev() {
                let delays = if k == 0 {
                    self.pre_delays.clone()
                } else {
                    self.stages[k - 1].delays.clone()
                };
                stages.push(Stage::new(self.stages[k].unitary.transpose(), delays));
            }
        }
        FfmCascade {
            size: self.size,
            pre_delays: pre,
            stages,
        }
    }

    /// Whether every stage matrix is the normalised Sylvester Hadamard matrix.
    pub fn is_hadamard(&self) -> bool {
        let Ok(h) = hadamard(self.size) else {
            return false;
        };
        !self.stages.is_empty() && self.stages.iter().all(|s| s.unitary == h)
    }
}

/// Delays row `i` of every coefficient by `delays[i]`; returns the new used length.
fn shift_rows(coeffs: &mut [DMatrix<f64>], delays: &[usize], used: usize) -> usize {
    let mut new_used = used;
    for (i, &m) in delays.iter().enumerate() {
        if m == 0 {
            continue;
        }
        for k in (0..used).rev() {
            let row = coeffs[k].row(i).clone_owned();
            coeffs[k].row_mut(i).fill(0.0);
            coeffs[k + m].row_mut(i).copy_from(&row);
        }
        new_used = new_used.max(used + m);
    }
    new_used
}

fn check_orthogonal(u: &DMatrix<f64>) -> Result<()> {
    let n = u.nrows();
    let deviation = inf_norm_real(&(u.transpose() * u - DMatrix::<f64>::identity(n, n)));
    if deviation < ORTHOGONALITY_TOL {
        Ok(())
    } else {
        Err(Error::NotOrthogonal { deviation })
    }
}

fn check_unit(v: &DVector<f64>) -> Result<()> {
    let norm = v.norm();
    if (norm - 1.0).abs() <= UNIT_NORM_TOL {
        Ok(())
    } else {
        Err(Error::NotUnitNorm { norm })
    }
}

/// `V(z) = I - v v^T + z^-1 v v^T`.
pub fn elemental_block(v: &DVector<f64>) -> Result<PolynomialMatrix> {
    check_unit(v)?;
    let p = v * v.transpose();
    let n = v.len();
    PolynomialMatrix::new(vec![DMatrix::identity(n, n) - &p, p])
}

/// Unit vectors `v_1..v_K` of an elemental block product.
#[derive(Clone, Debug, PartialEq)]
pub struct ElementalFactorization {
    size: usize,
    vectors: Vec<DVector<f64>>,
}

impl ElementalFactorization {
    pub fn new(size: usize, vectors: Vec<DVector<f64>>) -> Result<Self> {
        for v in &vectors {
            if v.len() != size {
                return Err(Error::DimensionMismatch {
                    expected: size,
                    found: v.len(),
                });
            }
            check_unit(v)?;
        }
        Ok(Self { size, vectors })
    }

    /// Gaussian vectors, normalised.
    pub fn random(size: usize, stages: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vectors = (0..stages)
            .map(|_| {
                let v = DVector::from_fn(size, |_, _| rng.sample::<f64, _>(StandardNormal));
                v.normalize()
            })
            .collect();
        Self { size, vectors }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn vectors(&self) -> &[DVector<f64>] {
        &self.vectors
    }

    /// The same matrix as a cascade with one unit delay per stage.
    ///
    /// Each block is `Q diag(z^-1, 1, ..., 1) Q^T` with `Q` a reflection whose
    /// first column is `+-v`, so adjacent reflections merge into one stage.
    pub fn to_cascade(&self) -> FfmCascade {
        let n = self.size;
        if self.vectors.is_empty() {
            return FfmCascade::identity(n);
        }
        let mut e1 = vec![0; n];
        e1[0] = 1;
        let qs: Vec<DMatrix<f64>> = self.vectors.iter().map(reflector_with_first_column).collect();
        let mut stages = Vec::with_capacity(qs.len() + 1);
        stages.push(Stage::new(qs[0].transpose(), e1.clone()));
        for k in 1..qs.len() {
            stages.push(Stage::new(qs[k].transpose() * &qs[k - 1], e1.clone()));
        }
        stages.push(Stage::new(qs[qs.len() - 1].clone(), vec![0; n]));
        FfmCascade {
            size: n,
            pre_delays: vec![0; n],
            stages,
        }
    }
}

/// Householder reflection mapping `e_1` to `+-v` (sign chosen for stability).
fn reflector_with_first_column(v: &DVector<f64>) -> DMatrix<f64> {
    let n = v.len();
    let mut w = if v[0] > 0.0 { v.clone() } else { -v.clone() };
    w[0] += 1.0;
    let scale = 2.0 / w.norm_squared();
    DMatrix::identity(n, n) - (&w * w.transpose()) * scale
}

/// `A(z) = V_K(z) ... V_1(z)`, multiplied out directly.
pub fn ebfm(factors: &ElementalFactorization) -> Result<PolynomialMatrix> {
    let mut acc = PolynomialMatrix::identity(factors.size);
    for v in &factors.vectors {
        acc = elemental_block(v)?.multiply(&acc)?;
    }
    Ok(acc)
}

/// `A(z) = D_{m1} U D_{m0}`.
pub fn dfm(m1: &[usize], u: DMatrix<f64>, m0: &[usize]) -> Result<FfmCascade> {
    if m1.len() != m0.len() {
        return Err(Error::DimensionMismatch {
            expected: m0.len(),
            found: m1.len(),
        });
    }
    FfmCascade::new(m0.to_vec(), vec![Stage::new(u, m1.to_vec())])
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// signs of `R`'s diagonal moved into `Q`.
pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Orthonormal Sylvester Hadamard matrix (`H H^T = I`); sizes `2^p` only.
pub fn hadamard(n: usize) -> Result<DMatrix<f64>> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::NoHadamard(n));
    }
    let scale = (n as f64).sqrt().recip();
    Ok(DMatrix::from_fn(n, n, |i, j| {
        if (i & j).count_ones() % 2 == 0 {
            scale
        } else {
            -scale
        }
    }))
}

/// In-place unnormalised fast Walsh-Hadamard transform in Sylvester order.
/// `buf.len()` must be a power of two.
pub fn fwht(buf: &mut [f64]) {
    let n = buf.len();
    debug_assert!(n.is_power_of_two());
    let mut h = 1;
    while h < n {
        for start in (0..n).step_by(2 * h) {
            for i in start..start + h {
                let (a, b) = (buf[i], buf[i + h]);
                buf[i] = a + b;
                buf[i + h] = a - b;
            }
        }
        h *= 2;
    }
}

/// `m_k = N^{k-1} [0, 1, ..., N-1]` for `k = 1..=K`.
fn dense_delays(n: usize, stages: usize) -> Vec<Vec<usize>> {
    (1..=stages)
        .map(|k| {
            let step = n.pow(k as u32 - 1);
            (0..n).map(|i| i * step).collect()
        })
        .collect()
}

/// Dense iteration with the given `K + 1` unitaries `U_0..U_K`.
pub fn rdfm_with_unitaries(unitaries: Vec<DMatrix<f64>>) -> Result<FfmCascade> {
    let Some(first) = unitaries.first() else {
        return Err(Error::InvalidParameter("at least one unitary is required".into()));
    };
    let n = first.nrows();
    let stages_count = unitaries.len() - 1;
    iteration(unitaries, dense_delays(n, stages_count))
}

/// `U_0..U_K` interleaved with the delay vectors `m_1..m_K`.
fn iteration(unitaries: Vec<DMatrix<f64>>, delays: Vec<Vec<usize>>) -> Result<FfmCascade> {
    let n = unitaries[0].nrows();
    let mut stages: Vec<Stage> = unitaries
        .into_iter()
        .zip(delays.into_iter().chain(std::iter::once(vec![0; n])))
        .map(|(u, m)| Stage::new(u, m))
        .collect();
    stages.shrink_to_fit();
    FfmCascade::new(vec![0; n], stages)
}

/// Random dense feedback matrix with `K` delay stages; every entry has
/// `N^K` nonzero taps.
pub fn rdfm(n: usize, stages: usize, seed: u64) -> Result<FfmCascade> {
    if stages == 0 {
        return Err(Error::InvalidParameter("dense iteration needs K >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unitaries = (0..=stages).map(|_| random_orthogonal(n, &mut rng)).collect();
    rdfm_with_unitaries(unitaries)
}

/// Paraunitary Hadamard matrix: dense iteration with Hadamard mixing, so all
/// taps are `+-n^{-(K+1)/2}`.
pub fn hadamard_ffm(n: usize, stages: usize) -> Result<FfmCascade> {
    let h = hadamard(n)?;
    iteration(vec![h; stages + 1], dense_delays(n, stages))
}

/// Parameters of a velvet feedback matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct VelvetSpec {
    pub size: usize,
    pub stages: usize,
    /// Average pulses per sample per filter, `0 < density <= 1`.
    pub density: f64,
    pub jitter_seed: u64,
}

impl VelvetSpec {
    /// `L_k = ceil(N^k / density)`.
    pub fn filter_order(&self, k: usize) -> usize {
        ceil_tolerant(self.size.pow(k as u32) as f64 / self.density)
    }
}

/// Ceiling that ignores representation error, so `4 / (1/30)` is 120.
fn ceil_tolerant(x: f64) -> usize {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// Attempts at jittered delays before falling back to regular spacing.
const VELVET_RETRIES: usize = 100;

/// Velvet feedback matrix: a Hadamard iteration with sparse, irregular delays.
///
/// `m_1` holds one stratified random value per cell of `[0, (N-1)/density]`.
/// Later stages use `m_k = L_{k-1} [0, ..., N-1]` plus a seeded jitter of up
/// to `L_{k-1}/10`. All `N^K` path delays are kept distinct so every filter
/// has exactly `N^K` pulses.
pub fn vfm(spec: &VelvetSpec) -> Result<FfmCascade> {
    if !(spec.density > 0.0 && spec.density <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "velvet density must lie in (0, 1], got {}",
            spec.density
        )));
    }
    let n = spec.size;
    let h = hadamard(n)?;
    if spec.stages == 0 {
        return FfmCascade::scalar(h);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.jitter_seed);
    let span = ceil_tolerant((n - 1) as f64 / spec.density + 1.0) - 1;
    let m1: Vec<usize> = (0..n)
        .map(|i| {
            let lo = i * (span + 1) / n;
            let hi = (i + 1) * (span + 1) / n;
            rng.random_range(lo..hi.max(lo + 1))
        })
        .collect();
    let regular = spec.density >= 1.0;
    let build = |rng: &mut ChaCha8Rng, jitter: bool| -> Vec<Vec<usize>> {
        let mut all = vec![m1.clone()];
        for k in 2..=spec.stages {
            let step = spec.filter_order(k - 1);
            let amp = if jitter && !regular { (step / 10) as i64 } else { 0 };
            all.push(
                (0..n)
                    .map(|i| {
                        let j = if amp > 0 { rng.random_range(-amp..=amp) } else { 0 };
                        ((i * step) as i64 + j).max(0) as usize
                    })
                    .collect(),
            );
        }
        all
    };
    let mut delays = None;
    for _ in 0..VELVET_RETRIES {
        let candidate = build(&mut rng, true);
        if path_delays_distinct(&candidate) {
            delays = Some(candidate);
            break;
        }
    }
    let delays = delays.unwrap_or_else(|| regular_velvet_delays(&m1, spec.stages));
    iteration(vec![h; spec.stages + 1], delays)
}

/// Collision-free fallback: each stage spaced beyond the previous support.
fn regular_velvet_delays(m1: &[usize], stages: usize) -> Vec<Vec<usize>> {
    let n = m1.len();
    let mut all = vec![m1.to_vec()];
    let mut support = m1.iter().copied().max().unwrap_or(0);
    for _ in 2..=stages {
        let step = support + 1;
        all.push((0..n).map(|i| i * step).collect());
        support += (n - 1) * step;
    }
    all
}

/// Whether all `N^K` sums `m_1[q_1] + ... + m_K[q_K]` differ.
fn path_delays_distinct(delays: &[Vec<usize>]) -> bool {
    let mut sums = vec![0usize];
    for m in delays {
        sums = sums.iter().flat_map(|&s| m.iter().map(move |&d| s + d)).collect();
    }
    let total = sums.len();
    sums.sort_unstable();
    sums.dedup();
    sums.len() == total
}

/// Whether every coefficient matrix has at most one nonzero column, the
/// property that makes the next mixing stage produce a dense result.
pub fn is_column_distinct(a: &PolynomialMatrix) -> bool {
    a.coeffs()
        .iter()
        .all(|c| c.column_iter().filter(|col| col.iter().any(|&v| v != 0.0)).count() <= 1)
}

/// Largest number of nonzero taps over all entries of the expanded matrix.
pub fn pulses_per_filter(c: &FfmCascade) -> usize {
    let a = c.expand();
    let n = a.size();
    (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| a.pulse_count(i, j))
        .max()
        .unwrap_or(0)
}

/// Per-sample arithmetic and memory cost of running a cascade.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OperationCount {
    pub adds: usize,
    pub mults: usize,
    pub delay_rw: usize,
}

/// Operation count of the cascade form, excluding the main delay lines.
///
/// With `hadamard` set, mixing uses the fast Walsh-Hadamard transform
/// (`N log2 N` additions per delay stage) and all scaling is merged into `N`
/// final multiplications. Otherwise each stage costs `N^2` multiply-adds.
/// Each group of delay stages costs `2N` reads and writes per stage plus one
/// extra pass of `2N` at the matrix output; a memoryless matrix has none.
pub fn operation_count(c: &FfmCascade, hadamard: bool) -> Result<OperationCount> {
    let n = c.size();
    let delay_stages = std::iter::once(c.pre_delays())
        .chain(c.stages().iter().map(|s| s.delays.as_slice()))
        .filter(|d| d.iter().any(|&m| m > 0))
        .count();
    let delay_rw = if delay_stages == 0 {
        0
    } else {
        2 * n * (delay_stages + 1)
    };
    if hadamard {
        if !n.is_power_of_two() {
            return Err(Error::NoHadamard(n));
        }
        let log2 = n.trailing_zeros() as usize;
        Ok(OperationCount {
            adds: delay_stages * n * log2,
            mults: n,
            delay_rw,
        })
    } else {
        let mixing = c.stages().len() * n * n;
        Ok(OperationCount {
            adds: mixing,
            mults: mixing,
            delay_rw,
        })
    }
}

/// Feedback matrix family selectable from configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FfmFamily {
    Identity,
    /// Random orthogonal scalar matrix.
    Scalar,
    /// Scalar Hadamard matrix.
    HadamardScalar,
    Ebfm,
    Dfm,
    Rdfm,
    Hadamard,
    Vfm,
}

impl FfmFamily {
    pub fn name(self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Scalar => "scalar",
            Self::HadamardScalar => "hadamard-scalar",
            Self::Ebfm => "ebfm",
            Self::Dfm => "dfm",
            Self::Rdfm => "rdfm",
            Self::Hadamard => "hadamard",
            Self::Vfm => "vfm",
        }
    }
}

impl FromStr for FfmFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "identity" => Self::Identity,
            "scalar" | "sfm" => Self::Scalar,
            "hadamard-scalar" => Self::HadamardScalar,
            "ebfm" => Self::Ebfm,
            "dfm" => Self::Dfm,
            "rdfm" => Self::Rdfm,
            "hadamard" => Self::Hadamard,
            "vfm" | "velvet" => Self::Vfm,
            other => return Err(Error::Config(format!("unknown FFM family `{other}`"))),
        })
    }
}

impl fmt::Display for FfmFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Flat description of one feedback matrix, e.g.
/// `family=vfm size=4 stages=2 density=1/30 seed=7`.
#[derive(Clone, Debug, PartialEq)]
pub struct FfmSpec {
    pub family: FfmFamily,
    pub size: usize,
    pub stages: usize,
    pub density: f64,
    pub seed: u64,
    /// Largest random DFM delay when `m0`/`m1` are not given.
    pub max_delay: usize,
    pub m0: Option<Vec<usize>>,
    pub m1: Option<Vec<usize>>,
}

impl FfmSpec {
    pub fn new(family: FfmFamily, size: usize) -> Self {
        Self {
            family,
            size,
            stages: 1,
            density: 1.0,
            seed: 0,
            max_delay: 12,
            m0: None,
            m1: None,
        }
    }

    /// Recognised keys; unknown keys are rejected by [`FfmSpec::set`].
    pub const KEYS: [&'static str; 8] = ["family", "size", "stages", "density", "seed", "max_delay", "m0", "m1"];

    /// Applies one `key=value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("invalid {what} `{value}`"));
        match key {
            "family" => self.family = value.parse()?,
            "size" => self.size = value.parse().map_err(|_| bad("size"))?,
            "stages" => self.stages = value.parse().map_err(|_| bad("stages"))?,
            "density" => self.density = parse_fraction(value).ok_or_else(|| bad("density"))?,
            "seed" => self.seed = value.parse().map_err(|_| bad("seed"))?,
            "max_delay" => self.max_delay = value.parse().map_err(|_| bad("max_delay"))?,
            "m0" => self.m0 = Some(parse_usize_list(value).ok_or_else(|| bad("m0"))?),
            "m1" => self.m1 = Some(parse_usize_list(value).ok_or_else(|| bad("m1"))?),
            other => return Err(Error::Config(format!("unknown FFM key `{other}`"))),
        }
        Ok(())
    }

    /// Constructs the cascade described by this spec.
    pub fn build(&self) -> Result<FfmCascade> {
        let n = self.size;
        if n == 0 {
            return Err(Error::Config("size must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        match self.family {
            FfmFamily::Identity => Ok(FfmCascade::identity(n)),
            FfmFamily::Scalar => FfmCascade::scalar(random_orthogonal(n, &mut rng)),
            FfmFamily::HadamardScalar => FfmCascade::scalar(hadamard(n)?),
            FfmFamily::Ebfm => Ok(ElementalFactorization::random(n, self.stages, self.seed).to_cascade()),
            FfmFamily::Dfm => {
                let mut draw = |given: &Option<Vec<usize>>| match given {
                    Some(m) => m.clone(),
                    None => (0..n).map(|_| rng.random_range(0..=self.max_delay)).collect(),
                };
                let m0 = draw(&self.m0);
                let m1 = draw(&self.m1);
                if m0.len() != n || m1.len() != n {
                    return Err(Error::Config(format!("m0 and m1 need {n} entries")));
                }
                dfm(&m1, random_orthogonal(n, &mut rng), &m0)
            }
            FfmFamily::Rdfm => rdfm(n, self.stages, self.seed),
            FfmFamily::Hadamard => hadamard_ffm(n, self.stages),
            FfmFamily::Vfm => vfm(&VelvetSpec {
                size: n,
                stages: self.stages,
                density: self.density,
                jitter_seed: self.seed,
            }),
        }
    }
}

impl FromStr for FfmSpec {
    type Err = Error;

    /// Whitespace-, comma- or semicolon-separated `key=value` pairs.
    fn from_str(s: &str) -> Result<Self> {
        let mut spec = Self::new(FfmFamily::Identity, 4);
        let mut family_seen = false;
        for token in s
            .split(|c: char| c.is_whitespace() || c == ';')
            .filter(|t| !t.is_empty())
        {
            let (k, v) = token
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got `{token}`")))?;
            family_seen |= k == "family";
            spec.set(k.trim(), v.trim())?;
        }
        if !family_seen {
            return Err(Error::Config("FFM spec needs a `family`".into()));
        }
        Ok(spec)
    }
}

impl fmt::Display for FfmSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "family={} size={} stages={} density={} seed={}",
            self.family, self.size, self.stages, self.density, self.seed
        )
    }
}

/// Parses `0.25`, `1/30` and similar.
pub fn parse_fraction(s: &str) -> Option<f64> {
    let v = match s.split_once('/') {
        Some((a, b)) => a.trim().parse::<f64>().ok()? / b.trim().parse::<f64>().ok()?,
        None => s.trim().parse().ok()?,
    };
    v.is_finite().then_some(v)
}

/// Parses `1,2,3` (brackets optional).
pub fn parse_usize_list(s: &str) -> Option<Vec<usize>> {
    s.trim_matches(|c| c == '[' || c == ']')
        .split(',')
        .map(|t| t.trim().parse().ok())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polymat::FrequencyGrid;
    use approx::assert_abs_diff_eq;

    fn reference_dfm() -> FfmCascade {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        dfm(&[6, 0, 7, 5], random_orthogonal(4, &mut rng), &[12, 8, 0, 2]).unwrap()
    }

    fn pulse_positions(a: &PolynomialMatrix) -> DMatrix<f64> {
        let n = a.size();
        DMatrix::from_fn(n, n, |i, j| {
            let h = a.entry(i, j);
            let nz: Vec<usize> = (0..h.len()).filter(|&k| h[k] != 0.0).collect();
            assert_eq!(nz.len(), 1, "entry ({i},{j}) has {} pulses", nz.len());
            nz[0] as f64
        })
    }

    #[test]
    fn elemental_basis_vector_delays_one_channel() {
        let v = DVector::from_vec(vec![1.0, 0.0]);
        let e = elemental_block(&v).unwrap();
        assert_eq!(e, PolynomialMatrix::delay_diag(&[1, 0]));
    }

    #[test]
    fn elemental_block_checks() {
        let v = DVector::from_element(4, 0.5);
        let e = elemental_block(&v).unwrap();
        let r = e.is_paraunitary(&FrequencyGrid::uniform(16), 1e-12).unwrap();
        assert!(r.max_deviation < 1e-12);
        assert_eq!(e.mcmillan_degree().unwrap(), 1);
        let bad = DVector::from_element(4, 0.6);
        assert!(matches!(elemental_block(&bad), Err(Error::NotUnitNorm { .. })));
    }

    #[test]
    fn ebfm_small_cases() {
        let f = ElementalFactorization::new(2, vec![]).unwrap();
        assert_eq!(ebfm(&f).unwrap(), PolynomialMatrix::identity(2));
        let f = ElementalFactorization::new(
            2,
            vec![DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![0.0, 1.0])],
        )
        .unwrap();
        assert_eq!(ebfm(&f).unwrap(), PolynomialMatrix::delay_diag(&[1, 1]));
        let err = ElementalFactorization::new(3, vec![DVector::from_vec(vec![1.0, 0.0])]);
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn ebfm_cascade_matches_direct_product() {
        for seed in 0..5 {
            let f = ElementalFactorization::random(4, 6, seed);
            let direct = ebfm(&f).unwrap();
            let cascade = f.to_cascade().expand();
            assert_eq!(direct.order(), cascade.order());
            for (a, b) in direct.coeffs().iter().zip(cascade.coeffs()) {
                assert!((a - b).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn ebfm_energy_concentrates_in_time() {
        let f = ElementalFactorization::random(4, 64, 11);
        let a = ebfm(&f).unwrap();
        assert!(a.check_paraunitary(1e-9).paraunitary);
        assert_eq!(a.mcmillan_degree().unwrap(), 64);
        let energy: Vec<f64> = a.coeffs().iter().map(|c| c.norm_squared()).collect();
        let total: f64 = energy.iter().sum();
        // Sixteen of the 65 taps around the peak hold most of the energy.
        let best = energy.windows(16).map(|w| w.iter().sum::<f64>()).fold(0.0, f64::max);
        assert!(best / total > 0.75, "window fraction {}", best / total);
    }

    #[test]
    fn dfm_pulse_positions() {
        let c = reference_dfm();
        let expected = DMatrix::from_row_slice(
            4,
            4,
            &[
                18.0, 14.0, 6.0, 8.0, 12.0, 8.0, 0.0, 2.0, 19.0, 15.0, 7.0, 9.0, 17.0, 13.0, 5.0, 7.0,
            ],
        );
        let a = c.expand();
        assert_eq!(pulse_positions(&a), expected);
        assert!(a.check_paraunitary(1e-10).paraunitary);
        assert_eq!(a.mcmillan_degree().unwrap(), 40);
    }

    #[test]
    fn dfm_zero_delays_is_scalar() {
        let u = hadamard(4).unwrap();
        let c = dfm(&[0; 4], u.clone(), &[0; 4]).unwrap();
        assert_eq!(c.expand(), PolynomialMatrix::from_scalar(u));
    }

    #[test]
    fn dfm_rejects_non_orthogonal() {
        let err = dfm(&[1, 2], DMatrix::from_element(2, 2, 1.0), &[0, 0]);
        assert!(matches!(err, Err(Error::NotOrthogonal { .. })));
    }

    #[test]
    fn random_orthogonal_is_orthogonal_and_seeded() {
        let a = random_orthogonal(6, &mut ChaCha8Rng::seed_from_u64(1));
        let b = random_orthogonal(6, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        assert!(check_orthogonal(&a).is_ok());
    }

    #[test]
    fn hadamard_and_fwht_agree() {
        for n in [1, 2, 4, 8, 16] {
            let h = hadamard(n).unwrap();
            assert!(check_orthogonal(&h).is_ok());
            let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin()).collect();
            let mut y = x.clone();
            fwht(&mut y);
            let reference = &h * DVector::from_vec(x) * (n as f64).sqrt();
            for i in 0..n {
                assert_abs_diff_eq!(y[i], reference[i], epsilon = 1e-12);
            }
        }
        assert!(matches!(hadamard(12), Err(Error::NoHadamard(12))));
    }

    #[test]
    fn rdfm_delays_and_density() {
        let c = rdfm(3, 3, 5).unwrap();
        assert_eq!(c.stages()[2].delays, vec![0, 9, 18]);
        let c = rdfm(4, 3, 5).unwrap();
        let a = c.expand();
        assert!(a.order() <= 64);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(a.pulse_count(i, j), 64);
            }
        }
    }

    #[test]
    fn rdfm_one_step_by_hand() {
        let eye = DMatrix::<f64>::identity(2, 2);
        let c = rdfm_with_unitaries(vec![eye.clone(), eye]).unwrap();
        assert_eq!(c.expand(), PolynomialMatrix::delay_diag(&[0, 1]));
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let rot = DMatrix::from_row_slice(2, 2, &[s, -s, s, s]);
        let c = rdfm_with_unitaries(vec![DMatrix::identity(2, 2), rot]).unwrap();
        let a = c.expand();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(a.pulse_count(i, j), 1);
            }
        }
    }

    #[test]
    fn dense_iteration_intermediates_are_column_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 3;
        let mut x = PolynomialMatrix::from_scalar(random_orthogonal(n, &mut rng));
        for m in dense_delays(n, 3) {
            let shifted = PolynomialMatrix::delay_diag(&m).multiply(&x).unwrap();
            assert!(is_column_distinct(&shifted.transpose()));
            x = PolynomialMatrix::from_scalar(random_orthogonal(n, &mut rng))
                .multiply(&shifted)
                .unwrap();
        }
    }

    #[test]
    fn hadamard_ffm_magnitudes() {
        let a = hadamard_ffm(2, 1).unwrap().expand();
        for c in a.coeffs() {
            for &v in c.iter() {
                assert!(v == 0.0 || (v.abs() - 0.5).abs() < 1e-15);
            }
        }
        assert_eq!(pulses_per_filter(&hadamard_ffm(4, 2).unwrap()), 16);
        assert!(matches!(hadamard_ffm(6, 2), Err(Error::NoHadamard(6))));
    }

    #[test]
    fn vfm_four_line_example() {
        let spec = VelvetSpec {
            size: 4,
            stages: 2,
            density: 1.0 / 30.0,
            jitter_seed: 1,
        };
        assert_eq!(spec.filter_order(1), 120);
        assert_eq!(spec.filter_order(2), 480);
        let c = vfm(&spec).unwrap();
        let a = c.expand();
        assert_eq!(pulses_per_filter(&c), 16);
        let order = a.order() as f64;
        assert!((400.0..=560.0).contains(&order), "order {order}");
        let density = 16.0 / (order + 1.0);
        assert!((density * 30.0 - 1.0).abs() < 0.3);
        assert!(a.check_paraunitary(1e-9).paraunitary);
    }

    #[test]
    fn vfm_unit_density_is_hadamard() {
        let spec = VelvetSpec {
            size: 4,
            stages: 3,
            density: 1.0,
            jitter_seed: 42,
        };
        assert_eq!(vfm(&spec).unwrap(), hadamard_ffm(4, 3).unwrap());
    }

    #[test]
    fn vfm_seeds_move_pulses_only() {
        let make = |seed| {
            vfm(&VelvetSpec {
                size: 4,
                stages: 2,
                density: 1.0 / 30.0,
                jitter_seed: seed,
            })
            .unwrap()
            .expand()
        };
        let (a, b) = (make(1), make(2));
        assert_ne!(a, b);
        let mags = |p: &PolynomialMatrix| {
            let mut v: Vec<f64> = p
                .coeffs()
                .iter()
                .flat_map(|c| c.iter().copied())
                .filter(|&x| x != 0.0)
                .map(f64::abs)
                .collect();
            v.dedup();
            v
        };
        assert_eq!(mags(&a), vec![0.125]);
        assert_eq!(mags(&b), vec![0.125]);
    }

    #[test]
    fn vfm_rejects_bad_density() {
        let spec = VelvetSpec {
            size: 4,
            stages: 2,
            density: 1.5,
            jitter_seed: 0,
        };
        assert!(matches!(vfm(&spec), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn inversion_is_paraconjugate() {
        let c = FfmCascade::scalar(hadamard(4).unwrap()).unwrap();
        assert_eq!(
            c.invert().expand(),
            PolynomialMatrix::from_scalar(hadamard(4).unwrap().transpose())
        );

        let d = reference_dfm();
        let inv = d.invert();
        assert_eq!(inv.pre_delays(), &[6, 0, 7, 5]);
        assert_eq!(inv.stages()[0].delays, vec![12, 8, 0, 2]);

        let c = rdfm(3, 2, 4).unwrap();
        let a = c.expand();
        let at = c.invert().expand();
        let t = a.transpose();
        assert_eq!(at.order(), t.order());
        for (x, y) in at.coeffs().iter().zip(t.coeffs()) {
            assert!((x - y).amax() < 1e-14);
        }
    }

    #[test]
    fn operation_counts() {
        let oc = |n, k| operation_count(&hadamard_ffm(n, k).unwrap(), true).unwrap();
        assert_eq!(
            oc(4, 2),
            OperationCount {
                adds: 16,
                mults: 4,
                delay_rw: 24
            }
        );
        assert_eq!(
            oc(8, 4),
            OperationCount {
                adds: 96,
                mults: 8,
                delay_rw: 80
            }
        );
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = FfmCascade::scalar(random_orthogonal(16, &mut rng)).unwrap();
        assert_eq!(
            operation_count(&s, false).unwrap(),
            OperationCount {
                adds: 256,
                mults: 256,
                delay_rw: 0
            }
        );
    }

    #[test]
    fn spec_parsing() {
        let s: FfmSpec = "family=vfm size=4 stages=2 density=1/30 seed=7".parse().unwrap();
        assert_eq!(s.family, FfmFamily::Vfm);
        assert_abs_diff_eq!(s.density, 1.0 / 30.0);
        assert_eq!(s.build().unwrap().size(), 4);
        let s: FfmSpec = "family=dfm size=4 m0=12,8,0,2 m1=6,0,7,5".parse().unwrap();
        assert_eq!(s.build().unwrap().total_delay(), 40);
        assert!("family=foo".parse::<FfmSpec>().is_err());
        assert!("size=4".parse::<FfmSpec>().is_err());
        assert!("family=vfm colour=red".parse::<FfmSpec>().is_err());
        assert_eq!(parse_fraction("1/30"), Some(1.0 / 30.0));
        assert_eq!(parse_usize_list("[1, 2,3]"), Some(vec![1, 2, 3]));
    }
}
