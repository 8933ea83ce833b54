//! Modal decomposition `H(z) = d + sum_i r_i / (z - lambda_i)`.
//!
//! The poles are the roots of the generalized characteristic polynomial
//! `p(z) = z^D det(diag(z^m) - A(z))` of degree `D + sum m`, where `A(z)`
//! is the lossy feedback matrix with the main-delay gains folded in and `D`
//! counts its internal delay elements. They are found all at once by the
//! Ehrlich-Aberth iteration; the Newton corrections use the matrix trace
//! identities for `p'/p` inside the unit circle and for the reversed
//! polynomial outside it, evaluated through the factorised cascade.
//!
//! With residues in this form the impulse response is `h(0) = d` and
//! `h(n) = sum_i r_i lambda_i^(n-1)` for `n >= 1`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::engine::{Attenuation, FfdnConfig};
use crate::{Error, Result};

type CMatrix = DMatrix<Complex64>;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

/// Pole pairs closer than this make residues unreliable.
pub const DEFECTIVE_DISTANCE: f64 = 1e-9;

/// One diagonal delay-and-gain section.
#[derive(Clone, Debug)]
struct DelayGain {
    delays: Vec<usize>,
    gains: Vec<f64>,
}

impl DelayGain {
    /// `g z^-m` and its derivative.
    fn eval(&self, i: usize, z: Complex64) -> (Complex64, Complex64) {
        let m = self.delays[i] as i32;
        let v = z.powi(-m) * self.gains[i];
        (v, v * c(-(m as f64)) / z)
    }

    /// `(g w^m)^-1 = g^-1 w^-m` and its derivative in `w`.
    fn eval_inverse(&self, i: usize, w: Complex64) -> (Complex64, Complex64) {
        let m = self.delays[i] as i32;
        let v = w.powi(-m) / self.gains[i];
        (v, v * c(-(m as f64)) / w)
    }
}

/// Everything needed to evaluate the characteristic polynomial of one
/// network; immutable and shareable across threads.
#[derive(Clone, Debug)]
pub struct GcpContext {
    size: usize,
    delays: Vec<usize>,
    main_gains: Vec<f64>,
    filters: Vec<Vec<f64>>,
    pre: DelayGain,
    stages: Vec<(DMatrix<f64>, DelayGain)>,
    input: DVector<f64>,
    output: DVector<f64>,
    direct: f64,
    lossless: bool,
    deg_a: usize,
    order: usize,
}

impl GcpContext {
    pub fn new(cfg: &FfdnConfig, att: &Attenuation) -> Result<Self> {
        let n = cfg.size();
        let bad = att.main_gains.len() != n
            || att.line_filters.len() != n
            || att.stage_gains.len() != cfg.ffm.stages().len() + 1;
        if bad {
            return Err(Error::Config("attenuation does not match the network size".into()));
        }
        if att
            .main_gains
            .iter()
            .chain(att.stage_gains.iter().flatten())
            .any(|&g| g == 0.0)
            || att.line_filters.iter().any(|h| h.is_empty() || h[0] == 0.0)
        {
            return Err(Error::InvalidParameter(
                "gains and leading filter taps must be nonzero".into(),
            ));
        }
        let pre = DelayGain {
            delays: cfg.ffm.pre_delays().to_vec(),
            gains: att.stage_gains[0].clone(),
        };
        let stages = cfg
            .ffm
            .stages()
            .iter()
            .zip(&att.stage_gains[1..])
            .map(|(s, g)| {
                (
                    s.unitary.clone(),
                    DelayGain {
                        delays: s.delays.clone(),
                        gains: g.clone(),
                    },
                )
            })
            .collect();
        let lossless = att
            .main_gains
            .iter()
            .chain(att.stage_gains.iter().flatten())
            .all(|&g| g == 1.0)
            && att.line_filters.iter().all(|h| h == &[1.0]);
        let deg_a = cfg.ffm.total_delay() + att.filter_states();
        let input = DVector::from_iterator(n, cfg.input_gains.iter().zip(&att.main_gains).map(|(b, g)| b * g));
        Ok(Self {
            size: n,
            delays: cfg.delays.clone(),
            main_gains: att.main_gains.clone(),
            filters: att.line_filters.clone(),
            pre,
            stages,
            input,
            output: DVector::from_vec(cfg.output_gains.clone()),
            direct: cfg.direct_gain,
            lossless,
            deg_a,
            order: deg_a + cfg.delays.iter().sum::<usize>(),
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Internal delay elements of the lossy feedback matrix.
    pub fn deg_a(&self) -> usize {
        self.deg_a
    }

    /// Degree of the characteristic polynomial, the number of poles.
    pub fn total_order(&self) -> usize {
        self.order
    }

    /// Number of poles contributed by the attenuation filters.
    pub fn filter_states(&self) -> usize {
        self.filters.iter().map(|h| h.len() - 1).sum()
    }

    pub fn is_lossless(&self) -> bool {
        self.lossless
    }

    /// `Gamma_i(z) = sum h_k z^-k` and its derivative.
    fn filter(&self, i: usize, z: Complex64) -> (Complex64, Complex64) {
        let zi = z.inv();
        let (mut v, mut d) = (ZERO, ZERO);
        for (k, &h) in self.filters[i].iter().enumerate().rev() {
            v = v * zi + h;
            d = d * zi + h * -(k as f64);
        }
        (v, d * zi)
    }

    /// Lossy feedback matrix `A(z)` (main gains included) and `dA/dz`,
    /// multiplied through the cascade with the product rule.
    pub fn ffm_response(&self, z: Complex64) -> (CMatrix, CMatrix) {
        let n = self.size;
        let mut x = CMatrix::zeros(n, n);
        let mut dx = CMatrix::zeros(n, n);
        for i in 0..n {
            let (v, d) = self.filter(i, z);
            x[(i, i)] = v;
            dx[(i, i)] = d;
        }
        let apply = |x: &mut CMatrix, dx: &mut CMatrix, dg: &DelayGain| {
            for i in 0..n {
                let (v, d) = dg.eval(i, z);
                for j in 0..n {
                    dx[(i, j)] = d * x[(i, j)] + v * dx[(i, j)];
                    x[(i, j)] *= v;
                }
            }
        };
        apply(&mut x, &mut dx, &self.pre);
        for (u, dg) in &self.stages {
            let uc = u.map(c);
            x = &uc * x;
            dx = &uc * dx;
            apply(&mut x, &mut dx, dg);
        }
        for i in 0..n {
            x.row_mut(i).scale_mut(self.main_gains[i]);
            dx.row_mut(i).scale_mut(self.main_gains[i]);
        }
        (x, dx)
    }

    /// `B(w) = A^-1(1/w)` and `dB/dw`, from the factor-wise inverse of the
    /// cascade: transposed stages in reverse order, reciprocal gains, and
    /// reciprocal filters.
    pub fn inverse_response(&self, w: Complex64) -> (CMatrix, CMatrix) {
        let n = self.size;
        let mut x = CMatrix::from_diagonal(&DVector::from_iterator(n, self.main_gains.iter().map(|g| c(g.recip()))));
        let mut dx = CMatrix::zeros(n, n);
        let apply = |x: &mut CMatrix, dx: &mut CMatrix, dg: &DelayGain| {
            for i in 0..n {
                let (v, d) = dg.eval_inverse(i, w);
                for j in 0..n {
                    dx[(i, j)] = d * x[(i, j)] + v * dx[(i, j)];
                    x[(i, j)] *= v;
                }
            }
        };
        for (u, dg) in self.stages.iter().rev() {
            apply(&mut x, &mut dx, dg);
            let ut = u.transpose().map(c);
            x = &ut * x;
            dx = &ut * dx;
        }
        apply(&mut x, &mut dx, &self.pre);
        let zinv = w.inv();
        for i in 0..n {
            // Gamma_i(1/w) is a polynomial in w.
            let (g, dg) = self.filter(i, zinv);
            let v = g.inv();
            let d = zinv * zinv * dg * v * v;
            for j in 0..n {
                dx[(i, j)] = d * x[(i, j)] + v * dx[(i, j)];
                x[(i, j)] *= v;
            }
        }
        (x, dx)
    }

    /// `P(z) = diag(z^m) - A(z)` and `P'(z)`.
    fn p_matrix(&self, z: Complex64) -> (CMatrix, CMatrix) {
        let (a, da) = self.ffm_response(z);
        let mut p = -a;
        let mut dp = -da;
        for (i, &m) in self.delays.iter().enumerate() {
            let zm = z.powi(m as i32);
            p[(i, i)] += zm;
            dp[(i, i)] += zm * (m as f64) / z;
        }
        (p, dp)
    }

    /// `H(z) - d = c^T P(z)^-1 b` (with the main gains folded into `b`).
    pub fn transfer(&self, z: Complex64) -> Option<Complex64> {
        let (p, _) = self.p_matrix(z);
        let x = p.lu().solve(&self.input.map(c))?;
        Some(self.output.map(c).dot(&x) + self.direct)
    }
}

/// How `A^-1(1/w)` is obtained in the reversed correction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InverseMode {
    /// Invert each cascade factor.
    Cascade,
    /// `A^-1(1/w) = A^T(w)`, valid for lossless networks only.
    Transpose,
}

fn trace_solve(a: CMatrix, b: &CMatrix) -> Option<Complex64> {
    let x = a.lu().solve(b)?;
    let t = x.trace();
    (t.re.is_finite() && t.im.is_finite()).then_some(t)
}

fn singular(z: Complex64) -> Error {
    Error::Singular { re: z.re, im: z.im }
}

/// `p'(z)/p(z) = tr(P^-1 P') + D/z`.
fn interior_log_derivative(ctx: &GcpContext, z: Complex64) -> Option<Complex64> {
    let (p, dp) = ctx.p_matrix(z);
    Some(trace_solve(p, &dp)? + c(ctx.deg_a as f64) / z)
}

/// Newton correction `p(z)/p'(z)` from the interior trace form.
pub fn newton_correction(ctx: &GcpContext, z: Complex64) -> Result<Complex64> {
    let ld = interior_log_derivative(ctx, z).ok_or_else(|| singular(z))?;
    if ld == ZERO {
        return Err(singular(z));
    }
    Ok(ld.inv())
}

/// `pbar'(w)/pbar(w)` for the reversed polynomial `pbar(w) = w^N p(1/w)`:
/// `tr(Pbar^-1 Pbar') - w^-2 tr(A^-1(1/w) A'(1/w))` with
/// `Pbar(w) = diag(w^m) - A^-1(1/w)`.
pub fn reversed_newton_correction(ctx: &GcpContext, w: Complex64) -> Result<Complex64> {
    reversed_newton_correction_with(ctx, w, InverseMode::Cascade)
}

pub fn reversed_newton_correction_with(ctx: &GcpContext, w: Complex64, mode: InverseMode) -> Result<Complex64> {
    let (b, db) = match mode {
        InverseMode::Cascade => ctx.inverse_response(w),
        InverseMode::Transpose => {
            if !ctx.lossless {
                return Err(Error::InvalidParameter(
                    "the transpose shortcut needs a lossless network".into(),
                ));
            }
            let (a, da) = ctx.ffm_response(w);
            (a.transpose(), da.transpose())
        }
    };
    let (_, da_inv) = ctx.ffm_response(w.inv());
    let mut p = -b.clone();
    let mut dp = -db;
    for (i, &m) in ctx.delays.iter().enumerate() {
        let wm = w.powi(m as i32);
        p[(i, i)] += wm;
        dp[(i, i)] += wm * (m as f64) / w;
    }
    let first = trace_solve(p, &dp).ok_or_else(|| singular(w))?;
    let second = (b * da_inv).trace() / (w * w);
    let v = first - second;
    if v.re.is_finite() && v.im.is_finite() {
        Ok(v)
    } else {
        Err(singular(w))
    }
}

/// `p'/p` outside the unit circle through the reversed polynomial.
fn exterior_log_derivative(ctx: &GcpContext, z: Complex64) -> Option<Complex64> {
    let w = z.inv();
    let rev = reversed_newton_correction(ctx, w).ok()?;
    Some(c(ctx.order as f64) / z - w * w * rev)
}

/// Companion-free block form of the characteristic polynomial.
///
/// Unknowns are the main delay outputs `s`, filter outputs `f` and the output
/// of every cascade section. Each row is a polynomial in `z` whose leading
/// term sits on the diagonal, so `det M(z) = p(z)` exactly. For `|z| > 1`
/// row `r` is divided by `z^{d_r}` which keeps every entry bounded.
struct BlockMatrix {
    m: CMatrix,
    dm: CMatrix,
    /// Sum of row degrees removed by scaling.
    shift: usize,
}

fn block_matrix(ctx: &GcpContext, z: Complex64, scaled: bool) -> BlockMatrix {
    let n = ctx.size;
    let k = ctx.stages.len();
    let dim = n * (k + 3);
    let mut m = CMatrix::zeros(dim, dim);
    let mut dm = CMatrix::zeros(dim, dim);
    let last = n * (k + 2);
    let mut shift = 0;
    // Writes `coef * z^power` (with derivative) after scaling by `z^-deg`.
    let put = |m: &mut CMatrix, dm: &mut CMatrix, r: usize, col: usize, coef: f64, power: i64, deg: usize| {
        let p = if scaled { power - deg as i64 } else { power };
        let v = z.powi(p as i32) * coef;
        m[(r, col)] += v;
        dm[(r, col)] += v * (p as f64) / z;
    };
    for i in 0..n {
        let d = ctx.delays[i];
        put(&mut m, &mut dm, i, i, 1.0, d as i64, d);
        put(&mut m, &mut dm, i, last + i, -ctx.main_gains[i], 0, d);
        shift += d;

        let h = &ctx.filters[i];
        let lf = h.len() - 1;
        let r = n + i;
        put(&mut m, &mut dm, r, r, 1.0, lf as i64, lf);
        for (t, &tap) in h.iter().enumerate() {
            put(&mut m, &mut dm, r, i, -tap, (lf - t) as i64, lf);
        }
        shift += lf;

        let d0 = ctx.pre.delays[i];
        let r = 2 * n + i;
        put(&mut m, &mut dm, r, r, 1.0, d0 as i64, d0);
        put(&mut m, &mut dm, r, n + i, -ctx.pre.gains[i], 0, d0);
        shift += d0;
    }
    for (s, (u, dg)) in ctx.stages.iter().enumerate() {
        let base = n * (s + 3);
        let prev = n * (s + 2);
        for i in 0..n {
            let d = dg.delays[i];
            put(&mut m, &mut dm, base + i, base + i, 1.0, d as i64, d);
            for j in 0..n {
                if u[(i, j)] != 0.0 {
                    put(&mut m, &mut dm, base + i, prev + j, -dg.gains[i] * u[(i, j)], 0, d);
                }
            }
            shift += d;
        }
    }
    BlockMatrix {
        m,
        dm,
        shift: if scaled { shift } else { 0 },
    }
}

fn block_log_derivative(ctx: &GcpContext, z: Complex64) -> Option<Complex64> {
    let b = block_matrix(ctx, z, z.norm() > 1.0);
    Some(trace_solve(b.m, &b.dm)? + c(b.shift as f64) / z)
}

/// Largest `|z|^(-+deg A)` for which the trace forms are trusted. Beyond it
/// the delay powers inside `A(z)` or `A^-1(1/z)` swamp the main-delay terms
/// and the trace loses its accuracy without becoming non-finite.
pub const TRACE_GROWTH_LIMIT: f64 = 1e4;

/// `p'(z)/p(z)`: interior form for `|z| <= 1`, reversed form otherwise, and
/// the block form away from the unit circle or when either fails.
pub fn log_derivative(ctx: &GcpContext, z: Complex64) -> Option<Complex64> {
    let growth = ctx.deg_a as f64 * z.norm().ln().abs();
    let primary = if growth > TRACE_GROWTH_LIMIT.ln() {
        None
    } else if z.norm() <= 1.0 {
        interior_log_derivative(ctx, z)
    } else {
        exterior_log_derivative(ctx, z)
    };
    primary.or_else(|| block_log_derivative(ctx, z))
}

/// Sweep strategy of the simultaneous iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepMode {
    /// Sequential; each update sees the poles already moved in this sweep.
    GaussSeidel,
    /// All steps computed from the previous sweep, in parallel.
    Jacobi,
}

/// Iteration controls.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EaiOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub mode: SweepMode,
}

impl Default for EaiOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-10,
            mode: SweepMode::GaussSeidel,
        }
    }
}

/// Poles, residues and convergence information.
#[derive(Clone, Debug)]
pub struct ModalDecomposition {
    pub poles: Vec<Complex64>,
    /// Empty until [`residues`] has been run.
    pub residues: Vec<Complex64>,
    pub direct: f64,
    pub converged: Vec<bool>,
    pub iterations: usize,
    /// Largest final step among converged poles.
    pub max_step: f64,
    /// Poles contributed by attenuation filter states.
    pub filter_states: usize,
}

impl ModalDecomposition {
    pub fn unconverged(&self) -> usize {
        self.converged.iter().filter(|&&c| !c).count()
    }

    /// Fails with the convergence summary if any pole is unconverged.
    pub fn ensure_converged(&self) -> Result<()> {
        match self.unconverged() {
            0 => Ok(()),
            k => Err(Error::NotConverged {
                unconverged: k,
                total: self.poles.len(),
                iterations: self.iterations,
            }),
        }
    }

    /// Impulse response from the modes, `h(0) = d`, `h(n) = sum r lambda^(n-1)`.
    pub fn reconstruct(&self, length: usize) -> Vec<f64> {
        let mut out = vec![0.0; length];
        if length == 0 {
            return out;
        }
        out[0] = self.direct;
        let mut pow: Vec<Complex64> = self.residues.clone();
        for v in out.iter_mut().skip(1) {
            let mut acc = 0.0;
            for (p, &l) in pow.iter_mut().zip(&self.poles) {
                acc += p.re;
                *p *= l;
            }
            *v = acc;
        }
        out
    }
}

/// Initial estimates on the unit circle, rotated by a golden-angle fraction
/// of the spacing so no estimate sits on the real axis.
fn initial_poles(count: usize) -> Vec<Complex64> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let step = std::f64::consts::TAU / count as f64;
    (0..count)
        .map(|k| Complex64::from_polar(1.0, step * k as f64 + golden / count as f64))
        .collect()
}

fn aberth_step(ctx: &GcpContext, poles: &[Complex64], i: usize) -> Complex64 {
    let z = poles[i];
    let Some(ld) = log_derivative(ctx, z) else {
        // Numerically on a root.
        return ZERO;
    };
    let deflation: Complex64 = poles
        .iter()
        .enumerate()
        .filter(|&(l, _)| l != i)
        .map(|(_, &p)| (z - p).inv())
        .sum();
    let denom = ld - deflation;
    if denom == ZERO || !denom.re.is_finite() || !denom.im.is_finite() {
        return ZERO;
    }
    denom.inv()
}

/// Ehrlich-Aberth iteration for all poles of the network.
pub fn eai_solve(ctx: &GcpContext, opts: &EaiOptions) -> Result<ModalDecomposition> {
    let count = ctx.order;
    if count == 0 {
        return Err(Error::InvalidParameter("the network has no poles".into()));
    }
    let mut poles = initial_poles(count);
    let mut converged = vec![false; count];
    let mut last_step = vec![f64::INFINITY; count];
    let mut iterations = 0;
    while iterations < opts.max_iter && converged.iter().any(|&c| !c) {
        iterations += 1;
        match opts.mode {
            SweepMode::GaussSeidel => {
                for i in 0..count {
                    if converged[i] {
                        continue;
                    }
                    let step = aberth_step(ctx, &poles, i);
                    poles[i] -= step;
                    last_step[i] = step.norm();
                    converged[i] = last_step[i] < opts.tol;
                }
            }
            SweepMode::Jacobi => {
                let steps: Vec<Option<Complex64>> = (0..count)
                    .into_par_iter()
                    .map(|i| (!converged[i]).then(|| aberth_step(ctx, &poles, i)))
                    .collect();
                for (i, s) in steps.into_iter().enumerate() {
                    if let Some(step) = s {
                        poles[i] -= step;
                        last_step[i] = step.norm();
                        converged[i] = last_step[i] < opts.tol;
                    }
                }
            }
        }
        log::debug!(
            "sweep {iterations}: {} of {count} poles converged",
            converged.iter().filter(|&&c| c).count()
        );
    }
    let unconverged = converged.iter().filter(|&&c| !c).count();
    if unconverged > 0 {
        log::warn!("{unconverged} of {count} poles did not converge in {iterations} sweeps");
    }
    let max_step = last_step
        .iter()
        .zip(&converged)
        .filter(|(_, &c)| c)
        .map(|(&s, _)| s)
        .fold(0.0, f64::max);
    Ok(ModalDecomposition {
        poles,
        residues: Vec::new(),
        direct: ctx.direct,
        converged,
        iterations,
        max_step,
        filter_states: ctx.filter_states(),
    })
}

/// Smallest pairwise pole distance and the pair attaining it.
pub fn min_pole_distance(poles: &[Complex64]) -> Option<(usize, usize, f64)> {
    let mut idx: Vec<usize> = (0..poles.len()).collect();
    idx.sort_by(|&a, &b| poles[a].re.total_cmp(&poles[b].re));
    let mut best: Option<(usize, usize, f64)> = None;
    for (pos, &a) in idx.iter().enumerate() {
        for &b in &idx[pos + 1..] {
            if let Some((_, _, d)) = best {
                if poles[b].re - poles[a].re >= d {
                    break;
                }
            }
            let d = (poles[a] - poles[b]).norm();
            if best.is_none_or(|(_, _, bd)| d < bd) {
                best = Some((a, b, d));
            }
        }
    }
    best
}

/// Right singular vector of the smallest singular value. Left vectors are
/// taken from the transpose instead of `U`, which loses accuracy when the
/// singular value underflows to zero.
fn null_vector(m: CMatrix) -> DVector<Complex64> {
    let svd = m.clone().svd(false, true);
    let k = svd.singular_values.imin();
    let x: DVector<Complex64> = svd.v_t.expect("requested").row(k).adjoint();
    // One inverse-iteration step as a guard against a poor singular vector;
    // the candidate with the smaller residual wins.
    let refined = match m.clone().lu().solve(&x) {
        Some(y) if y.iter().all(|v| v.re.is_finite() && v.im.is_finite()) && y.norm() > 0.0 => y.normalize(),
        _ => return x,
    };
    if (&m * &refined).norm() < (&m * &x).norm() {
        refined
    } else {
        x
    }
}

/// Residues `r = (c^T x)(y^T b)/(y^T M'(lambda) x)` where `x`, `y` are the
/// right and left null vectors of the block matrix at the pole.
pub fn residues(ctx: &GcpContext, poles: &[Complex64]) -> Result<Vec<Complex64>> {
    if let Some((a, b, distance)) = min_pole_distance(poles) {
        if distance < DEFECTIVE_DISTANCE {
            return Err(Error::IllConditioned { a, b, distance });
        }
    }
    let n = ctx.size;
    let compute = |&lambda: &Complex64| -> Result<Complex64> {
        let blk = block_matrix(ctx, lambda, lambda.norm() > 1.0);
        let dim = blk.m.nrows();
        let x = null_vector(blk.m.clone());
        let y = null_vector(blk.m.transpose());
        let mut b_hat = DVector::<Complex64>::zeros(dim);
        let mut c_hat = DVector::<Complex64>::zeros(dim);
        for i in 0..n {
            // Input enters the main delay rows, scaled like those rows.
            let scale = if lambda.norm() > 1.0 {
                lambda.powi(-(ctx.delays[i] as i32))
            } else {
                ONE
            };
            b_hat[i] = scale * ctx.input[i];
            c_hat[i] = c(ctx.output[i]);
        }
        let denom = (y.transpose() * &blk.dm * &x)[(0, 0)];
        if denom == ZERO {
            return Err(singular(lambda));
        }
        Ok(c_hat.dot(&x) * y.dot(&b_hat) / denom)
    };
    poles.par_iter().map(compute).collect()
}

/// Poles and residues in one call.
pub fn modal_decomposition(cfg: &FfdnConfig, att: &Attenuation, opts: &EaiOptions) -> Result<ModalDecomposition> {
    let ctx = GcpContext::new(cfg, att)?;
    let mut md = eai_solve(&ctx, opts)?;
    md.ensure_converged()?;
    md.residues = residues(&ctx, &md.poles)?;
    Ok(md)
}

/// Per-mode reverberation times and their spread.
#[derive(Clone, Debug)]
pub struct DecayDistribution {
    /// T60 in seconds of every decaying mode that was kept.
    pub t60: Vec<f64>,
    /// Modes with `|lambda| >= 1` (no decay).
    pub non_decaying: usize,
    /// `(bin centre, probability density)` over the observed T60 range.
    pub histogram: Vec<(f64, f64)>,
    /// Largest `|T60_i - target| / target` when a target was given.
    pub max_relative_deviation: Option<f64>,
}

/// Histogram bins of [`decay_distribution`].
pub const DECAY_BINS: usize = 100;

/// `T60_i = -60 / (fs 20 log10 |lambda_i|)`. The `filter_states` fastest
/// decaying modes belong to the attenuation filters and are left out.
pub fn decay_distribution(md: &ModalDecomposition, sample_rate: f64, target: Option<f64>) -> DecayDistribution {
    let mut mags: Vec<f64> = md.poles.iter().map(|p| p.norm()).collect();
    mags.sort_by(f64::total_cmp);
    let non_decaying = mags.iter().filter(|&&m| m >= 1.0).count();
    let t60: Vec<f64> = mags
        .iter()
        .skip(md.filter_states)
        .filter(|&&m| m < 1.0)
        .map(|&m| -60.0 / (sample_rate * 20.0 * m.log10()))
        .collect();
    let histogram = if t60.is_empty() {
        Vec::new()
    } else {
        let lo = t60.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = t60.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = ((hi - lo) / DECAY_BINS as f64).max(f64::EPSILON * hi.abs().max(1.0));
        let mut counts = vec![0usize; DECAY_BINS];
        for &t in &t60 {
            let b = (((t - lo) / width) as usize).min(DECAY_BINS - 1);
            counts[b] += 1;
        }
        let norm = t60.len() as f64 * width;
        counts
            .iter()
            .enumerate()
            .map(|(b, &k)| (lo + (b as f64 + 0.5) * width, k as f64 / norm))
            .collect()
    };
    let max_relative_deviation = target.and_then(|t| t60.iter().map(|&v| (v - t).abs() / t).reduce(f64::max));
    DecayDistribution {
        t60,
        non_decaying,
        histogram,
        max_relative_deviation,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{design_attenuation, effective_ffm, render_cascade, AttenuationSpec};
    use crate::ffm::{dfm, random_orthogonal, FfmCascade};
    use crate::polymat::PolynomialMatrix;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn loop_cfg(m: usize) -> FfdnConfig {
        let ffm = FfmCascade::scalar(DMatrix::identity(1, 1)).unwrap();
        FfdnConfig::unit_gains(vec![m], ffm, 48000.0).unwrap()
    }

    fn lossless_ctx(cfg: &FfdnConfig) -> GcpContext {
        GcpContext::new(cfg, &Attenuation::lossless(&cfg.ffm)).unwrap()
    }

    /// Coefficients of `p(z)` in descending powers, from the determinant of
    /// `I - diag(z^-m) A(z)` as a polynomial matrix in `z^-1`.
    fn gcp_coefficients(cfg: &FfdnConfig, att: &Attenuation) -> Vec<f64> {
        let n = cfg.size();
        let e = effective_ffm(cfg, att).unwrap();
        let g = DMatrix::from_diagonal(&DVector::from_vec(att.main_gains.clone()));
        let ga = PolynomialMatrix::from_scalar(g).multiply(&e).unwrap();
        let dq = PolynomialMatrix::delay_diag(&cfg.delays).multiply(&ga).unwrap();
        let mut coeffs: Vec<DMatrix<f64>> = dq.coeffs().iter().map(|c| -c).collect();
        coeffs[0] += DMatrix::<f64>::identity(n, n);
        PolynomialMatrix::new(coeffs).unwrap().determinant()
    }

    fn horner(p: &[f64], z: Complex64) -> (Complex64, Complex64) {
        let (mut v, mut d) = (ZERO, ZERO);
        for &a in p {
            d = d * z + v;
            v = v * z + a;
        }
        (v, d)
    }

    fn companion_roots(p: &[f64]) -> Vec<Complex64> {
        let deg = p.len() - 1;
        let mut m = DMatrix::<f64>::zeros(deg, deg);
        for j in 0..deg {
            m[(0, j)] = -p[j + 1] / p[0];
        }
        for i in 1..deg {
            m[(i, i - 1)] = 1.0;
        }
        m.complex_eigenvalues().iter().copied().collect()
    }

    fn max_matching_error(a: &[Complex64], b: &[Complex64]) -> f64 {
        a.iter()
            .map(|x| b.iter().map(|y| (x - y).norm()).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    }

    #[test]
    fn scalar_loop_corrections() {
        let ctx = lossless_ctx(&loop_cfg(3));
        assert_eq!(ctx.total_order(), 3);
        let z = c(2.0);
        assert_abs_diff_eq!(newton_correction(&ctx, z).unwrap().re, 7.0 / 12.0, epsilon = 1e-14);
        let rev = reversed_newton_correction(&ctx, z).unwrap();
        assert_abs_diff_eq!(rev.re, 12.0 / 7.0, epsilon = 1e-13);
        assert_abs_diff_eq!(rev.im, 0.0, epsilon = 1e-13);
    }

    #[test]
    fn interior_exterior_and_block_forms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let ffm = dfm(&[2, 0, 3], random_orthogonal(3, &mut rng), &[1, 4, 0]).unwrap();
        let cfg = FfdnConfig::unit_gains(vec![5, 7, 11], ffm, 48000.0).unwrap();
        let att = design_attenuation(&cfg, &AttenuationSpec::Broadband { gain: 0.97 }).unwrap();
        let ctx = GcpContext::new(&cfg, &att).unwrap();
        for _ in 0..20 {
            let z = Complex64::from_polar(rng.random_range(0.9..1.1), rng.random_range(0.0..std::f64::consts::TAU));
            let a = interior_log_derivative(&ctx, z).unwrap();
            let b = exterior_log_derivative(&ctx, z).unwrap();
            let k = block_log_derivative(&ctx, z).unwrap();
            assert!((a - b).norm() / a.norm() < 1e-8, "{a} vs {b}");
            assert!((a - k).norm() / a.norm() < 1e-8, "{a} vs {k}");
        }
    }

    #[test]
    fn correction_matches_determinant_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ffm = FfmCascade::scalar(random_orthogonal(2, &mut rng)).unwrap();
        let cfg = FfdnConfig::unit_gains(vec![2, 3], ffm, 48000.0).unwrap();
        let att = Attenuation::lossless(&cfg.ffm);
        let p = gcp_coefficients(&cfg, &att);
        assert_eq!(p.len(), 6);
        let ctx = GcpContext::new(&cfg, &att).unwrap();
        for _ in 0..10 {
            let z = Complex64::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
            let (v, d) = horner(&p, z);
            let h = 1e-6;
            let fd = (horner(&p, z + h).0 - horner(&p, z - h).0) / (2.0 * h);
            assert!((fd - d).norm() / d.norm() < 1e-6);
            let nc = newton_correction(&ctx, z).unwrap();
            assert!((nc - v / d).norm() / (v / d).norm() < 1e-6);
        }
    }

    #[test]
    fn transpose_and_cascade_inverses_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ffm = dfm(&[1, 3, 0], random_orthogonal(3, &mut rng), &[2, 0, 2]).unwrap();
        let cfg = FfdnConfig::unit_gains(vec![4, 5, 6], ffm, 48000.0).unwrap();
        let ctx = lossless_ctx(&cfg);
        for _ in 0..10 {
            let w = Complex64::from_polar(
                rng.random_range(0.5..0.95),
                rng.random_range(0.0..std::f64::consts::TAU),
            );
            let a = reversed_newton_correction_with(&ctx, w, InverseMode::Cascade).unwrap();
            let b = reversed_newton_correction_with(&ctx, w, InverseMode::Transpose).unwrap();
            assert!((a - b).norm() / a.norm() < 1e-10);
        }
    }

    #[test]
    fn roots_of_unity() {
        let ctx = lossless_ctx(&loop_cfg(7));
        let md = eai_solve(&ctx, &EaiOptions::default()).unwrap();
        md.ensure_converged().unwrap();
        let expected: Vec<Complex64> = (0..7)
            .map(|k| Complex64::from_polar(1.0, std::f64::consts::TAU * k as f64 / 7.0))
            .collect();
        assert!(max_matching_error(&md.poles, &expected) < 1e-10);
    }

    #[test]
    fn lossy_loop_poles_shrink_by_gain() {
        let cfg = loop_cfg(5);
        let mut att = Attenuation::lossless(&cfg.ffm);
        att.main_gains = vec![0.5];
        let ctx = GcpContext::new(&cfg, &att).unwrap();
        let md = eai_solve(&ctx, &EaiOptions::default()).unwrap();
        let r = 0.5f64.powf(0.2);
        for p in &md.poles {
            assert_abs_diff_eq!(p.norm(), r, epsilon = 1e-10);
        }
    }

    #[test]
    fn rotation_poles_match_companion_roots() {
        let t = 0.7f64;
        let rot = DMatrix::from_row_slice(2, 2, &[t.cos(), -t.sin(), t.sin(), t.cos()]);
        let cfg = FfdnConfig::unit_gains(vec![2, 3], FfmCascade::scalar(rot).unwrap(), 1.0).unwrap();
        let att = Attenuation::lossless(&cfg.ffm);
        let roots = companion_roots(&gcp_coefficients(&cfg, &att));
        for mode in [SweepMode::GaussSeidel, SweepMode::Jacobi] {
            let opts = EaiOptions {
                mode,
                ..EaiOptions::default()
            };
            let md = eai_solve(&GcpContext::new(&cfg, &att).unwrap(), &opts).unwrap();
            assert_eq!(md.poles.len(), 5);
            assert!(max_matching_error(&md.poles, &roots) < 1e-8);
            assert!(max_matching_error(&roots, &md.poles) < 1e-8);
        }
    }

    #[test]
    fn scalar_loop_residues() {
        let m = 6;
        let ctx = lossless_ctx(&loop_cfg(m));
        let md = eai_solve(&ctx, &EaiOptions::default()).unwrap();
        let r = residues(&ctx, &md.poles).unwrap();
        for (p, res) in md.poles.iter().zip(&r) {
            assert!((res - p / m as f64).norm() < 1e-10);
        }
    }

    #[test]
    fn zero_output_gives_zero_residues() {
        let mut cfg = loop_cfg(4);
        cfg.output_gains = vec![0.0];
        let ctx = lossless_ctx(&cfg);
        let md = eai_solve(&ctx, &EaiOptions::default()).unwrap();
        assert!(residues(&ctx, &md.poles).unwrap().iter().all(|r| r.norm() == 0.0));
    }

    #[test]
    fn reconstruction_matches_render() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let ffm = dfm(&[3, 0, 5, 2], random_orthogonal(4, &mut rng), &[1, 4, 0, 2]).unwrap();
        let cfg = FfdnConfig::new(
            vec![13, 17, 19, 23],
            vec![1.0, 0.5, -0.3, 0.8],
            vec![0.2, -1.0, 0.6, 0.4],
            0.25,
            ffm,
            48000.0,
        )
        .unwrap();
        for spec in [
            AttenuationSpec::Lossless,
            AttenuationSpec::Broadband { gain: 0.995 },
            AttenuationSpec::FrequencyDependent {
                rt_curve: vec![(0.0, 0.01), (3.2, 0.004)],
                filter_order: 4,
            },
        ] {
            let att = design_attenuation(&cfg, &spec).unwrap();
            let md = modal_decomposition(&cfg, &att, &EaiOptions::default()).unwrap();
            assert_eq!(md.poles.len(), cfg.total_order() + att.filter_states());
            let h = render_cascade(&cfg, &att, 500).unwrap();
            let r = md.reconstruct(500);
            let err: f64 = h.iter().zip(&r).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = h.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(err / norm < 1e-8, "{spec:?}: {}", err / norm);
        }
    }

    #[test]
    fn decay_statistics() {
        let cfg = loop_cfg(10);
        let att = design_attenuation(&cfg, &AttenuationSpec::broadband_t60(0.5, 48000.0).unwrap()).unwrap();
        let md = modal_decomposition(&cfg, &att, &EaiOptions::default()).unwrap();
        let dd = decay_distribution(&md, 48000.0, Some(0.5));
        assert_eq!(dd.t60.len(), 10);
        assert!(dd.max_relative_deviation.unwrap() < 1e-6);
        let total: f64 = dd.histogram.iter().map(|(_, p)| p).sum::<f64>() * (dd.histogram[1].0 - dd.histogram[0].0);
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-9);

        let md = modal_decomposition(&cfg, &Attenuation::lossless(&cfg.ffm), &EaiOptions::default()).unwrap();
        let dd = decay_distribution(&md, 48000.0, Some(0.5));
        assert!(dd.t60.is_empty());
        assert_eq!(dd.non_decaying, 10);
    }

    #[test]
    fn close_poles_are_flagged() {
        let ctx = lossless_ctx(&loop_cfg(2));
        let poles = [c(1.0), c(1.0 + 1e-12)];
        assert!(matches!(residues(&ctx, &poles), Err(Error::IllConditioned { .. })));
    }
}
