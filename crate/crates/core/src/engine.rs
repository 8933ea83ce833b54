//! Impulse-response rendering and attenuation design.
//!
//! The network is `H(z) = c^T (diag(z^m) - A(z) G(z))^{-1} b + d` where the
//! main delay outputs pass through per-line attenuation `G(z)` before the
//! feedback matrix. Two renderers are provided: a sample-by-sample cascade
//! with ring buffers, and a block renderer that applies the expanded feedback
//! matrix by overlap-save fast convolution. They share no code path and are
//! used to check each other.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::ffm::{fwht, hadamard, FfmCascade};
use crate::polymat::{FrequencyGrid, PolynomialMatrix};
use crate::util::{next_pow2, spectrum_of, FftPair};
use crate::{Error, Result};

/// Output magnitude treated as a runaway render.
pub const INSTABILITY_THRESHOLD: f64 = 1e6;

/// Responses below this magnitude have no meaningful phase derivative.
pub const GROUP_DELAY_FLOOR: f64 = 1e-6;

/// Default FIR order of lumped attenuation filters.
pub const DEFAULT_FILTER_ORDER: usize = 32;

/// A single-input single-output filter feedback delay network.
#[derive(Clone, Debug, PartialEq)]
pub struct FfdnConfig {
    pub delays: Vec<usize>,
    pub input_gains: Vec<f64>,
    pub output_gains: Vec<f64>,
    pub direct_gain: f64,
    pub ffm: FfmCascade,
    pub sample_rate: f64,
}

impl FfdnConfig {
    /// Checks that every delay is at least one sample and sizes agree.
    pub fn new(
        delays: Vec<usize>,
        input_gains: Vec<f64>,
        output_gains: Vec<f64>,
        direct_gain: f64,
        ffm: FfmCascade,
        sample_rate: f64,
    ) -> Result<Self> {
        let n = ffm.size();
        for len in [delays.len(), input_gains.len(), output_gains.len()] {
            if len != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: len,
                });
            }
        }
        if delays.contains(&0) {
            return Err(Error::InvalidParameter(
                "main delays must be at least one sample".into(),
            ));
        }
        if sample_rate.is_nan() || sample_rate <= 0.0 {
            return Err(Error::InvalidParameter("sample rate must be positive".into()));
        }
        Ok(Self {
            delays,
            input_gains,
            output_gains,
            direct_gain,
            ffm,
            sample_rate,
        })
    }

    /// Unit input and output gains, no direct path.
    pub fn unit_gains(delays: Vec<usize>, ffm: FfmCascade, sample_rate: f64) -> Result<Self> {
        let n = delays.len();
        Self::new(delays, vec![1.0; n], vec![1.0; n], 0.0, ffm, sample_rate)
    }

    pub fn size(&self) -> usize {
        self.ffm.size()
    }

    /// Minimal number of delay elements, `deg A + sum m`.
    pub fn total_order(&self) -> usize {
        self.ffm.total_delay() + self.delays.iter().sum::<usize>()
    }
}

/// Requested loss behaviour.
#[derive(Clone, Debug, PartialEq)]
pub enum AttenuationSpec {
    Lossless,
    /// Linear gain per sample applied exactly to every delay element.
    Broadband {
        gain: f64,
    },
    /// Reverberation time curve as `(omega, T60 seconds)` points, `omega` in
    /// radians per sample over `[0, pi]`, realised by lumped FIR filters.
    FrequencyDependent {
        rt_curve: Vec<(f64, f64)>,
        filter_order: usize,
    },
}

impl AttenuationSpec {
    /// Broadband spec for a frequency-independent `t60`.
    pub fn broadband_t60(t60: f64, sample_rate: f64) -> Result<Self> {
        let db = gain_per_sample_db(t60, sample_rate)?;
        Ok(Self::Broadband {
            gain: 10f64.powf(db / 20.0),
        })
    }

    /// Lumped design for a frequency-independent `t60`.
    pub fn lumped_t60(t60: f64) -> Self {
        Self::FrequencyDependent {
            rt_curve: vec![(0.0, t60), (std::f64::consts::PI, t60)],
            filter_order: DEFAULT_FILTER_ORDER,
        }
    }
}

/// Realised gains and filters for one network.
#[derive(Clone, Debug, PartialEq)]
pub struct Attenuation {
    /// Gain after each main delay line.
    pub main_gains: Vec<f64>,
    /// Per-channel gain after the pre-delays (index 0) and after each stage's
    /// delays (index `k`).
    pub stage_gains: Vec<Vec<f64>>,
    /// FIR filter per line between the main delays and the feedback matrix;
    /// `[1.0]` is a pass-through.
    pub line_filters: Vec<Vec<f64>>,
}

impl Attenuation {
    pub fn lossless(ffm: &FfmCascade) -> Self {
        let n = ffm.size();
        Self {
            main_gains: vec![1.0; n],
            stage_gains: vec![vec![1.0; n]; ffm.stages().len() + 1],
            line_filters: vec![vec![1.0]; n],
        }
    }

    /// Extra delay elements introduced by the line filters.
    pub fn filter_states(&self) -> usize {
        self.line_filters.iter().map(|h| h.len().saturating_sub(1)).sum()
    }

    fn has_stage_gains(&self) -> bool {
        self.stage_gains.iter().flatten().any(|&g| g != 1.0)
    }

    fn check(&self, cfg: &FfdnConfig) -> Result<()> {
        let n = cfg.size();
        let stages = cfg.ffm.stages().len() + 1;
        let bad = self.main_gains.len() != n
            || self.line_filters.len() != n
            || self.stage_gains.len() != stages
            || self.stage_gains.iter().any(|g| g.len() != n)
            || self.line_filters.iter().any(|h| h.is_empty());
        if bad {
            return Err(Error::Config("attenuation does not match the network size".into()));
        }
        Ok(())
    }
}

/// Gain per sample in dB for a reverberation time, `-60 / (fs T60)`.
pub fn gain_per_sample_db(t60: f64, sample_rate: f64) -> Result<f64> {
    if t60.is_nan() || t60 <= 0.0 {
        return Err(Error::InvalidParameter(format!("T60 must be positive, got {t60}")));
    }
    Ok(-60.0 / (sample_rate * t60))
}

/// Realises an attenuation request for a network.
///
/// Broadband gains scale every delay element exactly. Frequency-dependent
/// targets become one minimum-phase FIR per line whose magnitude follows
/// `gamma(w)^(m_i + left_i(w) + right_i(w))`, with the left/right group
/// delays fitted to the feedback matrix after clamping to its support.
pub fn design_attenuation(cfg: &FfdnConfig, spec: &AttenuationSpec) -> Result<Attenuation> {
    let mut att = Attenuation::lossless(&cfg.ffm);
    match spec {
        AttenuationSpec::Lossless => {}
        AttenuationSpec::Broadband { gain } => {
            if !(*gain > 0.0 && *gain <= 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "broadband gain must lie in (0, 1], got {gain}"
                )));
            }
            let pow = |m: &usize| gain.powi(*m as i32);
            att.main_gains = cfg.delays.iter().map(pow).collect();
            att.stage_gains = std::iter::once(cfg.ffm.pre_delays())
                .chain(cfg.ffm.stages().iter().map(|s| s.delays.as_slice()))
                .map(|d| d.iter().map(pow).collect())
                .collect();
        }
        AttenuationSpec::FrequencyDependent { rt_curve, filter_order } => {
            if rt_curve.is_empty() || rt_curve.iter().any(|&(_, t)| t.is_nan() || t <= 0.0) {
                return Err(Error::InvalidParameter("T60 values must be positive".into()));
            }
            let expanded = cfg.ffm.expand();
            let size = next_pow2((8 * (expanded.order() + 1)).max(4 * (filter_order + 1)).max(512));
            let mut theta = group_delay_of(&expanded, size)?;
            clamp_to_support(&mut theta, expanded.order());
            let pair = approximate_group_delay(&theta)?;
            let bins = size / 2 + 1;
            for i in 0..cfg.size() {
                let target_db: Vec<f64> = (0..bins)
                    .map(|k| {
                        let w = theta.omega(k);
                        let g =
                            gain_per_sample_db(interpolate_rt(rt_curve, w), cfg.sample_rate).expect("validated above");
                        g * (cfg.delays[i] as f64 + pair.left[k][i] + pair.right[k][i])
                    })
                    .collect();
                att.line_filters[i] = minimum_phase_fir(&target_db, size, *filter_order);
            }
        }
    }
    Ok(att)
}

/// Limits every group delay to `[0, order]`. Outside that range the value
/// comes from a near-zero of the entry, carries almost no energy, and would
/// otherwise dominate the fit.
pub fn clamp_to_support(theta: &mut GroupDelayMatrix, order: usize) {
    let hi = order as f64;
    for m in &mut theta.values {
        m.apply(|v| {
            if v.is_finite() {
                *v = v.clamp(0.0, hi);
            }
        });
    }
}

/// Piecewise-linear T60 at `w`, clamped outside the given points.
fn interpolate_rt(curve: &[(f64, f64)], w: f64) -> f64 {
    let mut pts = curve.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    if w <= pts[0].0 {
        return pts[0].1;
    }
    for pair in pts.windows(2) {
        let ((w0, t0), (w1, t1)) = (pair[0], pair[1]);
        if w <= w1 {
            return if w1 > w0 {
                t0 + (t1 - t0) * (w - w0) / (w1 - w0)
            } else {
                t1
            };
        }
    }
    pts[pts.len() - 1].1
}

/// Minimum-phase FIR from a magnitude target in dB on bins `0..=size/2`,
/// by cepstral folding. The cepstrum is liftered to `order` so the magnitude
/// is smoothed to what `order + 1` taps can follow.
fn minimum_phase_fir(target_db: &[f64], size: usize, order: usize) -> Vec<f64> {
    let fft = FftPair::new(size);
    let ln10_20 = std::f64::consts::LN_10 / 20.0;
    let mut cep: Vec<Complex64> = (0..size)
        .map(|k| {
            let bin = if k <= size / 2 { k } else { size - k };
            Complex64::new(target_db[bin] * ln10_20, 0.0)
        })
        .collect();
    fft.inverse(&mut cep);
    let keep = order.min(size / 2 - 1);
    for (n, c) in cep.iter_mut().enumerate() {
        *c = if n == 0 {
            Complex64::new(c.re, 0.0)
        } else if n <= keep {
            Complex64::new(2.0 * c.re, 0.0)
        } else {
            Complex64::new(0.0, 0.0)
        };
    }
    fft.forward(&mut cep);
    let mut spec: Vec<Complex64> = cep.into_iter().map(|c| c.exp()).collect();
    fft.inverse(&mut spec);
    let mut h: Vec<f64> = spec.iter().take(order + 1).map(|c| c.re).collect();
    let cut = h[0].abs() * 1e-12;
    while h.len() > 1 && h.last().is_some_and(|v| v.abs() < cut) {
        h.pop();
    }
    h
}

/// Entry-wise group delay on bins `0..=size/2` of a uniform grid.
#[derive(Clone, Debug)]
pub struct GroupDelayMatrix {
    pub grid_size: usize,
    /// One matrix per bin, in samples.
    pub values: Vec<DMatrix<f64>>,
    /// `false` where the entry's magnitude is too small for a phase slope.
    pub valid: Vec<DMatrix<bool>>,
}

impl GroupDelayMatrix {
    pub fn bins(&self) -> usize {
        self.values.len()
    }

    pub fn omega(&self, k: usize) -> f64 {
        std::f64::consts::TAU * k as f64 / self.grid_size as f64
    }
}

/// Group delays of the expanded feedback matrix on `grid`.
pub fn group_delay_matrix(ffm: &FfmCascade, grid: &FrequencyGrid) -> Result<GroupDelayMatrix> {
    group_delay_of(&ffm.expand(), grid.count())
}

/// Group delay `Re(FFT(n h) / FFT(h))` for every entry of `a`.
pub fn group_delay_of(a: &PolynomialMatrix, size: usize) -> Result<GroupDelayMatrix> {
    if size < a.order() + 1 {
        return Err(Error::InsufficientGrid {
            count: size,
            required: a.order() + 1,
        });
    }
    let n = a.size();
    let bins = size / 2 + 1;
    let fft = FftPair::new(size);
    let mut values = vec![DMatrix::zeros(n, n); bins];
    let mut valid = vec![DMatrix::from_element(n, n, true); bins];
    for i in 0..n {
        for j in 0..n {
            let h = a.entry(i, j);
            let ramp: Vec<f64> = h.iter().enumerate().map(|(k, v)| k as f64 * v).collect();
            let hs = spectrum_of(&h, &fft);
            let rs = spectrum_of(&ramp, &fft);
            for k in 0..bins {
                if hs[k].norm() < GROUP_DELAY_FLOOR {
                    valid[k][(i, j)] = false;
                    values[k][(i, j)] = f64::NAN;
                } else {
                    values[k][(i, j)] = (rs[k] / hs[k]).re;
                }
            }
        }
    }
    Ok(GroupDelayMatrix {
        grid_size: size,
        values,
        valid,
    })
}

/// Left and right group delays whose outer sum approximates a group-delay
/// matrix, one pair of vectors per frequency bin.
#[derive(Clone, Debug)]
pub struct GroupDelayPair {
    pub left: Vec<DVector<f64>>,
    pub right: Vec<DVector<f64>>,
    /// Largest absolute error over all valid entries and bins, in samples.
    pub residual_error: f64,
    /// Mean absolute error over all valid entries and bins.
    pub mean_abs_error: f64,
}

/// Largest dynamic range, in nepers, of the exponentiated matrix.
const EXP_SPAN: f64 = 4.0;

/// Limit on passes used to impute invalid entries from the rank-1 fit.
const IMPUTE_PASSES: usize = 2000;

/// Per-bin rank-1 fit in the exponential domain.
///
/// Entries are centred and divided by a scale so that the exponentials stay
/// within `e^4` of each other; the dominant singular pair of the resulting
/// positive matrix gives the two vectors after taking logarithms. Invalid
/// entries are filled in iteratively from the fit. A bin whose fit has a
/// larger worst-case error than the zero pair keeps the zero pair. The split
/// is canonical: `min_i left_i = 0` at every bin.
pub fn approximate_group_delay(theta: &GroupDelayMatrix) -> Result<GroupDelayPair> {
    let mut left = Vec::with_capacity(theta.bins());
    let mut right = Vec::with_capacity(theta.bins());
    let mut max_err = 0.0_f64;
    let mut sum_err = 0.0;
    let mut count = 0usize;
    for (k, (vals, mask)) in theta.values.iter().zip(&theta.valid).enumerate() {
        let (mut l, mut r) = rank_one_bin(vals, mask).ok_or(Error::AllFlagged(k))?;
        let errors = |l: &DVector<f64>, r: &DVector<f64>| -> Vec<f64> {
            (0..vals.ncols())
                .flat_map(|j| (0..vals.nrows()).map(move |i| (i, j)))
                .filter(|&ij| mask[ij])
                .map(|(i, j)| (l[i] + r[j] - vals[(i, j)]).abs())
                .collect()
        };
        let mut errs = errors(&l, &r);
        let zero = DVector::zeros(vals.nrows());
        let zero_errs = errors(&zero, &zero);
        let peak = |e: &[f64]| e.iter().copied().fold(0.0, f64::max);
        if peak(&zero_errs) < peak(&errs) {
            // Never worse than no correction at all.
            (l, r, errs) = (zero.clone(), zero, zero_errs);
        }
        max_err = max_err.max(peak(&errs));
        sum_err += errs.iter().sum::<f64>();
        count += errs.len();
        left.push(l);
        right.push(r);
    }
    Ok(GroupDelayPair {
        left,
        right,
        residual_error: max_err,
        mean_abs_error: if count > 0 { sum_err / count as f64 } else { 0.0 },
    })
}

fn rank_one_bin(vals: &DMatrix<f64>, mask: &DMatrix<bool>) -> Option<(DVector<f64>, DVector<f64>)> {
    let valid: Vec<f64> = vals
        .iter()
        .zip(mask.iter())
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .collect();
    if valid.is_empty() {
        return None;
    }
    let lo = valid.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = valid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mid = 0.5 * (lo + hi);
    let scale = ((hi - lo) / EXP_SPAN).max(1.0);
    let fill = valid.iter().map(|v| ((v - mid) / scale).exp()).sum::<f64>() / valid.len() as f64;
    let mut x = DMatrix::from_fn(vals.nrows(), vals.ncols(), |i, j| {
        if mask[(i, j)] {
            ((vals[(i, j)] - mid) / scale).exp()
        } else {
            fill
        }
    });
    let complete = mask.iter().all(|&m| m);
    let passes = if complete { 1 } else { IMPUTE_PASSES };
    let tiny = f64::MIN_POSITIVE;
    let mut uv = (DVector::zeros(0), DVector::zeros(0));
    for _ in 0..passes {
        let (u, v) = dominant_pair(&x)?;
        let mut change = 0.0_f64;
        if !complete {
            let fit = &u * v.transpose();
            for i in 0..x.nrows() {
                for j in 0..x.ncols() {
                    if !mask[(i, j)] {
                        change = change.max((x[(i, j)] - fit[(i, j)]).abs() / fit[(i, j)].max(tiny));
                        x[(i, j)] = fit[(i, j)];
                    }
                }
            }
        }
        uv = (u, v);
        if change < 1e-14 {
            break;
        }
    }
    let mut l = uv.0.map(|v| scale * v.max(tiny).ln());
    let mut r = uv.1.map(|v| scale * v.max(tiny).ln() + mid);
    let shift = l.min();
    l.add_scalar_mut(-shift);
    r.add_scalar_mut(shift);
    Some((l, r))
}

/// Iterations of the power method in [`dominant_pair`].
const POWER_ITERATIONS: usize = 1000;

/// Dominant singular pair of a positive matrix by power iteration, scaled so
/// that `u v^T` is the best rank-1 approximation. Both vectors are positive.
fn dominant_pair(x: &DMatrix<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
    let mut v = DVector::from_element(x.ncols(), 1.0).normalize();
    let mut u = x * &v;
    for _ in 0..POWER_ITERATIONS {
        let next = (x.transpose() * &u).normalize();
        let done = (&next - &v).amax() < 1e-15;
        v = next;
        u = x * &v;
        if done {
            break;
        }
    }
    let s = u.norm();
    if !(s > 0.0 && s.is_finite()) {
        return None;
    }
    Some((u / s.sqrt(), v * s.sqrt()))
}

/// Ring-buffer delay line; a length of zero passes samples straight through.
#[derive(Clone, Debug)]
struct DelayLine {
    buf: Vec<f64>,
    pos: usize,
}

impl DelayLine {
    fn new(len: usize) -> Self {
        Self {
            buf: vec![0.0; len],
            pos: 0,
        }
    }

    /// Sample written `len` calls ago.
    fn read(&self) -> f64 {
        if self.buf.is_empty() {
            0.0
        } else {
            self.buf[self.pos]
        }
    }

    fn write(&mut self, v: f64) {
        if !self.buf.is_empty() {
            self.buf[self.pos] = v;
            self.pos = (self.pos + 1) % self.buf.len();
        }
    }

    fn process(&mut self, v: f64) -> f64 {
        if self.buf.is_empty() {
            return v;
        }
        let out = self.buf[self.pos];
        self.write(v);
        out
    }
}

/// Direct-form FIR with a ring-buffer history.
#[derive(Clone, Debug)]
struct Fir {
    taps: Vec<f64>,
    hist: Vec<f64>,
    pos: usize,
}

impl Fir {
    fn new(taps: &[f64]) -> Self {
        Self {
            taps: taps.to_vec(),
            hist: vec![0.0; taps.len()],
            pos: 0,
        }
    }

    fn process(&mut self, x: f64) -> f64 {
        let n = self.taps.len();
        if n == 1 {
            return self.taps[0] * x;
        }
        self.pos = (self.pos + n - 1) % n;
        self.hist[self.pos] = x;
        self.taps
            .iter()
            .enumerate()
            .map(|(k, t)| t * self.hist[(self.pos + k) % n])
            .sum()
    }
}

enum Mixer {
    Matrix(DMatrix<f64>),
    /// Normalised Hadamard applied by the fast transform.
    Fwht,
}

fn check_sample(n: usize, y: f64) -> Result<()> {
    if y.is_finite() && y.abs() <= INSTABILITY_THRESHOLD {
        Ok(())
    } else {
        Err(Error::Unstable {
            sample: n,
            value: y.abs(),
        })
    }
}

/// Time-domain impulse response: ring buffers for the main delays and for
/// every cascade stage, mixing after each stage.
pub fn render_cascade(cfg: &FfdnConfig, att: &Attenuation, length: usize) -> Result<Vec<f64>> {
    att.check(cfg)?;
    let n = cfg.size();
    let h = hadamard(n).ok();
    let mixers: Vec<Mixer> = cfg
        .ffm
        .stages()
        .iter()
        .map(|s| match &h {
            Some(h) if n > 1 && &s.unitary == h => Mixer::Fwht,
            _ => Mixer::Matrix(s.unitary.clone()),
        })
        .collect();
    let norm = (n as f64).sqrt().recip();
    let mut main: Vec<DelayLine> = cfg.delays.iter().map(|&m| DelayLine::new(m)).collect();
    let mut filters: Vec<Fir> = att.line_filters.iter().map(|t| Fir::new(t)).collect();
    let mut pre: Vec<DelayLine> = cfg.ffm.pre_delays().iter().map(|&m| DelayLine::new(m)).collect();
    let mut lines: Vec<Vec<DelayLine>> = cfg
        .ffm
        .stages()
        .iter()
        .map(|s| s.delays.iter().map(|&m| DelayLine::new(m)).collect())
        .collect();
    let stage_gains = att.has_stage_gains();
    let mut out = Vec::with_capacity(length);
    let mut x = DVector::<f64>::zeros(n);
    for t in 0..length {
        let u = if t == 0 { 1.0 } else { 0.0 };
        let mut y = cfg.direct_gain * u;
        for i in 0..n {
            let s = main[i].read() * att.main_gains[i];
            y += cfg.output_gains[i] * s;
            x[i] = filters[i].process(s);
        }
        check_sample(t, y)?;
        out.push(y);
        for i in 0..n {
            x[i] = pre[i].process(x[i]);
            if stage_gains {
                x[i] *= att.stage_gains[0][i];
            }
        }
        for (k, mixer) in mixers.iter().enumerate() {
            match mixer {
                Mixer::Matrix(u) => x = u * &x,
                Mixer::Fwht => {
                    fwht(x.as_mut_slice());
                    x *= norm;
                }
            }
            for i in 0..n {
                x[i] = lines[k][i].process(x[i]);
                if stage_gains {
                    x[i] *= att.stage_gains[k + 1][i];
                }
            }
        }
        for i in 0..n {
            main[i].write(x[i] + cfg.input_gains[i] * u);
        }
    }
    Ok(out)
}

/// Lossy feedback matrix as one polynomial matrix: the cascade with its
/// stage gains, times the diagonal line filters on the right.
pub fn effective_ffm(cfg: &FfdnConfig, att: &Attenuation) -> Result<PolynomialMatrix> {
    att.check(cfg)?;
    let gains = att.has_stage_gains().then_some(att.stage_gains.as_slice());
    let a = cfg.ffm.expand_with_gains(gains);
    if att.line_filters.iter().all(|h| h == &[1.0]) {
        return Ok(a);
    }
    let n = cfg.size();
    let order = att.line_filters.iter().map(Vec::len).max().unwrap_or(1) - 1;
    let mut coeffs = vec![DMatrix::zeros(n, n); order + 1];
    for (j, h) in att.line_filters.iter().enumerate() {
        for (k, &v) in h.iter().enumerate() {
            coeffs[k][(j, j)] = v;
        }
    }
    a.multiply(&PolynomialMatrix::new(coeffs)?)
}

/// Block renderer: the expanded lossy feedback matrix is applied to the
/// delay-line outputs by overlap-save convolution with one forward and one
/// inverse FFT per line and block.
///
/// `block` defaults to the shortest main delay, which is also its upper
/// limit since a block may not depend on its own output. Larger blocks fall
/// back to the cascade renderer.
pub fn render_fast_convolution(
    cfg: &FfdnConfig,
    att: &Attenuation,
    length: usize,
    block: Option<usize>,
) -> Result<Vec<f64>> {
    let n = cfg.size();
    let min_delay = cfg.delays.iter().copied().min().unwrap_or(1);
    let block = block.unwrap_or(min_delay);
    if block == 0 {
        return Err(Error::Config("block size must be positive".into()));
    }
    if block > min_delay {
        log::warn!("block size {block} exceeds the shortest main delay {min_delay}; rendering with the cascade engine");
        return render_cascade(cfg, att, length);
    }
    let e = effective_ffm(cfg, att)?;
    let taps = e.order() + 1;
    let size = next_pow2(block + taps - 1);
    let fft = FftPair::new(size);
    let response = e.frequency_response(size);
    let mut s = vec![vec![0.0; length]; n];
    let mut w = vec![vec![0.0; length]; n];
    let mut out = vec![0.0; length];
    let mut spectra = vec![vec![Complex64::new(0.0, 0.0); size]; n];
    let mut mixed = vec![vec![Complex64::new(0.0, 0.0); size]; n];
    let mut start = 0;
    while start < length {
        let end = (start + block).min(length);
        for t in start..end {
            let mut y = if t == 0 { cfg.direct_gain } else { 0.0 };
            for i in 0..n {
                let v = if t >= cfg.delays[i] {
                    w[i][t - cfg.delays[i]] * att.main_gains[i]
                } else {
                    0.0
                };
                s[i][t] = v;
                y += cfg.output_gains[i] * v;
            }
            check_sample(t, y)?;
            out[t] = y;
        }
        // Segment [end - size, end): the last `block` outputs are valid.
        for (i, buf) in spectra.iter_mut().enumerate() {
            for (k, slot) in buf.iter_mut().enumerate() {
                let t = (end + k) as isize - size as isize;
                *slot = Complex64::new(if t >= 0 { s[i][t as usize] } else { 0.0 }, 0.0);
            }
            fft.forward(buf);
        }
        for (bin, a) in response.iter().enumerate() {
            for i in 0..n {
                let mut acc = Complex64::new(0.0, 0.0);
                for j in 0..n {
                    acc += a[(i, j)] * spectra[j][bin];
                }
                mixed[i][bin] = acc;
            }
        }
        for i in 0..n {
            fft.inverse(&mut mixed[i]);
            for t in start..end {
                w[i][t] = mixed[i][size - (end - t)].re;
            }
        }
        if start == 0 {
            for (line, &g) in w.iter_mut().zip(&cfg.input_gains) {
                line[0] += g;
            }
        }
        start = end;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ffm::{dfm, hadamard_ffm, random_orthogonal, rdfm, vfm, ElementalFactorization, VelvetSpec};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rms(a: &[f64], b: &[f64]) -> f64 {
        (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
    }

    fn loop_cfg(m: usize) -> FfdnConfig {
        let ffm = FfmCascade::scalar(DMatrix::identity(1, 1)).unwrap();
        FfdnConfig::unit_gains(vec![m], ffm, 48000.0).unwrap()
    }

    fn reference_dfm() -> FfmCascade {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        dfm(&[6, 0, 7, 5], random_orthogonal(4, &mut rng), &[12, 8, 0, 2]).unwrap()
    }

    #[test]
    fn config_validation() {
        let ffm = FfmCascade::identity(2);
        assert!(FfdnConfig::unit_gains(vec![3, 0], ffm.clone(), 48000.0).is_err());
        assert!(matches!(
            FfdnConfig::unit_gains(vec![3], ffm, 48000.0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn total_orders() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ffm = FfmCascade::scalar(random_orthogonal(3, &mut rng)).unwrap();
        assert_eq!(
            FfdnConfig::unit_gains(vec![1, 2, 3], ffm, 1.0).unwrap().total_order(),
            6
        );
        let cfg = FfdnConfig::unit_gains(vec![100; 4], reference_dfm(), 1.0).unwrap();
        assert_eq!(cfg.total_order(), 440);
        assert_eq!(cfg.total_order(), cfg.ffm.expand().mcmillan_degree().unwrap() + 400);
    }

    #[test]
    fn single_loop_is_impulse_train() {
        let cfg = loop_cfg(5);
        let h = render_cascade(&cfg, &Attenuation::lossless(&cfg.ffm), 21).unwrap();
        for (t, v) in h.iter().enumerate() {
            let expected = if t > 0 && t % 5 == 0 { 1.0 } else { 0.0 };
            assert_eq!(*v, expected, "sample {t}");
        }
    }

    #[test]
    fn single_loop_broadband_decay() {
        let cfg = loop_cfg(7);
        let g = 0.99;
        let att = design_attenuation(&cfg, &AttenuationSpec::Broadband { gain: g }).unwrap();
        let h = render_cascade(&cfg, &att, 30).unwrap();
        for r in 1..=4 {
            assert_abs_diff_eq!(h[7 * r], g.powi(7 * r as i32), epsilon = 1e-15);
        }
    }

    #[test]
    fn gain_per_sample_example() {
        assert_abs_diff_eq!(gain_per_sample_db(5.0, 48000.0).unwrap(), -2.5e-4, epsilon = 1e-18);
        assert!(gain_per_sample_db(0.0, 48000.0).is_err());
    }

    #[test]
    fn broadband_rejects_bad_gain() {
        let cfg = loop_cfg(3);
        assert!(design_attenuation(&cfg, &AttenuationSpec::Broadband { gain: 1.5 }).is_err());
        let spec = AttenuationSpec::FrequencyDependent {
            rt_curve: vec![(0.0, -1.0)],
            filter_order: 8,
        };
        assert!(design_attenuation(&cfg, &spec).is_err());
    }

    #[test]
    fn lumped_design_on_scalar_matrix_is_delay_proportional() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ffm = FfmCascade::scalar(random_orthogonal(3, &mut rng)).unwrap();
        let cfg = FfdnConfig::unit_gains(vec![101, 233, 477], ffm, 48000.0).unwrap();
        let att = design_attenuation(&cfg, &AttenuationSpec::lumped_t60(1.0)).unwrap();
        let g = 10f64.powf(gain_per_sample_db(1.0, 48000.0).unwrap() / 20.0);
        for (h, &m) in att.line_filters.iter().zip(&cfg.delays) {
            assert_eq!(h.len(), 1);
            assert_abs_diff_eq!(h[0], g.powi(m as i32), epsilon = 1e-12);
        }
    }

    #[test]
    fn minimum_phase_design_follows_target() {
        let size = 512;
        let target: Vec<f64> = (0..=size / 2)
            .map(|k| -3.0 - 2.0 * (std::f64::consts::TAU * k as f64 / size as f64).cos())
            .collect();
        let h = minimum_phase_fir(&target, size, 32);
        let fft = FftPair::new(size);
        let spec = spectrum_of(&h, &fft);
        for k in 0..=size / 2 {
            let db = 20.0 * spec[k].norm().log10();
            assert!((db - target[k]).abs() < 1e-3, "bin {k}: {db} vs {}", target[k]);
        }
    }

    #[test]
    fn dfm_group_delay_is_pulse_position() {
        let theta = group_delay_matrix(&reference_dfm(), &FrequencyGrid::uniform(64)).unwrap();
        let expected = DMatrix::from_row_slice(
            4,
            4,
            &[
                18.0, 14.0, 6.0, 8.0, 12.0, 8.0, 0.0, 2.0, 19.0, 15.0, 7.0, 9.0, 17.0, 13.0, 5.0, 7.0,
            ],
        );
        for v in &theta.values {
            assert!((v - &expected).amax() < 1e-9);
        }
        let pair = approximate_group_delay(&theta).unwrap();
        assert!(pair.residual_error < 1e-9);
        for k in 0..theta.bins() {
            let l: Vec<f64> = pair.left[k].iter().copied().collect();
            let r: Vec<f64> = pair.right[k].iter().copied().collect();
            for (a, b) in l.iter().zip([6.0, 0.0, 7.0, 5.0]) {
                assert_abs_diff_eq!(*a, b, epsilon = 1e-9);
            }
            for (a, b) in r.iter().zip([12.0, 8.0, 0.0, 2.0]) {
                assert_abs_diff_eq!(*a, b, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn pure_delay_flags_off_diagonal() {
        let ffm = FfmCascade::new(vec![3, 5], vec![]).unwrap();
        let theta = group_delay_matrix(&ffm, &FrequencyGrid::uniform(16)).unwrap();
        for (v, m) in theta.values.iter().zip(&theta.valid) {
            assert_abs_diff_eq!(v[(0, 0)], 3.0, epsilon = 1e-12);
            assert_abs_diff_eq!(v[(1, 1)], 5.0, epsilon = 1e-12);
            assert!(!m[(0, 1)] && !m[(1, 0)]);
        }
        let pair = approximate_group_delay(&theta).unwrap();
        assert!(pair.residual_error < 1e-4, "{}", pair.residual_error);
    }

    #[test]
    fn constant_matrix_fit_is_exact() {
        let theta = GroupDelayMatrix {
            grid_size: 2,
            values: vec![DMatrix::from_element(3, 3, 7.5); 2],
            valid: vec![DMatrix::from_element(3, 3, true); 2],
        };
        let pair = approximate_group_delay(&theta).unwrap();
        assert!(pair.residual_error < 1e-12);
        let all_flagged = GroupDelayMatrix {
            grid_size: 2,
            values: vec![DMatrix::zeros(2, 2)],
            valid: vec![DMatrix::from_element(2, 2, false)],
        };
        assert!(matches!(
            approximate_group_delay(&all_flagged),
            Err(Error::AllFlagged(0))
        ));
    }

    #[test]
    fn clamping_keeps_flags_and_bounds() {
        let mut theta = GroupDelayMatrix {
            grid_size: 4,
            values: vec![DMatrix::from_row_slice(2, 2, &[-3.0, 2.0, f64::NAN, 40.0])],
            valid: vec![DMatrix::from_row_slice(2, 2, &[true, true, false, true])],
        };
        clamp_to_support(&mut theta, 10);
        let v = &theta.values[0];
        assert_eq!((v[(0, 0)], v[(0, 1)], v[(1, 1)]), (0.0, 2.0, 10.0));
        assert!(v[(1, 0)].is_nan());
    }

    #[test]
    fn ebfm_fit_beats_zero_pair() {
        let ffm = ElementalFactorization::random(4, 4, 8).to_cascade();
        let theta = group_delay_matrix(&ffm, &FrequencyGrid::uniform(64)).unwrap();
        let pair = approximate_group_delay(&theta).unwrap();
        assert!(pair.residual_error.is_finite());
        let zero_err = theta
            .values
            .iter()
            .zip(&theta.valid)
            .flat_map(|(v, m)| v.iter().zip(m.iter()).filter(|(_, &ok)| ok).map(|(x, _)| x.abs()))
            .fold(0.0, f64::max);
        assert!(pair.residual_error <= zero_err);
    }

    #[test]
    fn engines_agree_across_families() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let families = vec![
            FfmCascade::scalar(random_orthogonal(4, &mut rng)).unwrap(),
            reference_dfm(),
            rdfm(4, 2, 1).unwrap(),
            hadamard_ffm(4, 2).unwrap(),
            vfm(&VelvetSpec {
                size: 4,
                stages: 2,
                density: 0.1,
                jitter_seed: 3,
            })
            .unwrap(),
            ElementalFactorization::random(4, 8, 2).to_cascade(),
        ];
        for ffm in families {
            let cfg = FfdnConfig::new(
                vec![53, 71, 97, 113],
                vec![1.0, -0.5, 0.25, 0.8],
                vec![0.3, 1.0, -0.7, 0.2],
                0.5,
                ffm,
                48000.0,
            )
            .unwrap();
            for spec in [AttenuationSpec::Lossless, AttenuationSpec::Broadband { gain: 0.999 }] {
                let att = design_attenuation(&cfg, &spec).unwrap();
                let a = render_cascade(&cfg, &att, 3000).unwrap();
                let b = render_fast_convolution(&cfg, &att, 3000, None).unwrap();
                assert!(rms(&a, &b) < 1e-9, "rms {}", rms(&a, &b));
                assert_eq!(a[0], 0.5);
            }
        }
    }

    #[test]
    fn scalar_matrix_matches_reference_fdn() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let u = random_orthogonal(3, &mut rng);
        let m = [17usize, 23, 31];
        let (b, c) = ([0.4, -1.0, 0.7], [1.0, 0.2, -0.3]);
        let cfg = FfdnConfig::new(
            m.to_vec(),
            b.to_vec(),
            c.to_vec(),
            0.1,
            FfmCascade::scalar(u.clone()).unwrap(),
            1.0,
        )
        .unwrap();
        let len = 600;
        // Plain FDN with full signal histories.
        let mut w = vec![vec![0.0; len]; 3];
        let mut reference = vec![0.0; len];
        for t in 0..len {
            let s: Vec<f64> = (0..3).map(|i| if t >= m[i] { w[i][t - m[i]] } else { 0.0 }).collect();
            reference[t] = (0..3).map(|i| c[i] * s[i]).sum::<f64>() + if t == 0 { 0.1 } else { 0.0 };
            for i in 0..3 {
                w[i][t] = (0..3).map(|j| u[(i, j)] * s[j]).sum::<f64>() + if t == 0 { b[i] } else { 0.0 };
            }
        }
        let att = Attenuation::lossless(&cfg.ffm);
        let fast = render_fast_convolution(&cfg, &att, len, None).unwrap();
        let slow = render_cascade(&cfg, &att, len).unwrap();
        assert!(rms(&fast, &reference) < 1e-12);
        assert!(rms(&slow, &reference) < 1e-12);
    }

    #[test]
    fn zero_input_gives_direct_only() {
        let cfg = FfdnConfig::new(
            vec![3, 4],
            vec![0.0; 2],
            vec![1.0; 2],
            0.7,
            hadamard_ffm(2, 2).unwrap(),
            1.0,
        )
        .unwrap();
        let att = Attenuation::lossless(&cfg.ffm);
        let h = render_fast_convolution(&cfg, &att, 50, None).unwrap();
        assert_eq!(h[0], 0.7);
        assert!(h[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn oversized_blocks_fall_back_to_cascade() {
        let cfg = loop_cfg(8);
        let att = Attenuation::lossless(&cfg.ffm);
        let oversized = render_fast_convolution(&cfg, &att, 40, Some(9)).unwrap();
        assert_eq!(oversized, render_cascade(&cfg, &att, 40).unwrap());
        assert!(matches!(
            render_fast_convolution(&cfg, &att, 10, Some(0)),
            Err(Error::Config(_))
        ));
        let a = render_fast_convolution(&cfg, &att, 100, Some(3)).unwrap();
        let b = render_cascade(&cfg, &att, 100).unwrap();
        assert!(rms(&a, &b) < 1e-12);
    }

    #[test]
    fn broadband_is_exact_exponential_scaling() {
        let ffm = vfm(&VelvetSpec {
            size: 4,
            stages: 2,
            density: 1.0 / 30.0,
            jitter_seed: 5,
        })
        .unwrap();
        let cfg = FfdnConfig::unit_gains(vec![101, 143, 179, 211], ffm, 48000.0).unwrap();
        let g = 0.9995;
        let lossless = render_cascade(&cfg, &Attenuation::lossless(&cfg.ffm), 4000).unwrap();
        let att = design_attenuation(&cfg, &AttenuationSpec::Broadband { gain: g }).unwrap();
        let lossy = render_cascade(&cfg, &att, 4000).unwrap();
        for (t, (a, b)) in lossless.iter().zip(&lossy).enumerate() {
            assert!((b * g.powi(-(t as i32)) - a).abs() < 1e-9);
        }
    }

    #[test]
    fn unstable_configuration_is_reported() {
        let ffm = FfmCascade::identity(1);
        let cfg = FfdnConfig::unit_gains(vec![1], ffm, 1.0).unwrap();
        let mut att = Attenuation::lossless(&cfg.ffm);
        att.main_gains = vec![2.0];
        assert!(matches!(render_cascade(&cfg, &att, 100), Err(Error::Unstable { .. })));
    }
}
