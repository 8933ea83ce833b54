//! Echo paths, echo density and mixing time.
//!
//! The density measure squares the impulse response, divides it by a
//! centred moving mean of itself to remove the decay envelope, and then
//! counts, for every sample, the fraction of a centred window whose
//! normalised energy exceeds one. Gaussian noise scores `erfc(1/sqrt 2)` on
//! that count, so dividing by it makes noise read as 1.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::engine::{effective_ffm, render_cascade, Attenuation, FfdnConfig};
use crate::ffm::{FfmFamily, FfmSpec};
use crate::{Error, Result};

/// `erfc(1/sqrt(2))`, the fraction of a Gaussian beyond one standard deviation.
pub const GAUSSIAN_EXCEEDANCE: f64 = 0.317_310_507_862_914_1;

/// Default analysis window in seconds.
pub const DEFAULT_WINDOW_SECONDS: f64 = 0.02;

/// Default mixing threshold on the smoothed profile.
pub const DEFAULT_THRESHOLD: f64 = 0.9;

/// Smallest admissible window.
pub const MIN_WINDOW: usize = 64;

/// Sequence of delay lines visited by one echo, zero-based.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EchoPath {
    indices: Vec<usize>,
}

impl EchoPath {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidParameter("an echo path visits at least one line".into()));
        }
        Ok(Self { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// All paths of exactly `length` visits over `size` lines.
    pub fn all(size: usize, length: usize) -> Vec<EchoPath> {
        let mut out = vec![Vec::new()];
        for _ in 0..length {
            out = out
                .into_iter()
                .flat_map(|p: Vec<usize>| {
                    (0..size).map(move |i| {
                        let mut q = p.clone();
                        q.push(i);
                        q
                    })
                })
                .collect();
        }
        out.into_iter().map(|indices| EchoPath { indices }).collect()
    }
}

fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// Contribution of one echo path to the impulse response: input gain, a
/// main delay per visit, the feedback filter between consecutive visits and
/// the output gain.
pub fn echo_path_response(cfg: &FfdnConfig, att: &Attenuation, path: &EchoPath) -> Result<Vec<f64>> {
    let n = cfg.size();
    if let Some(&bad) = path.indices.iter().find(|&&i| i >= n) {
        return Err(Error::InvalidParameter(format!("line {bad} out of range for size {n}")));
    }
    let ffm = effective_ffm(cfg, att)?;
    let q = &path.indices;
    let visit = |seq: Vec<f64>, i: usize| {
        let mut out = vec![0.0; cfg.delays[i]];
        out.extend(seq.iter().map(|v| v * att.main_gains[i]));
        out
    };
    let mut seq = visit(vec![cfg.input_gains[q[0]]], q[0]);
    for w in q.windows(2) {
        seq = convolve(&seq, &ffm.entry(w[1], w[0]));
        seq = visit(seq, w[1]);
    }
    let c = cfg.output_gains[q[q.len() - 1]];
    Ok(seq.into_iter().map(|v| v * c).collect())
}

/// Normalised echo density over time.
#[derive(Clone, Debug, PartialEq)]
pub struct EchoDensityProfile {
    pub density: Vec<f64>,
    pub window: usize,
    /// Mixing time at [`DEFAULT_THRESHOLD`].
    pub mixing_time: Option<usize>,
}

/// Analysis window in samples for a sample rate.
pub fn default_window(sample_rate: f64) -> usize {
    ((DEFAULT_WINDOW_SECONDS * sample_rate).round() as usize).max(MIN_WINDOW)
}

/// Sum over the centred window `[n - w/2, n - w/2 + w)` clipped to the
/// signal, and the number of samples it covers.
fn centred_sums(prefix: &[f64], n: usize, w: usize) -> (f64, usize) {
    let len = prefix.len() - 1;
    let lo = n.saturating_sub(w / 2);
    let hi = (n + w - w / 2).min(len);
    (prefix[hi] - prefix[lo], hi - lo)
}

fn prefix_sum(v: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut out = vec![0.0];
    let mut acc = 0.0;
    for x in v {
        acc += x;
        out.push(acc);
    }
    out
}

/// Echo density profile with the given window length in samples.
pub fn echo_density(ir: &[f64], window: usize) -> Result<EchoDensityProfile> {
    if window < MIN_WINDOW {
        return Err(Error::InvalidParameter(format!(
            "window must be at least {MIN_WINDOW} samples"
        )));
    }
    if ir.len() <= window {
        return Err(Error::InvalidParameter(
            "impulse response shorter than the window".into(),
        ));
    }
    if ir.iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroSignal);
    }
    let energy: Vec<f64> = ir.iter().map(|v| v * v).collect();
    let energy_prefix = prefix_sum(energy.iter().copied());
    let exceeds = (0..ir.len()).map(|n| {
        let (sum, count) = centred_sums(&energy_prefix, n, window);
        let mean = sum / count as f64;
        if mean > 0.0 && energy[n] > mean {
            1.0
        } else {
            0.0
        }
    });
    let exceed_prefix = prefix_sum(exceeds);
    let density: Vec<f64> = (0..ir.len())
        .map(|n| {
            let (sum, count) = centred_sums(&exceed_prefix, n, window);
            sum / count as f64 / GAUSSIAN_EXCEEDANCE
        })
        .collect();
    let mut profile = EchoDensityProfile {
        density,
        window,
        mixing_time: None,
    };
    profile.mixing_time = mixing_time(&profile, DEFAULT_THRESHOLD);
    Ok(profile)
}

/// First index where the profile, smoothed by a centred moving average of
/// a quarter window, reaches `threshold`.
pub fn mixing_time(profile: &EchoDensityProfile, threshold: f64) -> Option<usize> {
    let d = &profile.density;
    let w = (profile.window / 4).max(1);
    let prefix = prefix_sum(d.iter().copied());
    (0..d.len()).find(|&n| {
        let (sum, count) = centred_sums(&prefix, n, w);
        sum / count as f64 >= threshold
    })
}

/// One network type in the Monte-Carlo study.
#[derive(Clone, Debug, PartialEq)]
pub struct McFamily {
    pub label: String,
    /// Size, stages and density are used; the seed is replaced per trial.
    pub spec: FfmSpec,
}

impl McFamily {
    pub fn new(label: &str, spec: FfmSpec) -> Self {
        Self {
            label: label.to_string(),
            spec,
        }
    }

    /// The scalar four-line baseline.
    pub fn baseline() -> Self {
        Self::new("SFM-4", FfmSpec::new(FfmFamily::Scalar, 4))
    }

    /// Looks up one of the [`default_families`] by label, ignoring case.
    pub fn by_label(label: &str) -> Result<Self> {
        default_families()
            .into_iter()
            .find(|f| f.label.eq_ignore_ascii_case(label))
            .ok_or_else(|| Error::Config(format!("unknown Monte-Carlo family `{label}`")))
    }
}

/// The six networks compared in the study: EBFM with 64 stages, a delay
/// matrix, RDFM with 3 stages, VFM with 2 stages at density 1/30 and the
/// scalar baselines with 4 and 16 lines.
pub fn default_families() -> Vec<McFamily> {
    let with = |family, stages, density, max_delay| {
        let mut s = FfmSpec::new(family, 4);
        s.stages = stages;
        s.density = density;
        s.max_delay = max_delay;
        s
    };
    vec![
        McFamily::new("EBFM", with(FfmFamily::Ebfm, 64, 1.0, 0)),
        McFamily::new("DFM", with(FfmFamily::Dfm, 1, 1.0, DFM_MAX_DELAY)),
        McFamily::new("RDFM", with(FfmFamily::Rdfm, 3, 1.0, 0)),
        McFamily::new("VFM", with(FfmFamily::Vfm, 2, 1.0 / 30.0, 0)),
        McFamily::baseline(),
        McFamily::new("SFM-16", FfmSpec::new(FfmFamily::Scalar, 16)),
    ]
}

/// Largest pre/post delay of the study's delay matrix.
pub const DFM_MAX_DELAY: usize = 1000;

/// Monte-Carlo controls.
#[derive(Clone, Debug, PartialEq)]
pub struct McOptions {
    pub trials: usize,
    pub seed: u64,
    pub sample_rate: f64,
    /// Longest render in samples; slower networks are censored there.
    pub max_length: usize,
    pub window: usize,
    pub threshold: f64,
    /// Inclusive range of the main delays.
    pub delay_range: (usize, usize),
}

impl Default for McOptions {
    fn default() -> Self {
        Self {
            trials: 100,
            seed: 0,
            sample_rate: 48000.0,
            max_length: 48000 * 30,
            window: default_window(48000.0),
            threshold: DEFAULT_THRESHOLD,
            delay_range: (1000, 8000),
        }
    }
}

/// Distribution of mixing time relative to the baseline for one family.
#[derive(Clone, Debug, PartialEq)]
pub struct McSummary {
    pub label: String,
    /// One ratio per trial, sorted.
    pub ratios: Vec<f64>,
    /// Trials where this family or the baseline did not mix within the
    /// longest render; the missing time is replaced by that length, which
    /// bounds the ratio from one side.
    pub censored: usize,
    pub median: f64,
    pub lower_quartile: f64,
    pub upper_quartile: f64,
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Mixing time of one lossless network with unit gains.
///
/// Rendering starts at one second and doubles until a crossing appears at
/// least two windows before the end, where the profile no longer depends on
/// the truncation, or until `max_length` is reached.
pub fn network_mixing_time(spec: &FfmSpec, delays: Vec<usize>, opts: &McOptions) -> Result<Option<usize>> {
    let cfg = FfdnConfig::unit_gains(delays, spec.build()?, opts.sample_rate)?;
    let att = Attenuation::lossless(&cfg.ffm);
    let mut length = (opts.sample_rate as usize).max(4 * opts.window).min(opts.max_length);
    loop {
        let ir = render_cascade(&cfg, &att, length)?;
        let profile = echo_density(&ir, opts.window)?;
        let found = mixing_time(&profile, opts.threshold);
        let settled = found.is_some_and(|n| n + 2 * opts.window < length);
        if settled || length >= opts.max_length {
            return Ok(found);
        }
        length = (2 * length).min(opts.max_length);
    }
}

/// Random main delays for one trial; networks of equal size share them.
fn trial_delays(seed: u64, trial: usize, size: usize, range: (usize, usize)) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((trial as u64) << 32) ^ size as u64);
    (0..size).map(|_| rng.random_range(range.0..=range.1)).collect()
}

/// Relative mixing time of each family against the four-line scalar
/// baseline built from the same trial seed.
pub fn monte_carlo_mixing(families: &[McFamily], opts: &McOptions) -> Result<Vec<McSummary>> {
    if opts.trials < 10 {
        return Err(Error::InvalidParameter("at least 10 trials are needed".into()));
    }
    let (lo, hi) = opts.delay_range;
    if lo == 0 || lo > hi {
        return Err(Error::InvalidParameter("invalid delay range".into()));
    }
    let base = McFamily::baseline();
    let per_trial: Vec<Vec<(f64, bool)>> = (0..opts.trials)
        .into_par_iter()
        .map(|t| -> Result<Vec<(f64, bool)>> {
            let seed = opts.seed.wrapping_add(t as u64);
            let run = |f: &McFamily| {
                let mut spec = f.spec.clone();
                spec.seed = seed;
                network_mixing_time(&spec, trial_delays(opts.seed, t, spec.size, opts.delay_range), opts)
            };
            let baseline = run(&base)?;
            let cap = opts.max_length;
            families
                .iter()
                .map(|f| {
                    let mt = run(f)?;
                    let ratio = mt.unwrap_or(cap).max(1) as f64 / baseline.unwrap_or(cap).max(1) as f64;
                    Ok((ratio, mt.is_none() || baseline.is_none()))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(families
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let mut ratios: Vec<f64> = per_trial.iter().map(|r| r[k].0).collect();
            let censored = per_trial.iter().filter(|r| r[k].1).count();
            ratios.sort_by(f64::total_cmp);
            McSummary {
                label: f.label.clone(),
                median: quantile(&ratios, 0.5),
                lower_quartile: quantile(&ratios, 0.25),
                upper_quartile: quantile(&ratios, 0.75),
                ratios,
                censored,
            }
        })
        .collect())
}
