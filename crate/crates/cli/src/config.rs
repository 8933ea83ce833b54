//! Flat `key = value` job files.
//!
//! ```text
//! # 4x4 velvet network, 2 s broadband decay
//! family = vfm
//! size = 4
//! stages = 2
//! density = 1/30
//! delays = 1021, 1327, 1613, 1999
//! attenuation = broadband
//! t60 = 2.0
//! ```
//!
//! Unknown keys, repeated keys and malformed values are reported with their
//! line number.

use std::collections::HashSet;
use std::path::PathBuf;
use std::str::FromStr;

use ffdn::engine::{AttenuationSpec, FfdnConfig, DEFAULT_FILTER_ORDER};
use ffdn::ffm::{parse_fraction, parse_usize_list, FfmFamily, FfmSpec};
use ffdn::{Error, Result, CONFIG_FORMAT_VERSION};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// How losses are applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttenuationKind {
    Lossless,
    /// Exact gain per delay element from `t60`.
    Broadband,
    /// Lumped minimum-phase filters from `t60` or `t60_curve`.
    Lumped,
}

/// Rendering engine.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EngineKind {
    Cascade,
    Fast,
}

/// A parsed job file.
#[derive(Clone, Debug, PartialEq)]
pub struct JobConfig {
    pub ffm: FfmSpec,
    /// Main delays; drawn from `delay_range` with the FFM seed when absent.
    pub delays: Option<Vec<usize>>,
    pub delay_range: (usize, usize),
    pub input_gains: Option<Vec<f64>>,
    pub output_gains: Option<Vec<f64>>,
    pub direct_gain: f64,
    pub sample_rate: f64,
    pub attenuation: AttenuationKind,
    pub t60: Option<f64>,
    /// `(Hz, seconds)` points.
    pub t60_curve: Option<Vec<(f64, f64)>>,
    pub filter_order: usize,
    /// Render length in samples.
    pub length: Option<usize>,
    pub engine: EngineKind,
    pub block: Option<usize>,
    pub tol: f64,
    pub max_iter: usize,
    pub modal_cap: usize,
    pub output: Option<PathBuf>,
    pub csv: Option<PathBuf>,
}

impl Default for JobConfig {
    fn default() -> Self {
        Self {
            ffm: FfmSpec::new(FfmFamily::Scalar, 4),
            delays: None,
            delay_range: (1000, 8000),
            input_gains: None,
            output_gains: None,
            direct_gain: 0.0,
            sample_rate: 48000.0,
            attenuation: AttenuationKind::Lossless,
            t60: None,
            t60_curve: None,
            filter_order: DEFAULT_FILTER_ORDER,
            length: None,
            engine: EngineKind::Cascade,
            block: None,
            tol: 1e-10,
            max_iter: 100,
            modal_cap: 50_000,
            output: None,
            csv: None,
        }
    }
}

fn list<T: FromStr>(value: &str) -> Option<Vec<T>> {
    value
        .trim_matches(|c| c == '[' || c == ']')
        .split(',')
        .map(|t| t.trim().parse().ok())
        .collect()
}

fn pair_list(value: &str) -> Option<Vec<(f64, f64)>> {
    value
        .split(',')
        .map(|p| {
            let (a, b) = p.split_once(':')?;
            Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
        })
        .collect()
}

impl JobConfig {
    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let bad = || format!("invalid value `{value}` for `{key}`");
        fn num<T: FromStr>(v: &str) -> Option<T> {
            v.parse().ok()
        }
        match key {
            k if FfmSpec::KEYS.contains(&k) => {
                return self.ffm.set(k, value).map_err(|e| e.to_string());
            }
            "format" => {
                let v: u32 = num(value).ok_or_else(bad)?;
                if v != CONFIG_FORMAT_VERSION {
                    return Err(format!(
                        "unsupported config format {v}, expected {CONFIG_FORMAT_VERSION}"
                    ));
                }
            }
            "delays" => self.delays = Some(parse_usize_list(value).ok_or_else(bad)?),
            "delay_range" => {
                let r: Vec<usize> = list(value).ok_or_else(bad)?;
                match r[..] {
                    [lo, hi] if lo >= 1 && lo <= hi => self.delay_range = (lo, hi),
                    _ => return Err(bad()),
                }
            }
            "input_gains" => self.input_gains = Some(list(value).ok_or_else(bad)?),
            "output_gains" => self.output_gains = Some(list(value).ok_or_else(bad)?),
            "direct_gain" => self.direct_gain = num(value).ok_or_else(bad)?,
            "sample_rate" => self.sample_rate = num(value).filter(|v: &f64| *v > 0.0).ok_or_else(bad)?,
            "attenuation" => {
                self.attenuation = match value {
                    "lossless" | "none" => AttenuationKind::Lossless,
                    "broadband" => AttenuationKind::Broadband,
                    "lumped" => AttenuationKind::Lumped,
                    _ => return Err(bad()),
                }
            }
            "t60" => self.t60 = Some(parse_fraction(value).filter(|v| *v > 0.0).ok_or_else(bad)?),
            "t60_curve" => self.t60_curve = Some(pair_list(value).ok_or_else(bad)?),
            "filter_order" => self.filter_order = num(value).ok_or_else(bad)?,
            "length" => self.length = Some(num(value).ok_or_else(bad)?),
            "duration" => {
                let secs: f64 = num(value).filter(|v: &f64| *v > 0.0).ok_or_else(bad)?;
                self.length = Some((secs * self.sample_rate).round() as usize);
            }
            "engine" => {
                self.engine = match value {
                    "cascade" => EngineKind::Cascade,
                    "fast" | "fft" | "fast-convolution" => EngineKind::Fast,
                    _ => return Err(bad()),
                }
            }
            "block" => self.block = Some(num(value).ok_or_else(bad)?),
            "tol" => self.tol = num(value).filter(|v: &f64| *v > 0.0).ok_or_else(bad)?,
            "max_iter" => self.max_iter = num(value).ok_or_else(bad)?,
            "modal_cap" => self.modal_cap = num(value).ok_or_else(bad)?,
            "output" => self.output = Some(PathBuf::from(value)),
            "csv" => self.csv = Some(PathBuf::from(value)),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Render length, one second unless given.
    pub fn render_length(&self) -> usize {
        self.length.unwrap_or(self.sample_rate.round() as usize)
    }

    /// Builds the network and the attenuation request.
    pub fn network(&self) -> Result<(FfdnConfig, AttenuationSpec)> {
        let ffm = self.ffm.build()?;
        let n = ffm.size();
        let delays = match &self.delays {
            Some(d) => d.clone(),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.ffm.seed);
                let (lo, hi) = self.delay_range;
                (0..n).map(|_| rng.random_range(lo..=hi)).collect()
            }
        };
        let cfg = FfdnConfig::new(
            delays,
            self.input_gains.clone().unwrap_or_else(|| vec![1.0; n]),
            self.output_gains.clone().unwrap_or_else(|| vec![1.0; n]),
            self.direct_gain,
            ffm,
            self.sample_rate,
        )?;
        let need_t60 = || {
            self.t60
                .ok_or_else(|| Error::Config("this attenuation needs `t60`".into()))
        };
        let spec = match self.attenuation {
            AttenuationKind::Lossless => AttenuationSpec::Lossless,
            AttenuationKind::Broadband => AttenuationSpec::broadband_t60(need_t60()?, self.sample_rate)?,
            AttenuationKind::Lumped => {
                let rt_curve = match &self.t60_curve {
                    Some(points) => points
                        .iter()
                        .map(|&(hz, t)| (std::f64::consts::TAU * hz / self.sample_rate, t))
                        .collect(),
                    None => {
                        let t = need_t60()?;
                        vec![(0.0, t), (std::f64::consts::PI, t)]
                    }
                };
                AttenuationSpec::FrequencyDependent {
                    rt_curve,
                    filter_order: self.filter_order,
                }
            }
        };
        Ok((cfg, spec))
    }
}

impl FromStr for JobConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        let mut family_seen = false;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse { line, message };
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected `key = value`, got `{content}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(parse_err(format!("`{key}` given twice")));
            }
            family_seen |= key == "family";
            cfg.set(key, value).map_err(parse_err)?;
        }
        if !family_seen {
            return Err(Error::Config("the config needs a `family`".into()));
        }
        Ok(cfg)
    }
}
