//! Subcommand implementations.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ffdn::density::{self, McFamily, McOptions};
use ffdn::engine::{self, FfdnConfig};
use ffdn::ffm::{self, FfmCascade, FfmFamily, FfmSpec};
use ffdn::modal::{self, EaiOptions, GcpContext, SweepMode};
use ffdn::polymat::LOSSLESS_TOL;
use serde_json::json;

use crate::config::{EngineKind, JobConfig};
use crate::{Engine, Source};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] ffdn::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("WAV: {0}")]
    Wav(#[from] hound::Error),
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    /// 1 for numerical failures, 2 for everything the user can fix in the
    /// invocation or the job file.
    pub fn exit_code(&self) -> u8 {
        use ffdn::Error as E;
        match self {
            Self::Core(
                E::Unstable { .. }
                | E::NotConverged { .. }
                | E::Singular { .. }
                | E::IllConditioned { .. }
                | E::NotParaunitary { .. },
            ) => 1,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::Io {
            path: "stdout".into(),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn load_job(path: &Path) -> Result<JobConfig> {
    Ok(read(path)?.parse()?)
}

fn load_spec(source: &Source) -> Result<FfmSpec> {
    match (&source.config, &source.spec) {
        (Some(path), _) => Ok(load_job(path)?.ffm),
        (None, Some(s)) => Ok(s.parse()?),
        (None, None) => Err(CliError::Usage("give --config or --spec".into())),
    }
}

/// Families whose mixing stages are Hadamard transforms.
fn uses_hadamard(spec: &FfmSpec) -> bool {
    matches!(
        spec.family,
        FfmFamily::Hadamard | FfmFamily::Vfm | FfmFamily::HadamardScalar
    )
}

pub fn gen(source: &Source, out: Option<&Path>) -> Result<()> {
    let spec = load_spec(source)?;
    let cascade = spec.build()?;
    let matrix = cascade.expand();
    let report = matrix.check_paraunitary(LOSSLESS_TOL);
    let summary = format!(
        "# {spec}\n# order {}\n# pulses per filter {}\n# paraunitary {} (max deviation {:e})\n",
        matrix.order(),
        ffm::pulses_per_filter(&cascade),
        if report.paraunitary { "yes" } else { "no" },
        report.max_deviation,
    );
    match out {
        Some(path) => {
            write(path, &format!("{summary}{matrix}"))?;
            emit(&summary)
        }
        None => emit(&format!("{summary}{matrix}")),
    }
}

fn write_wav(path: &Path, samples: &[f64], sample_rate: f64) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: sample_rate.round() as u32,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        w.write_sample(s as f32)?;
    }
    w.finalize()?;
    Ok(())
}

fn read_wav(path: &Path) -> Result<(Vec<f64>, f64)> {
    let mut r = hound::WavReader::open(path)?;
    let spec = r.spec();
    let channels = spec.channels as usize;
    let all: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => r
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let scale = 2f64.powi(spec.bits_per_sample as i32 - 1);
            r.samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()?
        }
    };
    // First channel only.
    Ok((all.into_iter().step_by(channels).collect(), spec.sample_rate as f64))
}

fn render_job(
    job: &JobConfig,
    cfg: &FfdnConfig,
    att: &engine::Attenuation,
    engine_kind: EngineKind,
    length: usize,
) -> Result<Vec<f64>> {
    Ok(match engine_kind {
        EngineKind::Cascade => engine::render_cascade(cfg, att, length)?,
        EngineKind::Fast => engine::render_fast_convolution(cfg, att, length, job.block)?,
    })
}

pub fn render(
    config: &Path,
    out: Option<PathBuf>,
    csv_path: Option<PathBuf>,
    engine_kind: Option<Engine>,
    length: Option<usize>,
) -> Result<()> {
    let job = load_job(config)?;
    let out = out
        .or_else(|| job.output.clone())
        .ok_or_else(|| CliError::Usage("missing output path (--out or `output` in the config)".into()))?;
    let (cfg, spec) = job.network()?;
    let att = engine::design_attenuation(&cfg, &spec)?;
    let kind = match engine_kind {
        Some(Engine::Cascade) => EngineKind::Cascade,
        Some(Engine::Fast) => EngineKind::Fast,
        None => job.engine,
    };
    let length = length.unwrap_or_else(|| job.render_length());
    let h = render_job(&job, &cfg, &att, kind, length)?;
    write_wav(&out, &h, cfg.sample_rate)?;
    if let Some(path) = csv_path.or(job.csv.clone()) {
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["n", "h"])?;
        for (n, v) in h.iter().enumerate() {
            w.write_record([n.to_string(), format!("{v:?}")])?;
        }
        w.flush().map_err(|source| CliError::Io { path, source })?;
    }
    println!("rendered {length} samples to {}", out.display());
    Ok(())
}

pub struct ModalArgs {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub hist: Option<PathBuf>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub jacobi: bool,
    pub cap: Option<usize>,
}

fn fmt_t60(t: f64) -> String {
    if t.is_finite() {
        format!("{t:?}")
    } else {
        "inf".into()
    }
}

pub fn modal(args: &ModalArgs) -> Result<()> {
    let job = load_job(&args.config)?;
    let (cfg, spec) = job.network()?;
    let att = engine::design_attenuation(&cfg, &spec)?;
    let ctx = GcpContext::new(&cfg, &att)?;
    let cap = args.cap.unwrap_or(job.modal_cap);
    if ctx.total_order() > cap {
        return Err(CliError::Usage(format!(
            "the system has {} poles, above the cap of {cap}; raise `modal_cap` or --cap",
            ctx.total_order()
        )));
    }
    let opts = EaiOptions {
        max_iter: args.max_iter.unwrap_or(job.max_iter),
        tol: args.tol.unwrap_or(job.tol),
        mode: if args.jacobi {
            SweepMode::Jacobi
        } else {
            SweepMode::GaussSeidel
        },
    };
    let mut md = modal::eai_solve(&ctx, &opts)?;
    md.ensure_converged()?;
    md.residues = modal::residues(&ctx, &md.poles)?;
    let fs = cfg.sample_rate;
    let t60_of = |m: f64| {
        if m < 1.0 {
            -60.0 / (fs * 20.0 * m.log10())
        } else {
            f64::INFINITY
        }
    };
    if let Some(path) = &args.out {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["re", "im", "magnitude", "t60", "residue_re", "residue_im"])?;
        for (p, r) in md.poles.iter().zip(&md.residues) {
            w.write_record([
                format!("{:?}", p.re),
                format!("{:?}", p.im),
                format!("{:?}", p.norm()),
                fmt_t60(t60_of(p.norm())),
                format!("{:?}", r.re),
                format!("{:?}", r.im),
            ])?;
        }
        w.flush().map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
    }
    let dist = modal::decay_distribution(&md, fs, job.t60);
    if let Some(path) = &args.hist {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t60", "density"])?;
        for (t, d) in &dist.histogram {
            w.write_record([format!("{t:?}"), format!("{d:?}")])?;
        }
        w.flush().map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
    }
    let unit_dev = md.poles.iter().map(|p| (p.norm() - 1.0).abs()).fold(0.0, f64::max);
    println!("poles {}", md.poles.len());
    println!("sweeps {}", md.iterations);
    println!("max | |pole| - 1 | {unit_dev:e}");
    println!("non-decaying modes {}", dist.non_decaying);
    if let Some(dev) = dist.max_relative_deviation {
        println!("max T60 deviation {:.4}%", 100.0 * dev);
    }
    Ok(())
}

pub fn cost(source: &Source) -> Result<()> {
    let spec = load_spec(source)?;
    let cascade: FfmCascade = spec.build()?;
    let ops = ffm::operation_count(&cascade, uses_hadamard(&spec))?;
    println!("adds mults delay_rw pulses");
    println!(
        "{} {} {} {}",
        ops.adds,
        ops.mults,
        ops.delay_rw,
        ffm::pulses_per_filter(&cascade)
    );
    Ok(())
}

pub fn density(input: &Path, window_ms: f64, threshold: f64, out: Option<&Path>) -> Result<()> {
    let is_wav = input.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    let (ir, fs) = if is_wav {
        read_wav(input)?
    } else {
        let job = load_job(input)?;
        let (cfg, spec) = job.network()?;
        let att = engine::design_attenuation(&cfg, &spec)?;
        let h = render_job(&job, &cfg, &att, job.engine, job.render_length())?;
        (h, cfg.sample_rate)
    };
    if window_ms.is_nan() || window_ms <= 0.0 {
        return Err(CliError::Usage("--window-ms must be positive".into()));
    }
    let window = (window_ms * 1e-3 * fs).round() as usize;
    let profile = density::echo_density(&ir, window)?;
    if let Some(path) = out {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["n", "density"])?;
        for (n, d) in profile.density.iter().enumerate() {
            w.write_record([n.to_string(), format!("{d:?}")])?;
        }
        w.flush().map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    }
    match density::mixing_time(&profile, threshold) {
        Some(n) => println!("mixing time {n} samples ({:.4} s)", n as f64 / fs),
        None => println!("mixing time none (no crossing of {threshold})"),
    }
    Ok(())
}

pub fn mc(labels: Option<Vec<String>>, trials: usize, seed: u64, max_seconds: f64, out: Option<&Path>) -> Result<()> {
    let families: Vec<McFamily> = match labels {
        Some(l) => l
            .iter()
            .map(|s| McFamily::by_label(s.trim()))
            .collect::<ffdn::Result<_>>()?,
        None => density::default_families(),
    };
    let defaults = McOptions::default();
    let opts = McOptions {
        trials,
        seed,
        max_length: (max_seconds * defaults.sample_rate) as usize,
        ..defaults
    };
    let summary = density::monte_carlo_mixing(&families, &opts)?;
    for s in &summary {
        emit(&format!(
            "{} median={:.4} q1={:.4} q3={:.4} censored={}\n",
            s.label, s.median, s.lower_quartile, s.upper_quartile, s.censored
        ))?;
    }
    if let Some(path) = out {
        let doc = json!({
            "baseline": "SFM-4",
            "trials": trials,
            "seed": seed,
            "families": summary.iter().map(|s| json!({
                "label": s.label,
                "median": s.median,
                "lower_quartile": s.lower_quartile,
                "upper_quartile": s.upper_quartile,
                "censored": s.censored,
            })).collect::<Vec<_>>(),
        });
        write(
            path,
            &serde_json::to_string_pretty(&doc).expect("plain values serialise"),
        )?;
    }
    Ok(())
}
