//! `magsim`: generate synthetic multimodal graphs, train models, and run the
//! noise-sweep, gradient-tracking, corruption and theory experiments.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use magsim_core::experiments::{
    corruption_probe, sweep_noise, track_gradients, train, write_csv, write_json, GradVariant,
};
use magsim_core::graph::{self, census, DataError, Mag};
use magsim_core::{theory, Error};
use serde::Serialize;

use config::RunConfig;

const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERIC: u8 = 4;
const EXIT_THEORY: u8 = 5;

#[derive(Parser, Debug)]
#[command(name = "magsim", version, about = "Multimodal graph learning laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration (synthetic, train, experiment sections).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Base seed; overrides every seed in the config.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and print its SNR census.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Output dataset directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train one model and write its report as JSON.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Report JSON path.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Accuracy of each model kind across injected-noise scales.
    SweepNoise {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// CSV output path; a manifest is written next to it.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Comma-separated noise scales; overrides the config.
        #[arg(long, value_delimiter = ',', value_name = "S,S,...")]
        scales: Option<Vec<f64>>,
        /// Worker threads for independent cells.
        #[arg(long, default_value_t = 1, value_name = "N")]
        jobs: usize,
    },
    /// Per-epoch branch gradient norms for the standard variant set.
    TrackGrads {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        #[arg(long, default_value_t = 1, value_name = "N")]
        jobs: usize,
    },
    /// Clean vs dominant-modality-corrupted test macro-F1.
    Corrupt {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Modality to corrupt; overrides the config.
        #[arg(long, value_name = "NAME")]
        dominant: Option<String>,
        #[arg(long, default_value_t = 1, value_name = "N")]
        jobs: usize,
    },
    /// Check the closed-form SNR and gradient-starvation properties.
    Theory {
        #[arg(long, default_value_t = 0, value_name = "U64")]
        seed: u64,
        /// Optional JSON file with the outcome of each property.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
}

/// A failure carrying its process exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Data(d) => match d {
            DataError::MalformedMeta { .. } | DataError::FeatureSize { .. } | DataError::MalformedEdges { .. } => EXIT_IO,
            _ => EXIT_CONFIG,
        },
        Error::Io { .. } | Error::Csv(_) | Error::Checkpoint { .. } => EXIT_IO,
        _ => EXIT_NUMERIC,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::new(exit_code(&e), e)
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn resolve(common: &Common) -> Outcome<RunConfig> {
    let cfg = RunConfig::load(common.config.as_deref())
        .map_err(|e| {
            let io = e.root_cause().downcast_ref::<std::io::Error>().is_some();
            Failure::new(if io { EXIT_IO } else { EXIT_CONFIG }, e)
        })?
        .with_seed(common.seed);
    cfg.train.validate()?;
    eprintln!("resolved config: {}", serde_json::to_string(&cfg).expect("config serializes"));
    Ok(cfg)
}

/// Any failure to read a dataset is an I/O failure.
fn load(dir: &Path) -> Outcome<Mag> {
    graph::load(dir).map_err(|e| Failure::new(EXIT_IO, e))
}

#[derive(Serialize)]
struct Manifest<'a, T: Serialize> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config: &'a RunConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    annotations: Option<T>,
}

fn write_manifest<T: Serialize>(out: &Path, command: &str, cfg: &RunConfig, annotations: Option<T>) -> Outcome {
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.train.seed,
        config: cfg,
        annotations,
    };
    write_json(&out.with_extension("manifest.json"), &manifest)?;
    Ok(())
}

fn gen(common: &Common, out: &Path) -> Outcome {
    let cfg = resolve(common)?;
    let mag = graph::generate(&cfg.synthetic).map_err(Error::from)?;
    graph::save(&mag, out)?;
    for c in census(&mag, cfg.train.alpha).map_err(Error::from)? {
        println!(
            "{}: beta_hat {:.4} sigma_n_sq {:.4} snr_int {:.4} tau {:.4} (alpha {})",
            c.modality, c.beta_hat, c.sigma_n_sq, c.snr_int, c.tau, c.alpha
        );
    }
    Ok(())
}

fn train_cmd(common: &Common, data: &Path, out: &Path) -> Outcome {
    let cfg = resolve(common)?;
    let mag = load(data)?;
    let report = train(&mag, &cfg.train)?;
    write_json(out, &report)?;
    println!(
        "{} {:.4} {:.4} {} {:.2}",
        report.kind,
        report.test_acc,
        report.test_f1,
        report.epochs_trained(),
        report.seconds
    );
    Ok(())
}

fn sweep_cmd(common: &Common, data: &Path, out: &Path, scales: Option<&[f64]>, jobs: usize) -> Outcome {
    let mut cfg = resolve(common)?;
    if let Some(s) = scales {
        cfg.experiment.scales = s.to_vec();
    }
    let mag = load(data)?;
    let result = sweep_noise(
        &mag,
        &cfg.experiment.scales,
        &cfg.experiment.sweep_kinds,
        &cfg.seeds(),
        &cfg.train,
        jobs,
    )?;
    write_csv(out, &result.rows)?;
    write_manifest(out, "sweep-noise", &cfg, Some(&result.thresholds))?;
    for t in &result.thresholds {
        println!(
            "scale {} {}: sigma_eps_sq {:.4} tau {:.4} {}",
            t.scale,
            t.modality,
            t.sigma_eps_sq,
            t.tau,
            if t.degraded { "aggregation lowers SNR" } else { "aggregation raises SNR" }
        );
    }
    println!("{} rows -> {}", result.rows.len(), out.display());
    Ok(())
}

fn track_cmd(common: &Common, data: &Path, out: &Path, jobs: usize) -> Outcome {
    let cfg = resolve(common)?;
    let mag = load(data)?;
    let rows = track_gradients(&mag, &GradVariant::standard(cfg.experiment.lambda_aux), &cfg.train, jobs)?;
    write_csv(out, &rows)?;
    write_manifest::<()>(out, "track-grads", &cfg, None)?;
    println!("{} rows -> {}", rows.len(), out.display());
    Ok(())
}

fn corrupt_cmd(common: &Common, data: &Path, out: &Path, dominant: Option<&str>, jobs: usize) -> Outcome {
    let mut cfg = resolve(common)?;
    if let Some(d) = dominant {
        cfg.experiment.dominant = d.to_string();
    }
    let mag = load(data)?;
    let rows = corruption_probe(
        &mag,
        &cfg.experiment.probe_kinds,
        &cfg.experiment.dominant,
        &cfg.seeds(),
        &cfg.train,
        jobs,
    )?;
    write_csv(out, &rows)?;
    write_manifest::<()>(out, "corrupt", &cfg, None)?;
    for r in &rows {
        println!("{} seed {}: F {:.4} D {:.4} H {:.4}", r.kind, r.seed, r.f, r.d, r.h);
    }
    Ok(())
}

fn theory_cmd(seed: u64, out: Option<&Path>) -> Outcome {
    let outcomes = theory::validate_all(seed);
    for o in &outcomes {
        println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
    }
    let passed = outcomes.iter().filter(|o| o.passed).count();
    println!("{passed}/{} properties PASS", outcomes.len());
    if let Some(path) = out {
        write_json(path, &outcomes)?;
    }
    if passed == outcomes.len() {
        Ok(())
    } else {
        Err(Failure::new(
            EXIT_THEORY,
            anyhow::anyhow!("{} theory properties failed", outcomes.len() - passed),
        ))
    }
}

fn run(cli: Cli) -> Outcome {
    match &cli.command {
        Command::Gen { common, out } => gen(common, out),
        Command::Train { common, data, out } => train_cmd(common, data, out),
        Command::SweepNoise {
            common,
            data,
            out,
            scales,
            jobs,
        } => sweep_cmd(common, data, out, scales.as_deref(), *jobs),
        Command::TrackGrads { common, data, out, jobs } => track_cmd(common, data, out, *jobs),
        Command::Corrupt {
            common,
            data,
            out,
            dominant,
            jobs,
        } => corrupt_cmd(common, data, out, dominant.as_deref(), *jobs),
        Command::Theory { seed, out } => theory_cmd(*seed, out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MAGSIM_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
