use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use specquant::fp4::{dequantize, quantize_nvfp4, zero_fraction, RngStream};
use specquant::harness::{
    analyze_tensor, compare_regimes, rank_sweep, run_experiment, ExperimentConfig, Regime,
};
use specquant::io::{emit_report, load_config, load_matrix_auto, write_quantized, Report, ReportFormat, Series};
use specquant::spectral::SketchPlan;
use specquant::{Error, RoundingMode};

const EXIT_DIVERGED: u8 = 2;
const EXIT_CONFIG: u8 = 3;

#[derive(Parser)]
#[command(name = "specquant", version, about = "Spectral FP4 quantization experiments")]
struct Cli {
    /// Overrides every seed taken from configs or defaults.
    #[arg(long, global = true, env = "SPECQUANT_SEED")]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Write the report here instead of stdout.
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum QuantMode {
    Nvfp4,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Rounding {
    Rtn,
    Sr,
}

impl From<Rounding> for RoundingMode {
    fn from(r: Rounding) -> Self {
        match r {
            Rounding::Rtn => RoundingMode::NearestEven,
            Rounding::Sr => RoundingMode::StochasticRound,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Spectrum, elbow and element distributions of a matrix.
    Analyze {
        /// Matrix file (binary, or `.csv`).
        matrix: PathBuf,
        #[arg(long, default_value_t = SketchPlan::DEFAULT_RANK_FRACTION)]
        rank_frac: f64,
    },
    /// Block-quantize a matrix and report the error.
    Quantize {
        matrix: PathBuf,
        #[arg(long, value_enum, default_value_t = QuantMode::Nvfp4)]
        mode: QuantMode,
        #[arg(long, value_enum, default_value_t = Rounding::Sr)]
        rounding: Rounding,
        #[arg(long, default_value_t = 16)]
        block_size: usize,
        /// Also write the quantized tensor to this file.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Train one configuration (TOML or JSON).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the decomposed regime at several rank fractions.
    SweepRank {
        /// Defaults to the standard benchmark.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.015, 0.03, 0.0625, 0.125])]
        fractions: Vec<f64>,
        #[arg(long, default_value_t = 0.02)]
        tolerance: f64,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the same configuration under every regime.
    CompareRegimes {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
}

#[derive(Serialize)]
struct QuantizeParams {
    mode: QuantMode,
    rounding: Rounding,
    block_size: usize,
    seed: u64,
}

#[derive(Serialize)]
struct QuantizationReport {
    rows: usize,
    cols: usize,
    block_size: usize,
    rounding: RoundingMode,
    relative_error: f64,
    zero_fraction: f64,
    scales: Vec<f64>,
}

impl Report for QuantizationReport {
    fn kind(&self) -> &'static str {
        "quantization"
    }

    fn visit_floats(&self, f: &mut dyn FnMut(&str, f64)) {
        f("relative_error", self.relative_error);
        f("zero_fraction", self.zero_fraction);
        specquant::io::visit_slice(f, "scales", &self.scales);
    }

    fn series(&self) -> Option<Series> {
        Some(
            Series::new()
                .with("block", (0..self.scales.len()).map(|i| i as f64).collect())
                .with("scale", self.scales.clone()),
        )
    }
}

/// Outcome of a command that completed.
enum Status {
    Ok,
    Diverged,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Diverged) => ExitCode::from(EXIT_DIVERGED),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_)) => EXIT_CONFIG,
        Some(Error::Diverged { .. } | Error::NonFiniteGradient { .. }) => EXIT_DIVERGED,
        _ => 1,
    }
}

fn run(cli: &Cli) -> Result<Status> {
    let format = match cli.format {
        Format::Json => ReportFormat::Json,
        Format::Csv => ReportFormat::Csv,
    };
    let emit = |report: &dyn Fn(ReportFormat) -> specquant::Result<Vec<u8>>| -> Result<()> {
        write_out(cli.output.as_deref(), &report(format)?)
    };
    match &cli.command {
        Command::Analyze { matrix, rank_frac } => {
            let m = load_matrix_auto(matrix).with_context(|| format!("reading {}", matrix.display()))?;
            if !(*rank_frac > 0.0 && *rank_frac <= 0.5) {
                return Err(Error::Config(format!("rank fraction {rank_frac} outside (0, 0.5]")).into());
            }
            let k = SketchPlan::rank_for(m.rows(), m.cols(), *rank_frac).min(m.rows().min(m.cols()));
            let analysis = analyze_tensor(&m, k)?;
            emit(&|f| emit_report(&analysis, &(matrix, rank_frac), f))?;
            Ok(Status::Ok)
        }
        Command::Quantize { matrix, mode, rounding, block_size, save } => {
            let m = load_matrix_auto(matrix).with_context(|| format!("reading {}", matrix.display()))?;
            let params = QuantizeParams {
                mode: *mode,
                rounding: *rounding,
                block_size: *block_size,
                seed: cli.seed.unwrap_or(0),
            };
            let q = quantize_nvfp4(&m, *block_size, (*rounding).into(), RngStream::new(params.seed, 0))?;
            if let Some(path) = save {
                write_quantized(path, &q).with_context(|| format!("writing {}", path.display()))?;
            }
            let report = QuantizationReport {
                rows: m.rows(),
                cols: m.cols(),
                block_size: *block_size,
                rounding: q.mode(),
                relative_error: dequantize(&q).relative_error(&m)?,
                zero_fraction: zero_fraction(&m, &q)?,
                scales: q.scales().to_vec(),
            };
            emit(&|f| emit_report(&report, &params, f))?;
            Ok(Status::Ok)
        }
        Command::Train { config, steps } => {
            let cfg = experiment(cli, Some(config), *steps)?;
            log::info!("training {} for {} steps", cfg.regime.label(), cfg.steps);
            let report = run_experiment(&cfg)?;
            emit(&|f| emit_report(&report, &cfg, f))?;
            Ok(if report.diverged_at.is_some() { Status::Diverged } else { Status::Ok })
        }
        Command::SweepRank { config, fractions, tolerance, steps } => {
            let cfg = experiment(cli, config.as_ref(), *steps)?;
            let sweep = rank_sweep(&cfg, fractions, *tolerance)?;
            emit(&|f| emit_report(&sweep, &cfg, f))?;
            Ok(if sweep.runs.iter().any(|r| r.diverged_at.is_some()) { Status::Diverged } else { Status::Ok })
        }
        Command::CompareRegimes { config, steps } => {
            let cfg = experiment(cli, config.as_ref(), *steps)?;
            let cmp = compare_regimes(&cfg)?;
            emit(&|f| emit_report(&cmp, &cfg, f))?;
            Ok(if cmp.runs.iter().any(|r| r.diverged_at.is_some()) { Status::Diverged } else { Status::Ok })
        }
    }
}

/// Loads a config (or the standard benchmark) and applies command-line overrides.
fn experiment(cli: &Cli, path: Option<&PathBuf>, steps: Option<usize>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => load_config::<ExperimentConfig>(p)?,
        None => ExperimentConfig::standard(Regime::Fp4Metis, 0),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(steps) = steps {
        cfg = cfg.with_steps(steps);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_out(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => fs::write(p, bytes).with_context(|| format!("writing {}", p.display())),
        None => std::io::stdout().write_all(bytes).context("writing stdout"),
    }
}
