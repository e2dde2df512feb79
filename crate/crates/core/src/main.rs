//! `kdlab` command line: each protocol stage as a subcommand, plus
//! `run-all` and `resume`.
//!
//! Exit codes: 0 success, 2 configuration error, 3 stage failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use kdlab::harness::tables::{DIRECT, KD_A, KD_B};
use kdlab::harness::{resume, run_protocol, ExperimentLedger, Protocol, RunConfig, Stage, LEDGER_FILE};

#[derive(Parser)]
#[command(name = "kdlab", version, about = "Distillation and INT8 quantization lab for grid detectors")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the worker thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and split manifest.
    GenData,
    TrainTeacher,
    TrainStudent {
        #[arg(long, value_enum)]
        mode: Mode,
    },
    /// Collect activation statistics on the calibration split.
    Calibrate,
    /// Convert every trained model to INT8.
    Quantize,
    Evaluate {
        #[arg(long, value_enum)]
        precision: Precision,
    },
    /// Run every stage from scratch.
    RunAll,
    /// Regenerate tables and the summary from stored reports.
    Report,
    /// Print the resolved configuration as TOML.
    ShowConfig {
        /// Start from the smoke preset instead of the defaults.
        #[arg(long)]
        smoke: bool,
    },
    /// Continue a run, skipping stages whose artifacts are intact.
    Resume {
        /// Ledger to resume; defaults to `<out>/ledger.json`.
        #[arg(long)]
        ledger: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Direct,
    KdA,
    KdB,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    Fp32,
    Int8,
}

fn load_config(c: &Common) -> kdlab::Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    if let Some(t) = c.threads {
        cfg.threads = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_summary(ledger: &ExperimentLedger) {
    println!("{} ({:.1}s)", ledger.run_id, ledger.total_secs());
    for (k, m) in &ledger.metrics {
        println!(
            "  {k:<24} mAP50 {:.4}  mAP50-95 {:.4}  P {:.4}  R {:.4}  FAR {:.4}",
            m.map50, m.map50_95, m.precision, m.recall, m.far
        );
    }
}

fn run(cli: Cli) -> kdlab::Result<()> {
    let verbose = !cli.common.quiet;
    let stage = match &cli.command {
        Command::GenData => Stage::GenData,
        Command::TrainTeacher => Stage::TrainTeacher,
        Command::TrainStudent { mode } => {
            let id = match mode {
                Mode::Direct => DIRECT,
                Mode::KdA => KD_A,
                Mode::KdB => KD_B,
            };
            Stage::training(id).expect("student stage")
        }
        Command::Calibrate => Stage::Calibrate,
        Command::Quantize => Stage::Quantize,
        Command::Evaluate { precision: Precision::Fp32 } => Stage::EvaluateFp32,
        Command::Evaluate { precision: Precision::Int8 } => Stage::EvaluateInt8,
        Command::Report => Stage::Report,
        Command::ShowConfig { smoke } => {
            let mut cfg = load_config(&cli.common)?;
            if *smoke && cli.common.config.is_none() {
                let base = RunConfig::smoke();
                cfg = RunConfig {
                    seed: cfg.seed,
                    threads: cfg.threads,
                    out_dir: cli.common.out.clone().unwrap_or(base.out_dir.clone()),
                    ..base
                };
            }
            print!("{}", cfg.to_toml());
            return Ok(());
        }
        Command::RunAll => {
            let ledger = run_protocol(load_config(&cli.common)?, verbose)?;
            print_summary(&ledger);
            return Ok(());
        }
        Command::Resume { ledger } => {
            let path = match ledger {
                Some(p) => p.clone(),
                None => load_config(&cli.common)?.out_dir.join(LEDGER_FILE),
            };
            let config = match &cli.common.config {
                Some(_) => Some(load_config(&cli.common)?),
                None => None,
            };
            let ledger = resume(&path, config, verbose)?;
            print_summary(&ledger);
            return Ok(());
        }
    };
    let mut p = Protocol::open(load_config(&cli.common)?)?;
    p.verbose = verbose;
    p.run_stage(stage)?;
    println!("{stage} complete in {}", p.dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
