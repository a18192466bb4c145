//! `demorecon`: build and evaluate fine-grained instruction-variant
//! datasets against a pluggable chat-completion backend.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or parse error,
//! 3 provider error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};

use demorecon_core::config::load_config;
use demorecon_core::records::ResponseMode;
use demorecon_core::runner::{ErrorClass, Overrides, Runner, RunnerError, StageKind, StageReport};

#[derive(Parser)]
#[command(name = "demorecon", version, about = "Fine-grained instruction-variant dataset builder")]
struct Cli {
    /// Path to the TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory (overrides paths.run_dir).
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Seed candidate JSONL (overrides paths.seeds).
    #[arg(long, global = true)]
    seeds: Option<PathBuf>,
    /// Replay fixture; forces every provider into replay mode.
    #[arg(long, global = true)]
    replay: Option<PathBuf>,
    /// Record every provider exchange into this fixture file.
    #[arg(long, global = true)]
    record: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum CollectMode {
    Direct,
    Reference,
}

impl From<CollectMode> for ResponseMode {
    fn from(mode: CollectMode) -> Self {
        match mode {
            CollectMode::Direct => ResponseMode::Direct,
            CollectMode::Reference => ResponseMode::Reference,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PairMode {
    A,
    R,
}

impl From<PairMode> for ResponseMode {
    fn from(mode: PairMode) -> Self {
        match mode {
            PairMode::A => ResponseMode::Direct,
            PairMode::R => ResponseMode::Reference,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportKind {
    Sft,
    Preference,
}

#[derive(Subcommand)]
enum Command {
    /// Judge seed candidates and keep the self-contained ones.
    FilterSeeds,
    /// Decompose kept seeds into facts and sub-instructions.
    Decompose,
    /// Modify one sub-instruction at a time and reconstruct variants.
    Augment,
    /// Collect model responses for seeds and variants.
    Collect {
        #[arg(long, value_enum)]
        mode: CollectMode,
    },
    /// Build preference pairs from a response set.
    BuildPairs {
        #[arg(long, value_enum)]
        mode: PairMode,
    },
    /// Build the eval set from seeds with the configured sub count.
    BuildEval,
    /// Build the non-compliance detection set.
    BuildDet,
    /// Embedding-based metrics.
    Metrics {
        #[command(subcommand)]
        command: MetricsCommand,
    },
    /// Corpus statistics (counts and token averages).
    Stats,
    /// Judge candidate responses on the eval set.
    Evaluate,
    /// Score the candidate on the detection set.
    Detect,
    /// Assemble report.json and report.md.
    Report,
    /// Export training data (SFT or preference rows).
    Export {
        #[arg(long, value_enum)]
        kind: ExportKind,
        #[arg(long, value_enum)]
        mode: PairMode,
        /// Output file (defaults to a name in the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// All data stages in order, resuming where possible.
    RunAll,
}

#[derive(Subcommand)]
enum MetricsCommand {
    /// Nearest-neighbor distance variance of response embeddings.
    Uniformity {
        #[arg(long, value_enum, default_value = "direct")]
        mode: CollectMode,
    },
    /// Embed responses and export the vectors as CSV.
    Embed {
        #[arg(long, value_enum, default_value = "direct")]
        mode: CollectMode,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
        Err(CliError::Runner(e)) => {
            eprintln!("error: {e}");
            match e.class() {
                ErrorClass::Data => ExitCode::from(2),
                ErrorClass::Provider => ExitCode::from(3),
            }
        }
    }
}

enum CliError {
    Usage(String),
    Runner(RunnerError),
}

impl From<RunnerError> for CliError {
    fn from(e: RunnerError) -> Self {
        CliError::Runner(e)
    }
}

fn print_report(report: &StageReport) {
    if report.skipped {
        println!("stage {}: up to date", report.stage);
    } else {
        let counts: Vec<String> = report
            .counts
            .iter()
            .map(|(name, value)| format!("{name}={value}"))
            .collect();
        println!("stage {}: done ({})", report.stage, counts.join(", "));
    }
    for output in &report.outputs {
        println!("wrote {}", output.display());
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config_path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage("--config <path> is required".into()))?;
    let config = load_config(config_path).map_err(RunnerError::Config)?;
    let overrides = Overrides {
        run_dir: cli.run_dir.clone(),
        seeds: cli.seeds.clone(),
        replay: cli.replay.clone(),
        record: cli.record.clone(),
    };
    let mut runner = Runner::new(config, overrides)?;

    match &cli.command {
        Command::FilterSeeds => print_report(&runner.run_stage(StageKind::FilterSeeds)?),
        Command::Decompose => print_report(&runner.run_stage(StageKind::Decompose)?),
        Command::Augment => print_report(&runner.run_stage(StageKind::Augment)?),
        Command::Collect { mode } => {
            let stage = match mode {
                CollectMode::Direct => StageKind::CollectDirect,
                CollectMode::Reference => StageKind::CollectReference,
            };
            print_report(&runner.run_stage(stage)?);
        }
        Command::BuildPairs { mode } => {
            let stage = match mode {
                PairMode::A => StageKind::BuildPairsA,
                PairMode::R => StageKind::BuildPairsR,
            };
            print_report(&runner.run_stage(stage)?);
        }
        Command::BuildEval => print_report(&runner.run_stage(StageKind::BuildEval)?),
        Command::BuildDet => print_report(&runner.run_stage(StageKind::BuildDet)?),
        Command::Metrics { command } => match command {
            MetricsCommand::Uniformity { mode } => {
                let (path, report) = runner.uniformity((*mode).into())?;
                println!(
                    "uniformity: u={} mu={} over {} distances",
                    report.u,
                    report.mu,
                    report.distances.len()
                );
                println!("wrote {}", path.display());
            }
            MetricsCommand::Embed { mode, out } => {
                let out = out
                    .clone()
                    .unwrap_or_else(|| runner.run_dir().join("embeddings.csv"));
                let rows = runner.export_embeddings((*mode).into(), &out)?;
                println!("embedded {rows} responses");
                println!("wrote {}", out.display());
            }
        },
        Command::Stats => {
            print_report(&runner.run_stage(StageKind::Stats)?);
            let stats = runner.load_stats()?;
            print!("{}", stats.render_table());
        }
        Command::Evaluate => print_report(&runner.run_stage(StageKind::Evaluate)?),
        Command::Detect => print_report(&runner.run_stage(StageKind::Detect)?),
        Command::Report => {
            for path in runner.report()? {
                println!("wrote {}", path.display());
            }
        }
        Command::Export { kind, mode, out } => {
            let default_name = match (kind, mode) {
                (ExportKind::Sft, PairMode::A) => "export_sft_a.jsonl",
                (ExportKind::Sft, PairMode::R) => "export_sft_r.jsonl",
                (ExportKind::Preference, PairMode::A) => "export_pref_a.jsonl",
                (ExportKind::Preference, PairMode::R) => "export_pref_r.jsonl",
            };
            let out = out
                .clone()
                .unwrap_or_else(|| runner.run_dir().join(default_name));
            let rows = match kind {
                ExportKind::Sft => runner.export_sft((*mode).into(), &out)?,
                ExportKind::Preference => runner.export_preferences((*mode).into(), &out)?,
            };
            println!("exported {rows} rows");
            println!("wrote {}", out.display());
        }
        Command::RunAll => {
            for report in runner.run_all()? {
                print_report(&report);
            }
        }
    }

    if let Some((path, written)) = runner.finish()? {
        println!("recorded {written} fixture entries");
        println!("wrote {}", path.display());
    }
    Ok(())
}
