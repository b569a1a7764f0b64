//! `cfka`: runs the experiment pipeline from a JSON config.
//!
//! Exit codes: 0 on success, 1 when the config or arguments are invalid,
//! 2 when a stage fails at runtime.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cfka_core::experiment::{
    emit_reports, prepare, run_experiment, stage_cpt, stage_data, stage_eval, stage_pretrain, stage_probe, stage_replay,
    Artifacts, ExperimentConfig, GateStatus, RunLog,
};
use cfka_core::Error;

#[derive(Parser)]
#[command(name = "cfka", version, about = "Continual factual knowledge acquisition on a one-layer toy transformer")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Artifact directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Suppress progress lines on stderr.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args, Clone)]
struct CellArgs {
    /// Run a single sweep cell.
    #[arg(long)]
    cell: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the world and the four corpus splits.
    GenData(Common),
    /// Pre-train from scratch and keep probe checkpoints.
    Pretrain(Common),
    /// DI scatter, dynamics probes and plateau KL over the checkpoints.
    Probe(Common),
    /// Build replay corpora for the replay cells.
    ReplayGen {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        cell: CellArgs,
    },
    /// Run the continual pre-training sweep.
    Cpt {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        cell: CellArgs,
    },
    /// Evaluate snapshots on every split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Evaluate only this parameter snapshot.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Build the grid, scatter, curves and gate summary from a finished run.
    Report {
        /// Artifact directory of a completed run.
        #[arg(long)]
        out: PathBuf,
    },
    /// The full pipeline.
    Run {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        cell: CellArgs,
    },
}

fn load(common: &Common) -> cfka_core::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
    Ok(cfg)
}

fn print_summary(summary: &cfka_core::experiment::ReportSummary) {
    for g in &summary.gates {
        match &g.status {
            GateStatus::Pass => println!("PASS {}: {}", g.name, g.detail),
            GateStatus::Fail => println!("FAIL {}: {}", g.name, g.detail),
            GateStatus::NotApplicable(why) => println!("N/A  {}: {why}", g.name),
        }
    }
}

fn staged(
    common: &Common,
    f: impl FnOnce(&ExperimentConfig, &Artifacts, &RunLog) -> cfka_core::Result<()>,
) -> cfka_core::Result<()> {
    let cfg = load(common)?;
    let art = Artifacts::new(cfg.out_dir());
    prepare(&cfg, &art)?;
    let log = RunLog::open(&art, !common.quiet)?;
    f(&cfg, &art, &log)
}

fn dispatch(cmd: Command) -> cfka_core::Result<()> {
    match cmd {
        Command::GenData(c) => staged(&c, stage_data),
        Command::Pretrain(c) => staged(&c, stage_pretrain),
        Command::Probe(c) => staged(&c, stage_probe),
        Command::ReplayGen { common, cell } => staged(&common, |cfg, art, log| stage_replay(cfg, art, log, cell.cell.as_deref())),
        Command::Cpt { common, cell } => staged(&common, |cfg, art, log| stage_cpt(cfg, art, log, cell.cell.as_deref())),
        Command::Eval { common, params } => staged(&common, |cfg, art, log| stage_eval(cfg, art, log, params.as_deref())),
        Command::Report { out } => {
            print_summary(&emit_reports(&out)?);
            println!("report written to {}", out.join("report").display());
            Ok(())
        }
        Command::Run { common, cell } => {
            let cfg = load(&common)?;
            cfg.validate()?;
            let art = Artifacts::new(cfg.out_dir());
            let log = RunLog::open(&art, !common.quiet)?;
            if let Some(summary) = run_experiment(&cfg, &art, &log, cell.cell.as_deref())? {
                print_summary(&summary);
            }
            println!("artifacts in {}", art.root.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Config(msg)) => {
            eprintln!("invalid configuration:");
            for m in msg.split("; ") {
                eprintln!("  - {m}");
            }
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
