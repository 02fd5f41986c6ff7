//! `kpdistill`: runs one pipeline stage per invocation.
//!
//! Exit codes: 0 success, 2 invalid config, 3 missing upstream artifact,
//! 1 anything else. Failures print one JSON line on stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use keyphrase_distill::pipeline::{run, Command, PipelineConfig};
use keyphrase_distill::Error;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Stage {
    Gen,
    TrainCross,
    KdScore,
    TrainBi,
    Index,
    Eval,
    Ablate,
    Report,
}

impl From<Stage> for Command {
    fn from(s: Stage) -> Self {
        match s {
            Stage::Gen => Command::Gen,
            Stage::TrainCross => Command::TrainCross,
            Stage::KdScore => Command::KdScore,
            Stage::TrainBi => Command::TrainBi,
            Stage::Index => Command::Index,
            Stage::Eval => Command::Eval,
            Stage::Ablate => Command::Ablate,
            Stage::Report => Command::Report,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "kpdistill",
    version,
    about = "Keyphrase retrieval distillation pipeline"
)]
struct Cli {
    #[arg(value_enum)]
    stage: Stage,
    /// TOML config; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed and every seed derived from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load(cli: &Cli) -> keyphrase_distill::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path).map_err(|e| match e {
            // An unreadable config is a config problem, not a missing stage input.
            Error::MissingArtifact(p) => Error::Config {
                field: "config".into(),
                reason: format!("cannot read {}", p.display()),
            },
            other => other,
        })?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::MissingArtifact(_) => 3,
        _ => 1,
    }
}

fn error_line(e: &Error) -> String {
    let mut v = serde_json::json!({"error": e.kind(), "message": e.to_string()});
    if let Error::MissingArtifact(p) = e {
        v["path"] = serde_json::Value::String(p.display().to_string());
    }
    v.to_string()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match load(&cli).and_then(|cfg| run(cli.stage.into(), &cfg)) {
        Ok(outcome) => {
            println!(
                "{}",
                serde_json::to_string(&outcome).expect("outcome serializes")
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
