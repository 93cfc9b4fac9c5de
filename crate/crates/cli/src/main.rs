use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gapcoref_cli::commands::{
    cmd_ensemble, cmd_evaluate, cmd_extract_answers, cmd_folds, cmd_predict, cmd_stats, cmd_train, read_bytes,
};
use gapcoref_cli::config::{parse_config_text, parse_override, RunConfig};
use gapcoref_cli::CliError;

#[derive(Parser)]
#[command(name = "gapcoref", version, about = "Gendered pronoun resolution toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus overrides, shared by the commands that need settings.
#[derive(Args, Default)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config value (repeatable).
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Print record and label counts of a GAP TSV file.
    Stats { data: PathBuf },
    /// Print gender-stratified fold assignments.
    Folds {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model per fold.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Predict class probabilities, averaging over the given checkpoints.
    Predict {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract answer spans with QA checkpoints, without candidate knowledge.
    ExtractAnswers {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Average prediction CSV files.
    Ensemble {
        #[arg(required = true)]
        preds: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a prediction CSV against gold GAP TSV.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        /// Average male and female F1 instead of micro-averaging decisions.
        #[arg(long = "macro")]
        macro_f1: bool,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

fn load_config(cfg: &ConfigArgs, flags: Vec<(&str, Option<String>)>) -> Result<RunConfig, CliError> {
    let mut pairs = match &cfg.config {
        Some(p) => {
            let bytes = read_bytes(p)?;
            let text = String::from_utf8(bytes).map_err(|_| CliError::Usage(format!("{}: not UTF-8", p.display())))?;
            parse_config_text(&text)?
        }
        None => Vec::new(),
    };
    for s in &cfg.set {
        pairs.push(parse_override(s)?);
    }
    for (k, v) in flags {
        if let Some(v) = v {
            pairs.push((k.to_string(), v));
        }
    }
    RunConfig::from_pairs(&pairs)
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(gapcoref_cli::error::io_err(p)),
        None => {
            let _ = std::io::stdout().write_all(text.as_bytes());
            Ok(())
        }
    }
}

fn path_str(p: Option<PathBuf>) -> Option<String> {
    p.map(|p| p.display().to_string())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Stats { data } => emit(None, &cmd_stats(&data)?),
        Command::Folds { data, k, seed, out } => emit(out.as_deref(), &cmd_folds(&data, k, seed)?),
        Command::Train { cfg, kind, data, test, vocab, embeddings, out_dir, folds, seed } => {
            let config = load_config(
                &cfg,
                vec![
                    ("kind", kind),
                    ("data", path_str(data)),
                    ("test", path_str(test)),
                    ("vocab", path_str(vocab)),
                    ("embeddings", path_str(embeddings)),
                    ("out_dir", path_str(out_dir)),
                    ("folds", folds.map(|f| f.to_string())),
                    ("seed", seed.map(|s| s.to_string())),
                ],
            )?;
            print!("{}", config.echo());
            emit(None, &cmd_train(&config)?)
        }
        Command::Predict { model, out } => {
            let config = load_config(&model.cfg, vec![])?;
            let csv = cmd_predict(
                &model.checkpoints,
                &model.data,
                &model.vocab,
                model.embeddings.as_deref(),
                &config.trainer.pipeline,
            )?;
            emit(out.as_deref(), &csv)
        }
        Command::ExtractAnswers { model, out } => {
            let config = load_config(&model.cfg, vec![])?;
            let (tsv, accuracy) = cmd_extract_answers(
                &model.checkpoints,
                &model.data,
                &model.vocab,
                model.embeddings.as_deref(),
                &config.trainer.pipeline,
            )?;
            emit(out.as_deref(), &tsv)?;
            if let Some(a) = accuracy {
                eprintln!("exact_answer_accuracy={a:.4}");
            }
            Ok(())
        }
        Command::Ensemble { preds, out } => emit(out.as_deref(), &cmd_ensemble(&preds)?),
        Command::Evaluate { pred, gold, macro_f1 } => emit(None, &cmd_evaluate(&pred, &gold, macro_f1)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
