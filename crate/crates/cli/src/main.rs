//! `eqg`: command-line driver for the question-generation pipeline.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use eqg_core::corpus::Split;
use eqg_core::pipeline::{self, PipelineError, RunConfig};
use eqg_core::synth::write_synth_race;
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "eqg", version, about = "Examination question generation pipeline")]
struct Cli {
    /// TOML run configuration (flat `key = value` lines are fine).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration field; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Filter RACE into Specific-style triples and build the vocabulary.
    BuildCorpus {
        #[arg(long)]
        race_dir: Option<PathBuf>,
        /// Work directory; the corpus goes to `<out-dir>/corpus`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        max_passage: Option<usize>,
        #[arg(long)]
        max_question: Option<usize>,
        #[arg(long)]
        vocab_size: Option<usize>,
    },
    /// Write positional-heuristic CoNLL-U parses (no external parser).
    HeuristicParses {
        #[arg(long)]
        split: Option<Split>,
    },
    /// Answer and key-sentence tagging.
    Tag {
        #[arg(long)]
        split: Option<Split>,
        /// Tag this triples file instead of the work-directory splits.
        #[arg(long, requires = "out")]
        triples: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Answer-guided dependency graphs from CoNLL-U parses.
    BuildGraphs {
        #[arg(long)]
        split: Option<Split>,
    },
    /// Train, checkpointing every epoch.
    Train {
        /// Continue from the latest epoch checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Beam-search questions for a split.
    Generate {
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// BLEU-1..4 and ROUGE-L of predictions against references.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Print JSON instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Finite-difference check of the full model on a toy instance.
    Gradcheck,
    /// Write a synthetic RACE-layout corpus.
    SynthRace {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 12)]
        train: usize,
        #[arg(long, default_value_t = 2)]
        dev: usize,
        #[arg(long, default_value_t = 2)]
        test: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Print the effective configuration as TOML.
    ShowConfig,
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    let _ = writeln!(std::io::stdout(), "{text}");
}

fn print_json<T: Serialize>(value: &T) {
    emit(&serde_json::to_string_pretty(value).expect("output serializes"));
}

fn splits(split: Option<Split>) -> Vec<Split> {
    split.map_or_else(|| Split::ALL.to_vec(), |s| vec![s])
}

fn config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    Ok(cfg)
}

fn set<T: ToString>(cfg: &mut RunConfig, key: &str, value: &Option<T>) -> Result<(), PipelineError> {
    match value {
        Some(v) => cfg.apply_override(&format!("{key}={}", toml_literal(&v.to_string()))),
        None => Ok(()),
    }
}

/// Numbers pass through; anything else becomes a quoted TOML string.
fn toml_literal(s: &str) -> String {
    if s.parse::<f64>().is_ok() {
        s.to_string()
    } else {
        toml::Value::String(s.to_string()).to_string()
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut cfg = config(&cli)?;
    match &cli.command {
        Command::BuildCorpus {
            race_dir,
            out_dir,
            max_passage,
            max_question,
            vocab_size,
        } => {
            set(&mut cfg, "race_dir", &race_dir.as_ref().map(|p| p.display()))?;
            set(&mut cfg, "work_dir", &out_dir.as_ref().map(|p| p.display()))?;
            set(&mut cfg, "max_passage", max_passage)?;
            set(&mut cfg, "max_question", max_question)?;
            set(&mut cfg, "vocab_size", vocab_size)?;
            let report = pipeline::cmd_build_corpus(&cfg)?;
            print_json(&report);
        }
        Command::HeuristicParses { split } => {
            for s in splits(*split) {
                let n = pipeline::cmd_heuristic_parses(&cfg, s)?;
                emit(&format!("{s}: {n} passages parsed"));
            }
        }
        Command::Tag { split, triples, out } => match (triples, out) {
            (Some(t), Some(o)) => {
                let n = pipeline::tag_file(&cfg, t, o)?;
                emit(&format!("{n} triples tagged"));
            }
            _ => {
                for s in splits(*split) {
                    let n = pipeline::cmd_tag(&cfg, s)?;
                    emit(&format!("{s}: {n} triples tagged"));
                }
            }
        },
        Command::BuildGraphs { split } => {
            for s in splits(*split) {
                let n = pipeline::cmd_build_graphs(&cfg, s)?;
                emit(&format!("{s}: {n} graphs"));
            }
        }
        Command::Train { resume } => {
            let summary = pipeline::cmd_train(&cfg, *resume)?;
            print_json(&summary);
        }
        Command::Generate { split, checkpoint, out } => {
            let path = pipeline::cmd_generate(&cfg, *split, checkpoint.as_deref(), out.as_deref())?;
            emit(&format!("predictions written to {}", path.display()));
        }
        Command::Evaluate { pred, reference, json } => {
            let row = pipeline::cmd_evaluate(pred, reference)?;
            if *json {
                print_json(&row);
            } else {
                emit(row.table().trim_end());
            }
        }
        Command::Gradcheck => {
            let outcome = pipeline::cmd_gradcheck(&cfg)?;
            print_json(&outcome);
        }
        Command::SynthRace {
            out_dir,
            train,
            dev,
            test,
            seed,
        } => {
            let n = write_synth_race(out_dir, *seed, [*train, *dev, *test]).map_err(|source| PipelineError::Io {
                path: out_dir.clone(),
                source,
            })?;
            emit(&format!("{n} articles written to {}", out_dir.display()));
        }
        Command::ShowConfig => emit(cfg.to_toml().trim_end()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
