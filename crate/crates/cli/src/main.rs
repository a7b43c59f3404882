//! `cast`: every pipeline stage behind one binary.

use cast::config::PipelineConfig;
use cast::error::CastError;
use cast::eval::EvalReport;
use cast::pipeline::{self, Layout};
use clap::{Parser, Subcommand};
use std::io::Read;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "cast", version, about = "Context-aware text style transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory holding every artifact of the run.
    #[arg(long, global = true, default_value = "runs/synthetic")]
    out: PathBuf,

    /// Dotted-key assignment such as `training.max_steps=200`. Repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Generate the synthetic splits and the oracle description.
    GenData,
    /// Build the vocabulary from the training slices.
    BuildVocab,
    /// Pre-train the style classifier.
    PretrainStyle,
    /// Pre-train the coherence classifier.
    PretrainCoherence,
    /// Train the perplexity language model.
    TrainLm,
    /// Train CAST and keep the best dev checkpoint.
    Train,
    /// Score the trained model on the test split.
    Eval,
    /// Train and score the four ablation variants next to full CAST.
    Ablate,
    /// Restyle JSONL requests from stdin, one output line each.
    Transfer,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, CastError> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    match &cli.config {
        Some(path) => PipelineConfig::load(path, &overrides),
        None => PipelineConfig::from_toml_str("", &overrides),
    }
}

fn percent(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |a| format!("{a:.2}%"))
}

fn run(cli: &Cli) -> Result<(), CastError> {
    let cfg = load_config(cli)?;
    let layout = Layout::new(&cli.out);
    match cli.command {
        Command::GenData => {
            let s = pipeline::gen_data(&cfg, &layout)?;
            println!(
                "train {} dev {} test {} nonparallel {} style {} paragraphs {}",
                s.train, s.dev, s.test, s.nonparallel, s.style_classifier, s.paragraphs
            );
        }
        Command::BuildVocab => {
            let v = pipeline::build_vocab(&cfg, &layout)?;
            println!("vocabulary size {}", v.len());
        }
        Command::PretrainStyle => {
            let r = pipeline::pretrain_style(&cfg, &layout)?;
            println!("style classifier held-out accuracy {}", percent(r.heldout_accuracy));
        }
        Command::PretrainCoherence => {
            let r = pipeline::pretrain_coherence(&cfg, &layout)?;
            println!("coherence classifier held-out accuracy {}", percent(r.heldout_accuracy));
        }
        Command::TrainLm => {
            let r = pipeline::train_lm(&cfg, &layout)?;
            match r.heldout_perplexity {
                Some(p) => println!("language model held-out perplexity {p:.3}"),
                None => println!("language model held-out perplexity -"),
            }
        }
        Command::Train => {
            let (s, _) = pipeline::train_cast(&cfg, &layout)?;
            let best = s.best_step.map_or_else(|| "-".into(), |b| b.to_string());
            println!("trained {} steps, kept step {best}", s.steps);
        }
        Command::Eval => {
            let r = pipeline::evaluate(&cfg, &layout)?;
            print!("{}", EvalReport::table(std::slice::from_ref(&r)));
        }
        Command::Ablate => {
            let rows = pipeline::ablate(&cfg, &layout)?;
            print!("{}", EvalReport::table(&rows));
        }
        Command::Transfer => {
            let mut input = String::new();
            std::io::stdin().read_to_string(&mut input).map_err(|e| CastError::Io { path: "<stdin>".into(), source: e })?;
            let stdout = std::io::stdout();
            pipeline::transfer(&cfg, &layout, &input, &mut stdout.lock())?;
        }
    }
    Ok(())
}

/// Exit status per failure class.
fn exit_code(e: &CastError) -> u8 {
    match e {
        CastError::Config(_) => 2,
        CastError::MissingCheckpoint(_) => 3,
        CastError::Record { .. } | CastError::InvalidData(_) | CastError::Checkpoint { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = e.to_string().replace('\n', " ");
            eprintln!("cast {}: {line}", command_name(cli.command));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn command_name(c: Command) -> &'static str {
    match c {
        Command::GenData => "gen-data",
        Command::BuildVocab => "build-vocab",
        Command::PretrainStyle => "pretrain-style",
        Command::PretrainCoherence => "pretrain-coherence",
        Command::TrainLm => "train-lm",
        Command::Train => "train",
        Command::Eval => "eval",
        Command::Ablate => "ablate",
        Command::Transfer => "transfer",
    }
}
