use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pet_core::{DecodingStrategy, ToyKind, WeightMode};

mod commands;
mod config;

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "pet", version, about = "Few-shot training with cloze patterns")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by the run commands; each overrides its config value.
#[derive(Args, Debug, Clone, Default)]
struct RunFlags {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<DecodingStrategy>,
    #[arg(long)]
    generations: Option<usize>,
    #[arg(long)]
    growth_factor: Option<f64>,
    /// Use the ensemble itself as the final model.
    #[arg(long)]
    no_distill: bool,
    #[arg(long, value_parser = parse_weights)]
    weights: Option<WeightMode>,
    #[arg(long)]
    parallelism: Option<usize>,
}

fn parse_strategy(s: &str) -> Result<DecodingStrategy, String> {
    s.parse().map_err(|e: pet_core::PetError| e.to_string())
}

fn parse_weights(s: &str) -> Result<WeightMode, String> {
    s.parse().map_err(|e: pet_core::PetError| e.to_string())
}

fn parse_kind(s: &str) -> Result<ToyKind, String> {
    s.parse().map_err(|e: pet_core::PetError| e.to_string())
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic task: bundle, vocabulary, splits, corpus and a config.
    Toy {
        #[arg(long, value_parser = parse_kind)]
        kind: ToyKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        task_seed: u64,
    },
    /// Pretrain the tiny transformer on the configured corpus.
    Pretrain(RunFlags),
    /// Draw the few-shot labeled set and the unlabeled pool.
    Sample(RunFlags),
    /// PET: train the ensemble, soft-label, distill.
    Train(RunFlags),
    /// iPET: generations of ensembles on growing pseudo-labeled sets.
    Ipet(RunFlags),
    /// Train the final classifier from a soft-label file.
    Distill {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long)]
        soft: PathBuf,
    },
    /// Per-example score tables of one PVP and checkpoint, as JSONL.
    Score {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long)]
        pvp: String,
        /// Defaults to the backend checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to the test set.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Metrics of a predictions file against gold labels.
    Eval {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long)]
        predictions: PathBuf,
        /// Defaults to the test set.
        #[arg(long)]
        gold: Option<PathBuf>,
    },
    /// Train once, then evaluate every decoding strategy and the untrained backend.
    CompareDecoding(RunFlags),
    /// Re-run the command recorded in a manifest.
    Replay {
        manifest: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

impl RunFlags {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = self.strategy {
            cfg.pet.strategy = s;
        }
        if let Some(g) = self.generations {
            cfg.ipet.generations = g;
        }
        if let Some(d) = self.growth_factor {
            cfg.ipet.growth_factor = d;
        }
        if self.no_distill {
            cfg.pet.distill = false;
        }
        if let Some(w) = self.weights {
            cfg.pet.weights = w;
        }
        if let Some(p) = self.parallelism {
            cfg.pet.parallelism = p;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Toy {
            kind,
            out,
            task_seed,
        } => commands::toy(kind, task_seed, &out),
        Command::Pretrain(f) => commands::pretrain(&f.load()?),
        Command::Sample(f) => commands::sample(&f.load()?),
        Command::Train(f) => commands::train(&f.load()?, false),
        Command::Ipet(f) => commands::train(&f.load()?, true),
        Command::Distill { run, soft } => commands::distill(&run.load()?, &soft),
        Command::Score {
            run,
            pvp,
            checkpoint,
            input,
        } => commands::score(&run.load()?, &pvp, checkpoint, input),
        Command::Eval {
            run,
            predictions,
            gold,
        } => commands::eval(&run.load()?, &predictions, gold),
        Command::CompareDecoding(f) => commands::compare_decoding(&f.load()?),
        Command::Replay { manifest, out } => commands::replay(&manifest, out),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!(
                "error: usage: {}",
                one_line(first.trim_start_matches("error: "))
            );
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}
