mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flowtts::sampler::Solver;
use flowtts::verify::Suite;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, config or paths; exit code 2.
    #[error("{0}")]
    Usage(String),
    /// Work started and failed, or a check did not pass; exit code 1.
    #[error("{0}")]
    Failure(String),
}

impl CliError {
    pub fn failure(e: impl std::fmt::Display) -> Self {
        CliError::Failure(e.to_string())
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failure(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "flowtts", version, about = "Flow-matching TTS toolkit on a synthetic symbol corpus")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct SamplerFlags {
    #[arg(long)]
    pub nfe: Option<usize>,
    /// Sway coefficient s in [-1, 2/(pi-2)].
    #[arg(long, allow_hyphen_values = true)]
    pub sway: Option<f64>,
    #[arg(long)]
    pub solver: Option<Solver>,
    /// Guidance strength; 0 disables the unconditional pass.
    #[arg(long)]
    pub cfg: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus: manifest, vocabulary, rule and feature files.
    GenCorpus {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train on a corpus; writes final.ckpt, best.ckpt, run.toml and loss.log.
    Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Stop once this many updates have been applied in total.
        #[arg(long)]
        updates: Option<u64>,
        /// Continue from a checkpoint; its model and training settings win.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        log_every: Option<u64>,
    },
    /// Continue a prompt with new text and write the generated features.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Corpus directory supplying the vocabulary and the decoding rule.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Prompt features file.
        #[arg(long, conflicts_with = "prompt_id")]
        prompt: Option<PathBuf>,
        /// Use a corpus utterance (features and text) as the prompt.
        #[arg(long)]
        prompt_id: Option<String>,
        #[arg(long)]
        prompt_text: Option<String>,
        #[arg(long)]
        gen_text: String,
        /// Total frames including the prompt; estimated from text when absent.
        #[arg(long)]
        duration: Option<usize>,
        #[command(flatten)]
        sampler: SamplerFlags,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a verification suite and print one line per check.
    Verify {
        suite: Suite,
        #[arg(long)]
        seed: Option<u64>,
        /// e2e only: training updates.
        #[arg(long)]
        updates: Option<u64>,
    },
    /// Start integration from a state that leaks other features at t'.
    LeakOverride {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        target_text: String,
        /// Text whose noisy rendering is leaked.
        #[arg(long, conflicts_with = "leak")]
        leak_text: Option<String>,
        /// Features file to leak.
        #[arg(long, required_unless_present = "leak_text")]
        leak: Option<PathBuf>,
        #[arg(long)]
        t_prime: Option<f64>,
        #[command(flatten)]
        sampler: SamplerFlags,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the flow steps and evaluation count of a sampler setting.
    Schedule {
        #[command(flatten)]
        sampler: SamplerFlags,
        #[arg(long)]
        t_prime: Option<f64>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = config::RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenCorpus { out, count, seed, force } => {
            if let Some(c) = count {
                cfg.corpus.count = c;
            }
            if let Some(s) = seed {
                cfg.corpus.seed = s;
            }
            let out = config::require(&out, &cfg.paths.corpus, "corpus")?;
            commands::gen_corpus(&cfg, &out, force)
        }
        Command::Train {
            corpus,
            out,
            updates,
            resume,
            seed,
            log_every,
        } => {
            if let Some(s) = seed {
                cfg.training.seed = s;
                cfg.model_seed = s;
            }
            if let Some(n) = log_every {
                cfg.log_every = n;
            }
            let corpus = config::require(&corpus, &cfg.paths.corpus, "corpus")?;
            let out = config::require(&out, &cfg.paths.output, "output")?;
            commands::train(&cfg, &corpus, &out, updates, resume.as_deref())
        }
        Command::Infer {
            checkpoint,
            corpus,
            prompt,
            prompt_id,
            prompt_text,
            gen_text,
            duration,
            sampler,
            seed,
            out,
        } => {
            commands::apply_sampler(&mut cfg, &sampler, seed, None);
            let req = commands::InferRequest {
                checkpoint: config::require(&checkpoint, &cfg.paths.checkpoint, "checkpoint")?,
                corpus: config::require(&corpus, &cfg.paths.corpus, "corpus")?,
                out: config::require(&out, &cfg.paths.output, "output")?,
                prompt,
                prompt_id,
                prompt_text,
                gen_text,
                duration,
            };
            commands::infer(&cfg, &req)
        }
        Command::Verify { suite, seed, updates } => {
            if let Some(n) = updates {
                cfg.training.total_updates = n;
                cfg.training.warmup_updates = cfg.training.warmup_updates.min(n);
            }
            commands::verify(&cfg, suite, seed.unwrap_or(cfg.sampler.seed))
        }
        Command::LeakOverride {
            checkpoint,
            corpus,
            target_text,
            leak_text,
            leak,
            t_prime,
            sampler,
            seed,
            out,
        } => {
            commands::apply_sampler(&mut cfg, &sampler, seed, t_prime);
            let req = commands::LeakRequest {
                checkpoint: config::require(&checkpoint, &cfg.paths.checkpoint, "checkpoint")?,
                corpus: config::require(&corpus, &cfg.paths.corpus, "corpus")?,
                out: config::require(&out, &cfg.paths.output, "output")?,
                target_text,
                leak_text,
                leak,
            };
            commands::leak_override(&cfg, &req)
        }
        Command::Schedule { sampler, t_prime } => {
            commands::apply_sampler(&mut cfg, &sampler, None, t_prime);
            commands::schedule(&cfg, t_prime.is_some())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
