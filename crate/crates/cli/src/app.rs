use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use spe_core::{Criterion, Error, LossWeights, SamplerKind};

use crate::config::{Overrides, RunConfig};
use crate::pipeline;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "spe", version, about = "Contextual sentence probability estimation pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Run configuration (TOML, or JSON by extension).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Input model: the initial model for `train-nce`, a run or checkpoint
    /// directory for `evaluate`, a checkpoint for `score`.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_criterion)]
    pub criterion: Option<Criterion>,
    #[arg(long, global = true, value_parser = parse_sampler)]
    pub sampler: Option<SamplerKind>,
    /// Loss weights as `ALPHA,BETA,GAMMA`.
    #[arg(long, global = true, value_parser = parse_weights)]
    pub weights: Option<LossWeights>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split the corpus and build the vocabulary.
    Prep,
    /// Word-level pre-training.
    Pretrain,
    /// Train the bidirectional masked model used for resampling.
    TrainBilm,
    /// Sentence-level training from the pre-trained model.
    TrainNce,
    /// Generate validation and holdout cloze questions.
    GenQuestions,
    /// Select a checkpoint on validation questions and report holdout accuracy.
    Evaluate,
    /// Score `context<TAB>sentence` lines to standard output.
    Score {
        /// Read from this file instead of standard input.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

fn parse_criterion(s: &str) -> Result<Criterion, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_sampler(s: &str) -> Result<SamplerKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_weights(s: &str) -> Result<LossWeights, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Exit code for a failed stage.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let numeric = err
        .chain()
        .any(|e| matches!(e.downcast_ref::<Error>(), Some(Error::NonFinite(_))));
    if numeric {
        EXIT_NUMERIC
    } else {
        EXIT_DATA
    }
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("SPE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("SPE_THREADS must be a positive integer, got {v:?}"))?;
    // A pool built earlier in the same process wins; that is fine.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn execute(cli: &Cli) -> anyhow::Result<()> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = base.resolve(&Overrides {
        seed: cli.seed,
        criterion: cli.criterion,
        sampler: cli.sampler,
        weights: cli.weights,
        out: cli.out.clone(),
    })?;
    match &cli.command {
        Command::Prep => {
            let m = pipeline::prep(&cfg)?;
            log::info!(
                "{} documents, vocabulary {}, pairs {}/{}/{}",
                m.documents,
                m.vocab_size,
                m.train_pairs,
                m.validation_pairs,
                m.holdout_pairs
            );
        }
        Command::Pretrain => {
            pipeline::pretrain_stage(&cfg)?;
        }
        Command::TrainBilm => {
            pipeline::bilm_stage(&cfg)?;
        }
        Command::TrainNce => {
            let dir = pipeline::nce_stage(&cfg, cli.checkpoint.as_deref())?;
            log::info!("checkpoints in {}", dir.display());
        }
        Command::GenQuestions => {
            for m in pipeline::questions_stage(&cfg)? {
                log::info!("{} questions ({} filtered, {} dropped)", m.questions, m.filtered, m.dropped);
            }
        }
        Command::Evaluate => {
            let r = pipeline::evaluate_stage(&cfg, cli.checkpoint.as_deref())?;
            print!("{}", pipeline::render_report(&r));
        }
        Command::Score { input } => {
            let Some(ck) = &cli.checkpoint else {
                anyhow::bail!(Error::InvalidInput("score needs --checkpoint".into()));
            };
            let stdout = std::io::stdout();
            let mut out = stdout.lock();
            match input {
                Some(p) => {
                    let f = std::fs::File::open(p)?;
                    pipeline::score_lines(&cfg, ck, &mut std::io::BufReader::new(f), &mut out)?;
                }
                None => {
                    pipeline::score_lines(&cfg, ck, &mut std::io::stdin().lock(), &mut out)?;
                }
            }
            out.flush()?;
        }
    }
    Ok(())
}

/// Parses arguments, runs one stage and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Err(msg) = init_threads() {
        eprintln!("error: {msg}");
        return EXIT_USAGE;
    }
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            exit_code(&e)
        }
    }
}
