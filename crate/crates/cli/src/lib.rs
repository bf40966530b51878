//! Command-line driver: corpus preparation, diffusion and alignment
//! training, unconditional sampling, prompt-guided optimization and
//! hit-ratio evaluation.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::RunConfig;
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "molprompt", version, about = "Text-guided 3D molecule diffusion toolkit")]
pub struct Cli {
    /// JSON or TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for `optimize`.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
    /// Diffusion checkpoint directory.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    pub align_checkpoint: Option<PathBuf>,
    /// Default parent of `diffusion/` and `align/` checkpoints.
    #[arg(long, global = true, env = config::CHECKPOINT_ROOT_ENV)]
    pub checkpoint_root: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Write the built-in toy corpus.
    MakeToyCorpus {
        #[arg(long)]
        conformers: Option<usize>,
    },
    /// Train the unconditional denoiser.
    TrainDiffusion {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the text-structure alignment model.
    TrainAlign {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Prompt-guided optimization of input molecules.
    Optimize {
        /// Molecule files or directories.
        #[arg(long = "molecule")]
        molecules: Vec<PathBuf>,
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long)]
        n_runs: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Hit ratios of optimized molecules against their inputs.
    Evaluate {
        #[arg(long)]
        inputs: Option<PathBuf>,
        /// One directory per run.
        #[arg(long = "outputs")]
        outputs: Vec<PathBuf>,
    },
    /// Unconditional samples and their generation metrics.
    Sample {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        n_atoms: Option<usize>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::MakeToyCorpus { .. } => "make-toy-corpus",
            Command::TrainDiffusion { .. } => "train-diffusion",
            Command::TrainAlign { .. } => "train-align",
            Command::Optimize { .. } => "optimize",
            Command::Evaluate { .. } => "evaluate",
            Command::Sample { .. } => "sample",
        }
    }
}

/// Config file (if any) with every given flag applied on top.
pub fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    let name = cli.command.name();
    if let Some(c) = &cfg.command {
        if c != name {
            return Err(CliError::Usage(format!("config is for `{c}`, not `{name}`")));
        }
    }
    cfg.command = Some(name.to_string());
    macro_rules! set {
        ($field:expr, $flag:expr) => {
            if let Some(v) = $flag.clone() {
                $field = v;
            }
        };
    }
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    set!(cfg.workers, cli.workers);
    for (field, flag) in [
        (&mut cfg.out, &cli.out),
        (&mut cfg.corpus, &cli.corpus),
        (&mut cfg.checkpoint, &cli.checkpoint),
        (&mut cfg.align_checkpoint, &cli.align_checkpoint),
        (&mut cfg.checkpoint_root, &cli.checkpoint_root),
    ] {
        if flag.is_some() {
            *field = flag.clone();
        }
    }
    match &cli.command {
        Command::MakeToyCorpus { conformers } => set!(cfg.toy.conformers, conformers),
        Command::TrainDiffusion { epochs } => set!(cfg.train.epochs, epochs),
        Command::TrainAlign { epochs } => set!(cfg.align.epochs, epochs),
        Command::Optimize { molecules, prompt, n_runs, lambda } => {
            if !molecules.is_empty() {
                cfg.optimize.molecules = molecules.clone();
            }
            set!(cfg.optimize.prompt, prompt);
            set!(cfg.optimize.n_runs, n_runs);
            set!(cfg.guidance.lambda, lambda);
        }
        Command::Evaluate { inputs, outputs } => {
            if inputs.is_some() {
                cfg.evaluate.inputs = inputs.clone();
            }
            if !outputs.is_empty() {
                cfg.evaluate.outputs = outputs.clone();
            }
        }
        Command::Sample { n, n_atoms } => {
            set!(cfg.sample.n, n);
            if n_atoms.is_some() {
                cfg.sample.n_atoms = *n_atoms;
            }
        }
    }
    cfg.propagate_seed();
    Ok(cfg)
}

pub fn execute(cfg: &RunConfig) -> Result<PathBuf> {
    match cfg.command.as_deref() {
        Some("make-toy-corpus") => commands::make_toy_corpus(cfg),
        Some("train-diffusion") => commands::train_diffusion(cfg),
        Some("train-align") => commands::train_align(cfg),
        Some("optimize") => commands::optimize(cfg),
        Some("evaluate") => commands::evaluate(cfg),
        Some("sample") => commands::sample(cfg),
        other => Err(CliError::Usage(format!("unknown command {other:?}"))),
    }
}
