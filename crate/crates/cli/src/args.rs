use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use isocomp_core::importance::OutputSpace;

use crate::{CliError, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "isocomp", version, about = "Critical-layer-isolation compression experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Itemized parameter count, with an optional compression baseline.
    Count(Flags),
    /// Train a model from scratch with plain next-token cross-entropy.
    Pretrain(Flags),
    /// Layer-ablation importance scores for a checkpoint.
    Score(Flags),
    /// Distill a student preset from a teacher checkpoint.
    Distill(Flags),
    /// Validation perplexity of a checkpoint.
    Eval(Flags),
    /// Train every student preset against the same teacher over several seeds.
    Ablation(Flags),
}

impl Command {
    pub fn flags(&self) -> &Flags {
        match self {
            Command::Count(f)
            | Command::Pretrain(f)
            | Command::Score(f)
            | Command::Distill(f)
            | Command::Eval(f)
            | Command::Ablation(f) => f,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Optimizer steps; also resets warmup to 5% unless --warmup is given.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long = "seq-len")]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long = "min-lr")]
    pub min_lr: Option<f64>,
    #[arg(long)]
    pub accumulation: Option<usize>,
    #[arg(long = "eval-every")]
    pub eval_every: Option<usize>,
    #[arg(long = "eval-windows")]
    pub eval_windows: Option<usize>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub reference: Option<String>,
    #[arg(long)]
    pub calibration: Option<usize>,
    #[arg(long = "output-space")]
    pub output_space: Option<OutputSpace>,
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Comma-separated student presets for ablation.
    #[arg(long, value_delimiter = ',')]
    pub students: Option<Vec<String>>,
    /// Print the machine-readable report on stdout instead of the table.
    #[arg(long)]
    pub json: bool,
    /// No progress line on stderr.
    #[arg(long)]
    pub quiet: bool,
}

impl Flags {
    /// Loads `--config` if given and applies every flag on top.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(p) = &self.preset {
            c.preset = Some(p.clone());
            c.model = None;
        }
        macro_rules! set {
            ($flag:ident => $($field:ident).+) => {
                if let Some(v) = &self.$flag {
                    c.$($field).+ = v.clone().into();
                }
            };
        }
        set!(seed => seed);
        set!(out => out);
        set!(corpus => corpus);
        set!(teacher => teacher);
        set!(checkpoint => checkpoint);
        set!(reference => reference);
        set!(calibration => calibration_size);
        set!(output_space => output_space);
        set!(seeds => seeds);
        set!(students => students);
        set!(alpha => train.alpha);
        set!(temperature => train.temperature);
        set!(seq_len => train.sequence_length);
        set!(lr => train.peak_lr);
        set!(min_lr => train.min_lr);
        set!(accumulation => train.accumulation_steps);
        set!(eval_every => train.eval_every);
        set!(eval_windows => train.eval_windows);
        if let Some(steps) = self.steps {
            c.train.total_steps = steps;
            if self.warmup.is_none() {
                c.train.warmup_steps = steps / 20;
            }
        }
        set!(warmup => train.warmup_steps);
        if self.lr.is_some() && self.min_lr.is_none() {
            c.train.min_lr = c.train.peak_lr / 10.0;
        }
        if self.quiet {
            c.progress = false;
        }
        Ok(c)
    }
}
