//! Knowledge distillation of a student against a frozen teacher: the combined
//! cross-entropy and softened-KL loss, AdamW, the warmup-cosine schedule,
//! gradient accumulation and perplexity evaluation.

mod adamw;
mod config;
mod eval;
mod loss;
mod schedule;
mod train;

pub use adamw::{adamw_step, AdamW, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use config::{DistillConfig, KlDirection};
pub use eval::{evaluate, perplexity, PerplexityReport};
pub use loss::{distill_loss, record_distill_loss, LossBreakdown};
pub use schedule::lr_at;
pub use train::{accumulate_gradients, train, EvalLog, StepLog, TrainOptions, TrainReport, TrainSummary};

use thiserror::Error;

use crate::data::DataError;
use crate::model::ModelError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("invalid distillation config: {0}")]
    Config(String),
    #[error("non-finite gradient in parameter {param}")]
    NonFiniteGrad { param: String },
    #[error("non-finite loss at step {step}{}", last_good.as_ref().map(|p| format!("; last good checkpoint {p}")).unwrap_or_default())]
    NonFiniteLoss { step: usize, last_good: Option<String> },
    #[error("teacher and student vocabularies differ: {teacher} vs {student}")]
    VocabMismatch { teacher: usize, student: usize },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
