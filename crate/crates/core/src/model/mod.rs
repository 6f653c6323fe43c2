//! Architecture configuration, parameter accounting, model assembly,
//! ablated forward passes and checkpoints.

mod checkpoint;
mod config;
mod count;
mod network;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{make_preset, LayerPlan, LayerSpec, ModelConfig, PRESETS};
pub use count::{compression_ratio, parameter_count, LayerCount, ParameterBreakdown};
pub use network::{
    build_model, parameter_layout, Bound, FullBlock, Layer, LayerNorm, Linear, Model, SmallBlock, LAYER_NORM_EPS,
};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("layer plan mismatch between layer {index} ({left}) and layer {} ({right}): output width {} != input width {}", index + 1, left.out_dim(), right.in_dim())]
    PlanMismatch { index: usize, left: LayerSpec, right: LayerSpec },
    #[error("{position} layer {spec} does not match d_model {d_model}")]
    PlanBoundary { position: &'static str, spec: LayerSpec, d_model: usize },
    #[error("unknown preset '{name}'; valid presets: {valid}")]
    UnknownPreset { name: String, valid: String },
    #[error("invalid model input: {0}")]
    Input(String),
    #[error("layer {index} ({spec}) has no residual branch and cannot be ablated")]
    UnsupportedAblation { index: usize, spec: LayerSpec },
    #[error("layer index {index} out of range for a plan of {len} layers")]
    LayerIndex { index: usize, len: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
