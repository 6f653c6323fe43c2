use serde::Serialize;

use super::{ModelConfig, ModelError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerCount {
    pub index: usize,
    pub spec: String,
    pub params: u64,
}

/// Itemized scalar parameter count of a configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParameterBreakdown {
    pub token_embedding: u64,
    pub position_embedding: u64,
    pub layers: Vec<LayerCount>,
    pub final_norm: u64,
    /// Zero when the head is tied to the token embedding.
    pub lm_head: u64,
    pub total: u64,
}

impl ParameterBreakdown {
    pub fn layer_total(&self) -> u64 {
        self.layers.iter().map(|l| l.params).sum()
    }
}

pub fn parameter_count(config: &ModelConfig) -> ParameterBreakdown {
    let v = config.vocab_size as u64;
    let d = config.d_model as u64;
    let token_embedding = v * d;
    let position_embedding = config.context_length as u64 * d;
    let layers: Vec<LayerCount> = config
        .layer_plan
        .specs()
        .iter()
        .enumerate()
        .map(|(index, spec)| LayerCount { index, spec: spec.to_string(), params: spec.parameter_count() })
        .collect();
    let final_norm = 2 * d;
    let lm_head = if config.tie_lm_head { 0 } else { d * v };
    let total =
        token_embedding + position_embedding + layers.iter().map(|l| l.params).sum::<u64>() + final_norm + lm_head;
    ParameterBreakdown { token_embedding, position_embedding, layers, final_norm, lm_head, total }
}

/// `(teacher / student, 1 − student / teacher)`.
pub fn compression_ratio(teacher_params: u64, student_params: u64) -> Result<(f64, f64), ModelError> {
    if teacher_params == 0 || student_params == 0 {
        return Err(ModelError::InvalidConfig(format!(
            "compression ratio needs positive counts, got teacher {teacher_params} student {student_params}"
        )));
    }
    let (t, s) = (teacher_params as f64, student_params as f64);
    Ok((t / s, 1.0 - s / t))
}
