use serde::Serialize;

use super::DistillError;
use crate::data::TokenStream;
use crate::model::Model;
use crate::tensor::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PerplexityReport {
    pub perplexity: f64,
    pub mean_nll: f64,
    pub tokens: usize,
    pub windows: usize,
}

/// Next-token perplexity over non-overlapping windows of `sequence_length`
/// inputs. A trailing partial window is dropped; a stream shorter than one
/// full window is scored as a single shorter window.
pub fn evaluate(
    model: &Model,
    eval_set: &TokenStream,
    sequence_length: usize,
    max_windows: Option<usize>,
) -> Result<PerplexityReport, DistillError> {
    if eval_set.len() < 2 {
        return Err(DistillError::Invalid(format!("evaluation needs at least 2 tokens, got {}", eval_set.len())));
    }
    if sequence_length == 0 {
        return Err(DistillError::Invalid("sequence_length must be positive".into()));
    }
    let ids = eval_set.ids();
    let len = sequence_length.min(ids.len() - 1);
    let mut windows = (ids.len() - 1) / len;
    if let Some(cap) = max_windows {
        windows = windows.min(cap);
    }
    let mut total_nll = 0.0;
    for w in 0..windows {
        let start = w * len;
        let inputs = &ids[start..start + len];
        let targets = &ids[start + 1..start + len + 1];
        let mut tape = Tape::no_record();
        let bound = model.bind(&mut tape);
        let logits = model.forward_on(&mut tape, &bound, inputs, None)?;
        let ce = tape.cross_entropy(logits, targets)?;
        total_nll += tape.value(ce).item() * len as f64;
    }
    let tokens = windows * len;
    let mean_nll = total_nll / tokens as f64;
    Ok(PerplexityReport { perplexity: mean_nll.exp(), mean_nll, tokens, windows })
}

pub fn perplexity(model: &Model, eval_set: &TokenStream, sequence_length: usize) -> Result<f64, DistillError> {
    Ok(evaluate(model, eval_set, sequence_length, None)?.perplexity)
}
