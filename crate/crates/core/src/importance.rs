//! Layer importance by output ablation: `I(l)` is the mean, over calibration
//! positions, of the squared distance between the full model's output vector
//! and the output with layer `l`'s residual branch removed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::data::TokenStream;
use crate::model::{Model, ModelError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ImportanceError {
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error("calibration sequence {index}: {reason}")]
    BadSequence { index: usize, reason: String },
    #[error("model has no ablatable layers (plan: {plan})")]
    NoAblatableLayers { plan: String },
    #[error("gap ratio needs at least 2 scored layers, got {0}")]
    TooFewLayers(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CalibrationSet {
    sequences: Vec<Vec<usize>>,
}

impl CalibrationSet {
    /// Checks every sequence is non-empty, no longer than `context_length`
    /// and inside the vocabulary.
    pub fn new(sequences: Vec<Vec<usize>>, context_length: usize, vocab_size: usize) -> Result<Self, ImportanceError> {
        if sequences.is_empty() {
            return Err(ImportanceError::EmptyCalibration);
        }
        for (index, s) in sequences.iter().enumerate() {
            let reason = if s.is_empty() {
                "empty".to_string()
            } else if s.len() > context_length {
                format!("length {} exceeds context {context_length}", s.len())
            } else if let Some(id) = s.iter().find(|&&id| id >= vocab_size) {
                format!("token {id} outside vocabulary {vocab_size}")
            } else {
                continue;
            };
            return Err(ImportanceError::BadSequence { index, reason });
        }
        Ok(Self { sequences })
    }

    /// `count` windows of `sequence_length` tokens at seeded random offsets.
    pub fn sample(
        stream: &TokenStream,
        count: usize,
        sequence_length: usize,
        seed: u64,
    ) -> Result<Self, ImportanceError> {
        if count == 0 {
            return Err(ImportanceError::EmptyCalibration);
        }
        if sequence_length == 0 || stream.len() < sequence_length {
            return Err(ImportanceError::BadSequence {
                index: 0,
                reason: format!("stream of {} tokens cannot supply windows of {sequence_length}", stream.len()),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = stream.len() - sequence_length;
        let sequences = (0..count)
            .map(|_| {
                let o = rng.gen_range(0..=last);
                stream.ids()[o..o + sequence_length].to_vec()
            })
            .collect();
        Ok(Self { sequences })
    }

    pub fn sequences(&self) -> &[Vec<usize>] {
        &self.sequences
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputSpace {
    #[default]
    Logits,
    Probabilities,
}

impl std::str::FromStr for OutputSpace {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "logits" => Ok(Self::Logits),
            "probabilities" | "probs" => Ok(Self::Probabilities),
            other => Err(format!("unknown output space '{other}' (expected logits or probabilities)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerScore {
    pub index: usize,
    pub spec: String,
    pub kind: &'static str,
    pub ablatable: bool,
    /// `None` for projection layers.
    pub score: Option<f64>,
    /// Output positions averaged over.
    pub samples: usize,
}

/// Top score over the runner-up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GapRatio {
    Finite(f64),
    /// The runner-up score is exactly zero.
    Infinite,
    /// Fewer than two scored layers.
    Undefined,
}

impl GapRatio {
    pub fn value(&self) -> Option<f64> {
        match *self {
            GapRatio::Finite(r) => Some(r),
            GapRatio::Infinite => Some(f64::INFINITY),
            GapRatio::Undefined => None,
        }
    }
}

impl std::fmt::Display for GapRatio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GapRatio::Finite(r) => write!(f, "{r:.2}x"),
            GapRatio::Infinite => f.write_str("inf (runner-up score is 0)"),
            GapRatio::Undefined => f.write_str("undefined (single scored layer)"),
        }
    }
}

/// Number, the string `"inf"`, or `null`.
impl Serialize for GapRatio {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match *self {
            GapRatio::Finite(r) => s.serialize_f64(r),
            GapRatio::Infinite => s.serialize_str("inf"),
            GapRatio::Undefined => s.serialize_none(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImportanceReport {
    pub layers: Vec<LayerScore>,
    pub max_score: f64,
    pub argmax: usize,
    pub gap_ratio: GapRatio,
    pub n_sequences: usize,
    pub output_space: OutputSpace,
}

impl ImportanceReport {
    /// `(layer index, score)` for scored layers, in layer order.
    pub fn scores(&self) -> Vec<(usize, f64)> {
        self.layers.iter().filter_map(|l| l.score.map(|s| (l.index, s))).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,spec,kind,ablatable,score,samples\n");
        for l in &self.layers {
            let score = l.score.map(|s| s.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{},{},{}\n", l.index, l.spec, l.kind, l.ablatable, score, l.samples));
        }
        out
    }
}

fn to_space(logits: Tensor, space: OutputSpace) -> Tensor {
    match space {
        OutputSpace::Logits => logits,
        OutputSpace::Probabilities => {
            let v = logits.last_dim();
            let mut t = logits;
            for row in t.data_mut().chunks_exact_mut(v) {
                crate::tensor::softmax_row(row);
            }
            t
        }
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn layer_importance(
    model: &Model,
    calib: &CalibrationSet,
    output_space: OutputSpace,
) -> Result<ImportanceReport, ImportanceError> {
    if calib.is_empty() {
        return Err(ImportanceError::EmptyCalibration);
    }
    let specs = model.config().layer_plan.specs().to_vec();
    if !specs.iter().any(|s| s.is_ablatable()) {
        let plan = specs.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ");
        return Err(ImportanceError::NoAblatableLayers { plan });
    }
    let positions = calib.token_count();
    let mut sums = vec![0.0; specs.len()];
    // Sequences are reduced in index order so the result is deterministic.
    for seq in calib.sequences() {
        let base = to_space(model.forward(seq)?, output_space);
        let v = base.last_dim();
        for (l, spec) in specs.iter().enumerate() {
            if !spec.is_ablatable() {
                continue;
            }
            let ablated = to_space(model.forward_ablated(seq, l)?, output_space);
            sums[l] += base
                .data()
                .chunks_exact(v)
                .zip(ablated.data().chunks_exact(v))
                .map(|(a, b)| squared_distance(a, b))
                .sum::<f64>();
        }
    }
    let layers: Vec<LayerScore> = specs
        .iter()
        .enumerate()
        .map(|(index, spec)| LayerScore {
            index,
            spec: spec.to_string(),
            kind: spec.kind(),
            ablatable: spec.is_ablatable(),
            score: spec.is_ablatable().then(|| sums[index] / positions as f64),
            samples: if spec.is_ablatable() { positions } else { 0 },
        })
        .collect();
    let scored: Vec<(usize, f64)> = layers.iter().filter_map(|l| l.score.map(|s| (l.index, s))).collect();
    let ranked = rank_scores(&scored);
    let gap = gap_ratio(&scored).unwrap_or(GapRatio::Undefined);
    Ok(ImportanceReport {
        layers,
        max_score: ranked[0].1,
        argmax: ranked[0].0,
        gap_ratio: gap,
        n_sequences: calib.len(),
        output_space,
    })
}

/// Descending by score, ties by ascending layer index.
pub fn rank_scores(scores: &[(usize, f64)]) -> Vec<(usize, f64)> {
    let mut out = scores.to_vec();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    out
}

pub fn rank_layers(report: &ImportanceReport) -> Vec<(usize, f64)> {
    rank_scores(&report.scores())
}

/// Top score divided by the best of the remaining scores.
pub fn gap_ratio(scores: &[(usize, f64)]) -> Result<GapRatio, ImportanceError> {
    if scores.len() < 2 {
        return Err(ImportanceError::TooFewLayers(scores.len()));
    }
    let ranked = rank_scores(scores);
    let (top, second) = (ranked[0].1, ranked[1].1);
    Ok(if second == 0.0 {
        if top == 0.0 {
            GapRatio::Finite(1.0)
        } else {
            GapRatio::Infinite
        }
    } else {
        GapRatio::Finite(top / second)
    })
}
