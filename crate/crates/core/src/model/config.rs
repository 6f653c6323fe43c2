use serde::{Deserialize, Serialize};

use super::ModelError;

/// One entry of a [`LayerPlan`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    /// GPT-2 block: attention and MLP, each pre-normed with a residual.
    FullBlock { dim: usize },
    /// Affine map to a narrower width.
    CompressProj { in_dim: usize, out_dim: usize },
    /// Attention-free bottleneck block `x + up(gelu(down(ln(x))))`.
    SmallBlock { dim: usize },
    /// Affine map back to a wider width.
    ExpandProj { in_dim: usize, out_dim: usize },
}

impl LayerSpec {
    pub fn in_dim(&self) -> usize {
        match *self {
            LayerSpec::FullBlock { dim } | LayerSpec::SmallBlock { dim } => dim,
            LayerSpec::CompressProj { in_dim, .. } | LayerSpec::ExpandProj { in_dim, .. } => in_dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        match *self {
            LayerSpec::FullBlock { dim } | LayerSpec::SmallBlock { dim } => dim,
            LayerSpec::CompressProj { out_dim, .. } | LayerSpec::ExpandProj { out_dim, .. } => out_dim,
        }
    }

    /// Blocks with a residual branch can be ablated; projections cannot.
    pub fn is_ablatable(&self) -> bool {
        matches!(self, LayerSpec::FullBlock { .. } | LayerSpec::SmallBlock { .. })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::FullBlock { .. } => "full_block",
            LayerSpec::CompressProj { .. } => "compress_proj",
            LayerSpec::SmallBlock { .. } => "small_block",
            LayerSpec::ExpandProj { .. } => "expand_proj",
        }
    }

    /// Scalar parameter count of this layer.
    pub fn parameter_count(&self) -> u64 {
        match *self {
            LayerSpec::FullBlock { dim } => {
                let d = dim as u64;
                let norms = 2 * (2 * d);
                let qkv = d * 3 * d + 3 * d;
                let attn_out = d * d + d;
                let fc = d * 4 * d + 4 * d;
                let mlp_out = 4 * d * d + d;
                norms + qkv + attn_out + fc + mlp_out
            }
            LayerSpec::SmallBlock { dim } => {
                let b = dim as u64;
                let h = b / 2;
                let down = b * h + h;
                let up = h * b + b;
                down + up + 2 * b
            }
            LayerSpec::CompressProj { in_dim, out_dim } | LayerSpec::ExpandProj { in_dim, out_dim } => {
                let (i, o) = (in_dim as u64, out_dim as u64);
                i * o + o
            }
        }
    }
}

impl std::fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LayerSpec::FullBlock { dim } => write!(f, "FullBlock({dim})"),
            LayerSpec::CompressProj { in_dim, out_dim } => write!(f, "Compress({in_dim}->{out_dim})"),
            LayerSpec::SmallBlock { dim } => write!(f, "SmallBlock({dim})"),
            LayerSpec::ExpandProj { in_dim, out_dim } => write!(f, "Expand({in_dim}->{out_dim})"),
        }
    }
}

/// Ordered layer stack between the embeddings and the final norm.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerPlan(pub Vec<LayerSpec>);

impl LayerPlan {
    pub fn new(specs: Vec<LayerSpec>) -> Self {
        Self(specs)
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `n` full blocks at width `d`.
    pub fn teacher(d: usize, n: usize) -> Self {
        Self(vec![LayerSpec::FullBlock { dim: d }; n])
    }

    /// Protected full block, compress to `b`, `n_small` bottleneck blocks,
    /// expand back to `d`, protected full block.
    pub fn critical_isolation(d: usize, b: usize, n_small: usize) -> Self {
        let mut specs = vec![LayerSpec::FullBlock { dim: d }, LayerSpec::CompressProj { in_dim: d, out_dim: b }];
        specs.extend(std::iter::repeat_n(LayerSpec::SmallBlock { dim: b }, n_small));
        specs.push(LayerSpec::ExpandProj { in_dim: b, out_dim: d });
        specs.push(LayerSpec::FullBlock { dim: d });
        Self(specs)
    }

    /// Compress to `b`, `n_small` bottleneck blocks, expand back; no full blocks.
    pub fn uniform_bottleneck(d: usize, b: usize, n_small: usize) -> Self {
        let mut specs = vec![LayerSpec::CompressProj { in_dim: d, out_dim: b }];
        specs.extend(std::iter::repeat_n(LayerSpec::SmallBlock { dim: b }, n_small));
        specs.push(LayerSpec::ExpandProj { in_dim: b, out_dim: d });
        Self(specs)
    }

    /// Number of layers that carry a residual branch.
    pub fn residual_layers(&self) -> usize {
        self.0.iter().filter(|s| s.is_ablatable()).count()
    }
}

/// Declarative architecture description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub layer_plan: LayerPlan,
    pub tie_lm_head: bool,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.vocab_size == 0 || self.context_length == 0 || self.d_model == 0 || self.n_heads == 0 {
            return bad("vocab_size, context_length, d_model and n_heads must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        let specs = self.layer_plan.specs();
        for (i, spec) in specs.iter().enumerate() {
            if spec.in_dim() == 0 || spec.out_dim() == 0 {
                return bad(format!("layer {i} ({spec}) has a zero dimension"));
            }
            match *spec {
                LayerSpec::FullBlock { dim } if dim % self.n_heads != 0 => {
                    return bad(format!(
                        "layer {i} ({spec}): width {dim} is not divisible by n_heads {}",
                        self.n_heads
                    ));
                }
                LayerSpec::SmallBlock { dim } if dim < 2 || dim % 2 != 0 => {
                    return bad(format!("layer {i} ({spec}): bottleneck width must be even"));
                }
                _ => {}
            }
        }
        if let Some(first) = specs.first() {
            if first.in_dim() != self.d_model {
                return Err(ModelError::PlanBoundary { position: "first", spec: *first, d_model: self.d_model });
            }
        }
        if let Some(last) = specs.last() {
            if last.out_dim() != self.d_model {
                return Err(ModelError::PlanBoundary { position: "last", spec: *last, d_model: self.d_model });
            }
        }
        for (i, pair) in specs.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(ModelError::PlanMismatch { index: i, left: pair[0], right: pair[1] });
            }
        }
        Ok(())
    }
}

/// Named architectures.
pub const PRESETS: [&str; 6] =
    ["teacher_medium", "cli_medium", "uniform_medium", "teacher_tiny", "cli_tiny", "uniform_tiny"];

const MEDIUM_VOCAB: usize = 50257;
const MEDIUM_CONTEXT: usize = 1024;
const MEDIUM_D: usize = 1024;
const MEDIUM_HEADS: usize = 16;
const MEDIUM_LAYERS: usize = 24;

const TINY_VOCAB: usize = 256;
const TINY_CONTEXT: usize = 256;
const TINY_D: usize = 96;
const TINY_HEADS: usize = 4;
const TINY_LAYERS: usize = 6;

pub fn make_preset(name: &str) -> Result<ModelConfig, ModelError> {
    let medium = |plan: LayerPlan, tie: bool| ModelConfig {
        vocab_size: MEDIUM_VOCAB,
        context_length: MEDIUM_CONTEXT,
        d_model: MEDIUM_D,
        n_heads: MEDIUM_HEADS,
        layer_plan: plan,
        tie_lm_head: tie,
        seed: 0,
    };
    let tiny = |plan: LayerPlan, tie: bool| ModelConfig {
        vocab_size: TINY_VOCAB,
        context_length: TINY_CONTEXT,
        d_model: TINY_D,
        n_heads: TINY_HEADS,
        layer_plan: plan,
        tie_lm_head: tie,
        seed: 0,
    };
    let config = match name {
        "teacher_medium" => medium(LayerPlan::teacher(MEDIUM_D, MEDIUM_LAYERS), true),
        "cli_medium" => medium(LayerPlan::critical_isolation(MEDIUM_D, 768, MEDIUM_LAYERS - 2), false),
        "uniform_medium" => medium(LayerPlan::uniform_bottleneck(MEDIUM_D, 600, MEDIUM_LAYERS), false),
        "teacher_tiny" => tiny(LayerPlan::teacher(TINY_D, TINY_LAYERS), true),
        // Bottleneck 64, not the width-ratio analog 96 · 768/1024 = 72.
        "cli_tiny" => tiny(LayerPlan::critical_isolation(TINY_D, 64, TINY_LAYERS - 2), false),
        // 96 · 600/1024 = 56.25, rounded to the nearest even width.
        "uniform_tiny" => tiny(LayerPlan::uniform_bottleneck(TINY_D, 56, TINY_LAYERS), false),
        other => return Err(ModelError::UnknownPreset { name: other.to_string(), valid: PRESETS.join(", ") }),
    };
    Ok(config)
}
