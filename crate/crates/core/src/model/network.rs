use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{parameter_count, LayerSpec, ModelConfig, ModelError};
use crate::tensor::{Tape, Tensor, VarId};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in × out`
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

/// Pre-norm GPT-2 block: `x += proj(attn(ln1(x)))`, `x += mlp(ln2(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct FullBlock {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub attn_out: Linear,
    pub ln2: LayerNorm,
    pub fc: Linear,
    pub mlp_out: Linear,
}

/// Position-wise bottleneck: `x += up(gelu(down(ln(x))))`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmallBlock {
    pub ln: LayerNorm,
    pub down: Linear,
    pub up: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Full(FullBlock),
    Compress(Linear),
    Small(SmallBlock),
    Expand(Linear),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    pub wte: Tensor,
    pub wpe: Tensor,
    pub layers: Vec<Layer>,
    pub ln_f: LayerNorm,
    /// `d × V`; `None` when tied to `wte`.
    pub lm_head: Option<Tensor>,
}

struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    fn weight(&mut self, shape: &[usize], scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.normal.sample(&mut self.rng) * scale).collect();
        Tensor::new(shape, data).expect("positive dims").with_grad()
    }

    fn linear(&mut self, din: usize, dout: usize, scale: f64) -> Linear {
        Linear { weight: self.weight(&[din, dout], scale), bias: Tensor::zeros(&[dout]).with_grad() }
    }
}

fn layer_norm(d: usize) -> LayerNorm {
    LayerNorm { gain: Tensor::ones(&[d]).with_grad(), bias: Tensor::zeros(&[d]).with_grad() }
}

impl Linear {
    fn tensors(&self) -> [(&'static str, &Tensor); 2] {
        [("weight", &self.weight), ("bias", &self.bias)]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

impl LayerNorm {
    fn tensors(&self) -> [(&'static str, &Tensor); 2] {
        [("gain", &self.gain), ("bias", &self.bias)]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.gain, &mut self.bias]
    }
}

impl Layer {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        fn push<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, items: [(&str, &'a Tensor); 2]) {
            out.extend(items.map(|(n, t)| (format!("{prefix}{n}"), t)));
        }
        let mut out = Vec::new();
        match self {
            Layer::Full(b) => {
                push(&mut out, "ln1.", b.ln1.tensors());
                push(&mut out, "qkv.", b.qkv.tensors());
                push(&mut out, "attn_out.", b.attn_out.tensors());
                push(&mut out, "ln2.", b.ln2.tensors());
                push(&mut out, "fc.", b.fc.tensors());
                push(&mut out, "mlp_out.", b.mlp_out.tensors());
            }
            Layer::Small(b) => {
                push(&mut out, "ln.", b.ln.tensors());
                push(&mut out, "down.", b.down.tensors());
                push(&mut out, "up.", b.up.tensors());
            }
            Layer::Compress(l) | Layer::Expand(l) => push(&mut out, "", l.tensors()),
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Full(b) => {
                let mut v = Vec::with_capacity(12);
                v.extend(b.ln1.tensors_mut());
                v.extend(b.qkv.tensors_mut());
                v.extend(b.attn_out.tensors_mut());
                v.extend(b.ln2.tensors_mut());
                v.extend(b.fc.tensors_mut());
                v.extend(b.mlp_out.tensors_mut());
                v
            }
            Layer::Small(b) => {
                let mut v = Vec::with_capacity(6);
                v.extend(b.ln.tensors_mut());
                v.extend(b.down.tensors_mut());
                v.extend(b.up.tensors_mut());
                v
            }
            Layer::Compress(l) | Layer::Expand(l) => l.tensors_mut().into_iter().collect(),
        }
    }
}

/// Tape handles for every model parameter, in [`Model::named_parameters`] order.
#[derive(Debug, Clone)]
pub struct Bound {
    ids: Vec<VarId>,
}

impl Bound {
    pub fn ids(&self) -> &[VarId] {
        &self.ids
    }
}

/// Walks parameter handles in the same order the model enumerates them.
struct Cursor<'a> {
    ids: std::slice::Iter<'a, VarId>,
}

impl Cursor<'_> {
    fn next(&mut self) -> VarId {
        *self.ids.next().expect("binding covers every parameter")
    }

    fn pair(&mut self) -> (VarId, VarId) {
        let a = self.next();
        (a, self.next())
    }
}

pub fn build_model(config: &ModelConfig) -> Result<Model, ModelError> {
    config.validate()?;
    let mut init =
        Init { rng: ChaCha8Rng::seed_from_u64(config.seed), normal: Normal::new(0.0, INIT_STD).expect("valid std") };
    let d = config.d_model;
    let residual_scale = 1.0 / ((2 * config.layer_plan.residual_layers().max(1)) as f64).sqrt();
    let wte = init.weight(&[config.vocab_size, d], 1.0);
    let wpe = init.weight(&[config.context_length, d], 1.0);
    let layers = config
        .layer_plan
        .specs()
        .iter()
        .map(|spec| match *spec {
            LayerSpec::FullBlock { dim } => Layer::Full(FullBlock {
                ln1: layer_norm(dim),
                qkv: init.linear(dim, 3 * dim, 1.0),
                attn_out: init.linear(dim, dim, residual_scale),
                ln2: layer_norm(dim),
                fc: init.linear(dim, 4 * dim, 1.0),
                mlp_out: init.linear(4 * dim, dim, residual_scale),
            }),
            LayerSpec::SmallBlock { dim } => Layer::Small(SmallBlock {
                ln: layer_norm(dim),
                down: init.linear(dim, dim / 2, 1.0),
                up: init.linear(dim / 2, dim, residual_scale),
            }),
            LayerSpec::CompressProj { in_dim, out_dim } => Layer::Compress(init.linear(in_dim, out_dim, 1.0)),
            LayerSpec::ExpandProj { in_dim, out_dim } => Layer::Expand(init.linear(in_dim, out_dim, 1.0)),
        })
        .collect();
    let ln_f = layer_norm(d);
    let lm_head = (!config.tie_lm_head).then(|| init.weight(&[d, config.vocab_size], 1.0));
    Ok(Model { config: config.clone(), wte, wpe, layers, ln_f, lm_head })
}

/// Parameter names and shapes a configuration produces, in checkpoint order,
/// computed without allocating the weights.
pub fn parameter_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let mut out =
        vec![("wte".to_string(), vec![config.vocab_size, d]), ("wpe".to_string(), vec![config.context_length, d])];
    let linear = |out: &mut Vec<(String, Vec<usize>)>, prefix: String, din: usize, dout: usize| {
        out.push((format!("{prefix}weight"), vec![din, dout]));
        out.push((format!("{prefix}bias"), vec![dout]));
    };
    let norm = |out: &mut Vec<(String, Vec<usize>)>, prefix: String, w: usize| {
        out.push((format!("{prefix}gain"), vec![w]));
        out.push((format!("{prefix}bias"), vec![w]));
    };
    for (i, spec) in config.layer_plan.specs().iter().enumerate() {
        let p = format!("layers.{i}.");
        match *spec {
            LayerSpec::FullBlock { dim } => {
                norm(&mut out, format!("{p}ln1."), dim);
                linear(&mut out, format!("{p}qkv."), dim, 3 * dim);
                linear(&mut out, format!("{p}attn_out."), dim, dim);
                norm(&mut out, format!("{p}ln2."), dim);
                linear(&mut out, format!("{p}fc."), dim, 4 * dim);
                linear(&mut out, format!("{p}mlp_out."), 4 * dim, dim);
            }
            LayerSpec::SmallBlock { dim } => {
                norm(&mut out, format!("{p}ln."), dim);
                linear(&mut out, format!("{p}down."), dim, dim / 2);
                linear(&mut out, format!("{p}up."), dim / 2, dim);
            }
            LayerSpec::CompressProj { in_dim, out_dim } | LayerSpec::ExpandProj { in_dim, out_dim } => {
                linear(&mut out, p, in_dim, out_dim);
            }
        }
    }
    norm(&mut out, "ln_f.".into(), d);
    if !config.tie_lm_head {
        out.push(("lm_head".into(), vec![d, config.vocab_size]));
    }
    out
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    /// Parameters in checkpoint order: embeddings, layers in plan order,
    /// final norm, head.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("wte".to_string(), &self.wte), ("wpe".to_string(), &self.wpe)];
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(layer.named_tensors().into_iter().map(|(n, t)| (format!("layers.{i}.{n}"), t)));
        }
        out.push(("ln_f.gain".into(), &self.ln_f.gain));
        out.push(("ln_f.bias".into(), &self.ln_f.bias));
        if let Some(h) = &self.lm_head {
            out.push(("lm_head".into(), h));
        }
        out
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        self.named_parameters().into_iter().map(|(_, t)| t).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.wte, &mut self.wpe];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.ln_f.gain);
        out.push(&mut self.ln_f.bias);
        if let Some(h) = self.lm_head.as_mut() {
            out.push(h);
        }
        out
    }

    /// Total scalar parameters actually held.
    pub fn parameter_count(&self) -> u64 {
        self.parameters().iter().map(|t| t.len() as u64).sum()
    }

    pub fn zero_grads(&mut self) {
        self.parameters_mut().into_iter().for_each(Tensor::zero_grad);
    }

    /// Adds tape gradients of every bound parameter into its grad buffer.
    pub fn absorb_grads(&mut self, tape: &Tape, bound: &Bound) {
        for (p, &id) in self.parameters_mut().into_iter().zip(&bound.ids) {
            if let Some(g) = tape.grad(id) {
                p.accumulate_grad(g);
            }
        }
    }

    /// Copies every parameter onto `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound { ids: self.parameters().into_iter().map(|t| tape.leaf(t)).collect() }
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<(), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.context_length {
            return Err(ModelError::Input(format!(
                "sequence length {} exceeds context length {}",
                tokens.len(),
                self.config.context_length
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(ModelError::Input(format!(
                "token {t} is outside the vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Checks that `layer` exists and has a residual branch.
    pub fn check_ablatable(&self, layer: usize) -> Result<(), ModelError> {
        let specs = self.config.layer_plan.specs();
        let spec = specs.get(layer).ok_or(ModelError::LayerIndex { index: layer, len: specs.len() })?;
        if !spec.is_ablatable() {
            return Err(ModelError::UnsupportedAblation { index: layer, spec: *spec });
        }
        Ok(())
    }

    /// Records a forward pass on `tape` and returns the `L × V` logits.
    /// When `ablate` names a layer, its residual branch is dropped so the
    /// layer passes its input through unchanged.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        tokens: &[usize],
        ablate: Option<usize>,
    ) -> Result<VarId, ModelError> {
        self.check_tokens(tokens)?;
        if let Some(l) = ablate {
            self.check_ablatable(l)?;
        }
        let mut p = Cursor { ids: bound.ids.iter() };
        let (wte, wpe) = p.pair();
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let tok = tape.embedding(wte, tokens)?;
        let pos = tape.embedding(wpe, &positions)?;
        let mut x = tape.add(tok, pos)?;
        let heads = self.config.n_heads;
        for (i, layer) in self.layers.iter().enumerate() {
            let skip = ablate == Some(i);
            x = match layer {
                Layer::Full(_) => {
                    let ln1 = p.pair();
                    let qkv = p.pair();
                    let attn_out = p.pair();
                    let ln2 = p.pair();
                    let fc = p.pair();
                    let mlp_out = p.pair();
                    if skip {
                        x
                    } else {
                        let h = tape.layer_norm(x, ln1.0, ln1.1, LAYER_NORM_EPS)?;
                        let h = tape.linear(h, qkv.0, Some(qkv.1))?;
                        let h = tape.causal_attention(h, heads)?;
                        let h = tape.linear(h, attn_out.0, Some(attn_out.1))?;
                        let x1 = tape.add(x, h)?;
                        let h = tape.layer_norm(x1, ln2.0, ln2.1, LAYER_NORM_EPS)?;
                        let h = tape.linear(h, fc.0, Some(fc.1))?;
                        let h = tape.gelu(h);
                        let h = tape.linear(h, mlp_out.0, Some(mlp_out.1))?;
                        tape.add(x1, h)?
                    }
                }
                Layer::Small(_) => {
                    let ln = p.pair();
                    let down = p.pair();
                    let up = p.pair();
                    if skip {
                        x
                    } else {
                        let h = tape.layer_norm(x, ln.0, ln.1, LAYER_NORM_EPS)?;
                        let h = tape.linear(h, down.0, Some(down.1))?;
                        let h = tape.gelu(h);
                        let h = tape.linear(h, up.0, Some(up.1))?;
                        tape.add(x, h)?
                    }
                }
                Layer::Compress(_) | Layer::Expand(_) => {
                    let (w, b) = p.pair();
                    tape.linear(x, w, Some(b))?
                }
            };
        }
        let (g, b) = p.pair();
        let h = tape.layer_norm(x, g, b, LAYER_NORM_EPS)?;
        let logits = if self.lm_head.is_some() {
            let head = p.next();
            tape.matmul(h, head)?
        } else {
            let wt = tape.transpose(wte)?;
            tape.matmul(h, wt)?
        };
        Ok(logits)
    }

    /// Logits for `tokens` without recording gradients.
    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor, ModelError> {
        self.eval(tokens, None)
    }

    /// Logits with layer `layer`'s residual branch zeroed.
    pub fn forward_ablated(&self, tokens: &[usize], layer: usize) -> Result<Tensor, ModelError> {
        self.eval(tokens, Some(layer))
    }

    fn eval(&self, tokens: &[usize], ablate: Option<usize>) -> Result<Tensor, ModelError> {
        let mut tape = Tape::no_record();
        let bound = self.bind(&mut tape);
        let logits = self.forward_on(&mut tape, &bound, tokens, ablate)?;
        Ok(tape.value(logits).clone())
    }

    /// True when the built parameters match the configuration's accounting.
    pub fn matches_accounting(&self) -> bool {
        self.parameter_count() == parameter_count(&self.config).total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_preset, LayerPlan};

    fn small_config(plan: LayerPlan) -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            context_length: 8,
            d_model: 8,
            n_heads: 2,
            layer_plan: plan,
            tie_lm_head: false,
            seed: 3,
        }
    }

    #[test]
    fn names_are_unique_and_ordered() {
        let mut m = build_model(&make_preset("cli_tiny").unwrap()).unwrap();
        let names: Vec<String> = m.named_parameters().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "wte");
        assert_eq!(names[2], "layers.0.ln1.gain");
        assert_eq!(names.last().unwrap(), "lm_head");
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        assert_eq!(m.parameters_mut().len(), names.len());
    }

    #[test]
    fn layout_matches_built_parameters() {
        for name in ["teacher_tiny", "cli_tiny", "uniform_tiny"] {
            let cfg = make_preset(name).unwrap();
            let m = build_model(&cfg).unwrap();
            let built: Vec<(String, Vec<usize>)> =
                m.named_parameters().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
            assert_eq!(built, parameter_layout(&cfg));
        }
    }

    #[test]
    fn input_errors() {
        let m = build_model(&small_config(LayerPlan::teacher(8, 1))).unwrap();
        assert!(matches!(m.forward(&[1; 9]), Err(ModelError::Input(_))));
        assert!(matches!(m.forward(&[11]), Err(ModelError::Input(_))));
        assert!(matches!(m.forward(&[]), Err(ModelError::Input(_))));
        assert_eq!(m.forward(&[1, 2, 3]).unwrap().shape(), &[3, 11]);
    }

    #[test]
    fn ablation_errors() {
        let m = build_model(&small_config(LayerPlan::critical_isolation(8, 4, 1))).unwrap();
        assert!(matches!(m.forward_ablated(&[1], 1), Err(ModelError::UnsupportedAblation { index: 1, .. })));
        assert!(matches!(m.forward_ablated(&[1], 9), Err(ModelError::LayerIndex { index: 9, len: 5 })));
        assert!(m.forward_ablated(&[1], 2).is_ok());
    }

    #[test]
    fn init_is_seeded() {
        let a = build_model(&small_config(LayerPlan::teacher(8, 2))).unwrap();
        let b = build_model(&small_config(LayerPlan::teacher(8, 2))).unwrap();
        assert_eq!(a, b);
        let mut cfg = small_config(LayerPlan::teacher(8, 2));
        cfg.seed = 4;
        assert_ne!(build_model(&cfg).unwrap().wte, a.wte);
    }
}
