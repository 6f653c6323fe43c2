use super::ops::{self, gemm, MatMut, MatRef};
use super::{Result, Tensor, TensorError};

/// Floor applied to probabilities before taking logarithms in the KL term.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(usize);

impl VarId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul { a: VarId, b: VarId },
    Linear { x: VarId, w: VarId, b: Option<VarId> },
    Transpose { a: VarId },
    Add { a: VarId, b: VarId },
    Mul { a: VarId, b: VarId },
    Scale { a: VarId, factor: f64 },
    Sum { a: VarId },
    Gelu { a: VarId },
    LayerNorm { x: VarId, gain: VarId, bias: VarId, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax { a: VarId },
    CrossEntropy { logits: VarId, labels: Vec<usize>, probs: Vec<f64> },
    Kl { p: VarId, q: VarId },
    Embedding { table: VarId, ids: Vec<usize> },
    CausalAttention { qkv: VarId, heads: usize, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
    grad: Option<Vec<f64>>,
}

/// Ordered record of primitive operations.
///
/// A recording tape keeps enough state on each node to compute
/// vector-Jacobian products. A non-recording tape (see [`Tape::no_record`])
/// only evaluates values; `backward` on it is an error.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, left: &Tensor, right: &Tensor) -> TensorError {
    TensorError::ShapeMismatch { op, left: left.shape().to_vec(), right: right.shape().to_vec() }
}

fn require_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() == rank {
        Ok(())
    } else {
        Err(TensorError::Rank { op, expected: rank, shape: t.shape().to_vec() })
    }
}

fn axpy(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), recording: true }
    }

    /// A tape that evaluates values without recording backward state.
    pub fn no_record() -> Self {
        Self { nodes: Vec::new(), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of a tracked leaf, if backward reached it.
    pub fn grad(&self, id: VarId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn is_tracked(&self, id: VarId) -> bool {
        self.nodes[id.0].tracked
    }

    /// Copies a tensor onto the tape. It is tracked when the tensor
    /// requires grad and the tape records.
    pub fn leaf(&mut self, tensor: &Tensor) -> VarId {
        let tracked = self.recording && tensor.requires_grad();
        let mut value = tensor.clone();
        value.clear_grad();
        self.push(value, if tracked { Op::Leaf } else { Op::Constant }, tracked)
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, mut tensor: Tensor) -> VarId {
        tensor.clear_grad();
        tensor.set_requires_grad(false);
        self.push(tensor, Op::Constant, false)
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> VarId {
        let op = if self.recording { op } else { Op::Constant };
        self.nodes.push(Node { value, op, tracked: tracked && self.recording, grad: None });
        VarId(self.nodes.len() - 1)
    }

    fn tracked_any(&self, ids: &[VarId]) -> bool {
        self.recording && ids.iter().any(|id| self.nodes[id.0].tracked)
    }

    /// Matrix product of two rank-2 values.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (av, bv) = (self.value(a), self.value(b));
        require_rank("matmul", av, 2)?;
        require_rank("matmul", bv, 2)?;
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        if bv.shape()[0] != k {
            return Err(shape_err("matmul", av, bv));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            MatRef::row_major(av.data(), k),
            MatRef::row_major(bv.data(), n),
            0.0,
            MatMut::row_major(&mut out, n),
        );
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b }, tracked))
    }

    /// Affine map `x·w + b` with `x: n×in`, `w: in×out`, `b: out`.
    pub fn linear(&mut self, x: VarId, w: VarId, b: Option<VarId>) -> Result<VarId> {
        let (xv, wv) = (self.value(x), self.value(w));
        require_rank("linear", xv, 2)?;
        require_rank("linear", wv, 2)?;
        let (n, din, dout) = (xv.shape()[0], xv.shape()[1], wv.shape()[1]);
        if wv.shape()[0] != din {
            return Err(shape_err("linear", xv, wv));
        }
        let mut out = vec![0.0; n * dout];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != dout {
                return Err(shape_err("linear", wv, bv));
            }
            for row in out.chunks_exact_mut(dout) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(
            n,
            din,
            dout,
            1.0,
            MatRef::row_major(xv.data(), din),
            MatRef::row_major(wv.data(), dout),
            1.0,
            MatMut::row_major(&mut out, dout),
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let tracked = self.tracked_any(&inputs);
        Ok(self.push(Tensor::new(&[n, dout], out)?, Op::Linear { x, w, b }, tracked))
    }

    pub fn transpose(&mut self, a: VarId) -> Result<VarId> {
        let av = self.value(a);
        require_rank("transpose", av, 2)?;
        let (r, c) = (av.shape()[0], av.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av.data()[i * c + j];
            }
        }
        let tracked = self.tracked_any(&[a]);
        Ok(self.push(Tensor::new(&[c, r], out)?, Op::Transpose { a }, tracked))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("add", av, bv));
        }
        let out: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let shape = av.shape().to_vec();
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Add { a, b }, tracked))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", av, bv));
        }
        let out: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let shape = av.shape().to_vec();
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Mul { a, b }, tracked))
    }

    pub fn scale(&mut self, a: VarId, factor: f64) -> VarId {
        let av = self.value(a);
        let out: Vec<f64> = av.data().iter().map(|x| x * factor).collect();
        let shape = av.shape().to_vec();
        let tracked = self.tracked_any(&[a]);
        let t = Tensor::new(&shape, out).expect("shape preserved");
        self.push(t, Op::Scale { a, factor }, tracked)
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: VarId) -> VarId {
        let s: f64 = self.value(a).data().iter().sum();
        let tracked = self.tracked_any(&[a]);
        self.push(Tensor::scalar(s), Op::Sum { a }, tracked)
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: VarId) -> VarId {
        let av = self.value(a);
        let out: Vec<f64> = av.data().iter().map(|&x| ops::gelu(x)).collect();
        let shape = av.shape().to_vec();
        let tracked = self.tracked_any(&[a]);
        let t = Tensor::new(&shape, out).expect("shape preserved");
        self.push(t, Op::Gelu { a }, tracked)
    }

    /// Normalizes each last-axis slice to zero mean and unit variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: VarId, gain: VarId, bias: VarId, eps: f64) -> Result<VarId> {
        if eps <= 0.0 {
            return Err(TensorError::Invalid(format!("layer_norm eps must be positive, got {eps}")));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.last_dim();
        if gv.len() != d {
            return Err(shape_err("layer_norm", xv, gv));
        }
        if bv.len() != d {
            return Err(shape_err("layer_norm", xv, bv));
        }
        let rows = xv.rows();
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            rstd[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let shape = xv.shape().to_vec();
        let tracked = self.tracked_any(&[x, gain, bias]);
        let (xhat, rstd) = if tracked { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(Tensor::new(&shape, out)?, Op::LayerNorm { x, gain, bias, xhat, rstd }, tracked))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: VarId) -> VarId {
        let av = self.value(a);
        let w = av.last_dim();
        let mut out = av.data().to_vec();
        out.chunks_exact_mut(w).for_each(ops::softmax_row);
        let shape = av.shape().to_vec();
        let tracked = self.tracked_any(&[a]);
        let t = Tensor::new(&shape, out).expect("shape preserved");
        self.push(t, Op::Softmax { a }, tracked)
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: VarId, labels: &[usize]) -> Result<VarId> {
        let lv = self.value(logits);
        let v = lv.last_dim();
        let n = lv.rows();
        if labels.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= v) {
            return Err(TensorError::Index { op: "cross_entropy", index: bad, bound: v });
        }
        let mut total = 0.0;
        let mut probs = vec![0.0; lv.len()];
        for (r, &label) in labels.iter().enumerate() {
            let row = lv.row(r);
            let lse = ops::log_sum_exp(row);
            total += lse - row[label];
            for j in 0..v {
                probs[r * v + j] = (row[j] - lse).exp();
            }
        }
        let tracked = self.tracked_any(&[logits]);
        let probs = if tracked { probs } else { Vec::new() };
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), probs };
        Ok(self.push(Tensor::scalar(total / n as f64), op, tracked))
    }

    /// Row-mean of `Σ p·(ln p − ln q)` for probability rows `p` and `q`.
    ///
    /// Logarithm arguments are clamped at [`LOG_FLOOR`].
    pub fn kl_divergence(&mut self, p: VarId, q: VarId) -> Result<VarId> {
        let (pv, qv) = (self.value(p), self.value(q));
        if pv.shape() != qv.shape() {
            return Err(shape_err("kl_divergence", pv, qv));
        }
        let n = pv.rows();
        let total: f64 = pv
            .data()
            .iter()
            .zip(qv.data())
            .map(|(&pi, &qi)| pi * (pi.max(LOG_FLOOR).ln() - qi.max(LOG_FLOOR).ln()))
            .sum();
        let tracked = self.tracked_any(&[p, q]);
        Ok(self.push(Tensor::scalar(total / n as f64), Op::Kl { p, q }, tracked))
    }

    /// Gathers rows `ids` of a rank-2 table.
    pub fn embedding(&mut self, table: VarId, ids: &[usize]) -> Result<VarId> {
        let tv = self.value(table);
        require_rank("embedding", tv, 2)?;
        let (rows, d) = (tv.shape()[0], tv.shape()[1]);
        if ids.is_empty() {
            return Err(TensorError::Invalid("embedding: empty id list".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::Index { op: "embedding", index: id, bound: rows });
            }
            out.extend_from_slice(tv.row(id));
        }
        let tracked = self.tracked_any(&[table]);
        Ok(self.push(Tensor::new(&[ids.len(), d], out)?, Op::Embedding { table, ids: ids.to_vec() }, tracked))
    }

    /// Multi-head causal self-attention over a fused `L × 3d` query/key/value
    /// matrix. Position `i` attends to positions `0..=i`.
    pub fn causal_attention(&mut self, qkv: VarId, heads: usize) -> Result<VarId> {
        let qv = self.value(qkv);
        require_rank("causal_attention", qv, 2)?;
        let (l, w) = (qv.shape()[0], qv.shape()[1]);
        if heads == 0 || w % 3 != 0 || (w / 3) % heads != 0 {
            return Err(TensorError::Invalid(format!(
                "causal_attention: width {w} is not 3 × a multiple of {heads} heads"
            )));
        }
        let d = w / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let src = qv.data();
        let mut out = vec![0.0; l * d];
        let mut probs = vec![0.0; heads * l * l];
        for h in 0..heads {
            let p = &mut probs[h * l * l..(h + 1) * l * l];
            let q = MatRef { data: src, offset: h * dh, rs: w, cs: 1 };
            let kt = MatRef { data: src, offset: d + h * dh, rs: 1, cs: w };
            gemm(l, dh, l, scale, q, kt, 0.0, MatMut::row_major(p, l));
            for i in 0..l {
                let row = &mut p[i * l..(i + 1) * l];
                ops::softmax_row(&mut row[..=i]);
                row[i + 1..].iter_mut().for_each(|v| *v = 0.0);
            }
            let v = MatRef { data: src, offset: 2 * d + h * dh, rs: w, cs: 1 };
            let o = MatMut { data: &mut out, offset: h * dh, rs: d, cs: 1 };
            gemm(l, l, dh, 1.0, MatRef::row_major(p, l), v, 0.0, o);
        }
        let tracked = self.tracked_any(&[qkv]);
        let probs = if tracked { probs } else { Vec::new() };
        Ok(self.push(Tensor::new(&[l, d], out)?, Op::CausalAttention { qkv, heads, probs }, tracked))
    }

    /// Reverse pass from a scalar `loss`. Gradients are added to the
    /// buffers of tracked leaves, so repeated calls accumulate.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if !self.recording {
            return Err(TensorError::NotRecording);
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].tracked {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        let mut leaf_updates = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            self.propagate(i, g, &mut adj, &mut leaf_updates);
        }
        for (i, g) in leaf_updates {
            let node = &mut self.nodes[i];
            match node.grad.as_mut() {
                Some(acc) => axpy(acc, &g),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn send(&self, adj: &mut [Option<Vec<f64>>], id: VarId, delta: Vec<f64>) {
        if !self.nodes[id.0].tracked {
            return;
        }
        match adj[id.0].as_mut() {
            Some(acc) => axpy(acc, &delta),
            None => adj[id.0] = Some(delta),
        }
    }

    fn propagate(
        &self,
        i: usize,
        g: Vec<f64>,
        adj: &mut [Option<Vec<f64>>],
        leaf_updates: &mut Vec<(usize, Vec<f64>)>,
    ) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => leaf_updates.push((i, g)),
            Op::Constant => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.is_tracked(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        MatRef::row_major(&g, n),
                        MatRef::transposed(bv.data(), n),
                        0.0,
                        MatMut::row_major(&mut da, k),
                    );
                    self.send(adj, *a, da);
                }
                if self.is_tracked(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        MatRef::transposed(av.data(), k),
                        MatRef::row_major(&g, n),
                        0.0,
                        MatMut::row_major(&mut db, n),
                    );
                    self.send(adj, *b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, din, dout) = (xv.shape()[0], xv.shape()[1], wv.shape()[1]);
                if self.is_tracked(*x) {
                    let mut dx = vec![0.0; n * din];
                    gemm(
                        n,
                        dout,
                        din,
                        1.0,
                        MatRef::row_major(&g, dout),
                        MatRef::transposed(wv.data(), dout),
                        0.0,
                        MatMut::row_major(&mut dx, din),
                    );
                    self.send(adj, *x, dx);
                }
                if self.is_tracked(*w) {
                    let mut dw = vec![0.0; din * dout];
                    gemm(
                        din,
                        n,
                        dout,
                        1.0,
                        MatRef::transposed(xv.data(), din),
                        MatRef::row_major(&g, dout),
                        0.0,
                        MatMut::row_major(&mut dw, dout),
                    );
                    self.send(adj, *w, dw);
                }
                if let Some(b) = b {
                    if self.is_tracked(*b) {
                        let mut db = vec![0.0; dout];
                        for row in g.chunks_exact(dout) {
                            axpy(&mut db, row);
                        }
                        self.send(adj, *b, db);
                    }
                }
            }
            Op::Transpose { a } => {
                let (r, c) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = g[j * r + i];
                    }
                }
                self.send(adj, *a, da);
            }
            Op::Add { a, b } => {
                if a == b {
                    self.send(adj, *a, g.iter().map(|v| 2.0 * v).collect());
                } else {
                    self.send(adj, *b, g.clone());
                    self.send(adj, *a, g);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da: Vec<f64> = g.iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = g.iter().zip(av.data()).map(|(g, x)| g * x).collect();
                self.send(adj, *a, da);
                self.send(adj, *b, db);
            }
            Op::Scale { a, factor } => {
                self.send(adj, *a, g.iter().map(|v| v * factor).collect());
            }
            Op::Sum { a } => {
                let n = self.value(*a).len();
                self.send(adj, *a, vec![g[0]; n]);
            }
            Op::Gelu { a } => {
                let av = self.value(*a);
                let da = av.data().iter().zip(&g).map(|(&x, gv)| gv * ops::gelu_grad(x)).collect();
                self.send(adj, *a, da);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gv = self.value(*gain);
                let d = gv.len();
                let rows = rstd.len();
                if self.is_tracked(*x) {
                    let mut dx = vec![0.0; rows * d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gv.data()[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gv.data()[j];
                            dx[r * d + j] = rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    self.send(adj, *x, dx);
                }
                if self.is_tracked(*gain) {
                    let mut dg = vec![0.0; d];
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    self.send(adj, *gain, dg);
                }
                if self.is_tracked(*bias) {
                    let mut db = vec![0.0; d];
                    for gr in g.chunks_exact(d) {
                        axpy(&mut db, gr);
                    }
                    self.send(adj, *bias, db);
                }
            }
            Op::Softmax { a } => {
                let y = &node.value;
                let w = y.last_dim();
                let mut da = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.data().chunks_exact(w).zip(g.chunks_exact(w)).zip(da.chunks_exact_mut(w)) {
                    ops::softmax_row_backward(yr, gr, dr);
                }
                self.send(adj, *a, da);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let v = self.value(*logits).last_dim();
                let scale = g[0] / labels.len() as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &label) in labels.iter().enumerate() {
                    dl[r * v + label] -= scale;
                }
                self.send(adj, *logits, dl);
            }
            Op::Kl { p, q } => {
                let (pv, qv) = (self.value(*p), self.value(*q));
                let scale = g[0] / pv.rows() as f64;
                if self.is_tracked(*p) {
                    let dp = pv
                        .data()
                        .iter()
                        .zip(qv.data())
                        .map(|(&pi, &qi)| {
                            let slope = if pi > LOG_FLOOR { 1.0 } else { 0.0 };
                            scale * (pi.max(LOG_FLOOR).ln() - qi.max(LOG_FLOOR).ln() + slope)
                        })
                        .collect();
                    self.send(adj, *p, dp);
                }
                if self.is_tracked(*q) {
                    let dq = pv
                        .data()
                        .iter()
                        .zip(qv.data())
                        .map(|(&pi, &qi)| if qi > LOG_FLOOR { -scale * pi / qi } else { 0.0 })
                        .collect();
                    self.send(adj, *q, dq);
                }
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let d = tv.shape()[1];
                let mut dt = vec![0.0; tv.len()];
                for (r, &id) in ids.iter().enumerate() {
                    axpy(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
                self.send(adj, *table, dt);
            }
            Op::CausalAttention { qkv, heads, probs } => {
                let src = self.value(*qkv).data();
                let l = node.value.shape()[0];
                let d = node.value.shape()[1];
                let w = 3 * d;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dqkv = vec![0.0; l * w];
                let mut dp = vec![0.0; l * l];
                for h in 0..*heads {
                    let p = &probs[h * l * l..(h + 1) * l * l];
                    let go = MatRef { data: &g, offset: h * dh, rs: d, cs: 1 };
                    let vt = MatRef { data: src, offset: 2 * d + h * dh, rs: 1, cs: w };
                    gemm(l, dh, l, 1.0, go, vt, 0.0, MatMut::row_major(&mut dp, l));
                    let dv = MatMut { data: &mut dqkv, offset: 2 * d + h * dh, rs: w, cs: 1 };
                    gemm(l, l, dh, 1.0, MatRef::transposed(p, l), go, 0.0, dv);
                    // dp becomes the score gradient in place.
                    for i in 0..l {
                        let pr = &p[i * l..i * l + i + 1];
                        let dr = &mut dp[i * l..(i + 1) * l];
                        let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                        for j in 0..=i {
                            dr[j] = pr[j] * (dr[j] - dot);
                        }
                        dr[i + 1..].iter_mut().for_each(|v| *v = 0.0);
                    }
                    let k = MatRef { data: src, offset: d + h * dh, rs: w, cs: 1 };
                    let dq = MatMut { data: &mut dqkv, offset: h * dh, rs: w, cs: 1 };
                    gemm(l, l, dh, scale, MatRef::row_major(&dp, l), k, 0.0, dq);
                    let q = MatRef { data: src, offset: h * dh, rs: w, cs: 1 };
                    let dk = MatMut { data: &mut dqkv, offset: d + h * dh, rs: w, cs: 1 };
                    gemm(l, l, dh, scale, MatRef::transposed(&dp, l), q, 0.0, dk);
                }
                self.send(adj, *qkv, dqkv);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_record_backward_is_noop() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(2.0));
        assert!(tape.backward(x).is_ok());
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn no_record_rejects_backward() {
        let mut tape = Tape::no_record();
        let x = tape.leaf(&Tensor::scalar(2.0).with_grad());
        let y = tape.sum(x);
        assert_eq!(tape.backward(y), Err(TensorError::NotRecording));
        assert!(!tape.is_tracked(x));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::ones(&[2]).with_grad());
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn add_with_itself_doubles() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(&[2], vec![1.0, -1.0]).unwrap().with_grad());
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::ones(&[3]).with_grad());
        let c = tape.constant(Tensor::full(&[3], 2.0));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.cross_entropy(z, &[0, 3]).unwrap_err();
        assert_eq!(err, TensorError::Index { op: "cross_entropy", index: 3, bound: 3 });
    }
}
