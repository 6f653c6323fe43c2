use super::DistillError;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// AdamW moment state, one slot per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    timestep: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let sizes: Vec<usize> = params.into_iter().map(Tensor::len).collect();
        Self {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            timestep: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn timestep(&self) -> u64 {
        self.timestep
    }

    /// One update from each tensor's grad buffer (missing buffers count as
    /// zero). A non-finite gradient aborts before anything changes.
    pub fn step(&mut self, params: &mut [&mut Tensor], lr: f64, weight_decay: f64) -> Result<(), DistillError> {
        if params.len() != self.m.len() {
            return Err(DistillError::Invalid(format!(
                "optimizer holds state for {} tensors, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.len() != self.m[i].len() {
                return Err(DistillError::Invalid(format!("parameter {i} changed size")));
            }
            if p.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(DistillError::NonFiniteGrad { param: format!("#{i}") });
            }
        }
        self.timestep += 1;
        let t = self.timestep as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let grad = p.grad().map(<[f64]>::to_vec);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = p.data_mut();
            let decay = 1.0 - lr * weight_decay;
            match grad {
                Some(g) => {
                    for j in 0..data.len() {
                        data[j] *= decay;
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                        let mhat = m[j] / c1;
                        let vhat = v[j] / c2;
                        data[j] -= lr * mhat / (vhat.sqrt() + self.eps);
                    }
                }
                None => {
                    for j in 0..data.len() {
                        data[j] *= decay;
                        m[j] *= self.beta1;
                        v[j] *= self.beta2;
                        data[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Free-function form of [`AdamW::step`].
pub fn adamw_step(
    params: &mut [&mut Tensor],
    state: &mut AdamW,
    lr: f64,
    weight_decay: f64,
) -> Result<(), DistillError> {
    state.step(params, lr, weight_decay)
}
