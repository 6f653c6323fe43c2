use super::{Result, Tape, Tensor, TensorError, VarId};

/// Magnitude below which gradient errors are measured absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

/// `|a − b| / max(|a|, |b|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Central-difference derivative of `eval` at zero displacement.
pub fn central_difference(mut eval: impl FnMut(f64) -> f64, step: f64) -> f64 {
    (eval(step) - eval(-step)) / (2.0 * step)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub coordinates: usize,
}

/// Compares the recorded gradient of scalar `f` at `x` with central
/// differences over every coordinate. Reports the worst relative error; it
/// does not assert any tolerance.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, VarId) -> Result<VarId>,
{
    if step <= 0.0 {
        return Err(TensorError::Invalid(format!("grad_check step must be positive, got {step}")));
    }
    let mut tape = Tape::new();
    let mut input = x.clone();
    input.set_requires_grad(true);
    let xid = tape.leaf(&input);
    let out = f(&mut tape, xid)?;
    tape.backward(out)?;
    let analytic = tape.grad(xid).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);

    let eval_at = |probe: &Tensor| -> Result<f64> {
        let mut t = Tape::no_record();
        let id = t.leaf(probe);
        let y = f(&mut t, id)?;
        Ok(t.value(y).item())
    };

    let mut report = GradCheck { max_rel_error: 0.0, max_abs_error: 0.0, worst_index: 0, coordinates: x.len() };
    let mut probe = x.clone();
    probe.set_requires_grad(false);
    for i in 0..x.len() {
        let base = probe.data()[i];
        probe.data_mut()[i] = base + step;
        let plus = eval_at(&probe)?;
        probe.data_mut()[i] = base - step;
        let minus = eval_at(&probe)?;
        probe.data_mut()[i] = base;
        let numeric = (plus - minus) / (2.0 * step);
        let rel = relative_error(analytic[i], numeric);
        report.max_abs_error = report.max_abs_error.max((analytic[i] - numeric).abs());
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    Ok(report)
}
