use serde::Serialize;

use super::{DistillError, KlDirection};
use crate::tensor::{Tape, Tensor, VarId};

/// Components of `alpha · CE + (1 − alpha) · T² · KL`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce_part: f64,
    /// `T² · KL`, before the `1 − alpha` weight.
    pub kl_part: f64,
    pub alpha: f64,
    pub temperature: f64,
}

/// Records the distillation loss on `tape` and returns the handle of the
/// total. Teacher logits enter as a constant. With `alpha == 1` the KL term
/// is not evaluated and `kl_part` is reported as zero.
pub fn record_distill_loss(
    tape: &mut Tape,
    student_logits: VarId,
    teacher_logits: Option<&Tensor>,
    labels: &[usize],
    alpha: f64,
    temperature: f64,
    direction: KlDirection,
) -> Result<(VarId, LossBreakdown), DistillError> {
    if !(temperature > 0.0) {
        return Err(DistillError::Config(format!("temperature must be positive, got {temperature}")));
    }
    let ce = tape.cross_entropy(student_logits, labels)?;
    let ce_part = tape.value(ce).item();
    if alpha == 1.0 {
        let breakdown = LossBreakdown { total: ce_part, ce_part, kl_part: 0.0, alpha, temperature };
        return Ok((ce, breakdown));
    }
    let teacher = teacher_logits.ok_or_else(|| DistillError::Invalid("alpha < 1 requires teacher logits".into()))?;
    let student_shape = tape.value(student_logits).shape().to_vec();
    if student_shape != teacher.shape() {
        return Err(DistillError::Invalid(format!(
            "student logits {student_shape:?} and teacher logits {:?} differ in shape",
            teacher.shape()
        )));
    }
    let inv_t = 1.0 / temperature;
    let zs = tape.scale(student_logits, inv_t);
    let ps = tape.softmax(zs);
    let zt = tape.constant(teacher.clone());
    let zt = tape.scale(zt, inv_t);
    let pt = tape.softmax(zt);
    let kl = match direction {
        KlDirection::StudentTeacher => tape.kl_divergence(ps, pt)?,
        KlDirection::TeacherStudent => tape.kl_divergence(pt, ps)?,
    };
    let kl_scaled = tape.scale(kl, temperature * temperature);
    let kl_part = tape.value(kl_scaled).item();
    let ce_w = tape.scale(ce, alpha);
    let kl_w = tape.scale(kl_scaled, 1.0 - alpha);
    let total = tape.add(ce_w, kl_w)?;
    let breakdown = LossBreakdown { total: tape.value(total).item(), ce_part, kl_part, alpha, temperature };
    Ok((total, breakdown))
}

/// Loss values for fixed logits, in student ‖ teacher order.
pub fn distill_loss(
    student_logits: &Tensor,
    teacher_logits: &Tensor,
    labels: &[usize],
    alpha: f64,
    temperature: f64,
) -> Result<LossBreakdown, DistillError> {
    let mut tape = Tape::no_record();
    let zs = tape.constant(student_logits.clone());
    let (_, b) = record_distill_loss(
        &mut tape,
        zs,
        Some(teacher_logits),
        labels,
        alpha,
        temperature,
        KlDirection::StudentTeacher,
    )?;
    Ok(b)
}
