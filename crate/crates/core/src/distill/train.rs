use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use super::{evaluate, lr_at, record_distill_loss, AdamW, DistillConfig, DistillError, LossBreakdown};
use crate::data::{next_batch, Batch, BatchPlan, TokenStream};
use crate::model::{save_checkpoint, Model};
use crate::tensor::Tape;

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where `latest.ckpt` and `best.ckpt` are written at each evaluation.
    pub checkpoint_dir: Option<PathBuf>,
    /// Single-line progress counter on stderr.
    pub progress: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepLog {
    /// Optimizer updates completed, starting at 1.
    pub step: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_kl: f64,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalLog {
    pub step: usize,
    pub perplexity: f64,
    /// Wall-clock seconds since the previous evaluation.
    pub segment_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub initial_ppl: f64,
    pub final_ppl: f64,
    pub best_ppl: f64,
    pub steps: usize,
    pub tokens: usize,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    pub evals: Vec<EvalLog>,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn initial_ppl(&self) -> Option<f64> {
        self.evals.first().map(|e| e.perplexity)
    }

    pub fn final_ppl(&self) -> Option<f64> {
        self.evals.last().map(|e| e.perplexity)
    }

    pub fn best_ppl(&self) -> Option<f64> {
        self.evals.iter().map(|e| e.perplexity).reduce(f64::min)
    }

    pub fn summary(&self) -> TrainSummary {
        TrainSummary {
            initial_ppl: self.initial_ppl().unwrap_or(f64::NAN),
            final_ppl: self.final_ppl().unwrap_or(f64::NAN),
            best_ppl: self.best_ppl().unwrap_or(f64::NAN),
            steps: self.steps.last().map_or(0, |s| s.step),
            tokens: self.steps.last().map_or(0, |s| s.tokens),
            wall_clock_secs: self.wall_clock_secs,
        }
    }

    /// `step,lr,loss_total,loss_ce,loss_kl,ppl_if_eval`; the step-0 row
    /// carries only the initial perplexity.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,loss_total,loss_ce,loss_kl,ppl_if_eval\n");
        let ppl_at = |step: usize| {
            self.evals.iter().find(|e| e.step == step).map(|e| e.perplexity.to_string()).unwrap_or_default()
        };
        if self.evals.first().is_some_and(|e| e.step == 0) {
            let _ = writeln!(out, "0,,,,,{}", ppl_at(0));
        }
        for s in &self.steps {
            let _ =
                writeln!(out, "{},{},{},{},{},{}", s.step, s.lr, s.loss_total, s.loss_ce, s.loss_kl, ppl_at(s.step));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_csv())
    }

    pub fn write_summary(&self, path: &Path) -> std::io::Result<()> {
        let json = serde_json::to_string_pretty(&self.summary()).map_err(std::io::Error::other)?;
        std::fs::write(path, json)
    }
}

/// Forward and backward over each micro-batch, adding `1/n` of every
/// micro-batch gradient into the student's grad buffers. Returns the mean
/// loss breakdown.
pub fn accumulate_gradients(
    teacher: Option<&Model>,
    student: &mut Model,
    batches: &[Batch],
    config: &DistillConfig,
) -> Result<LossBreakdown, DistillError> {
    if batches.is_empty() {
        return Err(DistillError::Invalid("no micro-batches".into()));
    }
    let weight = 1.0 / batches.len() as f64;
    let mut mean =
        LossBreakdown { total: 0.0, ce_part: 0.0, kl_part: 0.0, alpha: config.alpha, temperature: config.temperature };
    for batch in batches {
        let teacher_logits = match (teacher, config.alpha < 1.0) {
            (Some(t), true) => Some(t.forward(&batch.inputs)?),
            (None, true) => return Err(DistillError::Invalid("alpha < 1 requires a teacher".into())),
            _ => None,
        };
        let mut tape = Tape::new();
        let bound = student.bind(&mut tape);
        let logits = student.forward_on(&mut tape, &bound, &batch.inputs, None)?;
        let (loss, b) = record_distill_loss(
            &mut tape,
            logits,
            teacher_logits.as_ref(),
            &batch.targets,
            config.alpha,
            config.temperature,
            config.kl_direction,
        )?;
        mean.total += weight * b.total;
        mean.ce_part += weight * b.ce_part;
        mean.kl_part += weight * b.kl_part;
        if !b.total.is_finite() {
            return Ok(mean);
        }
        let scaled = tape.scale(loss, weight);
        tape.backward(scaled)?;
        student.absorb_grads(&tape, &bound);
    }
    Ok(mean)
}

/// Distills `student` toward `teacher` (or plain next-token training when
/// `alpha == 1` and no teacher is given).
///
/// Evaluations run at step 0, at every multiple of `eval_every`, and after
/// the final step.
pub fn train(
    teacher: Option<&Model>,
    student: &mut Model,
    train_set: &TokenStream,
    valid_set: &TokenStream,
    config: &DistillConfig,
    options: &TrainOptions,
) -> Result<TrainReport, DistillError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(DistillError::Invalid("training corpus is empty".into()));
    }
    if let Some(t) = teacher {
        if t.vocab_size() != student.vocab_size() {
            return Err(DistillError::VocabMismatch { teacher: t.vocab_size(), student: student.vocab_size() });
        }
    } else if config.alpha < 1.0 {
        return Err(DistillError::Invalid("alpha < 1 requires a teacher".into()));
    }
    if train_set.vocab_size() > student.vocab_size() {
        return Err(DistillError::Invalid(format!(
            "corpus vocabulary {} exceeds model vocabulary {}",
            train_set.vocab_size(),
            student.vocab_size()
        )));
    }
    if let Some(dir) = &options.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    let started = Instant::now();
    let mut segment = Instant::now();
    let mut report = TrainReport::default();
    let mut plan = BatchPlan::new(config.sequence_length, config.seed);
    let mut optimizer = AdamW::new(student.parameters());
    let mut tokens = 0usize;
    let mut last_good: Option<String> = None;
    let mut best = f64::INFINITY;

    let mut run_eval = |student: &Model,
                        step: usize,
                        report: &mut TrainReport,
                        last_good: &mut Option<String>|
     -> Result<(), DistillError> {
        let ppl = evaluate(student, valid_set, config.sequence_length, config.eval_windows)?.perplexity;
        report.evals.push(EvalLog { step, perplexity: ppl, segment_secs: segment.elapsed().as_secs_f64() });
        segment = Instant::now();
        if let Some(dir) = &options.checkpoint_dir {
            let latest = dir.join("latest.ckpt");
            save_checkpoint(student, &latest)?;
            *last_good = Some(latest.display().to_string());
            if ppl < best {
                best = ppl;
                save_checkpoint(student, &dir.join("best.ckpt"))?;
            }
        }
        Ok(())
    };

    run_eval(student, 0, &mut report, &mut last_good)?;
    for k in 0..config.total_steps {
        let lr = lr_at(k, config);
        student.zero_grads();
        let batches =
            (0..config.accumulation_steps).map(|_| next_batch(train_set, &mut plan)).collect::<Result<Vec<_>, _>>()?;
        let loss = accumulate_gradients(teacher, student, &batches, config)?;
        if !loss.total.is_finite() {
            return Err(DistillError::NonFiniteLoss { step: k + 1, last_good });
        }
        optimizer.step(&mut student.parameters_mut(), lr, config.weight_decay)?;
        tokens += batches.iter().map(|b| b.inputs.len()).sum::<usize>();
        let step = k + 1;
        report.steps.push(StepLog {
            step,
            lr,
            loss_total: loss.total,
            loss_ce: loss.ce_part,
            loss_kl: loss.kl_part,
            tokens,
        });
        if options.progress {
            eprint!("\rstep {step}/{} loss {:.4} lr {lr:.2e}   ", config.total_steps, loss.total);
            let _ = std::io::stderr().flush();
        }
        if step % config.eval_every == 0 || step == config.total_steps {
            run_eval(student, step, &mut report, &mut last_good)?;
        }
    }
    if options.progress {
        eprintln!();
    }
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(report)
}
