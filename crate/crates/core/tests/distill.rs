use isocomp_core::data::{tokenize_bytes, window, Batch, Provenance, TokenStream};
use isocomp_core::distill::*;
use isocomp_core::model::*;
use isocomp_core::tensor::{grad_check, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn seeded(name: &str, seed: u64) -> Model {
    let mut cfg = make_preset(name).unwrap();
    cfg.seed = seed;
    build_model(&cfg).unwrap()
}

fn random_logits(rows: usize, cols: usize, scale: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn corpus_batches(n: usize, len: usize, seed: u64) -> Vec<Batch> {
    let s = tokenize_bytes(isocomp_core::data::SAMPLE_CORPUS);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| window(&s, rng.gen_range(0..s.len() - len - 1), len).unwrap()).collect()
}

#[test]
fn alpha_one_is_plain_cross_entropy() {
    let zs = random_logits(5, 9, 3.0, 1);
    let zt = random_logits(5, 9, 3.0, 2);
    let labels = [0, 8, 3, 3, 1];
    let b = distill_loss(&zs, &zt, &labels, 1.0, 2.0).unwrap();
    let mut tape = Tape::no_record();
    let z = tape.constant(zs);
    let ce = tape.cross_entropy(z, &labels).unwrap();
    assert_eq!(b.total, tape.value(ce).item());
    assert_eq!(b.kl_part, 0.0);
}

#[test]
fn identical_logits_have_zero_kl() {
    let z = random_logits(4, 12, 5.0, 3);
    for t in [0.5, 1.0, 2.0, 7.0] {
        assert_eq!(distill_loss(&z, &z, &[1, 2, 3, 4], 0.3, t).unwrap().kl_part, 0.0);
    }
}

proptest! {
    #[test]
    fn kl_is_invariant_to_logit_shifts(seed in 0u64..1000, shift in -50.0f64..50.0, t in 0.5f64..4.0) {
        let zs = random_logits(3, 7, 4.0, seed);
        let zt = random_logits(3, 7, 4.0, seed + 1);
        let shifted_t = Tensor::new(zt.shape(), zt.data().iter().map(|v| v + shift).collect()).unwrap();
        let shifted_s = Tensor::new(zs.shape(), zs.data().iter().map(|v| v - 0.5 * shift).collect()).unwrap();
        let a = distill_loss(&zs, &zt, &[0, 1, 2], 0.0, t).unwrap();
        let b = distill_loss(&shifted_s, &shifted_t, &[0, 1, 2], 0.0, t).unwrap();
        prop_assert!((a.kl_part - b.kl_part).abs() <= 1e-10, "{} vs {}", a.kl_part, b.kl_part);
    }

    #[test]
    fn breakdown_recomposes(seed in 0u64..1000, alpha in 0.0f64..1.0, t in 0.5f64..4.0) {
        let zs = random_logits(4, 6, 3.0, seed);
        let zt = random_logits(4, 6, 3.0, seed + 7);
        let b = distill_loss(&zs, &zt, &[5, 0, 2, 1], alpha, t).unwrap();
        prop_assert!((b.total - (alpha * b.ce_part + (1.0 - alpha) * b.kl_part)).abs() <= 1e-12);
        prop_assert!(b.kl_part >= -1e-12);
    }
}

#[test]
fn distill_loss_gradient_matches_finite_differences() {
    for direction in [KlDirection::StudentTeacher, KlDirection::TeacherStudent] {
        for seed in 0..3 {
            let zs = random_logits(3, 5, 2.0, seed);
            let zt = random_logits(3, 5, 2.0, seed + 100);
            let check = grad_check(
                |tape, x| Ok(record_distill_loss(tape, x, Some(&zt), &[4, 0, 2], 0.5, 2.0, direction).unwrap().0),
                &zs,
                1e-5,
            )
            .unwrap();
            assert!(check.max_rel_error <= 1e-5, "{direction:?} seed {seed}: {check:?}");
        }
    }
}

#[test]
fn self_distillation_is_a_fixed_point() {
    let mut student = seeded("cli_tiny", 4);
    let teacher = student.clone();
    let cfg = DistillConfig { alpha: 0.0, ..DistillConfig::with_total_steps(1) };
    let b = accumulate_gradients(Some(&teacher), &mut student, &corpus_batches(2, 16, 0), &cfg).unwrap();
    assert_eq!(b.kl_part, 0.0);
    let worst =
        student.parameters().iter().flat_map(|t| t.grad().unwrap().iter().copied()).fold(0.0f64, |m, g| m.max(g.abs()));
    assert!(worst <= 1e-12, "largest gradient {worst}");
}

/// Gradients from `accumulate_gradients` against one tape over the mean of
/// the same micro-batch losses.
#[test]
fn accumulation_matches_single_batch_mean() {
    let teacher = seeded("teacher_tiny", 1);
    for n in [2usize, 4, 8] {
        let batches = corpus_batches(n, 12, n as u64);
        let cfg = DistillConfig { alpha: 0.5, accumulation_steps: n, ..DistillConfig::with_total_steps(1) };
        let mut student = seeded("cli_tiny", 2);
        let acc = accumulate_gradients(Some(&teacher), &mut student, &batches, &cfg).unwrap();

        let reference = seeded("cli_tiny", 2);
        let mut tape = Tape::new();
        let bound = reference.bind(&mut tape);
        let mut losses = Vec::new();
        for b in &batches {
            let zt = teacher.forward(&b.inputs).unwrap();
            let z = reference.forward_on(&mut tape, &bound, &b.inputs, None).unwrap();
            losses.push(
                record_distill_loss(&mut tape, z, Some(&zt), &b.targets, 0.5, 2.0, KlDirection::StudentTeacher)
                    .unwrap()
                    .0,
            );
        }
        let mut sum = losses[0];
        for &l in &losses[1..] {
            sum = tape.add(sum, l).unwrap();
        }
        let mean = tape.scale(sum, 1.0 / n as f64);
        assert!((tape.value(mean).item() - acc.total).abs() <= 1e-12);
        tape.backward(mean).unwrap();
        let mut worst = 0.0f64;
        for (p, &id) in student.parameters().iter().zip(bound.ids()) {
            for (a, b) in p.grad().unwrap().iter().zip(tape.grad(id).unwrap()) {
                worst = worst.max((a - b).abs());
            }
        }
        assert!(worst <= 1e-10, "accumulation {n}: max difference {worst}");
    }
}

#[test]
fn schedule_shape() {
    let cfg = DistillConfig { peak_lr: 1e-3, min_lr: 1e-4, warmup_steps: 50, ..DistillConfig::with_total_steps(500) };
    assert_eq!(lr_at(0, &cfg), 0.0);
    assert_eq!(lr_at(50, &cfg), 1e-3);
    assert!((lr_at(500, &cfg) - 1e-4).abs() < 1e-18);
    let lrs: Vec<f64> = (0..=500).map(|s| lr_at(s, &cfg)).collect();
    for s in 1..=500 {
        let step = lrs[s] - lrs[s - 1];
        assert!(step.abs() <= 2.1e-5, "jump at {s}: {step}");
        if s <= 50 {
            assert!(step > 0.0, "warmup not increasing at {s}");
        } else {
            assert!(step <= 0.0, "decay not monotone at {s}");
        }
    }
}

fn uniform_model() -> Model {
    let mut m = seeded("cli_tiny", 0);
    m.lm_head.as_mut().unwrap().data_mut().fill(0.0);
    m
}

#[test]
fn uniform_logits_give_vocabulary_perplexity() {
    let s = tokenize_bytes(&isocomp_core::data::SAMPLE_CORPUS[..4000]);
    let ppl = perplexity(&uniform_model(), &s, 64).unwrap();
    assert!((ppl - 256.0).abs() <= 1e-6, "{ppl}");
}

#[test]
fn perplexity_is_exp_mean_cross_entropy() {
    let m = seeded("teacher_tiny", 3);
    let s = tokenize_bytes(&isocomp_core::data::SAMPLE_CORPUS[1000..1700]);
    let report = evaluate(&m, &s, 100, None).unwrap();
    assert_eq!(report.windows, 6);
    let mut nll = 0.0;
    for w in 0..6 {
        let b = window(&s, w * 100, 100).unwrap();
        let logits = m.forward(&b.inputs).unwrap();
        for (i, &t) in b.targets.iter().enumerate() {
            let row = logits.row(i);
            nll += isocomp_core::tensor::log_sum_exp(row) - row[t];
        }
    }
    let expected = (nll / 600.0).exp();
    assert!(((report.perplexity - expected) / expected).abs() <= 1e-9);
}

fn stream(ids: Vec<usize>) -> TokenStream {
    TokenStream::new(ids, 256, Provenance { source: "test".into(), byte_count: 0 }).unwrap()
}

#[test]
fn overfitting_a_constant_stream_drives_perplexity_to_one() {
    let data = stream(vec![65; 400]);
    let mut m = seeded("uniform_tiny", 0);
    let cfg = DistillConfig {
        alpha: 1.0,
        peak_lr: 3e-3,
        min_lr: 3e-4,
        warmup_steps: 5,
        accumulation_steps: 1,
        sequence_length: 16,
        eval_every: 100,
        ..DistillConfig::with_total_steps(150)
    };
    let r = train(None, &mut m, &data, &data, &cfg, &TrainOptions::default()).unwrap();
    assert!(r.initial_ppl().unwrap() > 100.0);
    assert!(r.final_ppl().unwrap() < 1.05, "{:?}", r.evals);
}

fn short_config(steps: usize) -> DistillConfig {
    DistillConfig {
        peak_lr: 1e-3,
        min_lr: 1e-4,
        warmup_steps: 2,
        accumulation_steps: 2,
        sequence_length: 16,
        eval_every: 4,
        eval_windows: Some(4),
        seed: 11,
        ..DistillConfig::with_total_steps(steps)
    }
}

#[test]
fn training_is_deterministic_and_logs_every_eval() {
    let s = tokenize_bytes(&isocomp_core::data::SAMPLE_CORPUS[..6000]);
    let (tr, va) = isocomp_core::data::split(&s, 0.2, 16).unwrap();
    let teacher = seeded("teacher_tiny", 1);
    let run = || {
        let mut m = seeded("cli_tiny", 5);
        let r = train(Some(&teacher), &mut m, &tr, &va, &short_config(10), &TrainOptions::default()).unwrap();
        (m, r)
    };
    let (m1, r1) = run();
    let (m2, r2) = run();
    assert_eq!(m1.named_parameters(), m2.named_parameters());
    assert_eq!(r1.steps, r2.steps);
    assert_eq!(r1.evals.iter().map(|e| e.step).collect::<Vec<_>>(), [0, 4, 8, 10]);
    let csv = r1.to_csv();
    assert_eq!(csv.lines().count(), 1 + 1 + 10);
    assert!(csv.starts_with("step,lr,loss_total,loss_ce,loss_kl,ppl_if_eval\n0,,,,,"));
    assert!(r1.steps.iter().all(|s| s.loss_kl > 0.0));
}

#[test]
fn alpha_one_logs_zero_kl_and_writes_checkpoints() {
    let s = tokenize_bytes(&isocomp_core::data::SAMPLE_CORPUS[..6000]);
    let (tr, va) = isocomp_core::data::split(&s, 0.2, 16).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut m = seeded("uniform_tiny", 5);
    let cfg = DistillConfig { alpha: 1.0, ..short_config(5) };
    let opts = TrainOptions { checkpoint_dir: Some(dir.path().to_path_buf()), progress: false };
    let r = train(None, &mut m, &tr, &va, &cfg, &opts).unwrap();
    assert!(r.steps.iter().all(|s| s.loss_kl == 0.0));
    let latest = load_checkpoint(&dir.path().join("latest.ckpt")).unwrap();
    let data = |m: &Model| m.parameters().iter().map(|t| t.data().to_vec()).collect::<Vec<_>>();
    assert!(data(&latest) == data(&m));
    assert!(dir.path().join("best.ckpt").exists());
}

#[test]
fn zero_steps_leave_the_model_untouched() {
    let s = tokenize_bytes(&isocomp_core::data::SAMPLE_CORPUS[..3000]);
    let mut m = seeded("uniform_tiny", 5);
    let before = m.clone();
    let cfg = DistillConfig { alpha: 1.0, warmup_steps: 0, ..short_config(0) };
    let r = train(None, &mut m, &s, &s, &cfg, &TrainOptions::default()).unwrap();
    assert_eq!(r.evals.len(), 1);
    assert_eq!(m, before);
}

#[test]
fn mismatched_vocabularies_are_rejected() {
    let s = tokenize_bytes(&isocomp_core::data::SAMPLE_CORPUS[..3000]);
    let mut cfg = make_preset("teacher_tiny").unwrap();
    cfg.vocab_size = 300;
    let teacher = build_model(&cfg).unwrap();
    let mut student = seeded("cli_tiny", 0);
    let e = train(Some(&teacher), &mut student, &s, &s, &short_config(2), &TrainOptions::default()).unwrap_err();
    assert!(matches!(e, DistillError::VocabMismatch { teacher: 300, student: 256 }));
    let e = train(None, &mut student, &s, &s, &short_config(2), &TrainOptions::default()).unwrap_err();
    assert!(e.to_string().contains("teacher"), "{e}");
}
