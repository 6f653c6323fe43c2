use std::path::{Path, PathBuf};

use anyhow::Context;
use isocomp_core::data::{read_corpus, read_token_cache, split, tokenize_bytes, TokenStream, SAMPLE_CORPUS};
use isocomp_core::distill::{
    evaluate, train, DistillConfig, PerplexityReport, TrainOptions, TrainReport, TrainSummary,
};
use isocomp_core::importance::{layer_importance, CalibrationSet, ImportanceReport};
use isocomp_core::model::{
    build_model, compression_ratio, load_checkpoint, make_preset, parameter_count, save_checkpoint, Model,
    ParameterBreakdown,
};
use serde::Serialize;

use crate::config::require_file;
use crate::report::{ablation_table, UNIFORM_MEDIUM_NOTE};
use crate::{CliError, RunConfig};

const DEFAULT_TEACHER: &str = "teacher_tiny";
const DEFAULT_STUDENT: &str = "cli_tiny";

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub reference: String,
    pub reference_params: u64,
    pub ratio: f64,
    pub reduction: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CountReport {
    pub name: String,
    pub breakdown: ParameterBreakdown,
    pub comparison: Option<Comparison>,
    pub note: Option<String>,
}

pub fn cmd_count(run: &RunConfig) -> Result<CountReport, CliError> {
    let cfg = run.model_config(DEFAULT_TEACHER)?;
    let name = match (&run.model, &run.preset) {
        (Some(_), _) => "custom".to_string(),
        (None, Some(p)) => p.clone(),
        (None, None) => DEFAULT_TEACHER.to_string(),
    };
    let breakdown = parameter_count(&cfg);
    let comparison = match &run.reference {
        Some(r) => {
            let rc = make_preset(r).map_err(|e| CliError::Config(format!("reference: {e}")))?;
            let reference_params = parameter_count(&rc).total;
            let (ratio, reduction) =
                compression_ratio(reference_params, breakdown.total).map_err(|e| CliError::Config(e.to_string()))?;
            Some(Comparison { reference: r.clone(), reference_params, ratio, reduction })
        }
        None => None,
    };
    let note = (name == "uniform_medium").then(|| UNIFORM_MEDIUM_NOTE.to_string());
    Ok(CountReport { name, breakdown, comparison, note })
}

/// The configured corpus, or the bundled sample.
pub fn load_corpus(run: &RunConfig) -> Result<TokenStream, CliError> {
    match &run.corpus {
        None => {
            let mut s = tokenize_bytes(SAMPLE_CORPUS);
            s.provenance.source = "bundled sample".into();
            Ok(s)
        }
        Some(p) if p.extension().is_some_and(|e| e == "actk") => {
            read_token_cache(p).map_err(|e| CliError::runtime(e, p))
        }
        Some(p) => read_corpus(p).map_err(|e| CliError::Runtime(e.into())),
    }
}

fn split_corpus(run: &RunConfig, sequence_length: usize) -> Result<(TokenStream, TokenStream), CliError> {
    let stream = load_corpus(run)?;
    split(&stream, run.validation_fraction, sequence_length)
        .with_context(|| format!("splitting {}", stream.provenance.source))
        .map_err(CliError::Runtime)
}

fn load_model(key: &str, path: &Path) -> Result<Model, CliError> {
    require_file(key, path)?;
    load_checkpoint(path).map_err(|e| CliError::runtime(e, path))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::runtime(e, dir))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.into()))?;
    std::fs::write(path, json).map_err(|e| CliError::runtime(e, path))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub dir: PathBuf,
    /// Final weights.
    pub checkpoint: PathBuf,
    pub report: TrainReport,
    pub model: Model,
}

/// Runs `train` and writes `model.ckpt`, `train.csv`, `summary.json` and
/// `checkpoints/{latest,best}.ckpt` under `dir`.
fn run_training(
    teacher: Option<&Model>,
    mut student: Model,
    tr: &TokenStream,
    va: &TokenStream,
    cfg: &DistillConfig,
    dir: &Path,
    progress: bool,
) -> Result<TrainOutcome, CliError> {
    create_dir(dir)?;
    let opts = TrainOptions { checkpoint_dir: Some(dir.join("checkpoints")), progress };
    let report = train(teacher, &mut student, tr, va, cfg, &opts).map_err(|e| CliError::Runtime(e.into()))?;
    let checkpoint = dir.join("model.ckpt");
    save_checkpoint(&student, &checkpoint).map_err(|e| CliError::runtime(e, &checkpoint))?;
    report.write_csv(&dir.join("train.csv")).map_err(|e| CliError::runtime(e, dir))?;
    report.write_summary(&dir.join("summary.json")).map_err(|e| CliError::runtime(e, dir))?;
    Ok(TrainOutcome { dir: dir.to_path_buf(), checkpoint, report, model: student })
}

pub fn cmd_pretrain(run: &RunConfig) -> Result<TrainOutcome, CliError> {
    run.validate_common()?;
    let model_cfg = run.model_config(DEFAULT_TEACHER)?;
    let cfg = DistillConfig { alpha: 1.0, ..run.train_config() };
    let (tr, va) = split_corpus(run, cfg.sequence_length)?;
    let model = build_model(&model_cfg).map_err(|e| CliError::Config(e.to_string()))?;
    let dir = run.out_dir("pretrain");
    create_dir(&dir)?;
    run.write_snapshot(&dir)?;
    run_training(None, model, &tr, &va, &cfg, &dir, run.progress)
}

#[derive(Debug, Clone)]
pub struct ScoreOutcome {
    pub report: ImportanceReport,
    pub dir: PathBuf,
}

pub fn cmd_score(run: &RunConfig) -> Result<ScoreOutcome, CliError> {
    run.validate_common()?;
    let path = run.checkpoint.as_ref().ok_or_else(|| CliError::Config("checkpoint: required for score".into()))?;
    if run.calibration_size == Some(0) {
        return Err(CliError::Config("calibration_size: must be at least 1".into()));
    }
    let model = load_model("checkpoint", path)?;
    let seq = run.train.sequence_length.min(model.config().context_length);
    let count = run.calibration_size.unwrap_or(if model.config().d_model >= 1024 { 512 } else { 64 });
    let (_, va) = split_corpus(run, seq)?;
    let calib = CalibrationSet::sample(&va, count, seq, run.seed).map_err(|e| CliError::Runtime(e.into()))?;
    let report = layer_importance(&model, &calib, run.output_space).map_err(|e| match e {
        isocomp_core::importance::ImportanceError::NoAblatableLayers { .. } => CliError::Config(e.to_string()),
        other => CliError::Runtime(other.into()),
    })?;
    let dir = run.out_dir("score");
    create_dir(&dir)?;
    run.write_snapshot(&dir)?;
    std::fs::write(dir.join("importance.json"), report.to_json()).map_err(|e| CliError::runtime(e, &dir))?;
    std::fs::write(dir.join("importance.csv"), report.to_csv()).map_err(|e| CliError::runtime(e, &dir))?;
    Ok(ScoreOutcome { report, dir })
}

fn load_teacher(run: &RunConfig) -> Result<Model, CliError> {
    let path =
        run.teacher.as_ref().ok_or_else(|| CliError::Config("teacher: a teacher checkpoint is required".into()))?;
    load_model("teacher", path)
}

fn check_vocab(teacher: &Model, student: &isocomp_core::model::ModelConfig) -> Result<(), CliError> {
    if teacher.vocab_size() != student.vocab_size {
        return Err(CliError::Runtime(anyhow::anyhow!(
            "teacher vocabulary {} does not match student vocabulary {}",
            teacher.vocab_size(),
            student.vocab_size
        )));
    }
    Ok(())
}

pub fn cmd_distill(run: &RunConfig) -> Result<TrainOutcome, CliError> {
    run.validate_common()?;
    let student_cfg = run.model_config(DEFAULT_STUDENT)?;
    let teacher = load_teacher(run)?;
    check_vocab(&teacher, &student_cfg)?;
    let cfg = run.train_config();
    let (tr, va) = split_corpus(run, cfg.sequence_length)?;
    let student = build_model(&student_cfg).map_err(|e| CliError::Config(e.to_string()))?;
    let dir = run.out_dir("distill");
    create_dir(&dir)?;
    run.write_snapshot(&dir)?;
    run_training(Some(&teacher), student, &tr, &va, &cfg, &dir, run.progress)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalOutcome {
    pub checkpoint: String,
    pub parameters: u64,
    #[serde(flatten)]
    pub report: PerplexityReport,
}

pub fn cmd_eval(run: &RunConfig) -> Result<EvalOutcome, CliError> {
    run.validate_common()?;
    let path = run.checkpoint.as_ref().ok_or_else(|| CliError::Config("checkpoint: required for eval".into()))?;
    let model = load_model("checkpoint", path)?;
    let seq = run.train.sequence_length.min(model.config().context_length);
    let (_, va) = split_corpus(run, seq)?;
    if va.vocab_size() > model.vocab_size() {
        return Err(CliError::Runtime(anyhow::anyhow!(
            "corpus vocabulary {} exceeds model vocabulary {}",
            va.vocab_size(),
            model.vocab_size()
        )));
    }
    let report = evaluate(&model, &va, seq, None).map_err(|e| CliError::Runtime(e.into()))?;
    Ok(EvalOutcome { checkpoint: path.display().to_string(), parameters: model.parameter_count(), report })
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedRun {
    pub seed: u64,
    pub initial_ppl: f64,
    pub final_ppl: f64,
    pub best_ppl: f64,
    /// `(step, perplexity)` at every evaluation.
    pub evals: Vec<(usize, f64)>,
    pub summary: TrainSummary,
}

#[derive(Debug, Clone, Serialize)]
pub struct StudentRuns {
    pub preset: String,
    pub params: u64,
    pub ratio: f64,
    pub reduction: f64,
    pub runs: Vec<SeedRun>,
    pub mean_final_ppl: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub teacher: String,
    pub teacher_params: u64,
    pub seeds: Vec<u64>,
    pub train: DistillConfig,
    pub students: Vec<StudentRuns>,
}

impl AblationReport {
    pub fn student(&self, preset: &str) -> Option<&StudentRuns> {
        self.students.iter().find(|s| s.preset == preset)
    }

    pub fn table(&self) -> String {
        ablation_table(self)
    }
}

/// Trains each student preset from the same teacher with identical settings
/// for seeds `seed, seed + 1, …`. Replicas run one after another, each in its
/// own `seed_<n>/<preset>` directory.
pub fn cmd_ablation(run: &RunConfig) -> Result<AblationReport, CliError> {
    run.validate_common()?;
    if run.seeds == 0 {
        return Err(CliError::Config("seeds: at least one seed is required".into()));
    }
    if run.students.is_empty() {
        return Err(CliError::Config("students: at least one student preset is required".into()));
    }
    let mut student_cfgs = Vec::new();
    for name in &run.students {
        student_cfgs.push(make_preset(name).map_err(|e| CliError::Config(format!("students: {e}")))?);
    }
    let teacher = load_teacher(run)?;
    for c in &student_cfgs {
        check_vocab(&teacher, c)?;
    }
    let base = run.train_config();
    let (tr, va) = split_corpus(run, base.sequence_length)?;
    let dir = run.out_dir("ablation");
    create_dir(&dir)?;
    run.write_snapshot(&dir)?;

    let seeds: Vec<u64> = (0..run.seeds as u64).map(|k| run.seed + k).collect();
    let teacher_params = teacher.parameter_count();
    let mut students = Vec::new();
    for (name, sc) in run.students.iter().zip(&student_cfgs) {
        let params = parameter_count(sc).total;
        let (ratio, reduction) =
            compression_ratio(teacher_params, params).map_err(|e| CliError::Config(e.to_string()))?;
        let mut runs = Vec::new();
        for &seed in &seeds {
            if run.progress {
                eprintln!("{name} seed {seed}");
            }
            let cfg = DistillConfig { seed, ..base.clone() };
            let model = build_model(&isocomp_core::model::ModelConfig { seed, ..sc.clone() })
                .map_err(|e| CliError::Config(e.to_string()))?;
            let out = run_training(
                Some(&teacher),
                model,
                &tr,
                &va,
                &cfg,
                &dir.join(format!("seed_{seed}")).join(name),
                run.progress,
            )?;
            let r = &out.report;
            runs.push(SeedRun {
                seed,
                initial_ppl: r.initial_ppl().unwrap_or(f64::NAN),
                final_ppl: r.final_ppl().unwrap_or(f64::NAN),
                best_ppl: r.best_ppl().unwrap_or(f64::NAN),
                evals: r.evals.iter().map(|e| (e.step, e.perplexity)).collect(),
                summary: r.summary(),
            });
        }
        let mean_final_ppl = runs.iter().map(|r| r.final_ppl).sum::<f64>() / runs.len() as f64;
        students.push(StudentRuns { preset: name.clone(), params, ratio, reduction, runs, mean_final_ppl });
    }
    let report = AblationReport {
        teacher: run.teacher.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        teacher_params,
        seeds,
        train: base,
        students,
    };
    write_json(&dir.join("ablation.json"), &report)?;
    std::fs::write(dir.join("ablation.txt"), report.table()).map_err(|e| CliError::runtime(e, &dir))?;
    Ok(report)
}
