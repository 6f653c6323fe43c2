use std::path::Path;
use std::process::{Command, Output};

fn isocomp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_isocomp")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const FAST: &[&str] =
    &["--quiet", "--seq-len", "16", "--accumulation", "1", "--eval-windows", "2", "--eval-every", "5"];

fn with_fast<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().chain(FAST).copied().collect()
}

#[test]
fn count_teacher_medium() {
    let o = isocomp(&["count", "--preset", "teacher_medium", "--json"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["breakdown"]["total"], 354_823_168u64);
    let o = isocomp(&["count", "--preset", "teacher_medium"]);
    assert!(stdout(&o).contains("354,823,168"));
}

#[test]
fn count_with_reference() {
    let o = isocomp(&["count", "--preset", "cli_medium", "--reference", "teacher_medium", "--json"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!((v["comparison"]["ratio"].as_f64().unwrap() - 2.47).abs() < 0.005);
    assert!((v["comparison"]["reduction"].as_f64().unwrap() - 0.595).abs() < 0.0005);
}

#[test]
fn bad_config_exits_one_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"preset": "cli_tiny", "trian": {}}"#).unwrap();
    let out = dir.path().join("out");
    let o = isocomp(&["pretrain", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("trian"), "{}", stderr(&o));
    assert!(!out.exists(), "validation failure must not create the run directory");

    let o = isocomp(&["pretrain", "--alpha", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("alpha"));
    assert!(!out.exists());
}

#[test]
fn missing_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = isocomp(&["distill", "--teacher", "/no/such/teacher.ckpt", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/no/such/teacher.ckpt"));
    assert!(!out.exists());
    let o = isocomp(&["pretrain", "--corpus", "/no/such/corpus.txt", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/no/such/corpus.txt"));
}

fn pretrain(dir: &Path, steps: &str, seed: &str) -> Output {
    isocomp(&with_fast(&[
        "pretrain",
        "--preset",
        "teacher_tiny",
        "--steps",
        steps,
        "--seed",
        seed,
        "--out",
        dir.to_str().unwrap(),
    ]))
}

#[test]
fn pipeline_end_to_end() {
    let root = tempfile::tempdir().unwrap();
    let t = root.path().join("teacher");
    let o = pretrain(&t, "6", "1");
    assert!(o.status.success(), "{}", stderr(&o));
    for f in
        ["config.json", "model.ckpt", "train.csv", "summary.json", "checkpoints/latest.ckpt", "checkpoints/best.ckpt"]
    {
        assert!(t.join(f).exists(), "missing {f}");
    }
    let teacher = t.join("model.ckpt");
    let teacher = teacher.to_str().unwrap();

    let s = root.path().join("score");
    let o = isocomp(&[
        "score",
        "--checkpoint",
        teacher,
        "--calibration",
        "3",
        "--seq-len",
        "16",
        "--out",
        s.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("gap ratio"));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(s.join("importance.json")).unwrap()).unwrap();
    assert_eq!(v["n_sequences"], 3);
    assert!(v["layers"].as_array().unwrap().iter().all(|l| l["score"].as_f64().unwrap() > 0.0));
    let o = isocomp(&["score", "--checkpoint", teacher, "--calibration", "0"]);
    assert_eq!(o.status.code(), Some(1));

    let d = root.path().join("distill");
    let o = isocomp(&with_fast(&[
        "distill",
        "--teacher",
        teacher,
        "--preset",
        "cli_tiny",
        "--alpha",
        "1",
        "--steps",
        "3",
        "--out",
        d.to_str().unwrap(),
    ]));
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(d.join("train.csv")).unwrap();
    for line in csv.lines().skip(2) {
        assert_eq!(line.split(',').nth(4), Some("0"), "{line}");
    }

    let e = |ckpt: &str| {
        let o = isocomp(&["eval", "--checkpoint", ckpt, "--seq-len", "64", "--json"]);
        assert!(o.status.success(), "{}", stderr(&o));
        let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
        v["perplexity"].as_f64().unwrap()
    };
    let (a, b) = (e(teacher), e(teacher));
    assert!(a.is_finite() && a > 1.0);
    assert!((a - b).abs() <= 1e-12);

    let ab = root.path().join("ablation");
    let o = isocomp(&with_fast(&[
        "ablation",
        "--teacher",
        teacher,
        "--seeds",
        "2",
        "--steps",
        "2",
        "--out",
        ab.to_str().unwrap(),
    ]));
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    assert!(table.contains("cli_tiny") && table.contains("uniform_tiny") && table.contains("mean ppl"), "{table}");
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ab.join("ablation.json")).unwrap()).unwrap();
    for s in v["students"].as_array().unwrap() {
        assert!(s["params"].as_u64().unwrap() > 0);
        assert!(s["ratio"].as_f64().unwrap() > 1.0);
        assert_eq!(s["runs"].as_array().unwrap().len(), 2);
    }
    assert!(ab.join("seed_1/uniform_tiny/model.ckpt").exists());
    let o = isocomp(&["ablation", "--teacher", teacher, "--seeds", "0"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn zero_step_pretrain_saves_initialization() {
    let root = tempfile::tempdir().unwrap();
    let o = pretrain(&root.path().join("a"), "0", "3");
    assert!(o.status.success(), "{}", stderr(&o));
    let saved = isocomp_core::model::load_checkpoint(&root.path().join("a/model.ckpt")).unwrap();
    let mut cfg = isocomp_core::model::make_preset("teacher_tiny").unwrap();
    cfg.seed = 3;
    let fresh = isocomp_core::model::build_model(&cfg).unwrap();
    assert!(saved.parameters().iter().zip(fresh.parameters()).all(|(a, b)| a.data() == b.data()));
}

#[test]
fn vocab_mismatch_is_rejected_before_training() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("teacher.json");
    let mut model = isocomp_core::model::make_preset("teacher_tiny").unwrap();
    model.vocab_size = 300;
    std::fs::write(&cfg, serde_json::json!({ "model": model }).to_string()).unwrap();
    let t = root.path().join("t");
    let o = isocomp(&with_fast(&[
        "pretrain",
        "--config",
        cfg.to_str().unwrap(),
        "--steps",
        "0",
        "--out",
        t.to_str().unwrap(),
    ]));
    assert!(o.status.success(), "{}", stderr(&o));
    let d = root.path().join("d");
    let o = isocomp(&["distill", "--teacher", t.join("model.ckpt").to_str().unwrap(), "--out", d.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("vocabulary"), "{}", stderr(&o));
    assert!(!d.exists());
}
