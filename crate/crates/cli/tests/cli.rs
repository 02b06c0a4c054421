use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pqmotion::report::{read_csv, scrape_points, MetricRow};

fn tiny_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.json")
}

fn pqmotion(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pqmotion"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "info")
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) {
    let o = pqmotion(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// gen-corpus plus the three training stages with the tiny config.
fn trained_run(dir: &Path, seed: &str) {
    let cfg = tiny_config();
    let cfg = cfg.to_str().unwrap();
    for cmd in ["gen-corpus", "train-pqvae", "train-predictor", "train-refiner"] {
        ok(dir, &[cmd, "--config", cfg, "--seed", seed]);
    }
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

fn value(rows: &[MetricRow], metric: &str, part: &str, notes: &str) -> f64 {
    rows.iter()
        .find(|r| r.metric == metric && r.part == part && r.notes.contains(notes))
        .and_then(|r| r.value)
        .unwrap_or_else(|| panic!("no {metric}/{part}/{notes} in {rows:?}"))
}

#[test]
fn gen_corpus_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let cfg = cfg.to_str().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    ok(&a, &["gen-corpus", "--config", cfg, "--seed", "7"]);
    ok(&b, &["gen-corpus", "--config", cfg, "--seed", "7"]);
    ok(&c, &["gen-corpus", "--config", cfg, "--seed", "8"]);
    assert_eq!(read(a.join("corpus.pqmc")), read(b.join("corpus.pqmc")));
    assert_ne!(read(a.join("corpus.pqmc")), read(c.join("corpus.pqmc")));
}

#[test]
fn refuses_to_overwrite_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let cfg = cfg.to_str().unwrap();
    let dir = tmp.path();
    ok(dir, &["gen-corpus", "--config", cfg, "--seed", "1"]);
    let before = read(dir.join("corpus.pqmc"));
    let o = pqmotion(dir, &["gen-corpus", "--config", cfg, "--seed", "2"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--force"), "{}", stderr(&o));
    assert_eq!(read(dir.join("corpus.pqmc")), before);
    ok(dir, &["gen-corpus", "--config", cfg, "--seed", "2", "--force"]);
    assert_ne!(read(dir.join("corpus.pqmc")), before);
}

#[test]
fn missing_stage_artifacts_are_named() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let cfg = cfg.to_str().unwrap();
    let dir = tmp.path();

    let o = pqmotion(dir, &["train-pqvae", "--config", cfg]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("corpus.pqmc") && stderr(&o).contains("gen-corpus"));

    ok(dir, &["gen-corpus", "--config", cfg]);
    let o = pqmotion(dir, &["train-predictor", "--config", cfg]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("pqvae.ckpt") && stderr(&o).contains("train-pqvae"));

    ok(dir, &["train-pqvae", "--config", cfg]);
    let o = pqmotion(dir, &["synth", "--config", cfg]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("predictor.ckpt"), "{}", stderr(&o));
}

#[test]
fn rejects_bad_flags_and_configs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let o = pqmotion(dir, &["gen-corpus", "--no-such-flag"]);
    assert!(!o.status.success());

    let missing = dir.join("absent.json");
    let o = pqmotion(dir, &["gen-corpus", "--config", missing.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("absent.json"));

    let bad = dir.join("bad.json");
    std::fs::write(&bad, r#"{"pqvae": {"codez": 4}}"#).unwrap();
    let o = pqmotion(dir, &["gen-corpus", "--config", bad.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("bad.json") && stderr(&o).contains("codez"), "{}", stderr(&o));
}

#[test]
fn resume_keeps_checkpoint_and_logs_config_diff() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let dir = tmp.path();
    ok(dir, &["gen-corpus", "--config", cfg.to_str().unwrap()]);
    ok(dir, &["train-pqvae", "--config", cfg.to_str().unwrap()]);
    let ckpt = read(dir.join("pqvae.ckpt"));

    let mut changed: serde_json::Value = serde_json::from_slice(&read(&cfg)).unwrap();
    changed["pqvae"]["epochs"] = 3.into();
    let changed_path = dir.join("changed.json");
    std::fs::write(&changed_path, changed.to_string()).unwrap();
    let changed_path = changed_path.to_str().unwrap();

    let o = pqmotion(dir, &["train-pqvae", "--config", changed_path]);
    assert!(!o.status.success(), "existing checkpoint replaced without --force or --resume");

    let o = pqmotion(dir, &["train-pqvae", "--config", changed_path, "--resume"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("pqvae.epochs: 3 -> 2"), "{}", stderr(&o));
    assert_eq!(read(dir.join("pqvae.ckpt")), ckpt);
}

#[test]
fn stage_mismatch_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    trained_run(dir, "0");
    std::fs::copy(dir.join("refiner.ckpt"), dir.join("predictor.ckpt")).unwrap();
    let o = pqmotion(dir, &["synth", "--config", tiny_config().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("stage mismatch"), "{}", stderr(&o));
}

#[test]
fn end_to_end_runs_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let cfg = cfg.to_str().unwrap();
    let runs = [tmp.path().join("a"), tmp.path().join("b")];
    for dir in &runs {
        trained_run(dir, "5");
        ok(dir, &["synth", "--config", cfg, "--seed", "5", "--samples", "3"]);
        ok(dir, &["complete", "--config", cfg, "--seed", "5", "--prefix", "8", "--suffix", "8"]);
    }
    for name in [
        "corpus.pqmc",
        "pqvae.ckpt",
        "predictor.ckpt",
        "refiner.ckpt",
        "synth/sample_0.pqmo",
        "synth/sample_2.pqmo",
        "complete/completed.pqmo",
    ] {
        assert_eq!(read(runs[0].join(name)), read(runs[1].join(name)), "{name} differs");
    }
    // Different seeds per sample.
    assert_ne!(read(runs[0].join("synth/sample_0.pqmo")), read(runs[0].join("synth/sample_1.pqmo")));
    let (_, record) = pqmotion::corpus::read_motion(&runs[0].join("synth/sample_0.pqmo")).unwrap();
    assert_eq!(record.motion.frames(), 32);

    let rows = read_csv(&runs[0].join("complete/metrics.csv")).unwrap();
    assert_eq!(value(&rows, "context_max_abs_diff", "holistic", ""), 0.0);
}

#[test]
fn eval_bench_and_ablate_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let cfg = cfg.to_str().unwrap();
    let dir = tmp.path();
    trained_run(dir, "0");

    ok(dir, &["eval", "--config", cfg]);
    let rows = read_csv(&dir.join("eval/metrics.csv")).unwrap();
    for (metric, part) in [
        ("fgd", "holistic"),
        ("fgd", "face"),
        ("variance", "face"),
        ("variance", "body"),
        ("mae_best_of", "holistic"),
        ("bc", "body"),
        ("err2", "holistic"),
        ("coordination", "holistic"),
    ] {
        assert!(value(&rows, metric, part, "") >= 0.0, "{metric}/{part}");
    }
    assert!(dir.join("features_face.ckpt").exists());
    let o = pqmotion(dir, &["eval", "--config", cfg]);
    assert!(!o.status.success(), "eval output replaced without --force");

    ok(dir, &["bench", "--config", cfg, "--mode", "ar", "--frames", "256", "--runs", "5"]);
    ok(dir, &["bench", "--config", cfg, "--mode", "maskgit", "--T", "8", "--frames", "256", "--runs", "5"]);
    let ar = value(&read_csv(&dir.join("bench_autoregressive.csv")).unwrap(), "fps", "holistic", "");
    let mg = value(&read_csv(&dir.join("bench_maskgit_t8.csv")).unwrap(), "fps", "holistic", "");
    assert!(mg >= 4.0 * ar, "maskgit {mg:.0} fps vs autoregressive {ar:.0} fps");

    ok(dir, &["ablate", "--config", cfg, "--table", "all"]);
    let g = read_csv(&dir.join("ablate_g_sweep.csv")).unwrap();
    for groups in [1, 2] {
        value(&g, "err1", "holistic", &format!("K=8 G={groups}"));
    }
    let t = read_csv(&dir.join("ablate_t_sweep.csv")).unwrap();
    value(&t, "fgd", "holistic", "autoregressive");
    let svg = String::from_utf8(read(dir.join("ablate_t_sweep_0.svg"))).unwrap();
    assert!(svg.contains("FGD"));
    let xs: Vec<f64> = scrape_points(&svg).into_iter().map(|(_, x, _)| x).collect();
    assert_eq!(xs, vec![1.0, 2.0, 4.0]);
    for (_, _, y) in scrape_points(&svg) {
        let note_t = t.iter().filter(|r| r.metric == "fgd").find(|r| r.value == Some(y));
        assert!(note_t.is_some(), "chart point {y} not in CSV");
    }
    let pe = read_csv(&dir.join("ablate_pe.csv")).unwrap();
    assert_eq!(pe.iter().filter(|r| r.metric == "val_ce").count(), 4);
    let cond = read_csv(&dir.join("ablate_conditions.csv")).unwrap();
    assert_eq!(cond.iter().filter(|r| r.metric == "fgd").count(), 3);
}
