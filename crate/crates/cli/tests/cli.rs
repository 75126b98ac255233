use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use genrobust::config::ExperimentConfig;
use genrobust::Container;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_genrobust"));
    c.env_remove("GENROBUST_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let doc = serde_json::json!({
        "name": "cli",
        "output_dir": dir.join("out"),
        "precision": "f64",
        "dataset": {"image_shape": [1, 4, 4], "latent_dim": 4, "separation": 4.0,
                    "train_size": 48, "test_size": 24, "holdout_size": 8},
        "model": {"architecture": "mlp", "input_shape": [1, 4, 4], "hidden": [8], "num_classes": 4},
        "labeler_model": {"architecture": "mlp", "input_shape": [1, 4, 4], "hidden": [8], "num_classes": 4},
        "labeler": {"epochs": 2},
        "generation": {"pool_size": 24, "pca_k": 4},
        "train": {"alpha": 0.5, "epochs": 1, "batch_size": 16,
                  "early_stop": {"validation_size": 0}},
        "cascade": {"stage1": {"steps": 2, "step_size": 0.05, "optimizer": "sign-sgd", "restarts": 1,
                               "objective": "cross-entropy", "random_start": true, "seed": 0},
                    "stage2": {"steps": 2, "step_size": 0.05, "optimizer": "sign-sgd", "restarts": 1,
                               "objective": {"targeted-margin": {"top-incorrect": 0}}, "random_start": true, "seed": 1},
                    "top_k": 2},
        "diagnostics": {"sample_size": 24, "is_splits": 4, "landscape_resolution": 3},
        "sweep": {"axis": {"kind": "mixing", "alphas": [0.5, 1.0]}, "seeds": [0, 1]}
    });
    let path = dir.join("c.json");
    fs::write(&path, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
    path
}

#[test]
fn usage_errors_exit_one() {
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));

    let o = run(&["train", "--alhpa", "0.8"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));

    let o = run(&[]);
    assert_eq!(o.status.code(), Some(1));

    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_errors_exit_one_and_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let o = run(&["train", "--config", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope.json"), "{}", stderr(&o));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"train": {"alpah": 0.5}}"#).unwrap();
    let o = run(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).contains("bad.json") && stderr(&o).contains("alpah"),
        "{}",
        stderr(&o)
    );

    let cfg = write_config(dir.path());
    let c = cfg.to_str().unwrap();
    assert_eq!(run(&["train", "--config", c, "--alpha", "1.5"]).status.code(), Some(1));
    assert_eq!(
        run(&["train", "--config", c, "--set", "train.nope=1"]).status.code(),
        Some(1)
    );
    assert_eq!(
        run(&["train", "--config", c, "--set", "train.ema_tau"]).status.code(),
        Some(1)
    );
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    // no checkpoint and no data yet
    let o = run(&["attack-eval", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("model.grtc"));
}

fn meta_hash(path: &Path) -> String {
    Container::load(path).unwrap().meta("config_hash").unwrap()
}

#[test]
fn pipeline_runs_and_flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let c = cfg.to_str().unwrap();
    let out = dir.path().join("out");
    for cmd in [
        "make-data",
        "train-nonrobust",
        "fit-gaussian",
        "generate",
        "pseudo-label",
    ] {
        let o = run(&[cmd, "--config", c]);
        assert_eq!(o.status.code(), Some(0), "{cmd}: {}", stderr(&o));
    }
    for f in [
        "train.grtc",
        "test.grtc",
        "holdout.grtc",
        "labeler.grtc",
        "generator.grtc",
        "generated.grtc",
        "pseudo.grtc",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }

    let o = run(&["train", "--config", c, "--alpha", "0.8"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let mut want = ExperimentConfig::load(&cfg).unwrap();
    assert_eq!(want.train.alpha, 0.5);
    want.train.alpha = 0.8;
    assert_eq!(meta_hash(&out.join("model.grtc")), want.hash());

    let o = run(&["train", "--config", c, "--set", "train.ema_tau=0.9", "--alpha", "0.8"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    want.train.ema_tau = 0.9;
    assert_eq!(meta_hash(&out.join("model.grtc")), want.hash());

    for cmd in ["attack-eval", "diagnose"] {
        let o = run(&[cmd, "--config", c]);
        assert_eq!(o.status.code(), Some(0), "{cmd}: {}", stderr(&o));
    }
    let attack = fs::read_to_string(out.join("attack.csv")).unwrap();
    assert!(attack.starts_with("example_id,clean_correct,stage1_survived,stage2_survived,worst_margin"));
    assert_eq!(attack.lines().count(), 1 + 24);
    let diag = fs::read_to_string(out.join("diagnostics.csv")).unwrap();
    assert_eq!(diag.lines().count(), 2);
    let land = fs::read_to_string(out.join("landscape.csv")).unwrap();
    assert_eq!(land.lines().count(), 1 + 3);
    assert!(out.join("train_report.csv").exists());
}

#[test]
fn sweep_rerun_does_not_retrain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let c = cfg.to_str().unwrap();
    let o = run(&["sweep", "--config", c]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("4 cells computed, 0 reused"), "{}", stdout(&o));
    let cells = fs::read_to_string(dir.path().join("out/cells.csv")).unwrap();

    let o = run(&["sweep", "--config", c]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("0 cells computed, 4 reused"), "{}", stdout(&o));
    assert_eq!(fs::read_to_string(dir.path().join("out/cells.csv")).unwrap(), cells);
    assert!(dir.path().join("out/summary.csv").exists());
}

#[test]
fn worker_threads_do_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let c = cfg.to_str().unwrap();
    let serial = dir.path().join("serial");
    let threaded = dir.path().join("threaded");
    let o = run(&["sweep", "--config", c, "--out", serial.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = bin()
        .args(["sweep", "--config", c, "--out", threaded.to_str().unwrap()])
        .env("GENROBUST_THREADS", "3")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let read = |d: &Path| fs::read_to_string(d.join("cells.csv")).unwrap();
    assert_eq!(read(&serial), read(&threaded));
}
