use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use unlearn_core::datasets::{self, LabeledDataset};
use unlearn_core::experiment::{self, DataKind, ExperimentConfig};
use unlearn_core::models::{self, ArchSpec, ClassifierModel, Mlp};
use unlearn_core::Tensor;

fn unlearn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unlearn"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn unlearn")
}

fn ok(args: &[&str]) -> Output {
    let out = unlearn(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config() -> ExperimentConfig {
    let mut cfg = experiment::default_config();
    if let DataKind::GaussianPair { dim, .. } = &mut cfg.dataset.kind {
        *dim = 8;
    }
    cfg.dataset.train_per_class = 40;
    cfg.dataset.test_per_class = 30;
    cfg.score.epochs = 3;
    cfg.generator.epochs = 2;
    cfg.victim.epochs = 2;
    cfg.victim.grid.truncate(2);
    cfg.fractions = vec![0.0, 0.5, 1.0];
    cfg
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_vec_pretty(cfg).unwrap()).unwrap();
    path
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ulds");
    let out = unlearn(&["evaluate", "--model", s(&missing), "--data", s(&missing)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error kind=invalid_config"));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"schema_version\": 1,").unwrap();
    let out = unlearn(&["gen-data", "--config", s(&bad), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));

    let cfg = write_config(dir.path(), &tiny_config());
    ok(&["gen-data", "--config", s(&cfg), "--out", s(dir.path())]);
    let out = unlearn(&[
        "train-victim",
        "--data",
        s(&dir.path().join("train.ulds")),
        "--fraction",
        "0.5",
        "--out",
        s(&dir.path().join("v.cwmd")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let data = dir.path().join("train.ulds");
    let score = dir.path().join("score.cwmd");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(dir.path())]);
    ok(&["train-score", "--config", s(&cfg), "--data", s(&data), "--out", s(&score)]);
    let out = unlearn(&[
        "sample-sgld",
        "--score",
        s(&score),
        "--data",
        s(&data),
        "--alpha",
        "1e12",
        "--steps",
        "100",
        "--out",
        s(&dir.path().join("samples.ulds")),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error kind=diverged"));
}

#[test]
fn evaluate_prints_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let x = Tensor::matrix(4, 2, vec![1.0, 0.0, 2.0, 1.0, -1.0, 0.5, -3.0, -1.0]).unwrap();
    let data = LabeledDataset::new("toy", x, vec![1, 1, 0, 0], 2).unwrap();
    // Logit difference equals the first coordinate.
    let spec = ArchSpec::new(2, &[], 2, Default::default());
    let w = Tensor::matrix(2, 2, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
    let model = ClassifierModel::<f32> { net: Mlp::from_params(&spec, vec![w, Tensor::zeros(&[2])]).unwrap() };
    datasets::save_dataset(&data, dir.path().join("toy.ulds")).unwrap();
    models::save_model(&model, dir.path().join("toy.cwmd")).unwrap();
    let out = ok(&["evaluate", "--model", s(&dir.path().join("toy.cwmd")), "--data", s(&dir.path().join("toy.ulds"))]);
    let acc: f64 = String::from_utf8_lossy(&out.stdout).trim().parse().unwrap();
    assert_eq!(acc, 1.0);
}

#[test]
fn composed_commands_reproduce_the_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = tiny_config();
    let cfg_path = write_config(root, &cfg);
    let exp = root.join("exp");
    let exp2 = root.join("exp2");
    ok(&["experiment", "--config", s(&cfg_path), "--out", s(&exp)]);
    ok(&["--jobs", "3", "experiment", "--config", s(&cfg_path), "--out", s(&exp2)]);

    let mut files: Vec<PathBuf> = Vec::new();
    let mut stack = vec![exp.clone()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p.strip_prefix(&exp).unwrap().to_path_buf());
            }
        }
    }
    for rel in &files {
        assert_eq!(fs::read(exp.join(rel)).unwrap(), fs::read(exp2.join(rel)).unwrap(), "{rel:?} differs across --jobs");
    }

    let report = fs::read_to_string(exp.join("report.csv")).unwrap();
    assert_eq!(report.lines().count() - 1, cfg.victim.grid.len() * cfg.fractions.len());

    let step = root.join("steps");
    let p = |name: &str| step.join(name);
    ok(&["gen-data", "--config", s(&cfg_path), "--out", s(&step)]);
    ok(&["train-score", "--config", s(&cfg_path), "--data", s(&p("train.ulds")), "--out", s(&p("score.cwmd"))]);
    ok(&[
        "train-generator",
        "--config",
        s(&cfg_path),
        "--data",
        s(&p("train.ulds")),
        "--score",
        s(&p("score.cwmd")),
        "--out",
        s(&p("generator.cwmd")),
    ]);
    ok(&[
        "craft-noise",
        "--config",
        s(&cfg_path),
        "--generator",
        s(&p("generator.cwmd")),
        "--score",
        s(&p("score.cwmd")),
        "--data",
        s(&p("train.ulds")),
        "--out",
        s(&p("poison.ulpn")),
    ]);
    for name in ["train.ulds", "test.ulds", "score.cwmd", "generator.cwmd", "poison.ulpn"] {
        assert_eq!(fs::read(p(name)).unwrap(), fs::read(exp.join(name)).unwrap(), "{name}");
    }

    let cell = &cfg.victim.grid[1];
    let arch = cell.arch.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(",");
    let id = experiment::cell_id(cell);
    ok(&[
        "train-victim",
        "--config",
        s(&cfg_path),
        "--data",
        s(&p("train.ulds")),
        "--noise",
        s(&p("poison.ulpn")),
        "--fraction",
        "0.5",
        "--arch",
        &arch,
        "--rho-a",
        &cell.rho_a_train.to_string(),
        "--test",
        s(&p("test.ulds")),
        "--out",
        s(&p("victim.cwmd")),
    ]);
    let victims = exp.join("victims");
    assert_eq!(fs::read(p("victim.cwmd")).unwrap(), fs::read(victims.join(format!("{id}_p0.5.cwmd"))).unwrap());
    assert_eq!(fs::read(p("victim.csv")).unwrap(), fs::read(victims.join(format!("{id}_p0.5.csv"))).unwrap());

    // No noise at p = 0: the poisoned run is the clean run.
    assert_eq!(
        fs::read(victims.join(format!("{id}_p0.cwmd"))).unwrap(),
        fs::read(victims.join(format!("{id}_clean.cwmd"))).unwrap()
    );
}
