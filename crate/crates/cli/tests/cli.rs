use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use proxynet::backbone::{BackboneConfig, BackboneKind};
use proxynet::checkpoint::Checkpoint;
use proxynet::config::RunConfig;
use proxynet::model::{ModelConfig, ProxyNet};
use proxynet::proxy::ProxyKind;
use proxynet::relation::MetricKind;
use regex::Regex;

const TINY: &str = r#"
dataset.kind = "synthetic"
synthetic.n_classes = 9
synthetic.samples_per_class = 10
synthetic.image_size = 36
synthetic.split = [3, 3, 3]
model.width = 8
task.n_way = 3
task.k_shot = 1
task.t_query = 2
train.epochs = 1
train.episodes_per_epoch = 3
train.val_tasks = 3
train.val_query = 2
augment.resize_to = 36
augment.crop_to = 32
eval.n_tasks = 4
eval.t_query = 3
"#;

fn proxynet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_proxynet")).args(args).current_dir(cwd).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("tiny.toml");
    fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path.display().to_string()
}

#[test]
fn train_writes_artifacts_and_a_reproducible_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let o = proxynet(&["train", "--config", &cfg, "--proxy", "mean", "--metric", "euclidean", "--out", "run"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("run");
    for name in ["checkpoint.json", "history.csv", "config.toml"] {
        assert!(run.join(name).is_file(), "missing {name}");
    }
    let snapshot = RunConfig::load(&run.join("config.toml")).unwrap();
    assert_eq!((snapshot.model.proxy, snapshot.model.metric), (ProxyKind::Mean, MetricKind::Euclidean));
    assert_eq!(snapshot.model.backbone.width, 8);
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 2);

    // The snapshot alone reproduces the run bit for bit.
    let again = proxynet(&["train", "--config", run.join("config.toml").to_str().unwrap(), "--out", "rerun"], dir.path());
    assert!(again.status.success(), "{}", stderr(&again));
    let a = Checkpoint::load(&run.join("checkpoint.json")).unwrap();
    let b = Checkpoint::load(&dir.path().join("rerun/checkpoint.json")).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(history, fs::read_to_string(dir.path().join("rerun/history.csv")).unwrap());
}

#[test]
fn invalid_keys_exit_2_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = proxynet(&["train", "--metric", "manhattan", "--out", "x"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.metric"), "{}", stderr(&o));

    let cfg = tiny_config(dir.path(), "train.epochz = 2\n");
    let o = proxynet(&["train", "--config", &cfg], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.epochz"), "{}", stderr(&o));

    let o = proxynet(&["audit", "--set", "task.k_shot=none"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("task.k_shot"), "{}", stderr(&o));
    assert!(!dir.path().join("x").exists());
}

/// Identical images per class and an untrained mean/Euclidean model: every query
/// sits at distance zero from its own prototype.
fn oracle_stub(dir: &Path) -> (String, String) {
    let cfg = tiny_config(dir, "synthetic.jitter = 0.0\nmodel.proxy = \"mean\"\nmodel.metric = \"euclidean\"\n");
    let model = ProxyNet::<f32>::build(
        ModelConfig {
            backbone: BackboneConfig {
                kind: BackboneKind::Conv4,
                width: 8,
            },
            proxy: ProxyKind::Mean,
            metric: MetricKind::Euclidean,
            image_size: 32,
            ..Default::default()
        },
        5,
    )
    .unwrap();
    let ckpt = dir.join("oracle.json");
    Checkpoint::new(&model, None).save(&ckpt).unwrap();
    (cfg, ckpt.display().to_string())
}

#[test]
fn eval_of_oracle_stub_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, ckpt) = oracle_stub(dir.path());
    let o = proxynet(&["eval", "--checkpoint", &ckpt, "--config", &cfg, "--out", "ev"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "100.00 ± 0.00");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("ev/eval_report.json")).unwrap()).unwrap();
    assert_eq!(report["n_tasks"], 4);
}

#[test]
fn eval_is_deterministic_and_formatted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    assert!(proxynet(&["train", "--config", &cfg, "--out", "run"], dir.path()).status.success());
    let run = |out: &str| {
        let o = proxynet(&["eval", "--checkpoint", "run/checkpoint.json", "--config", "run/config.toml", "--n-tasks", "10", "--seed", "7", "--out", out], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
        (stdout(&o), fs::read_to_string(dir.path().join(out).join("eval_report.json")).unwrap())
    };
    let (a, b) = (run("e1"), run("e2"));
    assert_eq!(a, b);
    let re = Regex::new(r"^\d+\.\d{2} ± \d+\.\d{2}$").unwrap();
    assert!(re.is_match(a.0.trim()), "{:?}", a.0);

    let o = proxynet(&["eval", "--checkpoint", "run/checkpoint.json", "--config", "run/config.toml", "--metric", "cosine"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("checkpoint mismatch"), "{}", stderr(&o));
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut reader = csv::Reader::from_path(path).unwrap();
    reader.records().map(|r| r.unwrap().iter().map(str::to_string).collect()).collect()
}

#[test]
fn ablation_grids_share_one_episode_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    for (axis, variants) in [("proxy", vec!["learned", "mean", "sum"]), ("metric", vec!["proxynet3d", "euclidean", "cosine", "fc_relation"]), ("augmentation", vec!["on", "off"])] {
        let o = proxynet(&["ablate", "--axis", axis, "--config", &cfg, "--out", "ab"], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
        let rows = csv_rows(&dir.path().join(format!("ab/ablation_{axis}.csv")));
        assert_eq!(rows.iter().map(|r| r[1].as_str()).collect::<Vec<_>>(), variants);
        assert!(rows.iter().all(|r| r[0] == axis && r[7] == rows[0][7] && r[7].len() == 64));
        assert!(stderr(&o).contains(&format!("episode trace {}", rows[0][7])));
    }
}

#[test]
fn audit_reports_backbone_count_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = proxynet(&["audit", "--out", "au"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.lines().any(|l| l.split_whitespace().collect::<Vec<_>>() == ["backbone", "112832"]), "{out}");
    assert!(out.contains("reference_total"));
    let csv = fs::read_to_string(dir.path().join("au/audit.csv")).unwrap();
    assert!(csv.starts_with("submodule,trainable_parameters\nbackbone,112832\n"));

    let o = proxynet(&["audit", "--metric", "euclidean", "--out", "au"], dir.path());
    assert!(stdout(&o).lines().any(|l| l.split_whitespace().collect::<Vec<_>>() == ["total", "159073"]));
}

#[test]
fn synth_materializes_a_loadable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let o = proxynet(&["synth", "--config", &cfg, "--out", "data/synth"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = dir.path().join("data/synth/manifest.csv");
    assert_eq!(stdout(&o).trim(), Path::new("data/synth/manifest.csv").display().to_string());
    assert_eq!(csv_rows(&manifest).len(), 90);

    // Train from the on-disk copy through the data-root variable.
    let o = Command::new(env!("CARGO_BIN_EXE_proxynet"))
        .args(["train", "--config", &cfg, "--set", "dataset.kind=manifest", "--set", "dataset.manifest=synth/manifest.csv", "--out", "disk"])
        .env("PROXYNET_DATA_ROOT", dir.path().join("data"))
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
}
