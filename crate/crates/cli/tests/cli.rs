use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use qlab_core::games::{read_episodes, GameKind};
use qlab_core::{NetSpec, QNetwork};

fn qlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qlab"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("qlab runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = r#"
seed = 5
output_dir = "out"
nets = ["MLP-16x4", "CNN-8x3"]

[hyper]
train_episodes = 6
in_sample_episodes = 3
test_episodes = 4
learn_start = 100
batch_size = 8
"#;

fn small_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), SMALL).unwrap();
    dir
}

#[test]
fn generate_writes_requested_episodes() {
    let dir = tempfile::tempdir().unwrap();
    let o = qlab(dir.path(), &["generate", "--count", "5", "-o", "a"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read(dir.path().join("a/episodes/univariate.jsonl")).unwrap();
    let eps = read_episodes(text.as_slice()).unwrap();
    assert_eq!(eps.len(), 5);
    assert!(eps
        .iter()
        .all(|e| e.price.len() == 221 && e.signal.is_none()));

    let o = qlab(
        dir.path(),
        &["generate", "--game", "bivariate", "--count", "3", "-o", "a"],
    );
    assert!(o.status.success());
    let text = fs::read(dir.path().join("a/episodes/bivariate.jsonl")).unwrap();
    let eps = read_episodes(text.as_slice()).unwrap();
    assert!(eps
        .iter()
        .all(|e| e.kind() == GameKind::Bivariate
            && e.signal.as_ref().is_some_and(|s| s.len() == 221)));

    qlab(
        dir.path(),
        &["generate", "--game", "bivariate", "--count", "3", "-o", "b"],
    );
    assert_eq!(
        fs::read(dir.path().join("a/episodes/bivariate.jsonl")).unwrap(),
        fs::read(dir.path().join("b/episodes/bivariate.jsonl")).unwrap()
    );
}

#[test]
fn train_then_eval_with_trace() {
    let dir = small_dir();
    let o = qlab(dir.path(), &["train", "-c", "run.toml"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("out");
    for spec in ["MLP-16x4", "CNN-8x3"] {
        let w = out.join(format!("weights/univariate-{spec}.weights"));
        let net = QNetwork::load(NetSpec::parse(spec, 1).unwrap(), &w).unwrap();
        assert_eq!(net.spec().to_string(), spec);
        let log = fs::read_to_string(out.join(format!("logs/univariate-{spec}.jsonl"))).unwrap();
        assert_eq!(log.lines().count(), 6);
    }

    let o = qlab(
        dir.path(),
        &[
            "eval", "-c", "run.toml", "--net", "MLP-16x4", "--net", "GRU-8x3", "--trace",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(
        text.lines()
            .any(|l| l.starts_with("GRU-8x3") && l.ends_with("MISSING")),
        "{text}"
    );
    assert!(text
        .lines()
        .any(|l| l.starts_with("MLP-16x4") && !l.contains("MISSING")));
    let table: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(out.join("reports/univariate-table.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(table["rows"].as_array().unwrap().len(), 2);
    assert_eq!(table["rows"][1]["missing"], true);
    let reports: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(out.join("reports/univariate-MLP-16x4.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(reports[0]["split"], "in_sample");
    assert_eq!(reports[0]["episode_pnl"].as_array().unwrap().len(), 3);
    assert_eq!(reports[1]["split"], "out_of_sample");
    assert_eq!(reports[1]["episode_pnl"].as_array().unwrap().len(), 4);
    let trace =
        fs::read_to_string(out.join("reports/traces/univariate-MLP-16x4-1006.csv")).unwrap();
    assert_eq!(
        trace.lines().next().unwrap(),
        "t,price,action,reward,q_cash,q_buy,q_hold,holding"
    );
    assert_eq!(trace.lines().count(), 181);

    let o = qlab(
        dir.path(),
        &[
            "trace",
            "-c",
            "run.toml",
            "--episode",
            "77",
            "--out",
            "t.csv",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(dir.path().join("t.csv"))
            .unwrap()
            .lines()
            .count(),
        181
    );
}

#[test]
fn invalid_net_name_fails_before_training() {
    let dir = small_dir();
    let o = qlab(
        dir.path(),
        &[
            "train", "-c", "run.toml", "--net", "MLP-16x4", "--net", "RNN-8x3",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("RNN-8x3"));
    assert!(stderr(&o).contains("MLP, GRU, LSTM, CNN"));
    assert!(!dir.path().join("out/weights").exists());
}

#[test]
fn config_errors_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[hyper]\nbatchsize = 3\n").unwrap();
    let o = qlab(dir.path(), &["train", "-c", "bad.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("batchsize"), "{}", stderr(&o));

    fs::write(dir.path().join("bad.toml"), "[game]\ncost = -1.0\n").unwrap();
    let o = qlab(dir.path(), &["generate", "-c", "bad.toml"]);
    assert_eq!(o.status.code(), Some(1));

    let o = qlab(dir.path(), &["train", "--jobs", "many"]);
    assert_eq!(o.status.code(), Some(1));
    let o = qlab(dir.path(), &["train", "-c", "missing.toml"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn flags_override_config_values() {
    let dir = small_dir();
    let o = qlab(
        dir.path(),
        &[
            "train",
            "-c",
            "run.toml",
            "--net",
            "MLP-16x4",
            "--game",
            "bivariate",
            "--episodes",
            "2",
            "-o",
            "other",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let log = dir.path().join("other/logs/bivariate-MLP-16x4.jsonl");
    assert_eq!(fs::read_to_string(log).unwrap().lines().count(), 2);
    assert!(!dir.path().join("out").exists());
    assert!(!dir
        .path()
        .join("other/weights/bivariate-CNN-8x3.weights")
        .exists());
}

#[test]
fn weights_of_another_architecture_are_rejected() {
    let dir = small_dir();
    assert!(qlab(
        dir.path(),
        &[
            "train",
            "-c",
            "run.toml",
            "--net",
            "MLP-16x4",
            "--episodes",
            "1"
        ]
    )
    .status
    .success());
    let w = dir.path().join("out/weights");
    fs::copy(
        w.join("univariate-MLP-16x4.weights"),
        w.join("univariate-MLP-16x5.weights"),
    )
    .unwrap();
    let o = qlab(
        dir.path(),
        &[
            "eval",
            "-c",
            "run.toml",
            "--net",
            "MLP-16x5",
            "--episodes",
            "1",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("MLP-16x4"), "{}", stderr(&o));
}

#[test]
fn params_reports_full_match() {
    let dir = tempfile::tempdir().unwrap();
    let o = qlab(dir.path(), &["params"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("32/32 match"));

    let o = qlab(dir.path(), &["params", "--json"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["matched"], 32);
    assert_eq!(v["rows"].as_array().unwrap().len(), 16);
    assert_eq!(v["rows"][4]["name"], "GRU-8x3");
    assert_eq!(v["rows"][4]["univariate"], 1227);
}

#[test]
fn params_perturbed_fixture_fails_naming_the_row() {
    let dir = tempfile::tempdir().unwrap();
    let mut rows = qlab_cli::commands::reference_rows();
    rows[8].bivariate += 1;
    fs::write(
        dir.path().join("fx.json"),
        serde_json::to_string(&rows).unwrap(),
    )
    .unwrap();
    let o = qlab(dir.path(), &["params", "--fixture", "fx.json"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("31/32 match"));
    assert!(stderr(&o).contains("LSTM-8x3"), "{}", stderr(&o));
}
