use std::path::Path;
use std::process::{Command, Output};

use shieldrl::{Checkpoint, ExperimentConfig};

fn shieldrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shieldrl")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn json(o: &Output) -> serde_json::Value {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_str(stdout(o).trim()).unwrap()
}

#[test]
fn samplesize_prints_m() {
    let o = shieldrl(&["samplesize", "--eps-approx", "0.09", "--delta", "0.1"]);
    assert_eq!(stdout(&o).trim(), "185");
    let o = shieldrl(&["samplesize", "--eps-approx", "0.5", "--delta", "0.1"]);
    assert_eq!(stdout(&o).trim(), "6");
    let o = shieldrl(&["samplesize", "--eps-approx", "0.09", "--delta", "0.1", "--side", "one-sided"]);
    assert_eq!(stdout(&o).trim(), "143");
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(shieldrl(&[]).status.code(), Some(1));
    assert_eq!(shieldrl(&["samplesize", "--eps-approx", "0", "--delta", "0.1"]).status.code(), Some(1));
    assert_eq!(shieldrl(&["oracle", "--formula", "!acid &", "--horizon", "2"]).status.code(), Some(1));
    assert_eq!(shieldrl(&["oracle", "--formula", "P[0.9,1](X a)", "--horizon", "2"]).status.code(), Some(1));
    assert_eq!(
        shieldrl(&["check", "--env", "{\"type\":\"chain\",\"stay_safe\":[2.0]}", "--formula", "!unsafe", "--horizon", "2"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(shieldrl(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let o = shieldrl(&["eval", "--checkpoint", missing.to_str().unwrap(), "--episodes", "1"]);
    assert_eq!(o.status.code(), Some(2));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"format\": \"shieldrl-checkpoint\", \"version\": 99}").unwrap();
    let o = shieldrl(&["eval", "--checkpoint", bad.to_str().unwrap(), "--episodes", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("version"));
}

#[test]
fn oracle_and_check_on_the_chain() {
    let v = json(&shieldrl(&["oracle", "--env", "chain", "--formula", "!unsafe", "--horizon", "2"]));
    assert!((v["mu"].as_f64().unwrap() - 0.81).abs() < 1e-12);
    let v = json(&shieldrl(&[
        "check", "--env", "chain", "--formula", "!unsafe", "--horizon", "2", "--seed", "3",
    ]));
    assert_eq!(v["samples"], 185);
    assert_eq!(v["verdict"], "UNSAFE");
    assert!((v["mu_hat"].as_f64().unwrap() - 0.81).abs() <= 0.09);
    let v = json(&shieldrl(&["oracle", "--formula", "!acid", "--horizon", "0"]));
    assert_eq!(v["mu"], 1.0);
}

fn write_config(dir: &Path, config: &ExperimentConfig) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        max_episodes: Some(20),
        iterations: usize::MAX,
        checkpoint_every: Some(10),
        ..ExperimentConfig::default()
    };
    let path = write_config(dir.path(), &config);
    let out = dir.path().join("run");
    let report = json(&shieldrl(&["train", "--config", &path, "--out", out.to_str().unwrap(), "--decisions"]));
    assert_eq!(report["episodes"], 20);
    for f in ["metrics.csv", "checkpoint.json", "config.json", "decisions.jsonl", "checkpoint-000010.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 21);
    let decisions = std::fs::read_to_string(out.join("decisions.jsonl")).unwrap();
    let steps: u64 = metrics
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse::<u64>().unwrap())
        .sum();
    assert_eq!(decisions.lines().count() as u64, steps);

    let ck = Checkpoint::load(&out.join("checkpoint.json")).unwrap();
    assert_eq!(ck.progress.episodes, 20);
    assert_eq!(ck.config, config);

    let checkpoint = out.join("checkpoint.json");
    let ck_arg = checkpoint.to_str().unwrap();
    for (shield, policy) in [("on", "task"), ("off", "task"), ("off", "safe")] {
        let args = [
            "eval", "--checkpoint", ck_arg, "--episodes", "3", "--shield", shield, "--policy", policy, "--max-steps", "50",
        ];
        let a = json(&shieldrl(&args));
        assert_eq!(a["episodes"], 3);
        assert_eq!(a, json(&shieldrl(&args)));
    }
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        max_episodes: Some(5),
        iterations: usize::MAX,
        ..ExperimentConfig::default()
    };
    let path = write_config(dir.path(), &config);
    let run = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        json(&shieldrl(&["train", "--config", &path, "--seed", seed, "--out", out.to_str().unwrap()]));
        std::fs::read(out.join("metrics.csv")).unwrap()
    };
    assert_eq!(run("4", "a"), run("4", "b"));
    let saved: ExperimentConfig =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a").join("config.json")).unwrap()).unwrap();
    assert_eq!(saved.seed, 4);
}
