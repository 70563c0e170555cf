use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use priorprobe_cli::{commands, ExperimentConfig, RunOptions};
use proptest::prelude::*;
use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_priorprobe"))
}

fn write_config(dir: &Path, name: &str, config: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
    path
}

fn coin_config(agent: Value, inits: Vec<u64>, chains: u64, steps: u64, burn_in: u64) -> Value {
    json!({
        "task": {"kind": "proportion", "n_obs": 10, "m_pred": 100},
        "agent": agent,
        "sweep": {"initial_values": inits, "chains_per_init": chains, "steps": steps, "burn_in": burn_in, "seed": 7},
        "output": {"dir": "runs"}
    })
}

fn run_ok(args: &[&str]) -> (Output, PathBuf) {
    let out = bin().args(args).output().unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    let dir = stdout.split("written to ").nth(1).map(|s| PathBuf::from(s.trim()));
    (out, dir.unwrap_or_default())
}

fn run_dirs(root: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(root)
        .map(|r| r.filter_map(|e| e.ok().map(|e| e.path())).collect())
        .unwrap_or_default();
    v.sort();
    v
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn simulate_writes_per_init_histograms_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "coin.json", &coin_config(json!({"id": "mle"}), (0..=10).collect(), 20, 100, 20));
    let (_, first) = run_ok(&["simulate", "--config", cfg.to_str().unwrap()]);
    let (_, second) = run_ok(&["simulate", "--config", cfg.to_str().unwrap(), "--parallelism", "2"]);
    assert_ne!(first, second);
    assert_eq!(run_dirs(&tmp.path().join("runs")).len(), 2);

    let csv = std::fs::read_to_string(first.join("histograms.csv")).unwrap();
    let inits: std::collections::BTreeSet<&str> =
        csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).filter(|i| *i != "pooled").collect();
    assert_eq!(inits.len(), 11);
    for name in ["summary.json", "histograms.csv", "config.json"] {
        assert_eq!(std::fs::read(first.join(name)).unwrap(), std::fs::read(second.join(name)).unwrap(), "{name}");
    }
    assert_eq!(std::fs::read_dir(first.join("chains")).unwrap().count(), 220);
    let summary = read_json(&first.join("summary.json"));
    assert_eq!(summary["per_init"].as_array().unwrap().len(), 11);
    assert_eq!(summary["chains"], 220);
}

#[test]
fn simulate_exact_gibbs_reports_prior_mean() {
    let tmp = tempfile::tempdir().unwrap();
    let agent = json!({"id": "exact-gibbs", "alpha": 2.0, "beta": 2.0});
    let cfg = write_config(tmp.path(), "g.json", &coin_config(agent, vec![0, 5, 10], 40, 600, 100));
    let (_, dir) = run_ok(&["simulate", "--config", cfg.to_str().unwrap()]);
    let summary = read_json(&dir.join("summary.json"));
    assert_eq!(summary["quantity"], "theta");
    let mean = summary["pooled"]["mean"].as_f64().unwrap();
    assert!((mean - 0.5).abs() < 0.01, "{mean}");
}

#[test]
fn seed_override_changes_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let agent = json!({"id": "beta-posterior"});
    let cfg = write_config(tmp.path(), "b.json", &coin_config(agent, vec![0, 10], 5, 50, 10));
    let (_, a) = run_ok(&["simulate", "--config", cfg.to_str().unwrap()]);
    let (_, b) = run_ok(&["simulate", "--config", cfg.to_str().unwrap(), "--seed-override", "8"]);
    assert_ne!(std::fs::read(a.join("summary.json")).unwrap(), std::fs::read(b.join("summary.json")).unwrap());
    assert_eq!(read_json(&b.join("config.json"))["sweep"]["seed"], 8);
}

#[test]
fn analyze_mle_gives_fixation_table() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "a.json", &coin_config(json!({"id": "mle"}), vec![3], 1, 10, 0));
    let (_, dir) = run_ok(&["analyze", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    let analysis = read_json(&dir.join("analysis.json"));
    assert_eq!(analysis["absorbing_states"], json!([0, 10]));
    for k in 0..=10 {
        let row = &analysis["absorption"]["probs"][k.to_string()];
        assert!((row["10"].as_f64().unwrap() - k as f64 / 10.0).abs() < 1e-10);
        assert!((row["0"].as_f64().unwrap() - (1.0 - k as f64 / 10.0)).abs() < 1e-10);
    }
    assert!(analysis["martingale_defect"].as_f64().unwrap() < 1e-12);
    let stationary = &analysis["stationary"][0]["distribution"];
    assert!((stationary[10].as_f64().unwrap() - 0.3).abs() < 1e-9);
    assert!(dir.join("absorption.csv").exists() && dir.join("transition.csv").exists());
}

#[test]
fn analyze_avoid_zero_marks_zero_non_absorbing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "a.json", &coin_config(json!({"id": "avoid-zero"}), vec![1], 1, 10, 0));
    let (_, dir) = run_ok(&["analyze", "--config", cfg.to_str().unwrap()]);
    let analysis = read_json(&dir.join("analysis.json"));
    assert_eq!(analysis["absorbing_states"], json!([10]));
    assert!(analysis["non_absorbing_states"].as_array().unwrap().contains(&json!(0)));
    assert!((analysis["absorption"]["probs"]["0"]["10"].as_f64().unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn analyze_single_observation_task_is_identity() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = coin_config(json!({"id": "mle"}), vec![0, 1], 1, 10, 0);
    config["task"]["n_obs"] = json!(1);
    let cfg = write_config(tmp.path(), "n1.json", &config);
    let (_, dir) = run_ok(&["analyze", "--config", cfg.to_str().unwrap()]);
    let analysis = read_json(&dir.join("analysis.json"));
    assert_eq!(analysis["absorbing_states"], json!([0, 1]));
    assert_eq!(analysis["absorption"]["probs"], json!({"0": {"0": 1.0, "1": 0.0}, "1": {"0": 0.0, "1": 1.0}}));
}

#[test]
fn analyze_rejects_stochastic_agent() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "s.json", &coin_config(json!({"id": "beta-posterior"}), vec![1], 1, 10, 0));
    let out = bin().args(["analyze", "--config", cfg.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unsupported"));
    assert!(run_dirs(&tmp.path().join("runs")).is_empty());
}

fn diagnose_label(agent: Value, inits: Vec<u64>) -> String {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "d.json", &coin_config(agent, inits, 60, 1000, 500));
    let (out, _) = run_ok(&["simulate", "--config", cfg.to_str().unwrap()]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let dir = PathBuf::from(stdout.split("written to ").nth(1).unwrap().trim());
    let out = bin().args(["diagnose", "--run", dir.to_str().unwrap()]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&dir.join("report.json"));
    assert!(dir.join("plot_data.csv").exists());
    let label = report["label"].as_str().unwrap().to_string();
    assert!(String::from_utf8_lossy(&out.stdout).contains(&label));
    label
}

#[test]
fn diagnose_labels_the_three_regimes() {
    assert_eq!(diagnose_label(json!({"id": "mle"}), (0..=10).collect()), "deterministic");
    assert_eq!(diagnose_label(json!({"id": "beta-posterior"}), vec![0, 5, 10]), "stochastic");
    assert_eq!(diagnose_label(json!({"id": "avoid-zero"}), (1..=10).collect()), "degenerate-absorbing");
}

#[test]
fn diagnose_reports_insufficient_samples() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "d.json", &coin_config(json!({"id": "mle"}), vec![2, 8], 2, 20, 5));
    let out = bin().args(["diagnose", "--config", cfg.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("insufficient samples"));
}

fn fixture_config(cache_dir: &Path) -> Value {
    json!({
        "task": {"kind": "proportion", "n_obs": 10, "m_pred": 100},
        "backend": {"model": "fixture-model", "cache_dir": cache_dir},
        "sweep": {"initial_values": [2, 8], "chains_per_init": 4, "steps": 25, "burn_in": 5, "seed": 2024},
        "diagnostics": {"min_samples": 40, "thin": 1, "resamples": 500}
    })
}

fn core_fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

#[test]
fn replay_reproduces_bundled_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "r.json", &fixture_config(&core_fixtures()));
    let (_, dir) = run_ok(&["replay", "--config", cfg.to_str().unwrap(), "--parallelism", "3"]);
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir.join("chains")).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    let joined: Vec<u8> = files.iter().flat_map(|f| std::fs::read(f).unwrap()).collect();
    assert_eq!(joined, std::fs::read(core_fixtures().join("expected_records.txt")).unwrap());

    let out = bin().args(["diagnose", "--run", dir.to_str().unwrap()]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        std::fs::read(dir.join("report.json")).unwrap(),
        std::fs::read(core_fixtures().join("expected_report.json")).unwrap()
    );
}

#[test]
fn replay_cache_miss_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = fixture_config(&core_fixtures());
    config["sweep"]["seed"] = json!(1);
    let cfg = write_config(tmp.path(), "r.json", &config);
    let out = bin().args(["replay", "--config", cfg.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&out.stderr).contains("replay cache has no exchange"));
    assert!(run_dirs(&tmp.path().join("runs")).is_empty());
}

#[test]
fn elicit_without_key_fails_at_startup() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = fixture_config(&tmp.path().join("cache"));
    config["backend"]["api_key_env"] = json!("PRIORPROBE_CLI_TEST_NO_SUCH_KEY");
    let cfg = write_config(tmp.path(), "e.json", &config);
    let out = bin().args(["elicit", "--config", cfg.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("PRIORPROBE_CLI_TEST_NO_SUCH_KEY"));
    assert!(run_dirs(&tmp.path().join("runs")).is_empty());
}

#[test]
fn unreachable_endpoint_is_a_network_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = fixture_config(&tmp.path().join("cache"));
    config["backend"]["base_url"] = json!("http://127.0.0.1:9/v1");
    config["backend"]["api_key_env"] = json!("PRIORPROBE_CLI_TEST_KEY");
    config["backend"]["max_retries"] = json!(0);
    let cfg = write_config(tmp.path(), "e.json", &config);
    let out = bin()
        .args(["elicit", "--config", cfg.to_str().unwrap()])
        .env("PRIORPROBE_CLI_TEST_KEY", "k")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bad_config_exits_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = coin_config(json!({"id": "mle"}), vec![0, 10], 2, 20, 5);
    config["sweep"]["chians_per_init"] = json!(3);
    let cfg = write_config(tmp.path(), "bad.json", &config);
    let out = bin().args(["simulate", "--config", cfg.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("chians_per_init"));

    let out = bin().args(["simulate", "--config", tmp.path().join("absent.json").to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(5));
}

/// One field of a valid config replaced by an out-of-domain value, with the
/// path fragment the error message must mention.
fn invalid_mutation() -> impl Strategy<Value = (String, Value, &'static str)> {
    prop_oneof![
        (11u64..1000).prop_map(|v| ("/sweep/initial_values/0".into(), json!(v), "sweep.initial_values[0]")),
        Just(("/sweep/chains_per_init".into(), json!(0), "sweep.chains_per_init")),
        Just(("/sweep/steps".into(), json!(0), "sweep.steps")),
        (20u64..1000).prop_map(|v| ("/sweep/burn_in".into(), json!(v), "sweep.burn_in")),
        (-1000i64..0).prop_map(|v| ("/sweep/seed".into(), json!(v), "sweep.seed")),
        Just(("/task/n_obs".into(), json!(0), "task")),
        Just(("/task/m_pred".into(), json!(0), "task")),
        Just(("/task/kind".into(), json!("dice"), "task")),
        "[a-z]{3,8}".prop_map(|s| ("/agent/id".into(), json!(format!("x{s}")), "agent")),
        (-10.0f64..=0.0).prop_map(|v| ("/agent/alpha".into(), json!(v), "agent")),
        Just(("/output/dir".into(), json!(""), "output.dir")),
        Just(("/output/extra".into(), json!(1), "extra")),
        Just(("/diagnostics/alpha".into(), json!(1.5), "diagnostics")),
        Just(("/diagnostics/resamples".into(), json!(10), "diagnostics")),
        Just(("/backend/temperature".into(), json!(-1.0), "backend.temperature")),
        Just(("/backend/requests_per_minute".into(), json!(0), "backend.requests_per_minute")),
    ]
}

fn set_pointer(doc: &mut Value, pointer: &str, value: Value) {
    let (parent, key) = pointer.rsplit_once('/').unwrap();
    let target = doc.pointer_mut(parent).unwrap();
    match target {
        Value::Array(a) => a[key.parse::<usize>().unwrap()] = value,
        Value::Object(o) => {
            o.insert(key.to_string(), value);
        }
        _ => unreachable!(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn invalid_configs_never_create_run_dirs((pointer, value, field) in invalid_mutation()) {
        let tmp = tempfile::tempdir().unwrap();
        let mut doc = coin_config(json!({"id": "exact-gibbs", "alpha": 1.0, "beta": 1.0}), vec![0, 5, 10], 2, 20, 5);
        doc["backend"] = json!({"model": "m", "cache_dir": "cache"});
        doc["diagnostics"] = json!({});
        set_pointer(&mut doc, &pointer, value);
        let cfg = write_config(tmp.path(), "c.json", &doc);
        let opts = RunOptions::default();
        for result in [commands::simulate(&cfg, &opts), commands::analyze(&cfg, &opts), commands::diagnose_config(&cfg, &opts)] {
            let err = result.unwrap_err();
            prop_assert_eq!(err.exit_code(), 2);
            prop_assert!(err.message.contains(field), "{} lacks {}", err.message, field);
        }
        prop_assert!(run_dirs(&tmp.path().join("runs")).is_empty());
        prop_assert!(ExperimentConfig::load(&cfg).is_err());
    }
}

#[test]
fn bundled_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert!(n >= 5);
}
