use std::path::Path;
use std::process::{Command, Output};

const HEADER: &str = "trial,scenario,variant,aoa_true_deg,aoa_est_deg,aoa_err_deg,tof_true_ns,tof_est_ns,\
range_err_m,loc_err_m,rssi_drop_db,delay_ns,error";

fn obfsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_obfsim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("exp.toml");
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn list_experiments_prints_every_tag() {
    let out = obfsim(&["list-experiments"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    for tag in ["aoa_degradation", "e2e_multi_ap", "antenna_sweep", "precoding_ablation_profiles"] {
        assert!(text.contains(tag), "{tag} missing from\n{text}");
    }
    assert_eq!(text.lines().count(), 12);
}

#[test]
fn unknown_experiment_is_a_config_error_listing_tags() {
    let out = obfsim(&["demo", "no_such_thing"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("aoa_degradation") && err.contains("stale_precoder"), "{err}");
}

#[test]
fn validate_fills_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "experiment = \"rssi_comparison\"\ntrials = 7\n");
    let out = obfsim(&["validate", &cfg]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("trials = 7"), "{text}");
    assert!(text.contains("snr_db"), "{text}");
}

#[test]
fn bad_configs_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let unknown_field = write_config(dir.path(), "experiment = \"aoa_degradation\"\nbogus = 3\n");
    assert_eq!(obfsim(&["validate", &unknown_field]).status.code(), Some(1));
    let bad_tag = write_config(dir.path(), "experiment = \"nope\"\n");
    let out = obfsim(&["run", &bad_tag]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().contains("spread_sweep"));
    assert_eq!(obfsim(&["validate", "/definitely/not/here.toml"]).status.code(), Some(1));
    let zero = write_config(dir.path(), "experiment = \"aoa_degradation\"\ntrials = 0\n");
    assert_eq!(obfsim(&["validate", &zero]).status.code(), Some(1));
    assert_eq!(obfsim(&["demo", "aoa_degradation", "--format", "xml"]).status.code(), Some(1));
    assert_eq!(obfsim(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn run_writes_csv_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "experiment = \"aoa_degradation\"\ntrials = 3\nseed = 5\n");
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        let out = obfsim(&["run", &cfg, "--out", out_dir.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        outputs.push(std::fs::read_to_string(out_dir.join("aoa_degradation.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    let mut lines = outputs[0].lines();
    assert_eq!(lines.next(), Some(HEADER));
    assert_eq!(lines.count(), 6);
}

#[test]
fn seed_and_trials_flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "experiment = \"rssi_comparison\"\ntrials = 50\n");
    let read = |seed: &str, name: &str| {
        let out_dir = dir.path().join(name);
        let out = obfsim(&["run", &cfg, "--trials", "2", "--seed", seed, "--out", out_dir.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0));
        std::fs::read_to_string(out_dir.join("rssi_comparison.csv")).unwrap()
    };
    let (a, b) = (read("1", "s1"), read("2", "s2"));
    assert_eq!(a.lines().count(), 1 + 2 * 6);
    assert_ne!(a, b);
}

#[test]
fn json_format() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("j");
    let out = obfsim(&[
        "demo",
        "rssi_comparison",
        "--trials",
        "2",
        "--format",
        "json",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(out_dir.join("rssi_comparison.json")).unwrap();
    assert!(text.trim_start().starts_with('['), "{text}");
    assert!(text.contains("\"variant\""));
}

#[test]
fn unwritable_output_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let out = obfsim(&["demo", "rssi_comparison", "--trials", "1", "--out", blocker.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
