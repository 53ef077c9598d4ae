use obfsim::harness::{
    records_from_csv, records_to_csv, run_experiment, summarize, trial_seed, write_output, Experiment,
    ExperimentConfig, OutputFormat, CSV_HEADER,
};
use obfsim::VariantTag;

fn config(exp: Experiment, trials: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::demo(exp);
    cfg.trials = trials;
    cfg
}

#[test]
fn every_experiment_parses_from_its_tag() {
    for e in Experiment::ALL {
        let cfg = ExperimentConfig::from_toml_str(&format!("experiment = \"{}\"", e.tag())).unwrap();
        assert_eq!(cfg.experiment, e);
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(again.to_toml_string(), cfg.to_toml_string());
    }
}

#[test]
fn unknown_tag_error_names_the_valid_ones() {
    let err = ExperimentConfig::from_toml_str("experiment = \"bogus\"").unwrap_err().to_string();
    for e in Experiment::ALL {
        assert!(err.contains(e.tag()), "{err}");
    }
}

#[test]
fn invalid_values_are_rejected() {
    for body in [
        "experiment = \"aoa_degradation\"\ntrials = 0",
        "experiment = \"aoa_degradation\"\n[arrays]\nuser_antennas = 0",
        "experiment = \"aoa_degradation\"\n[precoder]\nvariants = [\"nope\"]",
        "experiment = \"aoa_degradation\"\nunexpected = 1",
    ] {
        assert!(ExperimentConfig::from_toml_str(body).is_err(), "{body}");
    }
}

#[test]
fn csv_round_trip_keeps_errors_and_blanks() {
    let out = run_experiment(&config(Experiment::RssiComparison, 3)).unwrap();
    let text = records_to_csv(&out.records).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
    let back = records_from_csv(&text).unwrap();
    assert_eq!(back.len(), out.records.len());
    assert_eq!(records_to_csv(&back).unwrap(), text);
}

#[test]
fn records_come_out_in_trial_order_with_all_variants() {
    let out = run_experiment(&config(Experiment::RssiComparison, 4)).unwrap();
    let trials: Vec<usize> = out.records.iter().map(|r| r.trial).collect();
    let mut sorted = trials.clone();
    sorted.sort();
    assert_eq!(trials, sorted);
    for v in VariantTag::ALL {
        assert_eq!(out.records.iter().filter(|r| r.variant == v).count(), 4);
    }
    let rows = summarize(&out.records);
    assert_eq!(rows.len(), 6);
}

#[test]
fn identity_rssi_drop_is_zero() {
    let out = run_experiment(&config(Experiment::RssiComparison, 3)).unwrap();
    for r in out.records.iter().filter(|r| r.variant == VariantTag::Identity) {
        assert!(r.rssi_drop_db.unwrap().abs() < 1e-9);
    }
}

#[test]
fn seeds_differ_by_trial_and_condition() {
    let a = trial_seed(1, 0, 0);
    assert_ne!(a, trial_seed(1, 1, 0));
    assert_ne!(a, trial_seed(1, 0, 1));
    assert_ne!(a, trial_seed(2, 0, 0));
    assert_eq!(a, trial_seed(1, 0, 0));
}

#[test]
fn different_seeds_give_different_results() {
    let mut cfg = config(Experiment::AoaDegradation, 3);
    let a = records_to_csv(&run_experiment(&cfg).unwrap().records).unwrap();
    cfg.seed += 1;
    let b = records_to_csv(&run_experiment(&cfg).unwrap().records).unwrap();
    assert_ne!(a, b);
}

#[test]
fn profiles_and_scatter_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(Experiment::PrecodingAblationProfiles, 1);
    let out = run_experiment(&cfg).unwrap();
    let paths = write_output(&cfg, &out, dir.path(), OutputFormat::Csv).unwrap();
    let profile = paths
        .iter()
        .find(|p| p.to_string_lossy().contains("_profile_dolos"))
        .expect("dolos profile written");
    let text = std::fs::read_to_string(profile).unwrap();
    let mut lines = text.lines();
    let delays: Vec<&str> = lines.next().unwrap().split(',').collect();
    let first_row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(delays.len(), first_row.len());
    // Delay axis in seconds, angle axis in degrees.
    assert!(delays[1].parse::<f64>().unwrap().abs() < 1e-6);
    assert!(first_row[0].parse::<f64>().unwrap() <= -80.0);

    let cfg = config(Experiment::ClusteringScatter, 1);
    let out = run_experiment(&cfg).unwrap();
    assert!(!out.scatter.is_empty());
    let paths = write_output(&cfg, &out, dir.path(), OutputFormat::Csv).unwrap();
    assert!(paths.iter().any(|p| p.to_string_lossy().ends_with("clustering_scatter_scatter.csv")));
}
