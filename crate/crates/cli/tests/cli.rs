use std::path::Path;
use std::process::{Command, Output};

use haulcast_core::config::ToolkitConfig;

fn haulcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_haulcast"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = haulcast(args);
    assert!(
        out.status.success(),
        "haulcast {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Simulates a small fleet and trims the written config so fitting is quick.
fn simulate(dir: &Path, n_vehicles: &str, days: &str) {
    ok(&[
        "simulate",
        "--n-vehicles",
        n_vehicles,
        "--days",
        days,
        "--seed",
        "5",
        "--out",
        s(dir),
    ]);
    let cfg_path = dir.join("config.toml");
    let mut cfg = ToolkitConfig::load(&cfg_path).unwrap();
    cfg.k_candidates = vec![2, 3];
    cfg.em_max_iter = 40;
    cfg.em_screen_restarts = 0;
    std::fs::write(&cfg_path, cfg.to_toml_string()).unwrap();
}

#[test]
fn full_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d, "10", "14");
    let cfg = d.join("config.toml");
    let c = s(&cfg);
    ok(&[
        "extract-stays",
        "--config",
        c,
        "--input",
        s(&d.join("trajectories.csv")),
        "--out",
        s(&d.join("stays.jsonl")),
    ]);
    ok(&[
        "build-sequences",
        "--config",
        c,
        "--input",
        s(&d.join("stays.jsonl")),
        "--weather",
        s(&d.join("weather.csv")),
        "--out",
        s(&d.join("sequences.jsonl")),
    ]);
    let seq = d.join("sequences.jsonl");
    ok(&[
        "select-states",
        "--config",
        c,
        "--input",
        s(&seq),
        "--out",
        s(&d.join("states.json")),
    ]);
    ok(&[
        "fit",
        "--config",
        c,
        "--input",
        s(&seq),
        "--out",
        s(&d.join("models")),
        "--jobs",
        "2",
    ]);
    let models = d.join("models");
    ok(&[
        "predict",
        "--config",
        c,
        "--input",
        s(&seq),
        "--models",
        s(&models),
        "--out",
        s(&d.join("forecasts.jsonl")),
    ]);
    ok(&[
        "evaluate",
        "--config",
        c,
        "--input",
        s(&seq),
        "--models",
        s(&models),
        "--out",
        s(&d.join("eval")),
    ]);
    ok(&[
        "analyze-factors",
        "--config",
        c,
        "--input",
        s(&seq),
        "--models",
        s(&models),
        "--out",
        s(&d.join("factors.csv")),
    ]);

    for f in [
        "stays.jsonl",
        "grid.json",
        "fleet_stats.json",
        "states.json",
        "forecasts.jsonl",
        "factors.csv",
    ] {
        assert!(d.join(f).metadata().unwrap().len() > 0, "{f} is empty");
    }
    assert_eq!(std::fs::read_dir(&models).unwrap().count(), 10);
    let summary = std::fs::read_to_string(d.join("eval").join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(
        lines[0],
        "model,n_vehicles,mean_dest_accuracy,mean_duration_r2,mean_abs_error_h"
    );
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("iohmm,10,"));
    let scores = std::fs::read_to_string(d.join("eval").join("scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 1 + 30);
    assert!(d.join("eval").join("error_histogram.csv").exists());
    let factors = std::fs::read_to_string(d.join("factors.csv")).unwrap();
    assert_eq!(factors.lines().count(), 1 + 8);
}

#[test]
fn fit_on_empty_sequences_reports_no_vehicles() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("sequences.jsonl");
    std::fs::write(&input, "").unwrap();
    let out = haulcast(&[
        "fit",
        "--input",
        s(&input),
        "--out",
        s(&dir.path().join("models")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no vehicles"));
}

#[test]
fn missing_input_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = haulcast(&[
        "extract-stays",
        "--input",
        s(&dir.path().join("absent.csv")),
        "--out",
        s(&dir.path().join("x")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.csv"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "theta_d = 3\n").unwrap();
    let out = haulcast(&["simulate", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(!out.status.success());
}

#[test]
fn refits_are_byte_identical_across_job_counts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d, "3", "12");
    let c = d.join("config.toml");
    ok(&[
        "extract-stays",
        "--config",
        s(&c),
        "--input",
        s(&d.join("trajectories.csv")),
        "--out",
        s(&d.join("stays.jsonl")),
    ]);
    ok(&[
        "build-sequences",
        "--config",
        s(&c),
        "--input",
        s(&d.join("stays.jsonl")),
        "--weather",
        s(&d.join("weather.csv")),
        "--out",
        s(&d.join("seq.jsonl")),
    ]);
    let seq = d.join("seq.jsonl");
    ok(&[
        "fit",
        "--config",
        s(&c),
        "--input",
        s(&seq),
        "--out",
        s(&d.join("a")),
        "--jobs",
        "1",
    ]);
    ok(&[
        "fit",
        "--config",
        s(&c),
        "--input",
        s(&seq),
        "--out",
        s(&d.join("b")),
        "--jobs",
        "3",
    ]);
    let mut names: Vec<_> = std::fs::read_dir(d.join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 3);
    for n in names {
        assert_eq!(
            std::fs::read(d.join("a").join(&n)).unwrap(),
            std::fs::read(d.join("b").join(&n)).unwrap()
        );
    }
    // a vehicle filter fits only the named vehicle
    ok(&[
        "fit",
        "--config",
        s(&c),
        "--input",
        s(&seq),
        "--out",
        s(&d.join("one")),
        "--vehicles",
        "truck-001",
    ]);
    assert_eq!(std::fs::read_dir(d.join("one")).unwrap().count(), 1);
}
