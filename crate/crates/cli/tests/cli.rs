use std::collections::HashMap;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "seed = 3
[data]
points = 16
days = 1900
[thresholds]
record = \"full\"
[train]
epochs = 1
steps_per_epoch = 6
";

fn hydroscan(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hydroscan"))
        .arg("--config")
        .arg(dir.join("tiny.toml"))
        .arg("--out")
        .arg(dir)
        .args(["--threads", "1"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = hydroscan(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), config).unwrap();
    dir
}

fn records(path: &Path) -> Vec<HashMap<String, String>> {
    let mut rd = csv::Reader::from_path(path).unwrap();
    let header = rd.headers().unwrap().clone();
    rd.records()
        .map(|r| header.iter().zip(r.unwrap().iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect())
        .collect()
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = setup(TINY);
    let d = dir.path();
    ok(d, &["gen-data"]);
    ok(d, &["fit-thresholds"]);
    ok(d, &["train"]);
    ok(d, &["forecast"]);
    for f in ["dataset.rsds", "thresholds.csv", "model.rsnn", "norm.toml", "trace.csv", "forecast.csv"] {
        assert!(d.join(f).is_file(), "{f} missing");
    }
    // baseline row before training plus one row per epoch
    assert_eq!(records(&d.join("trace.csv")).len(), 2);

    // severity is the largest exceeded return period, 0 below the 1.5-year level
    let mut theta: HashMap<String, Vec<(f64, f64)>> = HashMap::new();
    for r in records(&d.join("thresholds.csv")) {
        theta.entry(r["point_id"].clone()).or_default().push((r["rp"].parse().unwrap(), r["theta"].parse().unwrap()));
    }
    let fc = records(&d.join("forecast.csv"));
    assert!(!fc.is_empty() && fc.len().is_multiple_of(16 * 7));
    for r in &fc {
        let x: f64 = r["discharge"].parse().unwrap();
        let sev: f64 = r["severity_rp"].parse().unwrap();
        let th = &theta[&r["point_id"]];
        let expected = th.iter().filter(|(_, t)| x >= *t).map(|(rp, _)| *rp).fold(0.0, f64::max);
        assert_eq!(sev, expected);
        if x < th[0].1 {
            assert_eq!(sev, 0.0);
        }
    }

    let first = ok(d, &["evaluate"]);
    let names = ["climatology", "persistence", "model"];
    let snapshot = || -> Vec<Vec<u8>> {
        let mut files = vec![std::fs::read(d.join("summary.txt")).unwrap(), std::fs::read(d.join("summary_by_lead.csv")).unwrap()];
        for n in names {
            for s in ["val", "test"] {
                files.push(std::fs::read(d.join(format!("metrics_{n}_{s}.csv"))).unwrap());
            }
        }
        files
    };
    let before = snapshot();
    let second = ok(d, &["evaluate"]);
    assert_eq!(first, second);
    assert_eq!(before, snapshot());
    for n in names {
        assert!(first.contains(n));
    }
}

#[test]
fn oracle_scores_are_perfect() {
    let dir = setup(TINY);
    let d = dir.path();
    ok(d, &["gen-data"]);
    ok(d, &["fit-thresholds"]);
    let summary = ok(d, &["evaluate", "--oracle"]);
    let line = summary.lines().find(|l| l.starts_with("oracle")).unwrap();
    let cells: Vec<&str> = line.split(['|', ' ']).filter(|s| !s.is_empty()).skip(1).collect();
    assert_eq!(cells.len(), 6);
    for c in cells {
        assert_eq!(c, "100.00");
    }
    for r in records(&d.join("metrics_oracle_test.csv")) {
        assert_eq!(r["kge"], "1");
        assert!(r["f1_1.5"].is_empty() || r["f1_1.5"] == "1");
    }
}

#[test]
fn failures_exit_nonzero_without_partial_outputs() {
    let dir = setup(TINY);
    let d = dir.path();
    let out = hydroscan(d, &["train"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
    assert!(!d.join("model.rsnn").exists());

    // the training record alone is too short to fit thresholds
    let short = setup("[data]\npoints = 16\ndays = 1900\n");
    let s = short.path();
    ok(s, &["gen-data"]);
    let out = hydroscan(s, &["fit-thresholds"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("insufficient"));
    assert!(!s.join("thresholds.csv").exists());

    let bad = setup("[model]\nhiden = 4\n");
    let out = hydroscan(bad.path(), &["gen-data"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("hiden"));
}

#[test]
fn gen_data_flags_override_the_config() {
    let dir = setup("");
    let d = dir.path();
    ok(d, &["gen-data", "--points", "9", "--days", "900"]);
    let data = hydroscan::data::Dataset::load(&d.join("dataset.rsds")).unwrap();
    assert_eq!(data.n_points(), 9);
    assert_eq!(data.sim.days, 900);
}

#[test]
fn curve_command_writes_every_cell() {
    let dir = setup("");
    let d = dir.path();
    ok(d, &["curve", "--kind", "gilbert", "--width", "5", "--height", "3"]);
    let rows = records(&d.join("curve_gilbert_5x3.csv"));
    assert_eq!(rows.len(), 15);
    let mut seen = std::collections::HashSet::new();
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r["step"], i.to_string());
        assert!(seen.insert((r["x"].clone(), r["y"].clone())));
    }
}
