//! End-to-end runs of the `magband` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use magband::cli::RunConfig;
use magband::dispersion::BandSummary;
use magband::verify::CheckRecord;

fn magband(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_magband"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("MAGBAND_THREADS")
        .output()
        .expect("binary runs")
}

fn config(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs").join(name).display().to_string()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.json");
    fs::write(&path, body).unwrap();
    path.display().to_string()
}

/// A small kind-1 sweep that runs in a second or two.
const SMALL: &str = r#"{
  "geometry": {"kind": "neumann_window_layer", "d": {"num": 1, "den": 1, "scale": "pi"}, "a": 1.0},
  "sweep": {"p": {"min": -6.0, "max": 6.0, "count": 7}, "levels": 3},
  "solver": {"cells_per_pi": 16}
}"#;

#[test]
fn fiber_writes_one_row_per_level() {
    let dir = tempfile::tempdir().unwrap();
    let out = magband(&["fiber", "--p", "0", "--levels", "5"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("fiber.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("p,k,lambda,residual"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|f| f.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 5);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[0], 0.0);
        assert_eq!(r[1], (i + 1) as f64);
    }
    assert!(rows.windows(2).all(|w| w[0][2] <= w[1][2]));
    assert!(!csv.contains('\r'));
}

#[test]
fn negative_momentum_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let out = magband(&["fiber", "--p", "-2.5", "--levels", "2"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("fiber.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("-2.5"));
}

#[test]
fn dump_vectors_writes_grids() {
    let dir = tempfile::tempdir().unwrap();
    let out = magband(&["fiber", "--p", "1", "--levels", "2", "--dump-vectors"], dir.path());
    assert!(out.status.success());
    for k in 1..=2 {
        let csv = fs::read_to_string(dir.path().join(format!("vector_{k}.csv"))).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("x,z,value"));
        let rows: Vec<[f64; 3]> = lines
            .map(|l| {
                let v: Vec<f64> = l.split(',').map(|f| f.parse().unwrap()).collect();
                [v[0], v[1], v[2]]
            })
            .collect();
        assert!(rows.len() > 100);
        assert!(rows.iter().all(|r| r[1] > 0.0 && r[1] <= std::f64::consts::PI + 1e-12));
        assert!(rows.iter().any(|r| r[2].abs() > 1e-3));
    }
}

#[test]
fn zero_denominator_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{
  "geometry": {
    "kind": "double_layer",
    "d1": {"num": 1, "den": 1},
    "d2": {"num": 1, "den": 0},
    "a": 1.0
  }
}"#,
    );
    let out = magband(&["fiber", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("geometry.d2.den"), "{err}");
    assert!(err.contains("line 5"), "{err}");
    assert!(!dir.path().join("fiber.csv").exists());
}

#[test]
fn malformed_json_reports_position() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "{\n  \"geometry\": {\"kind\": \"neumann_window_layer\",,}\n}\n");
    let out = magband(&["fiber", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn bad_flags_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(magband(&["fiber", "--levels", "0"], dir.path()).status.code(), Some(2));
    assert_eq!(magband(&["verify", "--suite", "nonsense"], dir.path()).status.code(), Some(2));
    assert_eq!(magband(&["--threads", "0", "fiber"], dir.path()).status.code(), Some(2));
    assert_eq!(magband(&["frobnicate"], dir.path()).status.code(), Some(2));
}

#[test]
fn unconverged_solve_leaves_partial_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"geometry": {"kind": "neumann_window_layer", "d": {"num": 1, "den": 1, "scale": "pi"}, "a": 1.0},
            "solver": {"max_iter": 2, "cells_per_pi": 16}}"#,
    );
    let out = magband(&["fiber", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("fiber.csv").exists());
    let partial = fs::read_to_string(dir.path().join("fiber.partial.csv")).unwrap();
    assert!(partial.starts_with("p,k,lambda,residual\n"));
    assert!(partial.lines().count() > 1);
}

#[test]
fn thread_count_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_magband"))
        .args(["fiber", "--levels", "1", "--out"])
        .arg(dir.path())
        .env("MAGBAND_THREADS", "1")
        .output()
        .unwrap();
    assert!(out.status.success());
    let bad = Command::new(env!("CARGO_BIN_EXE_magband"))
        .args(["fiber", "--levels", "1", "--out"])
        .arg(dir.path())
        .env("MAGBAND_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn dispersion_svg_parses() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let svg = dir.path().join("bands.svg");
    let out = magband(&["dispersion", "--config", &cfg, "--svg", svg.to_str().unwrap()], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&svg).unwrap();
    let doc = roxmltree::Document::parse(&text).expect("well-formed SVG");
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    let bands = doc.descendants().filter(|n| n.attribute("class") == Some("band")).count();
    assert_eq!(bands, 3);
    let table: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("dispersion.json")).unwrap()).unwrap();
    assert_eq!(table["points"].as_array().unwrap().len(), 7);
    let csv = fs::read_to_string(dir.path().join("dispersion.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 7 * 3);
}

#[test]
fn outputs_are_byte_stable() {
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    for d in [&first, &second] {
        let cfg = write_config(d.path(), SMALL);
        assert!(magband(&["dispersion", "--config", &cfg], d.path()).status.success());
        assert!(magband(&["bands", "--config", &cfg], d.path()).status.success());
    }
    for f in ["dispersion.csv", "dispersion.json", "bands.json"] {
        let a = fs::read(first.path().join(f)).unwrap();
        let b = fs::read(second.path().join(f)).unwrap();
        assert!(a == b, "{f} differs between runs");
    }
}

#[test]
fn effective_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let original = RunConfig::load(Path::new(&config("commensurate_double_layer.json"))).unwrap();
    let out = magband(&["fiber", "--config", &config("commensurate_double_layer.json"), "--levels", "2"], dir.path());
    assert!(out.status.success());
    let emitted = RunConfig::load(&dir.path().join("effective_config.json")).unwrap();
    let expected = RunConfig {
        sweep: magband::cli::SweepBlock { levels: 2, ..original.sweep.clone() },
        output: magband::cli::OutputBlock { dir: dir.path().to_path_buf(), ..original.output.clone() },
        ..original
    };
    assert_eq!(emitted, expected);
    // Emitting the reparsed config again is a fixed point.
    assert_eq!(
        serde_json::to_string_pretty(&emitted).unwrap() + "\n",
        fs::read_to_string(dir.path().join("effective_config.json")).unwrap()
    );
}

#[test]
fn shipped_configs_validate() {
    for name in ["commensurate_double_layer.json", "window_layer.json", "one_sided_barrier.json"] {
        RunConfig::load(Path::new(&config(name))).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn commensurate_bands_have_a_flat_band() {
    let dir = tempfile::tempdir().unwrap();
    let out = magband(&["bands", "--config", &config("commensurate_double_layer.json")], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: BandSummary = serde_json::from_str(&fs::read_to_string(dir.path().join("bands.json")).unwrap()).unwrap();
    assert_eq!(summary.bands.len(), 12);
    assert_eq!(summary.bands.iter().filter(|b| b.flat).count(), 1);
    let predicted: Vec<(u32, u32, u32)> = summary
        .flat_bands
        .iter()
        .filter_map(|f| f.prediction.as_ref().map(|p| (p.n, p.m1, p.m2)))
        .collect();
    assert!(predicted.contains(&(0, 2, 1)), "{predicted:?}");
    assert!(!summary.gaps.is_empty());
}

#[test]
fn convergence_report_has_orders() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"geometry": {"kind": "double_layer", "d1": {"num": 1, "den": 1, "scale": "pi"}, "d2": {"num": 1, "den": 2, "scale": "pi"}, "a": 0.0},
            "sweep": {"levels": 3}, "solver": {"cells_per_pi": 16}}"#,
    );
    let out = magband(&["convergence", "--config", &cfg], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let study: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("convergence.json")).unwrap()).unwrap();
    let estimates = study["estimates"].as_array().unwrap();
    assert_eq!(estimates.len(), 3);
    for e in estimates {
        assert!((e["order"].as_f64().unwrap() - 2.0).abs() < 0.3);
    }
}

#[test]
fn verify_is_deterministic() {
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    for d in [&first, &second] {
        let out = magband(&["verify", "--suite", "convergence"], d.path());
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let read = |d: &Path| -> Vec<CheckRecord> { serde_json::from_str(&fs::read_to_string(d.join("verify.json")).unwrap()).unwrap() };
    let (a, b) = (read(first.path()), read(second.path()));
    assert_eq!(a.len(), b.len());
    assert!(!a.is_empty());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.id, y.id);
        assert_eq!(x.verdict, y.verdict);
        assert!(!x.anchor.is_empty());
        match (x.margin, y.margin) {
            (Some(m), Some(n)) => assert!((m - n).abs() <= 1e-12),
            (m, n) => assert_eq!(m, n),
        }
    }
}
