mod common;

use std::path::Path;
use std::process::{Command, Output};

use phasebal::metrics::Metric;
use phasebal::phase::Phase;
use phasebal::powerflow::SolveOptions;
use phasebal::sensitivity::{complex_sensitivities, ControlKind};
use phasebal::unbalance_sensitivity::metric_sensitivity_matrix;

fn phasebal(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phasebal"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("PHASEBAL_OUT")
        .output()
        .expect("binary runs")
}

fn feeder(name: &str) -> String {
    common::fixture_path(name).to_string_lossy().into_owned()
}

fn read_rows(path: &Path) -> (csv::StringRecord, Vec<csv::StringRecord>) {
    let mut reader = csv::Reader::from_path(path).unwrap();
    let header = reader.headers().unwrap().clone();
    (header, reader.records().map(|r| r.unwrap()).collect())
}

#[test]
fn powerflow_writes_one_row_per_terminal() {
    let dir = tempfile::tempdir().unwrap();
    let out = phasebal(
        &["powerflow", "--feeder", &feeder("unbalanced4.json")],
        dir.path(),
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let (header, rows) = read_rows(&dir.path().join("powerflow.csv"));
    assert_eq!(
        &header,
        vec![
            "bus",
            "phase",
            "vmag_pu",
            "angle_deg",
            "residual",
            "iterations"
        ]
    );
    assert_eq!(rows.len(), 12);
}

#[test]
fn zero_load_feeder_sits_at_one_per_unit() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(common::fixture_path("unbalanced4.json")).unwrap();
    let mut file = phasebal::feeder::FeederFile::from_json_str(&text).unwrap();
    file.loads.clear();
    let path = dir.path().join("noload.json");
    std::fs::write(&path, file.to_json_string()).unwrap();
    let out = phasebal(
        &["powerflow", "--feeder", path.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let (_, rows) = read_rows(&dir.path().join("powerflow.csv"));
    for row in rows {
        let v: f64 = row[2].parse().unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }
}

#[test]
fn corrupt_json_exits_with_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corrupt.json");
    std::fs::write(
        &path,
        r#"{"s_base_kva": 1000, "buses": [{"id": 1, "kind": "slack", "phases": "abc"}]}"#,
    )
    .unwrap();
    let out = phasebal(
        &["powerflow", "--feeder", path.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("base_kv"), "{stderr}");

    let usage = phasebal(&["powerflow"], dir.path());
    assert_eq!(usage.status.code(), Some(1));
}

#[test]
fn non_convergence_exits_with_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = phasebal(
        &[
            "powerflow",
            "--feeder",
            &feeder("unbalanced4.json"),
            "--max-iter",
            "2",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sensitivities_emit_the_full_heatmap_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = phasebal(
        &["sensitivities", "--feeder", &feeder("unbalanced4.json")],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let files: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(files.len(), 20);
    assert!(
        dir.path().join("sens_vmag_p.csv").exists() && dir.path().join("sens_vmag_q.csv").exists()
    );

    // Every cell equals the library value formatted at full precision.
    let model = common::fixture("unbalanced4.json");
    let (_, state) = common::nominal(&model, &SolveOptions::default());
    let sens = complex_sensitivities(&model, &state).unwrap();
    for metric in Metric::ALL {
        let m = metric_sensitivity_matrix(&model, &state, &sens, metric);
        for kind in ControlKind::ALL {
            for phase in Phase::ALL {
                let path = dir.path().join(format!("sens_{metric}_{kind}{phase}.csv"));
                let (header, rows) = read_rows(&path);
                assert_eq!(rows.len(), 4);
                for (row, lib) in rows.iter().zip(&m.rows) {
                    assert_eq!(row[0].parse::<i64>().unwrap(), lib.bus);
                    let Ok(values) = &lib.values else {
                        assert!(row[2].starts_with("skipped"));
                        continue;
                    };
                    for (col, name) in header.iter().enumerate().skip(3) {
                        let c = m
                            .controls
                            .iter()
                            .position(|ctl| {
                                ctl.bus.to_string() == name
                                    && ctl.kind == kind
                                    && ctl.phase == phase
                            })
                            .unwrap();
                        assert_eq!(row[col].parse::<f64>().unwrap(), values[c]);
                    }
                }
            }
        }
    }
}

#[test]
fn balanced_feeder_marks_vuf_rows_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let out = phasebal(
        &[
            "sensitivities",
            "--feeder",
            &feeder("balanced4.json"),
            "--metric",
            "vuf",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let (_, rows) = read_rows(&dir.path().join("sens_vuf_pa.csv"));
    assert!(rows.iter().all(|r| r[2].starts_with("skipped")));
}

#[test]
fn estimate_at_unit_scale_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let out = phasebal(
        &[
            "estimate",
            "--feeder",
            &feeder("synthetic30.json"),
            "--scale",
            "1.0",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let (_, rows) = read_rows(&dir.path().join("estimate.csv"));
    let ok: Vec<_> = rows.iter().filter(|r| &r[7] == "ok").collect();
    assert!(!ok.is_empty());
    for r in ok {
        assert_eq!(&r[3], &r[4], "bus {} {}", &r[1], &r[2]);
        assert_eq!(r[5].parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn estimate_rows_are_sorted_and_errors_grow_with_distance() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "estimate",
        "--feeder",
        &feeder("synthetic30.json"),
        "--scale",
        "0.8",
        "--scale",
        "0.9",
        "--scale",
        "1.2",
    ];
    let out = phasebal(&args, dir.path());
    assert_eq!(out.status.code(), Some(0));
    let (_, rows) = read_rows(&dir.path().join("estimate.csv"));
    for scale in ["0.8", "0.9", "1.2"] {
        let buses: Vec<i64> = rows
            .iter()
            .filter(|r| &r[0] == scale)
            .map(|r| r[1].parse().unwrap())
            .collect();
        assert!(buses.windows(2).all(|w| w[0] <= w[1]));
    }
    let max_rel = |scale: &str| {
        rows.iter()
            .filter(|r| &r[0] == scale && &r[7] == "ok")
            .map(|r| r[6].parse::<f64>().unwrap())
            .inspect(|e| assert!(e.is_finite()))
            .fold(0.0, f64::max)
    };
    assert!(max_rel("0.9") < max_rel("0.8"));
    assert!(max_rel("1.2").is_finite());
}

#[test]
fn balance_summary_has_a_row_per_metric_and_beta() {
    let dir = tempfile::tempdir().unwrap();
    let profile = common::fixture_path("profile24.csv");
    let args = [
        "balance",
        "--feeder",
        &feeder("unbalanced4.json"),
        "--profile",
        profile.to_str().unwrap(),
        "--beta",
        "0",
        "--beta",
        "0.01",
        "--beta",
        "0.02",
    ];
    let out = phasebal(&args, dir.path());
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let (_, rows) = read_rows(&dir.path().join("summary.csv"));
    assert_eq!(rows.len(), 9);
    for metric in Metric::ALL {
        let pct = |beta: &str| -> f64 {
            rows.iter()
                .find(|r| &r[0] == metric.as_str() && &r[1] == beta)
                .unwrap()[5]
                .parse()
                .unwrap()
        };
        assert_eq!(pct("0"), 0.0);
        assert!(pct("0.02") <= pct("0.01"), "{metric}");
        let (_, steps) = read_rows(&dir.path().join(format!("balance_{metric}_beta0.02.csv")));
        assert_eq!(steps.len(), 24);
    }
}

#[test]
fn balance_rejects_a_bad_profile() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("profile.csv");
    std::fs::write(&path, "step,factor\n0,1.0\n1,-2\n").unwrap();
    let out = phasebal(
        &[
            "balance",
            "--feeder",
            &feeder("unbalanced4.json"),
            "--profile",
            path.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn output_directory_defaults_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("from_env");
    let out = Command::new(env!("CARGO_BIN_EXE_phasebal"))
        .args(["powerflow", "--feeder", &feeder("unbalanced4.json")])
        .env("PHASEBAL_OUT", &target)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(target.join("powerflow.csv").exists());
}
