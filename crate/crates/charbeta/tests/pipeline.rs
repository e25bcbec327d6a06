//! End-to-end integration: simulated panel through CSV, re-ingestion, the
//! CLI binary, and every interval method on the same data.

use std::process::Command;

use charbeta::boot::{
    block_bootstrap_ci, cs_bootstrap_ci, BlockPartition, BootstrapPlan, FactorWindow, SpotBundle,
};
use charbeta::dgp::{simulate_factor_panel, DgpConfig};
use charbeta::factor::estimate_window;
use charbeta::harness::{export_simulated_panel, ingest_csv_panel, CsvSchema};
use charbeta::panel::LocalWindow;
use charbeta::sieve::{build_basis, CharacteristicPanel, SieveBasisSpec};
use nalgebra::DVector;

fn raw_linear() -> SieveBasisSpec {
    SieveBasisSpec { standardize: false, ..SieveBasisSpec::linear() }
}

#[test]
fn csv_round_trip_preserves_intervals_and_intervals_reuse() {
    let dir = std::env::temp_dir().join("charbeta_pipeline");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("panel.csv");

    let config = DgpConfig::standard(40, 30, 2, 3, 0.6, 424_242);
    let sim = simulate_factor_panel(&config).unwrap();
    export_simulated_panel(&sim, &path).unwrap();
    let schema =
        CsvSchema { k_x: 3, k_factors: 2, delta_n: config.delta_n, drop_incomplete: false };
    let ingested = ingest_csv_panel(&path, &schema).unwrap();

    // Estimates computed from the in-memory panel and from the CSV round
    // trip agree bit for bit.
    let w = LocalWindow { start_index: 1, k_n: 30 };
    let chars_mem = CharacteristicPanel::new(sim.characteristics[0].clone()).unwrap();
    let chars_csv = CharacteristicPanel::new(ingested.characteristics[0].clone()).unwrap();
    let op_mem = build_basis(&chars_mem, &raw_linear()).unwrap();
    let op_csv = build_basis(&chars_csv, &raw_linear()).unwrap();
    let dec_mem = estimate_window(&sim.increments_y, &sim.increments_f, w, &op_mem).unwrap();
    let dec_csv = estimate_window(
        &ingested.panel,
        ingested.factors.as_ref().unwrap(),
        w,
        &op_csv,
    )
    .unwrap();
    assert_eq!(dec_mem.g_hat, dec_csv.g_hat);

    // The same bundle feeds both bootstrap flavors.
    let v = DVector::from_column_slice(&[1.0, 0.0]);
    let plan = BootstrapPlan::new(200, 3, v, 0.95, 11);
    let bundle = SpotBundle {
        y_window: ingested.panel.window_view(&w),
        factors: FactorWindow::Known(ingested.factors.as_ref().unwrap().view((0, 0), (2, 30))),
        op: &op_csv,
        delta_n: config.delta_n,
        bias: None,
    };
    let ci = cs_bootstrap_ci(&bundle, &plan).unwrap();
    assert!(ci.lo < ci.hi);
    let part = BlockPartition::contiguous(40, 5).unwrap();
    let ci_b = block_bootstrap_ci(&bundle, &part, &plan).unwrap();
    assert!(ci_b.contains(ci_b.point));

    std::fs::remove_file(&path).ok();
}

#[test]
fn cli_round_trip() {
    let bin = env!("CARGO_BIN_EXE_charbeta");
    let dir = std::env::temp_dir().join("charbeta_cli_test");
    std::fs::create_dir_all(&dir).unwrap();
    let dgp_json = dir.join("dgp.json");
    let panel_csv = dir.join("panel.csv");
    let dec_csv = dir.join("dec.csv");

    // Template config, shrunk for test speed.
    let out = Command::new(bin).args(["example-config", "dgp"]).output().unwrap();
    assert!(out.status.success());
    let mut config: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    config["p"] = 30.into();
    config["n"] = 20.into();
    std::fs::write(&dgp_json, serde_json::to_string(&config).unwrap()).unwrap();

    let delta = config["delta_n"].as_f64().unwrap().to_string();
    let status = Command::new(bin)
        .args(["simulate", "--config"])
        .arg(&dgp_json)
        .arg("--out")
        .arg(&panel_csv)
        .status()
        .unwrap();
    assert!(status.success());

    let status = Command::new(bin)
        .args(["ingest-check", "--panel"])
        .arg(&panel_csv)
        .args(["--k-x", "4", "--factors", "2", "--delta-n", &delta])
        .status()
        .unwrap();
    assert!(status.success());

    let status = Command::new(bin)
        .args(["estimate", "--panel"])
        .arg(&panel_csv)
        .args(["--k-x", "4", "--factors", "2", "--delta-n", &delta, "--k-n", "20"])
        .arg("--out")
        .arg(&dec_csv)
        .status()
        .unwrap();
    assert!(status.success());
    let dec = std::fs::read_to_string(&dec_csv).unwrap();
    assert_eq!(dec.lines().count(), 31); // header + 30 assets

    let out = Command::new(bin)
        .args(["ci", "--panel"])
        .arg(&panel_csv)
        .args([
            "--k-x",
            "4",
            "--factors",
            "2",
            "--delta-n",
            &delta,
            "--k-n",
            "20",
            "--method",
            "cs-bootstrap",
            "--target",
            "a0002",
            "--v",
            "1,0",
            "--b",
            "100",
            "--seed",
            "3",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let ci: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(ci["lo"].as_f64().unwrap() <= ci["hi"].as_f64().unwrap());

    // Config errors exit with code 2, data errors with 3.
    let status = Command::new(bin)
        .args(["ci", "--panel"])
        .arg(&panel_csv)
        .args([
            "--k-x", "4", "--factors", "2", "--delta-n", &delta, "--k-n", "999",
            "--method", "cs-bootstrap", "--target", "a0002",
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    let status = Command::new(bin)
        .args(["ingest-check", "--panel", "/nonexistent.csv", "--k-x", "1", "--delta-n", "0.1"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));

    std::fs::remove_dir_all(&dir).ok();
}
