use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::DVector;
use pcis_core::gpssm::{read_transitions_csv, ModelDocument};
use pcis_core::{FitOptions, GpssmModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn pcis(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcis"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small seeded demo run: data.csv, model.json, constraints.json and pci.json.
fn demo_dir() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let out = pcis(&[
        "demo-quadrotor",
        "--out-dir",
        s(dir.path()),
        "--transitions",
        "120",
        "--rollouts",
        "200",
        "--restarts",
        "1",
        "--seed",
        "3",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    dir
}

fn corrupt_gain(pci: &Path, factor: f64) -> PathBuf {
    let mut doc: serde_json::Value = serde_json::from_slice(&std::fs::read(pci).unwrap()).unwrap();
    for row in doc["L"].as_array_mut().unwrap() {
        for v in row.as_array_mut().unwrap() {
            *v = serde_json::json!(v.as_f64().unwrap() * factor);
        }
    }
    let path = pci.with_file_name("corrupted.json");
    std::fs::write(&path, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
    path
}

#[test]
fn fitted_model_round_trips_through_json() {
    let dir = demo_dir();
    let data = dir.path().join("data.csv");
    let model_path = dir.path().join("fit.json");
    let out = pcis(&[
        "fit",
        "--data",
        s(&data),
        "--out",
        s(&model_path),
        "--restarts",
        "2",
        "--seed",
        "7",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));

    let dataset = read_transitions_csv(std::fs::File::open(&data).unwrap()).unwrap();
    let options = FitOptions {
        restarts: 2,
        seed: 7,
        ..Default::default()
    };
    let (direct, _) = GpssmModel::fit(dataset, &options).unwrap();
    let doc: ModelDocument = serde_json::from_slice(&std::fs::read(&model_path).unwrap()).unwrap();
    let loaded = doc.to_model(dir.path()).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let x = DVector::from_fn(4, |_, _| rng.random_range(-3.0..3.0));
        let u = DVector::from_fn(2, |_, _| rng.random_range(-3.0..3.0));
        let a = direct.posterior(&x, &u).unwrap();
        let b = loaded.posterior(&x, &u).unwrap();
        assert!((a.mean - b.mean).amax() <= 1e-12);
        assert!((a.variance - b.variance).amax() <= 1e-12);
    }
}

#[test]
fn manifest_is_embedded_and_records_digests() {
    let dir = demo_dir();
    let doc: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("pci.json")).unwrap()).unwrap();
    assert_eq!(doc["manifest"]["command"], "demo-quadrotor");
    assert_eq!(doc["manifest"]["seed"], 3);
    assert!(doc["manifest"]["wall_clock_seconds"].is_null());

    let out_path = dir.path().join("verify.json");
    let out = pcis(&[
        "verify",
        "--model",
        s(&dir.path().join("model.json")),
        "--pci",
        s(&dir.path().join("pci.json")),
        "--out",
        s(&out_path),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(out_path).unwrap()).unwrap();
    let inputs = doc["manifest"]["inputs"].as_array().unwrap();
    assert_eq!(inputs.len(), 2);
    assert_eq!(inputs[0]["sha256"].as_str().unwrap().len(), 64);
    assert_eq!(doc["recheck_passed"], true);
}

#[test]
fn simulate_is_byte_identical_across_runs() {
    let dir = demo_dir();
    let model = dir.path().join("model.json");
    let pci = dir.path().join("pci.json");
    let run = |name: &str, extra: &[&str]| {
        let out_path = dir.path().join(format!("{name}.json"));
        let csv_path = dir.path().join(format!("{name}.csv"));
        let mut args = vec![
            "simulate",
            "--model",
            s(&model),
            "--pci",
            s(&pci),
            "--rollouts",
            "300",
            "--horizon",
            "30",
            "--seed",
            "9",
        ];
        args.extend_from_slice(extra);
        let (o, c) = (
            out_path.to_str().unwrap().to_string(),
            csv_path.to_str().unwrap().to_string(),
        );
        args.extend_from_slice(&["--out", &o, "--csv", &c]);
        let out = pcis(&args);
        assert!(out.status.success(), "{}", stderr(&out));
        (
            std::fs::read(&out_path).unwrap(),
            std::fs::read(&csv_path).unwrap(),
        )
    };
    let first = run("first", &[]);
    let second = run("second", &[]);
    let threaded = run("threaded", &["--jobs", "2"]);
    assert_eq!(first.1, second.1);
    assert_eq!(first.1, threaded.1);
    // The manifests differ only in the echoed output paths.
    let strip = |bytes: &[u8]| {
        let mut v: serde_json::Value = serde_json::from_slice(bytes).unwrap();
        v["manifest"]["config"] = serde_json::Value::Null;
        v
    };
    assert_eq!(strip(&first.0), strip(&threaded.0));
    // Same arguments give the same bytes.
    let again = run("first", &[]);
    assert_eq!(first, again);
    let report: serde_json::Value = serde_json::from_slice(&first.0).unwrap();
    assert_eq!(report["report"]["n_rollouts"], 300);

    let truth = dir.path().join("truth.json");
    let out = pcis(&[
        "simulate",
        "--dynamics",
        "quadrotor",
        "--pci",
        s(&dir.path().join("pci.json")),
        "--rollouts",
        "100",
        "--x0",
        "0.5,-0.2,0,0.1",
        "--out",
        s(&truth),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn corrupted_gain_fails_verification_naming_the_constraint() {
    let dir = demo_dir();
    let bad = corrupt_gain(&dir.path().join("pci.json"), 25.0);
    let out = pcis(&[
        "verify",
        "--model",
        s(&dir.path().join("model.json")),
        "--pci",
        s(&bad),
    ]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    let msg = stderr(&out);
    assert!(msg.contains("input constraint"), "{msg}");
}

#[test]
fn synthesize_happy_path_and_infeasible_exit_code() {
    let dir = demo_dir();
    let pci = dir.path().join("again.json");
    let out = pcis(&[
        "synthesize",
        "--model",
        s(&dir.path().join("model.json")),
        "--constraints",
        s(&dir.path().join("constraints.json")),
        "--delta",
        "1e-3",
        "--eta-grid",
        "10",
        "--out",
        s(&pci),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(&pci).unwrap()).unwrap();
    assert!(doc["p_star"].as_f64().unwrap() > 0.9);
    assert_eq!(doc["P"].as_array().unwrap().len(), 4);

    let tiny = dir.path().join("tiny.json");
    std::fs::write(
        &tiny,
        r#"{"box_state": {"lower": [-1e-3, -1e-3, -1e-3, -1e-3], "upper": [1e-3, 1e-3, 1e-3, 1e-3]},
            "box_input": {"lower": [-1e-3, -1e-3], "upper": [1e-3, 1e-3]}}"#,
    )
    .unwrap();
    let out = pcis(&[
        "synthesize",
        "--model",
        s(&dir.path().join("model.json")),
        "--constraints",
        s(&tiny),
        "--eta-grid",
        "5",
        "--out",
        s(&dir.path().join("never.json")),
    ]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stderr(&out).contains("infeasible"));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.csv");
    let out = pcis(&[
        "fit",
        "--data",
        s(&missing),
        "--out",
        s(&dir.path().join("m.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("missing.csv"));
    let out = pcis(&["fit", "--bogus-flag"]);
    assert_eq!(out.status.code(), Some(2));
    let garbage = dir.path().join("model.json");
    std::fs::write(&garbage, "{\"n\": 2}").unwrap();
    let out = pcis(&[
        "synthesize",
        "--model",
        s(&garbage),
        "--constraints",
        s(&garbage),
        "--out",
        s(&dir.path().join("x.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
