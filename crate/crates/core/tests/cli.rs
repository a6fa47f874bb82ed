// End-to-end runs of the `pdevi` binary: exit codes, artefacts and
// reproducibility.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

fn pdevi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pdevi")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const QUICK: &str = "method = \"mfvb\"\nmax_steps = 300\nn_samples = 200\n";

#[test]
fn configuration_errors_exit_2() {
    let d = tempdir().unwrap();
    let bad_key = write(d.path(), "a.toml", "kind = \"poisson1d\"\nbogus = 1\n");
    let bad_kind = write(d.path(), "b.toml", "kind = \"poisson3d\"\n");
    let bad_value = write(d.path(), "c.toml", "sigma_y = -1.0\n");
    let mixture_1d = write(d.path(), "d.toml", "method = \"mixture\"\n");
    let out = s(&d.path().join("o")).to_string();
    for cfg in [&bad_key, &bad_kind, &bad_value, &mixture_1d] {
        let r = pdevi(&["infer", "--config", cfg, "--out", &out]);
        assert_eq!(code(&r), 2, "{cfg}: {}", String::from_utf8_lossy(&r.stderr));
    }
    assert_eq!(code(&pdevi(&["infer", "--config", s(&d.path().join("missing.toml"))])), 2);
    // a data directory without a manifest
    let cfg = write(d.path(), "e.toml", &format!("data_dir = \"{}\"\n", s(d.path())));
    assert_eq!(code(&pdevi(&["infer", "--config", &cfg, "--out", &out])), 2);
    assert!(!d.path().join("o").exists());
}

#[test]
fn numerical_failures_exit_3() {
    let d = tempdir().unwrap();
    let cfg = write(d.path(), "nan.toml", "method = \"mfvb\"\nlearning_rate = 1e6\nmax_steps = 50\n");
    let r = pdevi(&["infer", "--config", &cfg, "--out", s(&d.path().join("o"))]);
    assert_eq!(code(&r), 3, "{}", String::from_utf8_lossy(&r.stderr));
}

#[test]
fn generate_infer_evaluate() {
    let d = tempdir().unwrap();
    let data = d.path().join("data");
    let r = pdevi(&["generate", "--out", s(&data)]);
    assert_eq!(code(&r), 0);
    for f in ["mesh.txt", "kappa_true.csv", "sensors.csv", "observations.csv", "config.json", "manifest.json"] {
        assert!(data.join(f).is_file(), "{f}");
    }

    let cfg = write(d.path(), "q.toml", &format!("{QUICK}data_dir = \"{}\"\n", s(&data)));
    let a = d.path().join("a");
    let b = d.path().join("b");
    assert_eq!(code(&pdevi(&["infer", "--config", &cfg, "--out", s(&a), "--seed", "4"])), 0);
    let r = pdevi(&["infer", "--config", &cfg, "--out", s(&b), "--method", "pmvb", "--bandwidth", "3", "--nsvi", "2", "--steps", "200"]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    for f in ["checkpoint.json", "trace.csv", "samples.csv", "summary.json", "manifest.json", "config.json"] {
        assert!(a.join(f).is_file() && b.join(f).is_file(), "{f}");
    }
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(b.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["method"], "pmvb");
    assert_eq!(summary["steps"], 200);
    assert_eq!(summary["n_samples"], 200);

    let table = d.path().join("table.csv");
    let r = pdevi(&["evaluate", s(&a), s(&b), "--out", s(&table)]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let text = fs::read_to_string(&table).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().nth(1).unwrap().contains("mfvb"));
    assert!(text.lines().nth(2).unwrap().contains("pmvb"));
}

#[test]
fn evaluate_refuses_runs_on_different_data() {
    let d = tempdir().unwrap();
    let a = d.path().join("a");
    let b = d.path().join("b");
    let q1 = write(d.path(), "q1.toml", QUICK);
    let q2 = write(d.path(), "q2.toml", &format!("{QUICK}data_seed = 9\n"));
    assert_eq!(code(&pdevi(&["infer", "--config", &q1, "--out", s(&a)])), 0);
    assert_eq!(code(&pdevi(&["infer", "--config", &q2, "--out", s(&b)])), 0);
    assert_eq!(code(&pdevi(&["evaluate", s(&a), s(&b)])), 4);
}

#[test]
fn same_seed_gives_identical_artefacts() {
    let d = tempdir().unwrap();
    let cfg = write(d.path(), "q.toml", QUICK);
    let a = d.path().join("a");
    let b = d.path().join("b");
    let c = d.path().join("c");
    for (dir, seed) in [(&a, "7"), (&b, "7"), (&c, "8")] {
        assert_eq!(code(&pdevi(&["infer", "--config", &cfg, "--out", s(dir), "--seed", seed, "--threads", "1"])), 0);
    }
    // config and manifest record the output path, everything else must match
    for f in ["checkpoint.json", "samples.csv", "observations.csv", "kappa_true.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_ne!(fs::read(a.join("samples.csv")).unwrap(), fs::read(c.join("samples.csv")).unwrap());
}

#[test]
fn samplers_write_chain_summaries() {
    let d = tempdir().unwrap();
    for m in ["pcn", "hmc"] {
        let out = d.path().join(m);
        let r = pdevi(&["infer", "--method", m, "--steps", "400", "--out", s(&out)]);
        assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
        let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
        let acc = summary["chain"]["acceptance"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert_eq!(summary["chain"]["steps"], 400);
    }
}

#[test]
fn benchmark_import_checks_files() {
    let d = tempdir().unwrap();
    let src = d.path().join("csv");
    fs::create_dir_all(&src).unwrap();
    let mut obs = String::from("x,y,value\n");
    for i in 1..=13 {
        for j in 1..=13 {
            obs += &format!("{},{},0.01\n", j as f64 / 14.0, i as f64 / 14.0);
        }
    }
    let mut kappa = String::from("ix,iy,kappa\n");
    for iy in 0..8 {
        for ix in 0..8 {
            kappa += &format!("{ix},{iy},0.0\n");
        }
    }
    fs::write(src.join("observations.csv"), &obs).unwrap();
    fs::write(src.join("kappa.csv"), &kappa).unwrap();
    let cfg = write(d.path(), "b.toml", "kind = \"benchmark\"\n");
    let out = d.path().join("data");
    let r = pdevi(&["benchmark-import", s(&src), "--config", &cfg, "--out", s(&out)]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    assert!(out.join("manifest.json").is_file());

    fs::write(src.join("kappa.csv"), kappa.replacen("0,0,0.0", "0,0,nan", 1)).unwrap();
    assert_eq!(code(&pdevi(&["benchmark-import", s(&src), "--config", &cfg, "--out", s(&d.path().join("x"))])), 4);
    fs::write(src.join("kappa.csv"), &kappa).unwrap();
    fs::write(src.join("observations.csv"), obs.lines().take(100).collect::<Vec<_>>().join("\n")).unwrap();
    assert_eq!(code(&pdevi(&["benchmark-import", s(&src), "--config", &cfg, "--out", s(&d.path().join("y"))])), 4);
    // the importer only accepts the benchmark kind
    let one_d = write(d.path(), "p.toml", "kind = \"poisson1d\"\n");
    assert_eq!(code(&pdevi(&["benchmark-import", s(&src), "--config", &one_d, "--out", s(&d.path().join("z"))])), 2);
}

#[test]
fn multimodal_demo_runs() {
    let d = tempdir().unwrap();
    let out = d.path().join("mix");
    let r = pdevi(&["multimodal-demo", "--out", s(&out), "--seed", "0"]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let text = String::from_utf8_lossy(&r.stdout);
    assert_eq!(text.matches("component ").count(), 2);
    assert!(out.join("summary.json").is_file());
    assert_eq!(code(&pdevi(&["multimodal-demo", "--method", "fcvb", "--out", s(&d.path().join("x"))])), 2);
}
