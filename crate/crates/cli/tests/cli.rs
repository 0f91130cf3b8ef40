use std::f64::consts::TAU;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use geolp::field::{write_field_csv, TensorField};
use tempfile::TempDir;

fn geolp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geolp"))
        .args(args)
        .current_dir(dir)
        .env_remove("GEOLP_OUT")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    fs::write(dir.join(name), text).unwrap();
    name.to_string()
}

fn write_field(dir: &Path, name: &str, f: &TensorField) -> String {
    let mut buf = Vec::new();
    write_field_csv(f, &mut buf).unwrap();
    fs::write(dir.join(name), buf).unwrap();
    name.to_string()
}

/// The diagnostic stream holds exactly one JSON object with the given code.
fn assert_error_line(o: &Output, code: i32) -> serde_json::Value {
    assert_eq!(o.status.code(), Some(code), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    let err = String::from_utf8(o.stderr.clone()).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    let v: serde_json::Value = serde_json::from_str(err.trim_end()).unwrap();
    assert_eq!(v["code"], code);
    v
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).unwrap();
    text.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
}

const SMALL: &str = "[grid]\nn1 = 16\nn2 = 16\nrefine_n = 0\n";

#[test]
fn spectrum_scalar_and_vector() {
    let t = TempDir::new().unwrap();
    let cfg = write(t.path(), "c.toml", "[grid]\nrefine_n = 0\n");
    let o = geolp(t.path(), &["spectrum", "--config", &cfg, "--out", "s0"]);
    assert!(o.status.success());
    let rows = csv_rows(&t.path().join("s0/spectrum.csv"));
    assert_eq!(rows.len(), 1024);
    assert_eq!(rows[0][1].parse::<f64>().unwrap(), 0.0);

    let cfg = write(t.path(), "v.toml", "[grid]\nrefine_n = 0\nrank = 1\n");
    let o = geolp(t.path(), &["spectrum", "--config", &cfg, "--out", "s1"]);
    assert!(o.status.success());
    let ev: Vec<f64> = csv_rows(&t.path().join("s1/spectrum.csv")).iter().map(|r| r[1].parse().unwrap()).collect();
    assert_eq!(ev.len(), 2048);
    // flat vector Laplacian acts componentwise: every scalar eigenvalue appears twice
    let scalar: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    for (i, s) in scalar.iter().enumerate() {
        assert!((ev[2 * i] - s).abs() < 1e-9 * (1.0 + s) && (ev[2 * i + 1] - s).abs() < 1e-9 * (1.0 + s));
    }
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(t.path().join("s1/basis.json")).unwrap()).unwrap();
    assert_eq!(meta["dim"], 2048);
}

#[test]
fn bad_metric_file_reports_node() {
    let t = TempDir::new().unwrap();
    let mut table = String::from("# 8 8 6.283185307179586 6.283185307179586\ni,j,g11,g12,g22\n");
    for i in 0..8 {
        for j in 0..8 {
            let g12 = if (i, j) == (3, 5) { 2.0 } else { 0.0 };
            table.push_str(&format!("{i},{j},1,{g12},1\n"));
        }
    }
    write(t.path(), "metric.csv", &table);
    let cfg = write(t.path(), "c.toml", "[grid]\nn1 = 8\nn2 = 8\nrefine_n = 0\nmetric = { kind = \"table\", path = \"metric.csv\" }\n");
    let o = geolp(t.path(), &["spectrum", "--config", &cfg]);
    let v = assert_error_line(&o, 2);
    assert!(v["message"].as_str().unwrap().contains("(3, 5)"), "{v}");
}

#[test]
fn config_errors_exit_2() {
    let t = TempDir::new().unwrap();
    let cfg = write(t.path(), "c.toml", "[grid]\ncolour = \"red\"\n");
    assert_error_line(&geolp(t.path(), &["spectrum", "--config", &cfg]), 2);
    assert_error_line(&geolp(t.path(), &["spectrum", "--config", "missing.toml"]), 2);
    assert_error_line(&geolp(t.path(), &["frobnicate"]), 2);
    assert_error_line(&geolp(t.path(), &["verify", "--jobs", "0"]), 2);
}

#[test]
fn decompose_places_energy_by_eigenvalue() {
    let t = TempDir::new().unwrap();
    let cfg = write(t.path(), "c.toml", SMALL);
    let h = TAU / 16.0;
    // flat eigenfield cos(2 x1) + sin(2 x2) with eigenvalue 4 (discrete value slightly below)
    let f = TensorField::from_fn(0, 16, 16, |i, j, _| (2.0 * i as f64 * h).cos() + (2.0 * j as f64 * h).sin());
    let field = write_field(t.path(), "f.csv", &f);
    let o = geolp(t.path(), &["decompose", "--config", &cfg, "--field", &field, "--out", "d"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(t.path().join("d/decomposition.json")).unwrap()).unwrap();
    assert!(meta["reconstruction_error"].as_f64().unwrap() <= 1e-6);
    let rows = csv_rows(&t.path().join("d/decomposition.csv"));
    let energies: Vec<(i32, f64)> = rows.iter().map(|r| (r[0].parse().unwrap(), r[1].parse().unwrap())).collect();
    let top = energies.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    // the canonical N = 1 symbol peaks at 4^{-k} lambda = 1, so band k = 1 for lambda near 4
    assert_eq!(top.0, 1);
}

#[test]
fn decompose_zero_and_constant_fields() {
    let t = TempDir::new().unwrap();
    let cfg = write(t.path(), "c.toml", SMALL);
    let zero = write_field(t.path(), "z.csv", &TensorField::zeros(0, 16, 16));
    assert!(geolp(t.path(), &["decompose", "--config", &cfg, "--field", &zero, "--out", "z"]).status.success());
    assert!(csv_rows(&t.path().join("z/decomposition.csv")).iter().all(|r| r[1].parse::<f64>().unwrap() == 0.0));

    let one = write_field(t.path(), "one.csv", &TensorField::from_fn(0, 16, 16, |_, _, _| 2.5));
    assert!(geolp(t.path(), &["decompose", "--config", &cfg, "--field", &one, "--out", "c"]).status.success());
    assert!(csv_rows(&t.path().join("c/decomposition.csv")).iter().all(|r| r[1].parse::<f64>().unwrap() <= 1e-10));
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(t.path().join("c/decomposition.json")).unwrap()).unwrap();
    let (low, total) = (meta["low_band_l2"].as_f64().unwrap(), meta["l2_norm"].as_f64().unwrap());
    assert!((low / total - 1.0).abs() < 1e-10);
}

#[test]
fn decompose_grid_mismatch_exits_4() {
    let t = TempDir::new().unwrap();
    let cfg = write(t.path(), "c.toml", SMALL);
    let f = write_field(t.path(), "f.csv", &TensorField::zeros(0, 8, 8));
    assert_error_line(&geolp(t.path(), &["decompose", "--config", &cfg, "--field", &f]), 4);
    let junk = write(t.path(), "junk.csv", "not a field\n");
    assert_error_line(&geolp(t.path(), &["decompose", "--config", &cfg, "--field", &junk]), 4);
}

#[test]
fn norms_are_deterministic() {
    let t = TempDir::new().unwrap();
    let cfg = write(t.path(), "c.toml", SMALL);
    for out in ["a", "b"] {
        assert!(geolp(t.path(), &["norms", "--config", &cfg, "--seed", "9", "--out", out]).status.success());
    }
    let a = fs::read(t.path().join("a/norms.csv")).unwrap();
    assert_eq!(a, fs::read(t.path().join("b/norms.csv")).unwrap());
    assert!(geolp(t.path(), &["norms", "--config", &cfg, "--seed", "10", "--out", "c"]).status.success());
    assert_ne!(a, fs::read(t.path().join("c/norms.csv")).unwrap());
    // L2 row equals the a = 0 Sobolev norm the table does not repeat; B^0_{2,2} tracks L2
    let rows = csv_rows(&t.path().join("a/norms.csv"));
    assert_eq!(rows.len(), 3 * (1 + 3 + 4));
}

#[test]
fn verify_is_reproducible_and_report_reads_back() {
    let t = TempDir::new().unwrap();
    let cfg = write(
        t.path(),
        "c.toml",
        "[grid]\nn1 = 16\nn2 = 16\nrefine_n = 24\nmetric = { kind = \"conformal\", amplitude = 0.3 }\n\
         [experiments]\nnames = [\"curvature\", \"calculus\", \"reconstruction\"]\nsamples = 3\n",
    );
    for (out, jobs) in [("a", "1"), ("b", "3")] {
        let o = geolp(t.path(), &["verify", "--config", &cfg, "--out", out, "--jobs", jobs]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = fs::read(t.path().join("a/reports.csv")).unwrap();
    assert_eq!(a, fs::read(t.path().join("b/reports.csv")).unwrap());
    let o = geolp(t.path(), &["report", "--out", "a"]);
    assert!(o.status.success());
    assert_eq!(o.stdout, a);
}

#[test]
fn unnormalized_bank_fails_verify() {
    let t = TempDir::new().unwrap();
    let cfg = write(
        t.path(),
        "c.toml",
        "[grid]\nn1 = 16\nn2 = 16\nrefine_n = 0\n[bank]\nmode = \"none\"\n[experiments]\nnames = [\"reconstruction\"]\nsamples = 3\n",
    );
    let o = geolp(t.path(), &["verify", "--config", &cfg, "--out", "v"]);
    let v = assert_error_line(&o, 1);
    assert!(v["message"].as_str().unwrap().contains("lp/reconstruction"));
    assert_error_line(&geolp(t.path(), &["report", "--out", "v"]), 1);
}
