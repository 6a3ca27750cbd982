use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ddnpc::io::{read_io_csv, write_io_csv};
use ddnpc_core::trajlib::Sequence;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn ddnpc(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddnpc"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out-dir")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stdout: {}\nstderr: {}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
}

fn column(path: &Path, name: &str) -> Vec<Option<f64>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let idx = r.headers().unwrap().iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    r.records().map(|rec| rec.unwrap().get(idx).unwrap().parse().ok()).collect()
}

#[test]
fn collect_writes_lossless_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = ddnpc(&["collect"], &configs().join("scalar_flat.toml"), dir.path());
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stdout).contains("persistency of excitation"));
    let data = dir.path().join("data.csv");
    let table = read_io_csv(&data).unwrap();
    assert_eq!(table.inputs.len(), 120);
    assert_eq!(table.outputs[0].len(), 122);
    let again = dir.path().join("again.csv");
    write_io_csv(&again, &Sequence::from_rows(&table.inputs).unwrap(), &table.outputs).unwrap();
    assert_eq!(fs::read(&data).unwrap(), fs::read(&again).unwrap());
    assert_eq!(read_io_csv(&again).unwrap(), table);
    let cert: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("certificate.json")).unwrap()).unwrap();
    assert!(cert["epsilon_star"].as_f64().unwrap() < 1e-8);
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = configs().join("scalar_flat.toml");
    for d in [a.path(), b.path()] {
        ok(&ddnpc(&["collect"], &cfg, d));
        ok(&ddnpc(&["npc-run"], &cfg, d));
    }
    for f in ["data.csv", "data_clean.csv", "certificate.json", "log.csv", "plot.csv", "bounds.csv", "summary.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f} differs");
    }
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.path().join("summary.json")).unwrap()).unwrap();
    assert!(summary["settled_error"].as_f64().unwrap() < 1e-4);
    assert_eq!(summary["held_steps"].as_u64(), Some(0));
    assert_eq!(summary["bound_violations"].as_u64(), Some(0));
    let t = column(&a.path().join("plot.csv"), "t");
    assert_eq!(t.len(), 60);
}

#[test]
fn seed_override_changes_the_data() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = configs().join("scalar_flat.toml");
    ok(&ddnpc(&["collect"], &cfg, a.path()));
    ok(&ddnpc(&["collect", "--seed-override", "8"], &cfg, b.path()));
    assert_ne!(fs::read(a.path().join("data.csv")).unwrap(), fs::read(b.path().join("data.csv")).unwrap());
}

#[test]
fn check_pe_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("scalar_flat.toml");
    ok(&ddnpc(&["collect"], &cfg, dir.path()));
    ok(&ddnpc(&["check-pe"], &cfg, dir.path()));
    ok(&ddnpc(&["check-pe", "--order", "1"], &cfg, dir.path()));

    let flat = dir.path().join("constant.csv");
    let n = 60;
    let mut text = String::from("k,u_1,y_1\n");
    for k in 0..n + 2 {
        let u = if k < n { "0.5" } else { "" };
        text.push_str(&format!("{k},{u},0\n"));
    }
    fs::write(&flat, text).unwrap();
    let o = ddnpc(&["check-pe", "--data", flat.to_str().unwrap()], &cfg, dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAILS"));

    let broken = dir.path().join("broken.csv");
    fs::write(&broken, "k,u_1,y_1\n0,0.1,0\n1,abc,0\n").unwrap();
    let o = ddnpc(&["check-pe", "--data", broken.to_str().unwrap()], &cfg, dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains(":3:"), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn missing_certificate_names_collect() {
    let dir = tempfile::tempdir().unwrap();
    let o = ddnpc(&["npc-run"], &configs().join("scalar_flat.toml"), dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("ddnpc collect"), "{err}");
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(configs().join("scalar_flat.toml")).unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, text.replace("length = 120", "length = 120\nlenght = 3")).unwrap();
    assert_eq!(ddnpc(&["collect"], &bad, dir.path()).status.code(), Some(2));
    fs::write(&bad, text.replace("seed = 7", "")).unwrap();
    assert_eq!(ddnpc(&["collect"], &bad, dir.path()).status.code(), Some(2));
}

#[test]
fn strict_mode_rejects_short_data() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(configs().join("scalar_flat.toml")).unwrap();
    let short = dir.path().join("short.toml");
    fs::write(&short, text.replace("length = 120", "length = 30")).unwrap();
    let o = ddnpc(&["collect"], &short, dir.path());
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stderr).contains("(r+1)(L+d_max+n)-1"));
    let o = ddnpc(&["collect", "--strict"], &short, dir.path());
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn simulate_matches_plant_on_exact_toy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("scalar_flat.toml");
    ok(&ddnpc(&["collect"], &cfg, dir.path()));
    ok(&ddnpc(&["simulate"], &cfg, dir.path()));
    let path = dir.path().join("simulate.csv");
    let err = column(&path, "error_1");
    let bound = column(&path, "bound_1");
    assert_eq!(err.len(), 12);
    for (e, b) in err.iter().zip(&bound) {
        let e = e.unwrap();
        assert!(e < 1e-6, "{e}");
        assert!(b.unwrap() + 1e-8 >= e);
    }
}

#[test]
fn offline_window_is_reproduced() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("lti_toy.toml");
    ok(&ddnpc(&["collect"], &cfg, dir.path()));
    ok(&ddnpc(&["simulate"], &cfg, dir.path()));
    ok(&ddnpc(&["match-output"], &cfg, dir.path()));
    let sim = dir.path().join("simulate.csv");
    for ch in ["error_1", "error_2"] {
        assert!(column(&sim, ch).into_iter().flatten().all(|e| e < 1e-6));
    }
    let mat = dir.path().join("match_output.csv");
    let (uh, ud) = (column(&mat, "u_hat_1"), column(&mat, "u_data_1"));
    for (a, b) in uh.iter().zip(&ud) {
        if let (Some(a), Some(b)) = (a, b) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
    assert!(column(&mat, "error_2").into_iter().flatten().all(|e| e < 1e-6));
}
