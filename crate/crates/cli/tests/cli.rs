use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tic_mkv_cli::bundle::sha256_hex;
use tic_mkv_cli::Summary;

const BASELINE: &str = r#"
seed = 5
[model]
catalog = "time_consistent_baseline"
params = { offset = 0.2 }
[numerics]
n_particles = 1000
steps = 100
mc_paths = 2000
"#;

fn tic_mkv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tic-mkv")).args(args).env_remove("TIC_MKV_SEED").output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn summary(dir: &Path) -> Summary {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

fn csv_column(text: &str, name: &str) -> Vec<f64> {
    let mut lines = text.lines();
    let col = lines.next().unwrap().split(',').position(|h| h == name).unwrap();
    lines.map(|l| l.split(',').nth(col).unwrap().parse().unwrap()).collect()
}

#[test]
fn baseline_run_converges_and_manifest_matches_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), BASELINE);
    let out = dir.path().join("bundle");
    let o = tic_mkv(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let s = summary(&out);
    assert!(s.converged && s.checks_passed);
    assert_eq!(s.seed, 5);
    assert!(s.consistency.unwrap().pass);
    assert_eq!(s.spike.unwrap().probes, 36);
    for f in &s.files {
        let bytes = fs::read(out.join(&f.name)).unwrap();
        assert_eq!(sha256_hex(&bytes), f.sha256, "{}", f.name);
        assert_eq!(bytes.len() as u64, f.bytes);
    }
    let names: Vec<&str> = s.files.iter().map(|f| f.name.as_str()).collect();
    for expected in ["config-echo.toml", "curve.csv", "strategy.csv", "history.csv", "spike.json", "spike_probes.csv"] {
        assert!(names.contains(&expected), "{names:?}");
    }
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), BASELINE);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(tic_mkv(&["run", &cfg, "--out", a.to_str().unwrap()]).status.code(), Some(0));
    assert_eq!(tic_mkv(&["--workers", "3", "run", &cfg, "--out", b.to_str().unwrap()]).status.code(), Some(0));
    for f in summary(&a).files {
        assert_eq!(fs::read(a.join(&f.name)).unwrap(), fs::read(b.join(&f.name)).unwrap(), "{}", f.name);
    }
    assert_eq!(fs::read(a.join("summary.json")).unwrap(), fs::read(b.join("summary.json")).unwrap());
}

#[test]
fn seed_flag_overrides_environment_and_file() {
    let dir = tempfile::tempdir().unwrap();
    let text = BASELINE.replace("mc_paths = 2000", "mc_paths = 2000\n[checks]\nspike = false\nconsistency = false");
    let cfg = write_config(dir.path(), &text);
    let run = |extra: &[&str], env: Option<&str>, name: &str| {
        let out = dir.path().join(name);
        let mut c = Command::new(env!("CARGO_BIN_EXE_tic-mkv"));
        c.args(extra).args(["run", &cfg, "--out", out.to_str().unwrap()]).env_remove("TIC_MKV_SEED");
        if let Some(v) = env {
            c.env("TIC_MKV_SEED", v);
        }
        assert_eq!(c.output().unwrap().status.code(), Some(0));
        summary(&out).seed
    };
    assert_eq!(run(&[], None, "file"), 5);
    assert_eq!(run(&[], Some("8"), "env"), 8);
    assert_eq!(run(&["--seed", "9"], Some("8"), "flag"), 9);
    let echo = fs::read_to_string(dir.path().join("flag/config-echo.toml")).unwrap();
    assert!(echo.contains("seed = 9"), "{echo}");
}

#[test]
fn unknown_catalog_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &BASELINE.replace("time_consistent_baseline", "no_such_model"));
    let out = dir.path().join("bundle");
    let o = tic_mkv(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_model"));
    assert!(!out.join("summary.json").exists());

    let o = tic_mkv(&["run", &write_config(dir.path(), "[model]\ncatalog = \"brownian\"\n[numerics]\nstepz = 3\n")]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unconverged_run_exits_3_and_keeps_history() {
    let dir = tempfile::tempdir().unwrap();
    let text = BASELINE.replace("params = { offset = 0.2 }", "params = { coupling = 0.8, offset = 0.2 }")
        .replace("mc_paths = 2000", "mc_paths = 2000\nmax_iter = 1");
    let cfg = write_config(dir.path(), &text);
    let out = dir.path().join("bundle");
    let o = tic_mkv(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let s = summary(&out);
    assert_eq!(s.status, "max_iterations");
    assert!(s.spike.is_none() && !s.checks_passed);
    assert_eq!(fs::read_to_string(out.join("history.csv")).unwrap().lines().count(), 2);
}

#[test]
fn riccati_subcommand_writes_closed_form_diagonal() {
    let o = tic_mkv(&["riccati", "--catalog", "time_consistent_baseline", "--k", "400", "--n", "10"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    let t = csv_column(&text, "t");
    let p = csv_column(&text, "P_11");
    assert_eq!(t.len(), 401);
    for (t, p) in t.iter().zip(&p) {
        assert!((p - 1.0 / (2.0 - t)).abs() < 1e-4, "t {t}: {p}");
    }
    let bad = tic_mkv(&["riccati", "--catalog", "brownian"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn simulate_subcommand_tracks_brownian_second_moment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("curve.csv");
    let o = tic_mkv(&["--seed", "3", "simulate", "--model", "brownian", "--n", "4000", "--k", "50", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out).unwrap();
    let t = csv_column(&text, "t");
    let m2 = csv_column(&text, "second_moment");
    assert!((m2.last().unwrap() - t.last().unwrap()).abs() < 0.1);
}

#[test]
fn solve_hjb1d_on_measure_free_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bundle");
    let o = tic_mkv(&[
        "solve-hjb1d", "--catalog", "lq_1d", "--param", "offset=0.3", "--n", "500", "--k", "200", "--kx", "100",
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let s = summary(&out);
    assert_eq!(s.backend, "hjb1d");
    assert!(s.converged);
    assert_eq!(s.final_m_distance, 0.0);
}

#[test]
fn verify_reproduces_saved_spike_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &BASELINE.replace("seed = 5", "seed = 6"));
    let out = dir.path().join("bundle");
    assert_eq!(tic_mkv(&["run", &cfg, "--out", out.to_str().unwrap()]).status.code(), Some(0));
    let o = tic_mkv(&["verify", "--bundle", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let fresh: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let saved: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("spike.json")).unwrap()).unwrap();
    assert_eq!(fresh, saved);
}
