use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SOLVE_CONFIG: &str = r#"
seed = 3

[manifold]
kind = "euclidean"
dim = 2

[[states]]
name = "q0"
a = [[0.0, 1.0], [-0.5, -0.2]]
b = [[0.0], [1.0]]

[[states]]
name = "q1"
a = [[0.3, 0.4], [-1.0, 0.0]]
b = [[0.0], [1.0]]

[[surfaces]]
from = "q0"
to = "q1"
coordinate = 0
level = 0.0

[cost]
loss = "half_control_energy"

[horizon]
tf = 2.0

[boundary]
x0 = [-1.0, 0.5]
xf = [1.0, -0.3]

[control]
from_solver = true

[integrator]
steps = 4096

[solver]
cells = 128
realize_steps = 4096
pmp_samples = 10
"#;

fn repo_config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn hmp(args: &[&str], config: &Path, out: &Path, env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hmp"));
    cmd.args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env_remove("HMP_TOLERANCE");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn write_config(dir: &TempDir, name: &str, body: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, body).unwrap();
    p
}

fn solve_variant(dir: &TempDir, name: &str, find: &str, replace: &str) -> PathBuf {
    assert!(SOLVE_CONFIG.contains(find));
    write_config(dir, name, &SOLVE_CONFIG.replacen(find, replace, 1))
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

fn assert_headers(dir: &Path) {
    let all = files(dir);
    assert!(!all.is_empty());
    for p in all {
        let body = fs::read_to_string(&p).unwrap();
        match p.extension().and_then(|e| e.to_str()) {
            Some("json") => {
                let v: serde_json::Value = serde_json::from_str(&body).unwrap();
                let h = &v["header"];
                assert!(h["config_sha256"].as_str().is_some_and(|s| s.len() == 64), "{}", p.display());
                assert!(h["seed"].is_u64(), "{}", p.display());
            }
            _ => assert!(body.starts_with("# hmp ") && body.lines().next().unwrap().contains("config_sha256="), "{}", p.display()),
        }
    }
}

#[test]
fn simulate_without_surfaces_succeeds() {
    let out = TempDir::new().unwrap();
    let o = hmp(&["simulate"], &repo_config("no_surface.toml"), out.path(), &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.path().join("trajectory.csv").exists());
    assert_headers(out.path());
}

#[test]
fn grazing_contact_exits_three() {
    let out = TempDir::new().unwrap();
    let o = hmp(&["simulate"], &repo_config("grazing.toml"), out.path(), &[]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn unreached_surface_exits_four() {
    let dir = TempDir::new().unwrap();
    let body = fs::read_to_string(repo_config("grazing.toml")).unwrap().replace("level = 1.0", "level = 100.0");
    let cfg = write_config(&dir, "far.toml", &body);
    let o = hmp(&["simulate"], &cfg, &dir.path().join("out"), &[]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    // the partial trajectory is still written
    assert!(dir.path().join("out/trajectory.csv").exists());
}

#[test]
fn configuration_errors_exit_two() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let unknown = solve_variant(&dir, "unknown.toml", "seed = 3", "seed = 3\ncolour = \"red\"");
    assert_eq!(code(&hmp(&["simulate"], &unknown, &out, &[])), 2);
    let garbled = write_config(&dir, "garbled.toml", "[manifold\nkind = ");
    assert_eq!(code(&hmp(&["simulate"], &garbled, &out, &[])), 2);
    assert_eq!(code(&hmp(&["simulate"], &dir.path().join("missing.toml"), &out, &[])), 2);
    let o = hmp(&["simulate"], &repo_config("no_surface.toml"), &out, &[("HMP_TOLERANCE", "loose")]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("HMP_TOLERANCE"));
}

#[test]
fn uncontrollable_mode_exits_six() {
    let dir = TempDir::new().unwrap();
    let cfg = solve_variant(&dir, "stuck.toml", "a = [[0.0, 1.0], [-0.5, -0.2]]\nb = [[0.0], [1.0]]", "a = [[0.5, 0.0], [0.0, -1.0]]\nb = [[1.0], [0.0]]");
    let o = hmp(&["solve"], &cfg, &dir.path().join("out"), &[]);
    assert_eq!(code(&o), 6, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn iteration_cap_exits_five() {
    let dir = TempDir::new().unwrap();
    let cfg = solve_variant(&dir, "capped.toml", "cells = 128", "cells = 128\nmax_iter = 1");
    let o = hmp(&["solve"], &cfg, &dir.path().join("out"), &[]);
    assert_eq!(code(&o), 5, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("out/decision.json").exists());
}

#[test]
fn solve_writes_headers_and_replays_its_control() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "solve.toml", SOLVE_CONFIG);
    let out = dir.path().join("solved");
    let o = hmp(&["solve"], &cfg, &out, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_headers(&out);
    for name in ["decision.json", "decision.csv", "control.csv", "iterations.csv", "adjoint.csv", "switches.csv", "pmp.json"] {
        assert!(out.join(name).exists(), "{name}");
    }

    // feed the exported control back through `simulate`
    let replay = solve_variant(&dir, "replay.toml", "from_solver = true", "file = \"solved/control.csv\"");
    let out2 = dir.path().join("replayed");
    let o = hmp(&["simulate"], &replay, &out2, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let sim: serde_json::Value = serde_json::from_str(&fs::read_to_string(out2.join("simulate.json")).unwrap()).unwrap();
    let terminal: Vec<f64> = sim["terminal"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!((terminal[0] - 1.0).abs() < 1e-6 && (terminal[1] + 0.3).abs() < 1e-6, "{terminal:?}");
    assert_eq!(sim["events"], 1);
}

#[test]
fn verify_is_deterministic_per_seed() {
    let dir = TempDir::new().unwrap();
    let cfg = repo_config("one_switch.toml");
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert_eq!(code(&hmp(&["verify", "--seed", "9"], &cfg, &a, &[])), 0);
    assert_eq!(code(&hmp(&["verify", "--seed", "9"], &cfg, &b, &[])), 0);
    assert_eq!(code(&hmp(&["verify", "--seed", "10"], &cfg, &c, &[])), 0);
    let (fa, fb) = (files(&a), files(&b));
    assert_eq!(fa.len(), fb.len());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{} differs", x.display());
    }
    assert_ne!(fs::read(a.join("verify.json")).unwrap(), fs::read(c.join("verify.json")).unwrap());
    assert_headers(&a);
}

#[test]
fn strict_profile_is_reported() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let o = hmp(&["adjoint"], &repo_config("one_switch.toml"), &out, &[("HMP_TOLERANCE", "strict")]);
    assert!(matches!(code(&o), 0 | 1), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("pmp.json")).unwrap()).unwrap();
    assert_eq!(report["tolerances"]["profile"], "strict");
    assert_eq!(report["tolerances"]["jump_residual"], 1e-10);
}
