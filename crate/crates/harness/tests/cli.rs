use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn zsq(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zsq"))
        .args(args)
        .current_dir(dir)
        .env_remove("ZSQ_OUTPUT_ROOT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = zsq(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn listed(m: &Value) -> BTreeSet<String> {
    m["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|o| o["path"].as_str().unwrap().to_string())
        .collect()
}

/// Every file under `dir` except the manifest, relative to `dir`.
fn files_under(dir: &Path) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != "manifest.json" {
                out.insert(path.strip_prefix(dir).unwrap().to_string_lossy().replace('\\', "/"));
            }
        }
    }
    out
}

fn column(csv_text: &str, name: &str) -> Vec<String> {
    let mut lines = csv_text.lines();
    let idx = lines.next().unwrap().split(',').position(|c| c == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().to_string()).collect()
}

#[test]
fn gen_then_vi_writes_values_and_log() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    ok(dir, &["gen", "--states", "2", "--actions", "2", "2", "--seed", "7", "-o", "g.game"]);
    assert!(dir.join("g.game").is_file());
    assert_eq!(listed(&manifest(&dir.join("zsq-out/gen"))), BTreeSet::from(["g.game".to_string()]));

    ok(dir, &["vi", "g.game"]);
    let out = dir.join("zsq-out/vi");
    let values = fs::read_to_string(out.join("values.csv")).unwrap();
    assert_eq!(values.lines().next(), Some("state,v_1,v_2"));
    assert_eq!(values.lines().count(), 3);
    for line in values.lines().skip(1) {
        let v: Vec<f64> = line.split(',').skip(1).map(|x| x.parse().unwrap()).collect();
        assert!((v[0] + v[1]).abs() <= 2e-8);
    }
    let log = fs::read_to_string(out.join("iterations.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("player,iteration,residual"));
    assert!(log.lines().count() > 10);
    assert_eq!(listed(&manifest(&out)), files_under(&out));
}

#[test]
fn same_seed_gives_byte_identical_outputs() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let game = fixture("pennies.game");
    let game = game.to_str().unwrap();
    let args = |out: &'static str| {
        vec!["learn", game, "--T", "3", "--K", "400", "--gap-every", "1", "--instrumented", "--out-dir", out]
    };
    ok(dir, &args("a"));
    ok(dir, &args("b"));
    for name in ["diagnostics.csv", "policy.txt"] {
        assert_eq!(fs::read(dir.join("a").join(name)).unwrap(), fs::read(dir.join("b").join(name)).unwrap());
    }
    let (ma, mb) = (manifest(&dir.join("a")), manifest(&dir.join("b")));
    assert_eq!(ma["config_hash"], mb["config_hash"]);
    assert_eq!(ma["outputs"], mb["outputs"]);

    ok(dir, &["learn", game, "--T", "3", "--K", "400", "--seed", "1", "--out-dir", "c"]);
    assert_ne!(
        fs::read(dir.join("a/policy.txt")).unwrap(),
        fs::read(dir.join("c/policy.txt")).unwrap()
    );
}

#[test]
fn config_hash_ignores_key_order() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("one.toml"), "states = 2\nT = 2\nK = 50\ntau = 0.2\nseed = 4\n").unwrap();
    fs::write(dir.join("two.toml"), "seed = 4\ntau = 0.2\nK = 50\nT = 2\nstates = 2\n").unwrap();
    ok(dir, &["learn", "--config", "one.toml", "--out-dir", "one"]);
    ok(dir, &["learn", "--config", "two.toml", "--out-dir", "two"]);
    let (a, b) = (manifest(&dir.join("one")), manifest(&dir.join("two")));
    assert_eq!(a["config_hash"], b["config_hash"]);
    assert_eq!(
        fs::read(dir.join("one/diagnostics.csv")).unwrap(),
        fs::read(dir.join("two/diagnostics.csv")).unwrap()
    );

    // A command-line flag overrides the file and changes the hash.
    ok(dir, &["learn", "--config", "one.toml", "--tau", "0.3", "--out-dir", "three"]);
    assert_ne!(a["config_hash"], manifest(&dir.join("three"))["config_hash"]);
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let game = fixture("pennies.game");
    let game = game.to_str().unwrap();
    fs::write(dir.join("nested.toml"), "[run]\nT = 1\n").unwrap();
    fs::write(dir.join("unknown.toml"), "temperature = 1.0\n").unwrap();
    fs::write(dir.join("broken.game"), "format zsq-game-1\nstates x\n").unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec!["learn", "missing.game"],
        vec!["learn", game, "--config", "nested.toml"],
        vec!["learn", game, "--config", "unknown.toml"],
        vec!["learn", game, "--tau=-1"],
        vec!["learn", game, "--gap-every", "0"],
        vec!["learn", game, "--start-state", "3"],
        vec!["learn", "broken.game"],
        vec!["vi", "broken.game"],
        vec!["drift", "--beta", "2"],
        vec!["gen", "--states", "2", "--actions", "2", "2", "--branching", "5", "-o", "x.game"],
        vec!["vi"],
    ];
    for args in cases {
        let out = zsq(dir, &args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn drift_suite_satisfies_every_step() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    ok(dir, &["drift", "--trials", "50", "--size", "3"]);
    let out = dir.join("zsq-out/drift");
    let m = manifest(&out);
    assert_eq!(m["summary"]["steps"], 25_000);
    assert_eq!(m["summary"]["satisfied"], 25_000);
    let trial = fs::read_to_string(out.join("trials/trial_000.csv")).unwrap();
    assert_eq!(
        trial.lines().next(),
        Some("k,V_k,V_{k+1},bound,slack,noise_x_norm,noise_y_norm")
    );
    assert_eq!(trial.lines().count(), 501);
    assert_eq!(listed(&m), files_under(&out));
    assert_eq!(listed(&m).len(), 51);
}

#[test]
fn learn_on_pennies_reports_a_falling_gap() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let game = fixture("pennies.game");
    ok(dir, &["learn", game.to_str().unwrap(), "--T", "20", "--K", "5000", "--tau", "0.1", "--gap-every", "1"]);
    let out = dir.join("zsq-out/learn");
    let text = fs::read_to_string(out.join("diagnostics.csv")).unwrap();
    assert_eq!(
        text.lines().next(),
        Some("t,k,L_v,L_sum,L_theta,L_w,nash_gap,td_norm_1,td_norm_2")
    );
    let ks = column(&text, "k");
    let gaps: Vec<f64> = column(&text, "nash_gap")
        .iter()
        .zip(&ks)
        .filter(|(_, k)| *k == "5000")
        .map(|(g, _)| g.parse().unwrap())
        .collect();
    assert_eq!(gaps.len(), 20);
    assert!(gaps.iter().all(|g| g.is_finite() && *g >= -1e-8));
    let first: f64 = gaps[..10].iter().sum::<f64>() / 10.0;
    let second: f64 = gaps[10..].iter().sum::<f64>() / 10.0;
    assert!(second <= first, "first half {first}, second half {second}");
    assert_eq!(listed(&manifest(&out)), files_under(&out));
}

#[test]
fn gap_of_the_uniform_policy_on_pennies_is_zero() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    fs::write(
        dir.join("uniform.policy"),
        "format zsq-policy-1\nstates 1\nactions 2 2\nplayer 1\n0.5 0.5\nplayer 2\n0.5 0.5\n",
    )
    .unwrap();
    ok(dir, &["gap", fixture("pennies.game").to_str().unwrap(), "uniform.policy"]);
    let text = fs::read_to_string(dir.join("zsq-out/gap/gap.csv")).unwrap();
    let total: f64 = column(&text, "total")[0].parse().unwrap();
    assert!(total.abs() <= 1e-8);
}

#[test]
fn diagnose_reports_zero_completeness_residual_for_tabular_features() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    ok(dir, &["gen", "--states", "3", "--actions", "2", "3", "--seed", "2", "--gamma", "0.5", "-o", "g.game"]);
    ok(dir, &["diagnose", "g.game", "--samples", "8"]);
    let text = fs::read_to_string(dir.join("zsq-out/diagnose/diagnose.csv")).unwrap();
    let quantities = column(&text, "quantity");
    let values = column(&text, "value");
    for (q, v) in quantities.iter().zip(&values) {
        let v: f64 = v.parse().unwrap();
        if q == "completeness_residual_max" {
            assert!(v <= 1e-9);
        }
        assert!(v >= 0.0);
    }
}

#[test]
fn output_root_override_relocates_outputs() {
    let tmp = TempDir::new().unwrap();
    let root = TempDir::new().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_zsq"))
        .args(["vi", fixture("pennies.game").to_str().unwrap()])
        .current_dir(tmp.path())
        .env("ZSQ_OUTPUT_ROOT", root.path())
        .env("RUST_LOG", "warn")
        .status()
        .unwrap();
    assert!(status.success());
    assert!(root.path().join("vi/values.csv").is_file());
    assert!(!tmp.path().join("zsq-out").exists());
}
