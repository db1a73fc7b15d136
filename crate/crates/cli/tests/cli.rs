use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn moncap() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_moncap"));
    cmd.env_remove("MONCAP_OUT");
    cmd
}

fn strip_config() -> Value {
    json!({
        "mesh": {"N": 8},
        "flux": {"kind": "p_laplacian", "p": 2},
        "E": {"halfplane": {"axis": "x", "threshold": 0.25, "side": "le"}},
        "F": {"complement": {"halfplane": {"axis": "x", "threshold": 0.75, "side": "ge"}}}
    })
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn run(args: &[&str], cfg: &Path, out: &Path) -> Output {
    moncap().args(args).arg(cfg).arg("--out").arg(out).output().unwrap()
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

fn ledger(out: &Path) -> Vec<Value> {
    fs::read_to_string(out.join("ledger.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn strip_capacity_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "strip.json", &strip_config());
    let out = dir.path().join("out");
    let o = run(&["capacity"], &cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report = stdout_json(&o);
    for key in ["c_energy", "c_inner", "c_outer", "capacity"] {
        let v = report[key].as_f64().unwrap();
        assert!((v - 2.0).abs() < 1e-8, "{key} = {v}");
    }
    assert_eq!(report["bounds"]["holds"], json!(true));
    let saved: Value = serde_json::from_str(&fs::read_to_string(out.join("capacity.json")).unwrap()).unwrap();
    assert_eq!(saved, report);
    let lines = ledger(&out);
    assert_eq!(lines.len(), 1);
    assert_eq!(lines[0]["command"], "capacity");
    assert_eq!(lines[0]["config_hash"].as_str().unwrap().len(), 64);
    assert!(lines[0]["wall_time_s"].as_f64().unwrap() >= 0.0);
    assert!((lines[0]["results"]["c_inner"].as_f64().unwrap() - 2.0).abs() < 1e-8);
}

#[test]
fn incompatible_pair_reports_infinity() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = strip_config();
    cfg["E"] = json!({"disk": {"cx": 0.9, "cy": 0.5, "r": 0.05}});
    let path = write_config(dir.path(), "bad.json", &cfg);
    let o = run(&["capacity"], &path, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout_json(&o)["capacity"], json!("infinity"));

    cfg["clip_e_to_f"] = json!(true);
    let path = write_config(dir.path(), "clipped.json", &cfg);
    let o = run(&["capacity"], &path, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout_json(&o)["capacity"].as_f64().is_some());
}

#[test]
fn bad_configs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let mut cfg = strip_config();
    cfg["mesh"]["M"] = json!(4);
    let path = write_config(dir.path(), "unknown.json", &cfg);
    let o = run(&["capacity"], &path, &out);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("mesh.M") && err.contains("unknown field"), "{err}");

    let mut cfg = strip_config();
    cfg["flux"]["p"] = json!(0.5);
    let path = write_config(dir.path(), "p.json", &cfg);
    assert_eq!(run(&["capacity"], &path, &out).status.code(), Some(2));

    fs::write(dir.path().join("broken.json"), "{ not json").unwrap();
    assert_eq!(run(&["capacity"], &dir.path().join("broken.json"), &out).status.code(), Some(2));
    assert_eq!(run(&["capacity"], &dir.path().join("missing.json"), &out).status.code(), Some(2));

    let cfg = write_config(dir.path(), "strip.json", &strip_config());
    let o = run(&["suite", "--name", "nonsense"], &cfg, &out);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = strip_config();
    cfg["flux"] = json!({"kind": "p_laplacian", "p": 3});
    cfg["E"] = json!({"disk": {"cx": 0.5, "cy": 0.5, "r": 0.1}});
    cfg["F"] = json!({"disk": {"cx": 0.5, "cy": 0.5, "r": 0.4}});
    cfg["solver"] = json!({"max_newton": 1, "picard_fallback": false});
    let path = write_config(dir.path(), "div.json", &cfg);
    let o = run(&["capacity"], &path, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(stdout_json(&o)["converged"], json!(false));
    let o = run(&["potential"], &path, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn potential_dumps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "strip.json", &strip_config());
    let out = dir.path().join("out");
    let o = run(&["potential", "--csv", "--pgm"], &cfg, &out);
    assert_eq!(o.status.code(), Some(0));
    let csv = fs::read_to_string(out.join("potential.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("x,y,u"));
    assert_eq!(csv.lines().count(), 1 + 81);
    let pgm = fs::read(out.join("potential.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n9 9\n255\n"));
    let field: Value = serde_json::from_str(&fs::read_to_string(out.join("potential.json")).unwrap()).unwrap();
    assert_eq!(field["u"].as_array().unwrap().len(), 81);
}

#[test]
fn sweep_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = strip_config();
    cfg["flux"] = json!({"kind": "p_laplacian", "p": 3});
    cfg["sweep"] = json!({"s_grid": [-1.0, 0.0, 0.5, 1.0]});
    let path = write_config(dir.path(), "sweep.json", &cfg);
    let out = dir.path().join("out");
    let o = run(&["sweep-s"], &path, &out);
    assert_eq!(o.status.code(), Some(0));
    let csv = fs::read_to_string(out.join("sweep_s.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 5);
    let c_hat: Vec<f64> = rows[1..].iter().map(|r| r.split(',').nth(1).unwrap().parse().unwrap()).collect();
    // C(s) = |s|^3 * 4 for the strip, so C(s)/s = sign(s) s^2 * 4
    assert!((c_hat[0] + 4.0).abs() < 1e-7);
    assert_eq!(c_hat[1], 0.0);
    assert!((c_hat[3] - 4.0).abs() < 1e-7);
}

fn small_suite_config() -> Value {
    let mut cfg = strip_config();
    cfg["mesh"] = json!({"N": 12});
    cfg["seed"] = json!(11);
    cfg["suite"] = json!({"instances": 4, "fluxes": [{"kind": "p_laplacian", "p": 2}, {"kind": "p_laplacian", "p": 3}]});
    cfg
}

#[test]
fn suite_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "suite.json", &small_suite_config());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let oa = moncap().args(["--jobs", "3", "suite", "--name", "order"]).arg(&cfg).arg("--out").arg(&a).output().unwrap();
    let ob = run(&["suite", "--name", "order"], &cfg, &b);
    assert_eq!(oa.status.code(), Some(0), "{}", String::from_utf8_lossy(&oa.stderr));
    assert_eq!(ob.status.code(), Some(0));
    let ja = fs::read(a.join("suite_order.json")).unwrap();
    let jb = fs::read(b.join("suite_order.json")).unwrap();
    assert_eq!(ja, jb);
    assert_eq!(oa.stdout, ob.stdout);
    assert_eq!(ledger(&a)[0]["config_hash"], ledger(&b)[0]["config_hash"]);

    // a different seed changes the report
    let c = dir.path().join("c");
    let oc = moncap().args(["suite", "--name", "order", "--seed", "12"]).arg(&cfg).arg("--out").arg(&c).output().unwrap();
    assert_eq!(oc.status.code(), Some(0));
    assert_ne!(fs::read(c.join("suite_order.json")).unwrap(), ja);
}

#[test]
fn suite_failure_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_suite_config();
    // a non-monotone flux has no potential: every instance is skipped
    cfg["suite"]["fluxes"] = json!([{"kind": "adversarial_negation", "p": 2}]);
    cfg["solver"] = json!({"max_newton": 5, "picard_fallback": false});
    let path = write_config(dir.path(), "fail.json", &cfg);
    let o = run(&["suite", "--name", "order", "--quiet"], &path, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(1));
    assert!(o.stdout.is_empty());
    assert_eq!(ledger(&dir.path().join("out"))[0]["results"]["passed"], json!(false));
}

#[test]
fn config_hash_ignores_key_order() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_config(dir.path(), "a.json", &strip_config());
    let text = r#"{
        "F": {"complement": {"halfplane": {"side": "ge", "threshold": 0.75, "axis": "x"}}},
        "E": {"halfplane": {"threshold": 0.25, "side": "le", "axis": "x"}},
        "flux": {"p": 2, "kind": "p_laplacian"},
        "mesh": {"N": 8}
    }"#;
    let b = dir.path().join("b.json");
    fs::write(&b, text).unwrap();
    let out = dir.path().join("out");
    assert_eq!(run(&["capacity", "--quiet"], &a, &out).status.code(), Some(0));
    assert_eq!(run(&["capacity", "--quiet"], &b, &out).status.code(), Some(0));
    let lines = ledger(&out);
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["config_hash"], lines[1]["config_hash"]);
    // overrides are part of the hashed configuration
    let o = moncap().args(["capacity", "--quiet", "--tol-res", "1e-9"]).arg(&a).arg("--out").arg(&out).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert_ne!(ledger(&out)[2]["config_hash"], lines[0]["config_hash"]);
}

#[test]
fn output_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "strip.json", &strip_config());
    let env_out = dir.path().join("env-out");
    let o = moncap().args(["capacity", "--quiet"]).arg(&cfg).env("MONCAP_OUT", &env_out).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(env_out.join("capacity.json").exists());
    assert!(env_out.join("ledger.jsonl").exists());
}

#[test]
fn convergence_against_strip_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = strip_config();
    cfg["flux"] = json!({"kind": "p_laplacian", "p": 3});
    cfg["converge"] = json!({"N_list": [8, 16], "oracle": {"strip": {"a": 0.25, "b": 0.75}}, "tolerance": 1e-8, "every_n": true});
    let path = write_config(dir.path(), "conv.json", &cfg);
    let o = run(&["converge"], &path, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    assert_eq!(stdout_json(&o)["passed"], json!(true));
}

#[test]
fn flux_checks() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = strip_config();
    cfg["check"] = json!({"samples": 2000});
    let path = write_config(dir.path(), "check.json", &cfg);
    let out = dir.path().join("out");
    let o = run(&["check-flux", "--shipped"], &path, &out);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout_json(&o)["reports"].as_array().unwrap().len(), 7);

    cfg["flux"] = json!({"kind": "adversarial_negation", "p": 2});
    let path = write_config(dir.path(), "adv.json", &cfg);
    let o = run(&["check-flux"], &path, &out);
    assert_eq!(o.status.code(), Some(1));
    let report = stdout_json(&o);
    let mono = report["reports"][0]["conditions"].as_array().unwrap().iter().find(|c| c["name"] == "monotone").unwrap().clone();
    assert_eq!(mono["passed"], json!(false));
    assert!(mono["witness"]["eta"].is_array());
}

#[test]
fn oracle_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = moncap().args(["oracle", "strip", "--p", "3", "--a", "0.25", "--b", "0.75", "--out"]).arg(&out).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout_json(&o)["capacity"], json!(4.0));

    let o = moncap().args(["oracle", "radial", "--p", "2", "--r", "0.1", "--R", "0.4", "--out"]).arg(&out).output().unwrap();
    let v = stdout_json(&o)["capacity"].as_f64().unwrap();
    assert!((v - 2.0 * std::f64::consts::PI / 4f64.ln()).abs() < 1e-12);

    let flux = r#"{"kind": "p_laplacian", "p": 3}"#;
    let o = moncap()
        .args(["oracle", "radial", "--p", "3", "--r", "0.1", "--R", "0.4", "--panels", "4000", "--flux", flux, "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!((stdout_json(&o)["capacity"].as_f64().unwrap() - 15.70796).abs() < 1e-4);

    let o = moncap().args(["oracle", "radial", "--p", "2", "--r", "0.5", "--R", "0.4", "--out"]).arg(&out).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(ledger(&out).len(), 3);
}
