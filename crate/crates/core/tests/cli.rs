use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const INTERVAL_SIGN: &str = "domain = \"interval\"\ndomain_params = [-1.0, 1.0]\ndrift = \"sign1d\"\ndrift_params = [2.0]\n";

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("rsde-cli-{}-{name}", std::process::id()));
    std::fs::remove_dir_all(&d).ok();
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("exp.toml");
    std::fs::write(&p, body).unwrap();
    p
}

fn rsde(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rsde")).args(args).env_remove("RSDE_OUT_DIR").output().unwrap()
}

fn json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn pde_solve_writes_field_sidecar_and_report() {
    let d = scratch("pde");
    let cfg = write_config(&d, "domain = \"interval\"\ndomain_params = [-1.0, 1.0]\ndrift = \"zero\"\nhorizon = 1.0\n");
    let out = d.join("out");
    let o = rsde(&["pde-solve", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("pde-solve/field.bin").exists());
    assert!(out.join("pde-solve/field.bin.json").exists());
    let r = json(&out.join("pde-solve/report.json"));
    assert_eq!(r["pass"], true);
    for k in ["residual", "alpha0", "M0"] {
        assert!(r["report"][k].is_number(), "missing {k}");
    }
    assert!(r["report"]["exact"]["max_error"].as_f64().unwrap() <= 1e-10);
    let meta = json(&out.join("pde-solve/metadata.json"));
    assert!(meta["unix_time"].as_f64().unwrap() > 0.0);
    assert!(r.get("unix_time").is_none());
    let ledger = json(&out.join("ledger.json"));
    assert!(ledger["entries"]["M0"]["value"].is_number());
    std::fs::remove_dir_all(&d).ok();
}

#[test]
fn narrow_det_band_is_a_violation() {
    let d = scratch("band");
    let cfg = write_config(&d, &format!("{INTERVAL_SIGN}[transform]\ndet_band = [0.9, 1.1]\n"));
    let out = d.join("out");
    let o = rsde(&["transform-verify", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&out.join("transform-verify/report.json"));
    assert_eq!(r["checks"]["det_band"], false);
    for k in ["det_range", "M1", "M2", "T1", "theta0", "theta1", "cone_violations"] {
        assert!(!r["report"][k].is_null(), "missing {k}");
    }
    let ledger = json(&out.join("ledger.json"));
    for k in ["T1", "theta0", "theta1", "M1", "M2", "kappa"] {
        assert!(ledger["entries"][k]["value"].is_number(), "ledger lacks {k}");
    }
    std::fs::remove_dir_all(&d).ok();
}

#[test]
fn missing_seed_names_the_key() {
    let d = scratch("seed");
    let cfg = write_config(&d, INTERVAL_SIGN);
    let o = rsde(&["uniqueness", "--config", s(&cfg), "--out", s(&d.join("out")), "--paths", "10"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("`seed`"), "{err}");
    std::fs::remove_dir_all(&d).ok();
}

#[test]
fn unknown_key_names_the_key() {
    let d = scratch("key");
    let cfg = write_config(&d, &format!("{INTERVAL_SIGN}[uniqueness]\npairz = 3\n"));
    let o = rsde(&["pde-solve", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("pairz") && err.contains("line 6"), "{err}");
    std::fs::remove_dir_all(&d).ok();
}

#[test]
fn out_dir_comes_from_the_environment() {
    let d = scratch("env");
    let cfg = write_config(&d, "domain = \"interval\"\ndomain_params = [-1.0, 1.0]\ndrift = \"zero\"\nhorizon = 1.0\nout_dir = \"ignored\"\n");
    let out = d.join("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_rsde")).args(["pde-solve", "--config", s(&cfg)]).env("RSDE_OUT_DIR", &out).current_dir(&d).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(out.join("pde-solve/report.json").exists());
    assert!(!d.join("ignored").exists());
    std::fs::remove_dir_all(&d).ok();
}

#[test]
fn simulate_writes_paths_and_trajectories() {
    let d = scratch("sim");
    let cfg = write_config(&d, &format!("{INTERVAL_SIGN}[simulate]\nhorizon = 0.25\ndt = 0.015625\n"));
    let out = d.join("out");
    let o = rsde(&["--threads", "1", "simulate", "--config", s(&cfg), "--out", s(&out), "--paths", "50", "--seed", "3", "--trajectories"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("simulate/paths.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("path,x0,x1,local_time,reflections,slack"));
    assert_eq!(lines.count(), 50);
    let traj = std::fs::read(out.join("simulate/trajectories.bin")).unwrap();
    assert_eq!(&traj[..8], b"RSDETRJ1");
    let n = |i: usize| u64::from_le_bytes(traj[8 + 8 * i..16 + 8 * i].try_into().unwrap()) as usize;
    assert_eq!((n(0), n(1), n(2)), (50, 17, 1));
    assert_eq!(traj.len(), 32 + 8 * 17 * (1 + 50));
    assert_eq!(json(&out.join("simulate/metadata.json"))["threads"], 1);
    std::fs::remove_dir_all(&d).ok();
}

#[test]
fn report_aggregates_and_reruns_are_identical() {
    let d = scratch("det");
    let cfg = write_config(&d, &format!("{INTERVAL_SIGN}seed = 5\n[flow]\nsamples = 20\n[simulate]\nhorizon = 0.25\ndt = 0.015625\n"));
    let run = |out: &Path| {
        for c in ["transform-verify", "flow"] {
            assert_eq!(rsde(&[c, "--config", s(&cfg), "--out", s(out)]).status.code(), Some(0), "{c}");
        }
        assert_eq!(rsde(&["simulate", "--config", s(&cfg), "--out", s(out), "--paths", "200"]).status.code(), Some(0));
        assert_eq!(rsde(&["report", "--out", s(out)]).status.code(), Some(0));
    };
    let (a, b) = (d.join("a"), d.join("b"));
    run(&a);
    run(&b);
    let summary = json(&a.join("summary.json"));
    assert_eq!(summary["pass"], true);
    assert_eq!(summary["commands"].as_array().unwrap().len(), 3);
    for f in ["transform-verify/report.json", "flow/report.json", "flow/samples.csv", "simulate/report.json", "simulate/paths.csv", "summary.json", "ledger.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    std::fs::remove_dir_all(&d).ok();
}

#[test]
fn flow_anchor_from_the_command_line() {
    let d = scratch("anchor");
    let cfg = write_config(&d, "domain = \"interval\"\ndomain_params = [-1.0, 1.0]\ndrift = \"constant\"\ndrift_params = [0.5]\n[flow]\nsamples = 20\n");
    let out = d.join("out");
    let o = rsde(&["flow", "--config", s(&cfg), "--out", s(&out), "--t0", "0.5", "--z0", "1.2"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&out.join("flow/report.json"));
    let z0 = r["report"]["anchor"]["z0"][0].as_f64().unwrap();
    // u(t, x) = x + (T - t)c on the boundary point 1.
    assert!((z0 - 1.25).abs() < 1e-9, "{z0}");
    std::fs::remove_dir_all(&d).ok();
}
