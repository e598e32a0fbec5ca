use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("configs")
        .join(name)
}

fn mvjump(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvjump"))
        .args(args)
        .env_remove("MVJUMP_THREADS")
        .output()
        .unwrap()
}

fn run(cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--quiet",
    ];
    args.extend_from_slice(extra);
    mvjump(&args)
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn lq_sigma0_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&config("lq_sigma0.json"), dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("seed: 1"));
    let head = fs::read_to_string(dir.path().join("riccati.csv")).unwrap();
    assert!(head.starts_with("s,k1,k2,k3\n"));
    assert_eq!(json(&dir.path().join("hjb_report.json"))["pass"], true);
}

#[test]
fn doubled_k1_is_an_acceptance_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&config("lq_doubled_k1.json"), dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let report = json(&dir.path().join("hjb_report.json"));
    assert_eq!(report["pass"], false);
    assert!(report["max_residual"].as_f64().unwrap() > 0.05);
}

#[test]
fn heat_kernel_and_cross_solver() {
    let (fp, fk) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let o = run(&config("heat_kernel.json"), fp.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(fp.path().join("fp_solution.csv").is_file());
    let report = json(&fp.path().join("report.json"));
    assert!(
        report["details"]["convergence"]["l1_error"]
            .as_f64()
            .unwrap()
            <= 1e-2
    );

    let o = run(&config("heat_kernel_fk.json"), fk.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = mvjump(&[
        "compare",
        fp.path().to_str().unwrap(),
        fk.path().to_str().unwrap(),
        "--tolerance",
        "0.02",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("probes.csv,density,"));
}

#[test]
fn replay_is_byte_identical() {
    let (a, b, c) = (
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
    );
    let cfg = config("mean_field_simulation.json");
    for (dir, threads) in [(&a, "1"), (&b, "1"), (&c, "4")] {
        let o = run(&cfg, dir.path(), &["--threads", threads, "--seed", "99"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert!(stdout(&o).contains("seed: 99"));
    }
    for name in ["simulation.csv", "final_ensemble.csv", "report.json"] {
        let x = fs::read(a.path().join(name)).unwrap();
        assert_eq!(x, fs::read(b.path().join(name)).unwrap(), "{name}");
        assert_eq!(x, fs::read(c.path().join(name)).unwrap(), "{name}");
    }
    let o = mvjump(&[
        "compare",
        a.path().to_str().unwrap(),
        b.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).lines().skip(1).all(|l| l.ends_with(",0")));
}

#[test]
fn missing_atoms_exits_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(
        &cfg,
        r#"{"kind": "simulate", "horizon": {"T": 1, "dt": 0.1}, "particles": {"N": 10},
            "jumps": {}}"#,
    )
    .unwrap();
    let o = run(&cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("atoms"), "{}", stderr(&o));
}

#[test]
fn unknown_kind_exits_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"kind": "plot", "horizon": {"T": 1, "dt": 0.1}}"#).unwrap();
    let o = run(&cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("kind"), "{}", stderr(&o));
}

#[test]
fn compare_rejects_different_grids() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let base = fs::read_to_string(config("heat_kernel.json")).unwrap();
    let coarse = dir_file(b.path(), &base.replace("\"dx\": 0.02", "\"dx\": 0.04"));
    let fine = dir_file(a.path(), &base);
    let (ra, rb) = (a.path().join("run"), b.path().join("run"));
    assert_eq!(run(&fine, &ra, &[]).status.code(), Some(0));
    assert_eq!(run(&coarse, &rb, &[]).status.code(), Some(0));
    let o = mvjump(&["compare", ra.to_str().unwrap(), rb.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("shape mismatch"), "{}", stderr(&o));
}

fn dir_file(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, body).unwrap();
    p
}

#[test]
fn games_and_consumption() {
    for (name, code) in [
        ("saddle_hjbi.json", 0),
        ("decoupled_nash.json", 0),
        ("consumption.json", 0),
        ("lq_jump_corrected.json", 0),
    ] {
        let dir = tempfile::tempdir().unwrap();
        let o = run(&config(name), dir.path(), &[]);
        assert_eq!(o.status.code(), Some(code), "{name}: {}", stderr(&o));
    }
    let dir = tempfile::tempdir().unwrap();
    let body = fs::read_to_string(config("saddle_hjbi.json"))
        .unwrap()
        .replace("\"shift\": 0.0", "\"shift\": 0.2");
    let o = run(&dir_file(dir.path(), &body), &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    let report = json(&dir.path().join("out").join("hjbi_report.json"));
    assert_eq!(report["condition_iii"]["pass"], false);
}

#[test]
fn threads_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_mvjump"))
        .args([
            "run",
            "--config",
            config("consumption.json").to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
        ])
        .env("MVJUMP_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("consumption_benchmark PASS"));
}
