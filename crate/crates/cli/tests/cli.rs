use std::fs;
use std::path::Path;
use std::process::Command;

fn brsmfg(args: &[&str], config: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_brsmfg")).args(args).arg("--config").arg(config).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn report_value(dir: &Path, key: &str) -> f64 {
    let text = fs::read_to_string(dir.join("report.txt")).unwrap();
    text.lines().find_map(|l| l.strip_prefix(&format!("{key} = "))).unwrap_or_else(|| panic!("{key} missing from report")).parse().unwrap()
}

#[test]
fn simulate_twice_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "lq.cfg", "model.preset = lq\nsim.n_particles = 200\nsim.dt = 0.01\n");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for (out, workers) in [(&a, "1"), (&b, "2")] {
        let o = brsmfg(&["simulate", "--set", "sim.seed=7", "--workers", workers, "--out", out.to_str().unwrap()], &cfg);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["snapshots.csv", "metrics.csv", "report.txt", "manifest.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let manifest = fs::read_to_string(a.join("manifest.txt")).unwrap();
    assert!(manifest.contains("sim.seed = 7"));
}

#[test]
fn rerun_from_manifest_reproduces_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "lq.cfg", "model.preset = lq_mean\nsim.n_particles = 100\nsim.dt = 0.02\n");
    let a = tmp.path().join("a");
    assert!(brsmfg(&["simulate", "--out", a.to_str().unwrap()], &cfg).status.success());
    let b = tmp.path().join("b");
    assert!(brsmfg(&["simulate", "--out", b.to_str().unwrap()], &a.join("manifest.txt")).status.success());
    for f in ["snapshots.csv", "metrics.csv", "report.txt", "manifest.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn fpk_ou_terminal_variance() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "ou.cfg", "model.preset = ou\n");
    let out = tmp.path().join("fpk");
    let o = brsmfg(&["fpk", "--out", out.to_str().unwrap()], &cfg);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = report_value(&out, "terminal.variance");
    assert!((v - 0.5).abs() <= 0.01, "{v}");
}

#[test]
fn mpc_order_lq() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "lq.cfg", "model.preset = lq\n");
    let out = tmp.path().join("mpc");
    let o = brsmfg(&["mpc-order", "--out", out.to_str().unwrap()], &cfg);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let order = report_value(&out, "fitted_order");
    assert!((0.7..=1.3).contains(&order), "{order}");
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write_config(tmp.path(), "bad.cfg", "sim.colour = red\n");
    let o = brsmfg(&["simulate", "--out", tmp.path().join("x").to_str().unwrap()], &bad);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sim.colour"));

    let o = brsmfg(&["simulate"], &tmp.path().join("missing.cfg"));
    assert_eq!(o.status.code(), Some(1));

    // Concave terminal cost with a cheap control: the value function blows up.
    let cfg = write_config(
        tmp.path(),
        "blow.cfg",
        "model.preset = lq\nquad.running_weight = 0\nquad.terminal_weight = -2\nquad.alpha = 0.1\nquad.sigma = 0\ngrid.cells = 100\n",
    );
    let o = brsmfg(&["mfg", "--out", tmp.path().join("y").to_str().unwrap()], &cfg);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("HJB unstable"));

    let cfg = write_config(
        tmp.path(),
        "slow.cfg",
        "model.preset = lq_mean\ngrid.cells = 40\ngrid.min = -4\ngrid.max = 4\nmfg.n_t = 20\nmfg.max_iters = 2\nmfg.tol = 1e-14\n",
    );
    let o = brsmfg(&["mfg", "--out", tmp.path().join("z").to_str().unwrap()], &cfg);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn output_root_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.cfg", "model.preset = lq\ngrid.cells = 40\nfpk.record_every = 1\n");
    let o =
        Command::new(env!("CARGO_BIN_EXE_brsmfg")).args(["fpk", "--config"]).arg(&cfg).env("BRSMFG_OUT", tmp.path().join("root")).output().unwrap();
    assert!(o.status.success());
    assert!(tmp.path().join("root/fpk/report.txt").exists());
}
