//! Acceptance suite. Each criterion prints one PASS/FAIL line with the
//! measured quantities; the process exits nonzero if any criterion fails.
//!
//! Oracles here are written independently of the library: central finite
//! differences, a control grid scan, an RK4 Riccati integrator and a direct
//! double loop over particle pairs.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use brsmfg::applications::{build_crowd_model, build_wealth_model, CrowdParams, WealthParams};
use brsmfg::brs::{brs_control_finite, brs_control_limit, mpc_value_surrogate, MpcConfig};
use brsmfg::config::RunConfig;
use brsmfg::measures::{EmpiricalMeasure, FvGrid, MeasureView};
use brsmfg::mfg::{solve_mfg_picard, PicardConfig};
use brsmfg::model::{brs_drift, ModelSpec};
use brsmfg::particle_sim::EnsembleState;
use brsmfg::presets::QuadraticParams;
use brsmfg::runner::{run, Command, RunOutcome};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

/// Mass drift and minimum value gathered from every grid run.
#[derive(Default)]
struct Conservation {
    worst_drift: f64,
    worst_min: f64,
    runs: usize,
}

impl Conservation {
    fn record(&mut self, drift: f64, min: f64) {
        self.worst_drift = self.worst_drift.max(drift);
        self.worst_min = if self.runs == 0 { min } else { self.worst_min.min(min) };
        self.runs += 1;
    }

    /// Reads `{prefix}mass_drift.p*` and `{prefix}min_value` from a report.
    fn record_report(&mut self, out: &RunOutcome, prefix: &str, pops: usize) {
        let drift = (0..pops).map(|p| out.report.value(&format!("{prefix}mass_drift.p{p}")).unwrap_or(f64::INFINITY)).fold(0.0, f64::max);
        let min = out.report.value(&format!("{prefix}min_value")).unwrap_or(f64::NEG_INFINITY);
        self.record(drift, min);
    }
}

fn config(lines: &[&str]) -> RunConfig {
    RunConfig::from_text(&lines.join("\n"), &[]).expect("acceptance config parses")
}

fn run_in(cmd: Command, cfg: &RunConfig, dir: &Path) -> Result<RunOutcome, String> {
    run(cmd, cfg, dir).map_err(|e| format!("{} failed: {e}", cmd.name()))
}

fn within_budget(elapsed: Duration, budget_s: f64) -> bool {
    elapsed.as_secs_f64() < budget_s
}

/// Byte-compares every file of two output directories.
fn same_files(a: &Path, b: &Path) -> Result<usize, String> {
    let mut names: Vec<_> = fs::read_dir(a).map_err(|e| e.to_string())?.map(|e| e.unwrap().file_name()).collect();
    names.sort();
    let other = fs::read_dir(b).map_err(|e| e.to_string())?.count();
    if other != names.len() {
        return Err(format!("{} files vs {other}", names.len()));
    }
    for n in &names {
        let (x, y) = (fs::read(a.join(n)).map_err(|e| e.to_string())?, fs::read(b.join(n)).map_err(|e| e.to_string())?);
        if x != y {
            return Err(format!("{} differs", n.to_string_lossy()));
        }
    }
    Ok(names.len())
}

// ---------------------------------------------------------------- 1

struct Case {
    name: &'static str,
    model: ModelSpec,
    /// Samples a state of `n` players per population.
    state: fn(&mut ChaCha8Rng, usize, usize) -> Vec<Vec<f64>>,
}

fn line_state(rng: &mut ChaCha8Rng, _pops: usize, n: usize) -> Vec<Vec<f64>> {
    vec![(0..n).map(|_| rng.random_range(-3.0..3.0)).collect()]
}

fn wealth_state(rng: &mut ChaCha8Rng, _pops: usize, n: usize) -> Vec<Vec<f64>> {
    vec![(0..n).flat_map(|_| [rng.random_range(-2.0..2.0), rng.random_range(0.2..3.0)]).collect()]
}

fn crowd_state(rng: &mut ChaCha8Rng, pops: usize, n: usize) -> Vec<Vec<f64>> {
    (0..pops).map(|_| (0..2 * n).map(|_| rng.random_range(2.0..8.0)).collect()).collect()
}

/// Fourth-order central difference of the surrogate along axis `k`.
fn surrogate_slope(model: &ModelSpec, pop: usize, t: f64, x: &[f64], m: &[MeasureView<'_>], k: usize) -> f64 {
    let e = 1e-4;
    let at = |s: f64| {
        let mut y = x.to_vec();
        y[k] += s;
        mpc_value_surrogate(model, pop, t, &y, m).unwrap()
    };
    (-at(2.0 * e) + 8.0 * at(e) - 8.0 * at(-e) + at(-2.0 * e)) / (12.0 * e)
}

/// Argmin over `u ∈ [−10, 10]` (step 1e-3) of `u·slope + (den/2)·u²`, the
/// `u`-dependent part of the one-window cost divided by the window length.
fn scan_control(slope: f64, den: f64) -> f64 {
    let mut best = (f64::INFINITY, 0.0);
    for j in 0..=20_000 {
        let u = -10.0 + 1e-3 * j as f64;
        let c = u * slope + 0.5 * den * u * u;
        if c < best.0 {
            best = (c, u);
        }
    }
    best.1
}

fn criterion_method_equivalence() -> Verdict {
    let cases = vec![
        Case { name: "ou", model: QuadraticParams::ou().build().unwrap(), state: line_state },
        Case { name: "lq", model: QuadraticParams::lq().build().unwrap(), state: line_state },
        Case { name: "lq_mean", model: QuadraticParams::lq_mean().build().unwrap(), state: line_state },
        Case { name: "wealth", model: build_wealth_model(&WealthParams::default()).unwrap(), state: wealth_state },
        Case { name: "crowd", model: build_crowd_model(&CrowdParams::crossing(1.0)).unwrap(), state: crowd_state },
    ];
    let mpc = MpcConfig::new(0.05);
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let (mut worst_rel, mut worst_scan): (f64, f64) = (0.0, 0.0);
    for case in &cases {
        let model = &case.model;
        let pops = model.population_count();
        for _ in 0..100 {
            let n = 6;
            let state = EnsembleState::new(model.dim(), (case.state)(&mut rng, pops, n), 0.0, 0).unwrap();
            let t = rng.random_range(0.0..model.horizon() - mpc.dt);
            let pop = rng.random_range(0..pops);
            let i = rng.random_range(0..n);
            let measures = state.measures().unwrap();
            let views: Vec<MeasureView<'_>> = measures.iter().enumerate().map(|(q, m)| if q == pop { m.view_without(i) } else { m.view() }).collect();
            let x = state.point(pop, i);
            let spec = model.population(pop).unwrap();
            let alpha = spec.penalty.alpha(t);
            let den = alpha + mpc.dt * spec.penalty.alpha_dot(t);
            let limit = brs_control_limit(model, pop, t, x, &views).unwrap();
            let finite = brs_control_finite(model, pop, i, &state, t, &mpc).unwrap();
            for k in 0..model.dim() {
                if !spec.control_mask[k] {
                    if limit[k] != 0.0 || finite[k] != 0.0 {
                        worst_rel = f64::INFINITY;
                    }
                    continue;
                }
                let slope = surrogate_slope(model, pop, t, x, &views, k);
                let expect = -slope / alpha;
                let rel = (limit[k] - expect).abs() / expect.abs().max(1e-8);
                worst_rel = worst_rel.max(rel);
                worst_scan = worst_scan.max((finite[k] - scan_control(slope, den)).abs());
            }
        }
    }
    let names: Vec<_> = cases.iter().map(|c| c.name).collect();
    Verdict::new(
        worst_rel <= 1e-5 && worst_scan <= 1e-3,
        format!("presets {names:?}: max rel error limit vs FD {worst_rel:.3e} (≤ 1e-5), max |finite − scan| {worst_scan:.3e} (≤ 1e-3)"),
    )
}

// ---------------------------------------------------------------- 2

fn criterion_mpc_order(tmp: &Path) -> Result<Verdict, String> {
    let out = run_in(Command::MpcOrder, &config(&["model.preset = lq"]), &tmp.join("mpc"))?;
    let order = out.report.value("fitted_order").unwrap_or(f64::NAN);
    Ok(Verdict::new((order - 1.0).abs() <= 0.3, format!("fitted order {order:.4} (1.0 ± 0.3)")))
}

// ---------------------------------------------------------------- 3

fn ou_particle_config(workers: usize) -> RunConfig {
    config(&[
        "model.preset = ou",
        "sim.n_particles = 10000",
        "sim.dt = 0.001",
        "sim.seeds = 20",
        "sim.record_every = 1000",
        "sim.reference = fpk",
        "sim.w1_time = 1",
        &format!("run.workers = {workers}"),
    ])
}

fn criterion_ou(tmp: &Path, cons: &mut Conservation) -> Result<Verdict, String> {
    let sim = run_in(Command::Simulate, &ou_particle_config(1), &tmp.join("ou_w1"))?;
    cons.record_report(&sim, "reference.", 1);
    let fpk = run_in(Command::Fpk, &config(&["model.preset = ou", "grid.min = -6", "grid.max = 6", "grid.cells = 400"]), &tmp.join("ou_fpk"))?;
    cons.record_report(&fpk, "", 1);
    let pv = sim.report.value("terminal.variance").unwrap_or(f64::NAN);
    let fv = fpk.report.value("terminal.variance").unwrap_or(f64::NAN);
    let w1 = sim.report.value("w1.mean").unwrap_or(f64::NAN);
    Ok(Verdict::new(
        (pv - 0.5).abs() <= 0.05 && (fv - 0.5).abs() <= 0.01 && w1 <= 0.05,
        format!("particle variance {pv:.5} (0.5 ± 0.05), FPK variance {fv:.5} (0.5 ± 0.01), W1 at t=1 {w1:.5} (≤ 0.05)"),
    ))
}

// ---------------------------------------------------------------- 4

fn criterion_chaos(tmp: &Path, cons: &mut Conservation) -> Result<Verdict, String> {
    let cfg = config(&["model.preset = lq", "chaos.n_list = 250,1000,4000", "chaos.seeds = 20", "sim.dt = 0.01"]);
    let out = run_in(Command::ChaosStudy, &cfg, &tmp.join("chaos"))?;
    cons.record_report(&out, "reference.", 1);
    let w: Vec<f64> = [250, 1000, 4000].iter().map(|n| out.report.value(&format!("mean_w1.n{n}")).unwrap_or(f64::NAN)).collect();
    let ratio = w[0] / w[2];
    Ok(Verdict::new(w[0] > w[1] && w[1] > w[2] && ratio >= 2.0, format!("mean W1 {:.5} > {:.5} > {:.5}, ratio {ratio:.3} (≥ 2)", w[0], w[1], w[2])))
}

// ---------------------------------------------------------------- 5

/// `w = a(t)x² + b(t)` for `h = g = x²/2`, `α = σ = 1`, integrated backward
/// from `a(T) = ½`, `b(T) = 0` by RK4.
fn riccati(horizon: f64, t: f64) -> (f64, f64) {
    let steps = 4000;
    let h = (horizon - t) / steps as f64;
    // In reversed time s = T − t: a′ = ½ − 2a², b′ = σ²a.
    let f = |a: f64| (0.5 - 2.0 * a * a, a);
    let (mut a, mut b) = (0.5, 0.0);
    for _ in 0..steps {
        let k1 = f(a);
        let k2 = f(a + 0.5 * h * k1.0);
        let k3 = f(a + 0.5 * h * k2.0);
        let k4 = f(a + h * k3.0);
        a += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
        b += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
    }
    (a, b)
}

fn criterion_mfg(cons: &mut Conservation) -> Result<Verdict, String> {
    let model = QuadraticParams::lq().build().map_err(|e| e.to_string())?;
    let grid = FvGrid::uniform_1d(-6.0, 6.0, 400).map_err(|e| e.to_string())?;
    let m0 = model.initial_densities(&grid).map_err(|e| e.to_string())?.remove(0);
    let sol = solve_mfg_picard(&model, &m0, 100, &PicardConfig::default(), 0.9).map_err(|e| e.to_string())?;
    cons.record(sol.density.max_mass_drift(), sol.density.min_value());
    let mut worst: f64 = 0.0;
    for (k, &t) in sol.value.times.iter().enumerate() {
        let (a, b) = riccati(model.horizon(), t);
        for (c, &w) in sol.value.values[k].iter().enumerate() {
            let x = grid.axis(0).midpoint(c);
            worst = worst.max((w - (a * x * x + b)).abs());
        }
    }
    let second = sol.log.get(1).map_or(f64::INFINITY, |r| r.residual);
    Ok(Verdict::new(
        worst <= 2e-2 && second <= 1e-12,
        format!("L∞ value error vs Riccati {worst:.3e} (≤ 2e-2), residual at iteration 2 {second:.3e} (≤ 1e-12)"),
    ))
}

// ---------------------------------------------------------------- 7

fn crowd_mirror_config(workers: usize) -> RunConfig {
    config(&["crowd.lambda = 1", "crowd.t_final = 1", "fpk.record_every = 4", &format!("run.workers = {workers}")])
}

fn criterion_crowd(tmp: &Path, cons: &mut Conservation) -> Result<Verdict, String> {
    let same = config(&["crowd.lambda = 0", "crowd.start1 = 2.5,5", "crowd.target1 = 7.5,5", "crowd.t_final = 1", "fpk.record_every = 4"]);
    let a = run_in(Command::Crowd, &same, &tmp.join("crowd_same"))?;
    cons.record_report(&a, "", 2);
    let b = run_in(Command::Crowd, &crowd_mirror_config(1), &tmp.join("crowd_w1"))?;
    cons.record_report(&b, "", 2);
    let gap = a.report.value("population_gap_l1").unwrap_or(f64::NAN);
    let mirror = b.report.value("mirror_gap_l1").unwrap_or(f64::NAN);
    Ok(Verdict::new(gap <= 1e-12 && mirror <= 1e-3, format!("decoupled population gap {gap:.3e} (≤ 1e-12), mirror gap {mirror:.3e} (≤ 1e-3)")))
}

// ---------------------------------------------------------------- 8

fn criterion_wealth() -> Result<Verdict, String> {
    let p = WealthParams::default();
    let model = build_wealth_model(&p).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 100;
    let pts: Vec<f64> = (0..n).flat_map(|_| [rng.random_range(-2.0..2.0), rng.random_range(0.2..3.0)]).collect();
    let m = EmpiricalMeasure::uniform(2, pts).map_err(|e| e.to_string())?;

    let y = |k: usize| m.point(k)[0];
    let z = |k: usize| m.point(k)[1];
    let rho: Vec<f64> = (0..n).map(|k| (0..n).map(|j| p.psi.value(y(k) - y(j))).sum::<f64>() / n as f64).collect();
    let (mut worst, mut sum) = (0.0f64, 0.0);
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..n {
            acc += p.xi.value(0.5 * (rho[i] + rho[j])) * p.psi.value(y(i) - y(j)) * p.phi.derivative(z(i) - z(j));
        }
        let oracle = -acc / n as f64;
        let drift = brs_drift(&model, 0, 0.0, m.point(i), &[m.view()]).map_err(|e| e.to_string())?;
        worst = worst.max((drift[1] - oracle).abs());
        sum += drift[1];
    }
    Ok(Verdict::new(
        worst <= 1e-12 && sum.abs() <= 1e-12,
        format!("N={n}: max |drift − double loop| {worst:.3e} (≤ 1e-12), antisymmetry sum {sum:.3e} (|·| ≤ 1e-12)"),
    ))
}

// ---------------------------------------------------------------- 9

fn criterion_determinism(tmp: &Path) -> Result<Verdict, String> {
    run_in(Command::Simulate, &ou_particle_config(4), &tmp.join("ou_w4"))?;
    run_in(Command::Crowd, &crowd_mirror_config(4), &tmp.join("crowd_w4"))?;
    let ou = same_files(&tmp.join("ou_w1"), &tmp.join("ou_w4"));
    let crowd = same_files(&tmp.join("crowd_w1"), &tmp.join("crowd_w4"));
    let pass = ou.is_ok() && crowd.is_ok();
    let show = |r: &Result<usize, String>| match r {
        Ok(n) => format!("{n} files identical"),
        Err(e) => e.clone(),
    };
    Ok(Verdict::new(pass, format!("workers 1 vs 4: OU particle run {}, crowd run {}", show(&ou), show(&crowd))))
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let dir = tmp.path();
    let mut cons = Conservation::default();
    let mut failed = 0;
    // `BRSMFG_ACCEPTANCE_ONLY=1,4` runs a subset while iterating; criterion 9
    // needs the outputs of 3 and 7.
    let only: Option<Vec<usize>> = std::env::var("BRSMFG_ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());

    let mut report = |id: usize, title: &str, budget_s: Option<f64>, f: &mut dyn FnMut() -> Result<Verdict, String>| {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            println!("SKIP criterion {id} ({title})");
            return;
        }
        let start = Instant::now();
        let v = f().unwrap_or_else(|e| Verdict::new(false, e));
        let elapsed = start.elapsed();
        let in_time = budget_s.is_none_or(|b| within_budget(elapsed, b));
        let pass = v.pass && in_time;
        let budget = budget_s.map_or(String::new(), |b| format!(" < {b} s"));
        println!("{} criterion {id} ({title}): {}; runtime {:.1} s{budget}", if pass { "PASS" } else { "FAIL" }, v.detail, elapsed.as_secs_f64());
        if !pass {
            failed += 1;
        }
    };

    report(1, "method equivalence", Some(10.0), &mut || Ok(criterion_method_equivalence()));
    report(2, "MPC reduction order", Some(60.0), &mut || criterion_mpc_order(dir));
    report(3, "OU benchmark", Some(120.0), &mut || criterion_ou(dir, &mut cons));
    report(4, "propagation of chaos", Some(300.0), &mut || criterion_chaos(dir, &mut cons));
    report(5, "MFG solver", Some(120.0), &mut || criterion_mfg(&mut cons));
    report(7, "crowd decoupling and symmetry", Some(120.0), &mut || criterion_crowd(dir, &mut cons));
    report(8, "wealth drift oracle", Some(10.0), &mut || criterion_wealth());
    report(6, "conservation and positivity", None, &mut || {
        // The wealth model has a grid run of its own here.
        let wealth = run_in(Command::Wealth, &config(&["wealth.n_particles = 200", "sim.dt = 0.01"]), &dir.join("wealth"))?;
        cons.record_report(&wealth, "grid.", 1);
        Ok(Verdict::new(
            cons.runs > 0 && cons.worst_drift <= 1e-10 && cons.worst_min >= -1e-13,
            format!("{} grid runs: max mass drift {:.3e} (≤ 1e-10), min density {:.3e} (≥ -1e-13)", cons.runs, cons.worst_drift, cons.worst_min),
        ))
    });
    report(9, "determinism", None, &mut || criterion_determinism(dir));

    if failed == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    }
}
