//! Config-driven experiment runs. Each run writes `manifest.txt`, its data
//! CSVs and `report.txt` into one output directory.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::applications::{
    build_crowd_model, build_wealth_model, crowd_initial_densities, overlap, quadratic_target, wealth_grid, CrowdParams, WealthParams,
};
use crate::brs::MpcConfig;
use crate::config::{ConfigError, RunConfig};
use crate::fokker_planck::{solve_fpk, Boundary, DensityPath, FpkConfig, FpkError, FpkReport};
use crate::io;
use crate::measures::{moments, Axis, FvGrid, GridDensity, MeasureError};
use crate::mfg::{compare_brs_mfg, mpc_reduction_check, solve_mfg_picard, MfgError, PicardConfig};
use crate::model::{InitialLaw, ModelError, ModelSpec};
use crate::particle_sim::{propagation_of_chaos_study, simulate, BrsPolicy, Coupling, SimConfig, SimError, TrajectoryRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Fpk,
    Mfg,
    Compare,
    ChaosStudy,
    MpcOrder,
    Wealth,
    Crowd,
}

impl Command {
    pub const ALL: [Command; 8] =
        [Command::Simulate, Command::Fpk, Command::Mfg, Command::Compare, Command::ChaosStudy, Command::MpcOrder, Command::Wealth, Command::Crowd];

    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Fpk => "fpk",
            Command::Mfg => "mfg",
            Command::Compare => "compare",
            Command::ChaosStudy => "chaos-study",
            Command::MpcOrder => "mpc-order",
            Command::Wealth => "wealth",
            Command::Crowd => "crowd",
        }
    }
}

impl FromStr for Command {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Command::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| format!("unknown subcommand `{s}`"))
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid parameters: {0}")]
    Invalid(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error at {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl RunError {
    /// 1 i/o, 2 configuration, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Io { .. } => 1,
            RunError::Config(ConfigError::Io { .. }) => 1,
            RunError::Config(_) | RunError::Invalid(_) => 2,
            RunError::Numerical(_) => 3,
        }
    }
}

impl From<ModelError> for RunError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Invalid(_) | ModelError::NoSuchPopulation(_) => RunError::Invalid(e.to_string()),
            _ => RunError::Numerical(e.to_string()),
        }
    }
}

impl From<MeasureError> for RunError {
    fn from(e: MeasureError) -> Self {
        RunError::Numerical(e.to_string())
    }
}

impl From<SimError> for RunError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(_) | SimError::Reference(_) => RunError::Invalid(e.to_string()),
            SimError::Model(m) => m.into(),
            _ => RunError::Numerical(e.to_string()),
        }
    }
}

impl From<FpkError> for RunError {
    fn from(e: FpkError) -> Self {
        match e {
            FpkError::Invalid(_) => RunError::Invalid(e.to_string()),
            FpkError::Model(m) => m.into(),
            _ => RunError::Numerical(e.to_string()),
        }
    }
}

impl From<MfgError> for RunError {
    fn from(e: MfgError) -> Self {
        match e {
            MfgError::Invalid(_) => RunError::Invalid(e.to_string()),
            MfgError::Fpk(f) => f.into(),
            MfgError::Model(m) => m.into(),
            _ => RunError::Numerical(e.to_string()),
        }
    }
}

/// Ordered `key = value` headline metrics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    lines: Vec<(String, String)>,
}

impl Report {
    pub fn num(&mut self, key: impl Into<String>, v: f64) {
        self.lines.push((key.into(), io::num(v)));
    }

    pub fn text(&mut self, key: impl Into<String>, v: impl ToString) {
        self.lines.push((key.into(), v.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.lines.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn value(&self, key: &str) -> Option<f64> {
        self.get(key)?.parse().ok()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.lines {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    fn fpk(&mut self, prefix: &str, rep: &FpkReport) {
        self.text(format!("{prefix}steps"), rep.steps);
        for (p, d) in rep.mass_drift.iter().enumerate() {
            self.num(format!("{prefix}mass_drift.p{p}"), *d);
        }
        self.num(format!("{prefix}min_value"), rep.min_value);
        self.num(format!("{prefix}max_boundary_mass"), rep.max_boundary_mass);
        self.text(format!("{prefix}boundary_flag"), rep.boundary_flag);
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: Report,
    /// False when an iterative solver stopped at its iteration cap.
    pub converged: bool,
    pub out_dir: PathBuf,
}

impl RunOutcome {
    /// 0 success, 4 finished without convergence.
    pub fn exit_code(&self) -> i32 {
        if self.converged {
            0
        } else {
            4
        }
    }
}

struct Output<'a> {
    dir: &'a Path,
}

impl Output<'_> {
    fn write(&self, name: &str, f: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> Result<(), RunError> {
        let path = self.dir.join(name);
        let err = |source| RunError::Io { path: path.display().to_string(), source };
        let mut w = BufWriter::new(fs::File::create(&path).map_err(err)?);
        f(&mut w).and_then(|_| w.flush()).map_err(err)
    }
}

/// Runs `cmd` with a dedicated pool of `run.workers` threads (0 = one per
/// core). Results do not depend on the worker count.
pub fn run(cmd: Command, cfg: &RunConfig, out_dir: &Path) -> Result<RunOutcome, RunError> {
    fs::create_dir_all(out_dir).map_err(|source| RunError::Io { path: out_dir.display().to_string(), source })?;
    let out = Output { dir: out_dir };
    out.write("manifest.txt", |w| w.write_all(cfg.manifest(cmd.name()).as_bytes()))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers()?)
        .build()
        .map_err(|e| RunError::Invalid(format!("cannot build worker pool: {e}")))?;
    let mut report = Report::default();
    report.text("command", cmd.name());
    let converged = pool.install(|| -> Result<bool, RunError> {
        match cmd {
            Command::Simulate => run_simulate(cfg, &out, &mut report).map(|_| true),
            Command::Fpk => run_fpk(cfg, &out, &mut report).map(|_| true),
            Command::Mfg => run_mfg(cfg, &out, &mut report),
            Command::Compare => run_compare(cfg, &out, &mut report),
            Command::ChaosStudy => run_chaos(cfg, &out, &mut report).map(|_| true),
            Command::MpcOrder => run_mpc_order(cfg, &out, &mut report).map(|_| true),
            Command::Wealth => run_wealth(cfg, &out, &mut report).map(|_| true),
            Command::Crowd => run_crowd(cfg, &out, &mut report).map(|_| true),
        }
    })?;
    out.write("report.txt", |w| w.write_all(report.render().as_bytes()))?;
    Ok(RunOutcome { report, converged, out_dir: out_dir.to_path_buf() })
}

fn quadratic_model(cfg: &RunConfig) -> Result<ModelSpec, RunError> {
    Ok(cfg.quadratic()?.build()?)
}

fn grid_1d(cfg: &RunConfig) -> Result<FvGrid, RunError> {
    Ok(FvGrid::uniform_1d(cfg.get("grid.min")?, cfg.get("grid.max")?, cfg.get("grid.cells")?)?)
}

fn mpc_config(cfg: &RunConfig) -> Result<MpcConfig, RunError> {
    Ok(MpcConfig { dt: cfg.get("mpc.dt")?, use_alpha_dot: cfg.get("mpc.use_alpha_dot")? })
}

fn fpk_config(cfg: &RunConfig, dim: usize, t_final: f64, records: usize) -> Result<FpkConfig, RunError> {
    let b: Boundary = cfg.get("fpk.boundary")?;
    Ok(FpkConfig { cfl_safety: cfg.get("fpk.cfl")?, boundaries: vec![[b, b]; dim], t0: 0.0, t_final, record_every: records })
}

fn sim_config(cfg: &RunConfig, horizon: f64, t_final_key: &str) -> Result<SimConfig, RunError> {
    Ok(SimConfig {
        dt: cfg.get("sim.dt")?,
        t0: 0.0,
        t_final: cfg.time(t_final_key, horizon)?,
        n_particles: cfg.get("sim.n_particles")?,
        seed: cfg.get("sim.seed")?,
        record_every: cfg.get("sim.record_every")?,
        coupling: cfg.get::<Coupling>("sim.coupling")?,
    })
}

fn record_value(rec: &TrajectoryRecord, t: f64, name: &str) -> Option<f64> {
    rec.metrics.iter().find(|m| (m.t - t).abs() <= 1e-9 && m.name == name).map(|m| m.value)
}

fn run_simulate(cfg: &RunConfig, out: &Output<'_>, report: &mut Report) -> Result<(), RunError> {
    let model = quadratic_model(cfg)?;
    let base = sim_config(cfg, model.horizon(), "sim.t_final")?;
    let mpc = mpc_config(cfg)?;
    mpc.validate(model.horizon())?;
    let seeds: u64 = cfg.get("sim.seeds")?;
    if seeds == 0 {
        return Err(RunError::Invalid("sim.seeds must be at least 1".into()));
    }
    let reference = match cfg.str("sim.reference") {
        "none" => None,
        "fpk" => {
            let (steps, _) = base.resolve_steps()?;
            if steps % base.record_every != 0 {
                return Err(RunError::Invalid("sim.reference = fpk needs sim.record_every to divide the step count".into()));
            }
            let m0 = model.initial_densities(&grid_1d(cfg)?)?;
            let fcfg = fpk_config(cfg, 1, base.t_final, steps / base.record_every)?;
            let (path, rep) = solve_fpk(&model, &m0, &fcfg)?;
            report.fpk("reference.", &rep);
            Some(path)
        }
        other => return Err(ConfigError::Value { key: "sim.reference".into(), value: other.into(), reason: "expected none or fpk".into() }.into()),
    };
    let w1_time: f64 = cfg.get("sim.w1_time")?;
    let policy = BrsPolicy { mpc };
    let (mut var, mut mean, mut w1) = (Vec::new(), Vec::new(), Vec::new());
    let mut metrics = Vec::new();
    for s in 0..seeds {
        let sc = SimConfig { seed: base.seed + s, ..base.clone() };
        let rec = simulate(&model, &sc, &policy, reference.as_ref().map(|r| r as _))?;
        let tf = *rec.times.last().expect("final time recorded");
        var.push(record_value(&rec, tf, "var.p0.x0").unwrap_or(f64::NAN));
        mean.push(record_value(&rec, tf, "mean.p0.x0").unwrap_or(f64::NAN));
        if reference.is_some() {
            w1.push(
                record_value(&rec, w1_time, "w1.p0").ok_or_else(|| RunError::Invalid(format!("sim.w1_time = {w1_time} is not a recorded time")))?,
            );
        }
        if s == 0 {
            out.write("snapshots.csv", |w| io::write_snapshots(w, &rec))?;
        }
        for mut m in rec.metrics {
            if seeds > 1 {
                m.name = format!("s{}.{}", sc.seed, m.name);
            }
            metrics.push(m);
        }
    }
    out.write("metrics.csv", |w| io::write_metrics(w, &metrics))?;
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    report.text("seeds", seeds);
    report.num("terminal.mean", avg(&mean));
    report.num("terminal.variance", avg(&var));
    if !w1.is_empty() {
        report.num("w1.time", w1_time);
        report.num("w1.mean", avg(&w1));
    }
    Ok(())
}

fn grid_moments(g: &GridDensity) -> (f64, f64) {
    let m = moments(&g.view(), 2);
    (m.mean[0], m.variance.expect("order 2")[0])
}

fn run_fpk(cfg: &RunConfig, out: &Output<'_>, report: &mut Report) -> Result<(), RunError> {
    let model = quadratic_model(cfg)?;
    let grid = grid_1d(cfg)?;
    let m0 = model.initial_densities(&grid)?;
    let fcfg = fpk_config(cfg, 1, cfg.time("fpk.t_final", model.horizon())?, cfg.get("fpk.record_every")?)?;
    let (path, rep) = solve_fpk(&model, &m0, &fcfg)?;
    out.write("density.csv", |w| io::write_density_path(w, &path, &path_meta(cfg, &fcfg)))?;
    report.fpk("", &rep);
    let (mean, var) = grid_moments(&path.final_fields()[0]);
    report.num("terminal.mean", mean);
    report.num("terminal.variance", var);
    Ok(())
}

fn path_meta(cfg: &RunConfig, fcfg: &FpkConfig) -> Vec<(String, String)> {
    vec![
        ("model.preset".into(), cfg.str("model.preset").into()),
        ("fpk.cfl".into(), io::num(fcfg.cfl_safety)),
        ("fpk.t_final".into(), io::num(fcfg.t_final)),
        ("fpk.records".into(), fcfg.record_every.to_string()),
    ]
}

fn picard_config(cfg: &RunConfig) -> Result<PicardConfig, RunError> {
    Ok(PicardConfig { max_iters: cfg.get("mfg.max_iters")?, damping: cfg.get("mfg.damping")?, tol: cfg.get("mfg.tol")? })
}

fn run_mfg(cfg: &RunConfig, out: &Output<'_>, report: &mut Report) -> Result<bool, RunError> {
    let model = quadratic_model(cfg)?;
    let m0 = model.initial_densities(&grid_1d(cfg)?)?.remove(0);
    let n_t: usize = cfg.get("mfg.n_t")?;
    let sol = solve_mfg_picard(&model, &m0, n_t, &picard_config(cfg)?, cfg.get("fpk.cfl")?)?;
    out.write("value.csv", |w| io::write_value_field(w, &sol.value))?;
    out.write("density.csv", |w| io::write_density_path(w, &sol.density, &[("model.preset".into(), cfg.str("model.preset").into())]))?;
    out.write("iterations.csv", |w| io::write_iteration_log(w, &sol.log))?;
    report.text("iterations", sol.log.len());
    report.num("final_residual", sol.log.last().map_or(f64::NAN, |r| r.residual));
    report.text("converged", sol.converged);
    report.num("mass_drift", sol.density.max_mass_drift());
    report.num("min_value", sol.density.min_value());
    let (mean, var) = grid_moments(&sol.density.final_fields()[0]);
    report.num("terminal.mean", mean);
    report.num("terminal.variance", var);
    Ok(sol.converged)
}

fn run_compare(cfg: &RunConfig, out: &Output<'_>, report: &mut Report) -> Result<bool, RunError> {
    let model = quadratic_model(cfg)?;
    let m0 = model.initial_densities(&grid_1d(cfg)?)?.remove(0);
    let cmp = compare_brs_mfg(&model, &m0, cfg.get("mfg.n_t")?, &picard_config(cfg)?, cfg.get("fpk.cfl")?)?;
    out.write("comparison.csv", |w| io::write_comparison(w, &cmp))?;
    out.write("iterations.csv", |w| io::write_iteration_log(w, &cmp.mfg.log))?;
    report.num("max_w1", cmp.max_w1);
    report.num("terminal_w1", *cmp.w1.last().expect("nonempty profile"));
    report.text("mfg.converged", cmp.mfg.converged);
    report.text("note", "BRS uses the terminal cost scaled by 1/T; the MFG terminal condition is unscaled");
    Ok(cmp.mfg.converged)
}

fn run_chaos(cfg: &RunConfig, out: &Output<'_>, report: &mut Report) -> Result<(), RunError> {
    let model = quadratic_model(cfg)?;
    let t_final: f64 = cfg.get("chaos.t_final")?;
    let base = SimConfig { t_final, record_every: 1, ..sim_config(cfg, model.horizon(), "sim.t_final")? };
    let m0 = model.initial_densities(&grid_1d(cfg)?)?;
    let (reference, rep) = solve_fpk(&model, &m0, &fpk_config(cfg, 1, t_final, 1)?)?;
    report.fpk("reference.", &rep);
    let n_list: Vec<usize> = cfg.list("chaos.n_list")?;
    let count: u64 = cfg.get("chaos.seeds")?;
    let seed0: u64 = cfg.get("chaos.seed_base")?;
    let seeds: Vec<u64> = (seed0..seed0 + count).collect();
    let rows = propagation_of_chaos_study(&model, &base, &mpc_config(cfg)?, &n_list, &reference, &seeds)?;
    out.write("chaos.csv", |w| io::write_chaos_table(w, &rows))?;
    for r in &rows {
        report.num(format!("mean_w1.n{}", r.n), r.mean_w1);
        report.num(format!("std_error.n{}", r.n), r.std_error);
    }
    if let (Some(a), Some(b)) = (rows.first(), rows.last()) {
        report.num("ratio_first_last", a.mean_w1 / b.mean_w1);
    }
    Ok(())
}

fn run_mpc_order(cfg: &RunConfig, out: &Output<'_>, report: &mut Report) -> Result<(), RunError> {
    let model = quadratic_model(cfg)?;
    let table = mpc_reduction_check(&model, &grid_1d(cfg)?, &cfg.list::<f64>("mpc.dt_list")?)?;
    out.write("mpc_order.csv", |w| io::write_reduction_table(w, &table))?;
    for r in &table.rows {
        report.num(format!("error.dt{}", r.dt), r.error);
    }
    match table.order {
        Some(o) => report.num("fitted_order", o),
        None => report.text("fitted_order", "undefined (zero error)"),
    }
    Ok(())
}

fn wealth_params(cfg: &RunConfig) -> Result<WealthParams, RunError> {
    Ok(WealthParams::with_defaults(
        cfg.get("wealth.kappa")?,
        cfg.get("wealth.v_rate")?,
        cfg.get("wealth.psi_width")?,
        cfg.get("wealth.z_min")?,
        cfg.get("wealth.z_log_std")?,
    ))
}

fn run_wealth(cfg: &RunConfig, out: &Output<'_>, report: &mut Report) -> Result<(), RunError> {
    let params = wealth_params(cfg)?;
    let horizon: f64 = cfg.get("wealth.horizon")?;
    let model = build_wealth_model(&params)?.with_horizon(horizon)?;
    report.text("boundary", "wealth reflected at z_min for particles, no-flux at z_min on the grid");

    let sc = SimConfig {
        n_particles: cfg.get("wealth.n_particles")?,
        t_final: horizon,
        coupling: Coupling::FullEmpirical,
        ..sim_config(cfg, horizon, "sim.t_final")?
    };
    let mpc = mpc_config(cfg)?;
    mpc.validate(horizon)?;
    let rec = simulate(&model, &sc, &BrsPolicy { mpc }, None)?;
    out.write("snapshots.csv", |w| io::write_snapshots(w, &rec))?;
    out.write("metrics.csv", |w| io::write_metrics(w, &rec.metrics))?;
    let min_z = rec.snapshots.iter().flat_map(|s| s.positions(0).chunks_exact(2).map(|p| p[1])).fold(f64::INFINITY, f64::min);
    report.num("particles.min_z", min_z);
    let tf = *rec.times.last().expect("final time");
    report.num("particles.terminal.mean_z", record_value(&rec, tf, "mean.p0.x1").unwrap_or(f64::NAN));

    let grid = wealth_grid(
        &params,
        (cfg.get("wealth.y_min")?, cfg.get("wealth.y_max")?, cfg.get("wealth.y_cells")?),
        cfg.get("wealth.z_max")?,
        cfg.get("wealth.z_cells")?,
    )?;
    let m0 = model.initial_densities(&grid)?;
    let fcfg = FpkConfig { boundaries: vec![[Boundary::NoFlux; 2]; 2], ..fpk_config(cfg, 2, horizon, cfg.get("fpk.record_every")?)? };
    let (path, rep) = solve_fpk(&model, &m0, &fcfg)?;
    out.write("density.csv", |w| io::write_density_path(w, &path, &[("model".into(), "wealth".into())]))?;
    report.fpk("grid.", &rep);
    let mo = moments(&path.final_fields()[0].view(), 1);
    report.num("grid.terminal.mean_z", mo.mean[1]);
    Ok(())
}

fn pair(cfg: &RunConfig, key: &str) -> Result<[f64; 2], RunError> {
    let v: Vec<f64> = cfg.list(key)?;
    <[f64; 2]>::try_from(v).map_err(|_| RunError::Invalid(format!("`{key}` needs two comma-separated numbers")))
}

pub fn crowd_params(cfg: &RunConfig) -> Result<CrowdParams, RunError> {
    let size: f64 = cfg.get("crowd.size")?;
    let cells: usize = cfg.get("crowd.cells")?;
    let std: f64 = cfg.get("crowd.init_std")?;
    let weight: f64 = cfg.get("crowd.target_weight")?;
    let (s0, s1) = (pair(cfg, "crowd.start0")?, pair(cfg, "crowd.start1")?);
    Ok(CrowdParams {
        lambda: cfg.get("crowd.lambda")?,
        sigma: pair(cfg, "crowd.sigma")?,
        terminal: [quadratic_target(pair(cfg, "crowd.target0")?, weight), quadratic_target(pair(cfg, "crowd.target1")?, weight)],
        domain: [Axis::new(0.0, size, cells), Axis::new(0.0, size, cells)],
        kde_bandwidth: cfg.get("crowd.kde_bandwidth")?,
        horizon: cfg.get("crowd.horizon")?,
        initial: [InitialLaw::gaussian(s0.to_vec(), vec![std, std]), InitialLaw::gaussian(s1.to_vec(), vec![std, std])],
    })
}

/// `field` reflected across the vertical midline of its grid.
pub fn mirror_x(field: &GridDensity) -> Result<GridDensity, MeasureError> {
    let grid = field.grid().clone();
    let nx = grid.axis(0).cells;
    let vals = field.values();
    let mirrored = (0..vals.len()).map(|c| {
        let (i, row) = (c % nx, c / nx);
        vals[row * nx + (nx - 1 - i)]
    });
    GridDensity::new(grid, mirrored.collect())
}

/// `sup_t L¹` between population 0 and population 1, and between
/// population 1 and the mirror image of population 0.
fn crowd_gaps(path: &DensityPath) -> Result<(f64, f64), MeasureError> {
    let (mut same, mut mirror) = (0.0f64, 0.0f64);
    for f in &path.fields {
        same = same.max(f[0].l1_distance(&f[1]));
        mirror = mirror.max(mirror_x(&f[0])?.l1_distance(&f[1]));
    }
    Ok((same, mirror))
}

fn run_crowd(cfg: &RunConfig, out: &Output<'_>, report: &mut Report) -> Result<(), RunError> {
    let params = crowd_params(cfg)?;
    let model = build_crowd_model(&params)?;
    let t_final = cfg.time("crowd.t_final", params.horizon)?;
    let grid = params.grid()?;
    let m0 = crowd_initial_densities(&params, &model, &grid)?;
    let fcfg = fpk_config(cfg, 2, t_final, cfg.get("fpk.record_every")?)?;
    let (path, rep) = solve_fpk(&model, &m0, &fcfg)?;
    out.write("density.csv", |w| io::write_density_path(w, &path, &[("model".into(), "crowd".into())]))?;
    report.fpk("", &rep);
    report.num("overlap.initial", overlap(&path.fields[0][0], &path.fields[0][1]));
    let last = path.final_fields();
    report.num("overlap.final", overlap(&last[0], &last[1]));
    let (same, mirror) = crowd_gaps(&path)?;
    report.num("population_gap_l1", same);
    report.num("mirror_gap_l1", mirror);

    let n: usize = cfg.get("crowd.n_particles")?;
    if n > 0 {
        let sc = SimConfig { n_particles: n, t_final, ..sim_config(cfg, params.horizon, "sim.t_final")? };
        let mpc = mpc_config(cfg)?;
        mpc.validate(params.horizon)?;
        let rec = simulate(&model, &sc, &BrsPolicy { mpc }, None)?;
        out.write("snapshots.csv", |w| io::write_snapshots(w, &rec))?;
        out.write("metrics.csv", |w| io::write_metrics(w, &rec.metrics))?;
        let tf = *rec.times.last().expect("final time");
        for p in 0..2 {
            report.num(format!("particles.terminal.mean.p{p}.x0"), record_value(&rec, tf, &format!("mean.p{p}.x0")).unwrap_or(f64::NAN));
        }
    }
    Ok(())
}
