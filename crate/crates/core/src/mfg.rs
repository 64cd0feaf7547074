//! The coupled mean-field-game system in one dimension: the backward HJB
//! equation for the value `w`,
//! `∂_t w = |∇w|²/(2α) − h(x, m_t) − f·∇w − ½σ²Δw`, `w(T) = g`,
//! and the forward Fokker–Planck equation with velocity `f − (1/α)∇w`,
//! coupled by damped Picard iteration.

use rayon::prelude::*;
use thiserror::Error;

use crate::fokker_planck::{face_position, solve_fpk, solve_fpk_with, DensityPath, FaceVelocity, FpkConfig, FpkError};
use crate::measures::{wasserstein_1d, FvGrid, GridDensity, MeasureError, MeasureView};
use crate::model::{ModelError, ModelSpec};

/// Growth factor of `max|w|` (relative to the terminal data) treated as
/// blow-up.
const BLOW_UP: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MfgError {
    #[error("HJB unstable, refine grid/time (max |w| = {max_abs} at t = {t})")]
    Unstable { t: f64, max_abs: f64 },
    #[error("invalid MFG input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Fpk(#[from] FpkError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

/// Grid values of `w(t, ·)` on uniform time slices.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueField {
    pub grid: FvGrid,
    pub times: Vec<f64>,
    /// `values[k][cell]` at `times[k]`.
    pub values: Vec<Vec<f64>>,
}

/// Central differences with quadratic ghost values `w_{-1} = 3w₀ − 3w₁ + w₂`
/// (and symmetrically at the right end); returns `(∇w, Δw)`.
fn derivatives(w: &[f64], dx: f64, grad: &mut [f64], lap: &mut [f64]) {
    let n = w.len();
    let ghost_l = 3.0 * w[0] - 3.0 * w[1] + w[2];
    let ghost_r = 3.0 * w[n - 1] - 3.0 * w[n - 2] + w[n - 3];
    let (inv2, inv_sq) = (0.5 / dx, 1.0 / (dx * dx));
    for i in 0..n {
        let l = if i == 0 { ghost_l } else { w[i - 1] };
        let r = if i + 1 == n { ghost_r } else { w[i + 1] };
        grad[i] = (r - l) * inv2;
        lap[i] = (r - 2.0 * w[i] + l) * inv_sq;
    }
}

impl ValueField {
    pub fn gradient(&self, k: usize) -> Vec<f64> {
        let n = self.grid.cell_count();
        let (mut g, mut l) = (vec![0.0; n], vec![0.0; n]);
        derivatives(&self.values[k], self.grid.axis(0).width(), &mut g, &mut l);
        g
    }

    /// Cell gradient at time `t`, linear in time between slices.
    pub fn gradient_at_time(&self, t: f64) -> Vec<f64> {
        let n = self.times.len();
        let k = self.times.partition_point(|&s| s <= t).clamp(1, n - 1) - 1;
        let w = ((t - self.times[k]) / (self.times[k + 1] - self.times[k])).clamp(0.0, 1.0);
        let (a, b) = (self.gradient(k), self.gradient(k + 1));
        a.iter().zip(&b).map(|(x, y)| (1.0 - w) * x + w * y).collect()
    }
}

/// Where the HJB equation reads the population measure.
#[derive(Clone, Copy)]
enum MeasureSource<'a> {
    Path(&'a DensityPath),
    Frozen(&'a GridDensity),
}

struct HjbWindow<'a> {
    model: &'a ModelSpec,
    grid: &'a FvGrid,
    t_start: f64,
    t_end: f64,
    n_t: usize,
    running_scale: f64,
    terminal_scale: f64,
    measure: MeasureSource<'a>,
    min_substeps: usize,
    cfl: f64,
}

fn eval_on_midpoints(grid: &FvGrid, m: &[MeasureView<'_>], f: impl Fn(&[f64], &[MeasureView<'_>]) -> f64 + Sync) -> Vec<f64> {
    (0..grid.cell_count()).into_par_iter().map(|c| f(&[grid.axis(0).midpoint(c)], m)).collect()
}

impl HjbWindow<'_> {
    fn solve(&self) -> Result<ValueField, MfgError> {
        let model = self.model;
        if model.dim() != 1 || self.grid.dim() != 1 {
            return Err(MfgError::Invalid("the MFG solver is one-dimensional".into()));
        }
        if model.population_count() != 1 {
            return Err(MfgError::Invalid("the MFG solver handles a single population".into()));
        }
        if self.n_t == 0 {
            return Err(MfgError::Invalid("n_t must be at least 1".into()));
        }
        let spec = model.population(0)?;
        let grid = self.grid;
        let n = grid.cell_count();
        if n < 3 {
            return Err(MfgError::Invalid("need at least three cells".into()));
        }
        let dx = grid.axis(0).width();
        let slice_dt = (self.t_end - self.t_start) / self.n_t as f64;
        let times: Vec<f64> = (0..=self.n_t).map(|k| if k == self.n_t { self.t_end } else { self.t_start + slice_dt * k as f64 }).collect();

        let measure_at = |t: f64| -> Result<GridDensity, MfgError> {
            match self.measure {
                MeasureSource::Path(p) => Ok(p.density_at_time(t, 0)?),
                MeasureSource::Frozen(g) => Ok(g.clone()),
            }
        };
        let m_t = measure_at(self.t_end)?;
        let views = [m_t.view()];
        let ts = self.terminal_scale;
        let mut w = eval_on_midpoints(grid, &views, |x, m| ts * spec.terminal_cost.value(x, m));
        let scale = w.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        let mut values = vec![Vec::new(); self.n_t + 1];
        values[self.n_t] = w.clone();

        let (mut grad, mut lap) = (vec![0.0; n], vec![0.0; n]);
        let mut drift = vec![0.0; n];
        let mut sig = vec![0.0; n];
        let mut t = self.t_end;
        for k in (0..self.n_t).rev() {
            let target = times[k];
            let mut taken = 0usize;
            while t > target {
                let m_now = measure_at(t)?;
                let views = [m_now.view()];
                let a = model.checked_alpha(0, t)?;
                let h = eval_on_midpoints(grid, &views, |x, m| spec.running_cost.value(x, m));
                let mut f_buf = [0.0];
                let mut s_buf = [0.0];
                for c in 0..n {
                    let x = [grid.axis(0).midpoint(c)];
                    model.drift_into(0, &x, &views, &mut f_buf)?;
                    drift[c] = f_buf[0];
                    spec.diffusion.eval_into(t, &x, &mut s_buf);
                    sig[c] = s_buf[0] * s_buf[0];
                }
                derivatives(&w, dx, &mut grad, &mut lap);
                let rate = (0..n).map(|c| sig[c] / (dx * dx) + (drift[c].abs() + grad[c].abs() / a) / dx).fold(0.0, f64::max);
                let remaining = t - target;
                let left_substeps = self.min_substeps.saturating_sub(taken).max(1) as f64;
                let mut delta = (remaining / left_substeps).min(if rate > 0.0 { self.cfl / rate } else { f64::INFINITY });
                if delta >= remaining * (1.0 - 1e-12) {
                    delta = remaining;
                }
                let rs = self.running_scale;
                for c in 0..n {
                    w[c] += delta * (rs * h[c] + drift[c] * grad[c] + 0.5 * sig[c] * lap[c] - grad[c] * grad[c] / (2.0 * a));
                }
                t = if delta == remaining { target } else { t - delta };
                taken += 1;
                let max_abs = w.iter().fold(0.0f64, |acc, v| if v.is_finite() { acc.max(v.abs()) } else { f64::INFINITY });
                if max_abs > BLOW_UP * scale.max(rs * h.iter().fold(0.0f64, |acc, v| acc.max(v.abs())) * (self.t_end - self.t_start)) {
                    return Err(MfgError::Unstable { t, max_abs });
                }
            }
            values[k] = w.clone();
        }
        Ok(ValueField { grid: grid.clone(), times, values })
    }
}

/// Marches `w` backward from `w(T) = g` on `n_t` uniform slices, reading
/// `m_t` from `density_path` (linear in time between records).
pub fn hjb_backward(model: &ModelSpec, density_path: &DensityPath, grid: &FvGrid, n_t: usize) -> Result<ValueField, MfgError> {
    let horizon = model.horizon();
    let (first, last) = match (density_path.times.first(), density_path.times.last()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => return Err(MfgError::Invalid("empty density path".into())),
    };
    if first > 1e-9 || last < horizon - 1e-9 {
        return Err(MfgError::Invalid(format!("density path covers [{first}, {last}], need [0, {horizon}]")));
    }
    if density_path.fields[0][0].grid() != grid {
        return Err(MfgError::Invalid("density path lives on a different grid".into()));
    }
    HjbWindow {
        model,
        grid,
        t_start: 0.0,
        t_end: horizon,
        n_t,
        running_scale: 1.0,
        terminal_scale: 1.0,
        measure: MeasureSource::Path(density_path),
        min_substeps: 1,
        cfl: 0.45,
    }
    .solve()
}

/// MFG velocity `f − (1/α)∇w`; the face gradient averages the two adjacent
/// cell gradients, so the FPK sees the gradient used inside the HJB update.
pub struct ValueVelocity<'a> {
    pub model: &'a ModelSpec,
    pub value: &'a ValueField,
}

impl FaceVelocity for ValueVelocity<'_> {
    fn face_velocities(&self, pop: usize, t: f64, fields: &[GridDensity], out: &mut [Vec<f64>]) -> Result<(), FpkError> {
        let grad = self.value.gradient_at_time(t);
        let a = self.model.checked_alpha(pop, t)?;
        let grid = fields[pop].grid();
        let n = grid.cell_count();
        let views: Vec<MeasureView<'_>> = fields.iter().map(|g| g.view()).collect();
        let mut x = [0.0];
        let mut f = [0.0];
        for (j, v) in out[0].iter_mut().enumerate() {
            face_position(grid, 0, j, &mut x);
            self.model.drift_into(pop, &x, &views, &mut f)?;
            let g = match j {
                0 => grad[0],
                j if j == n => grad[n - 1],
                j => 0.5 * (grad[j - 1] + grad[j]),
            };
            *v = f[0] - g / a;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PicardConfig {
    pub max_iters: usize,
    /// `m ← θ·m_new + (1−θ)·m`.
    pub damping: f64,
    /// Threshold on the `sup_t L¹` distance between successive FPK outputs.
    pub tol: f64,
}

impl Default for PicardConfig {
    fn default() -> Self {
        Self { max_iters: 30, damping: 0.5, tol: 1e-4 }
    }
}

impl PicardConfig {
    fn validate(&self) -> Result<(), MfgError> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(MfgError::Invalid(format!("damping must lie in (0, 1], got {}", self.damping)));
        }
        if !(self.tol > 0.0) || self.max_iters == 0 {
            return Err(MfgError::Invalid("tol must be positive and max_iters at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRow {
    pub iter: usize,
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct MfgSolution {
    pub value: ValueField,
    /// Forward density induced by `value`.
    pub density: DensityPath,
    pub log: Vec<IterationRow>,
    pub converged: bool,
}

fn fpk_for_slices(n_t: usize, horizon: f64, cfl: f64) -> FpkConfig {
    FpkConfig { cfl_safety: cfl, boundaries: Vec::new(), t0: 0.0, t_final: horizon, record_every: n_t }
}

/// Damped Picard iteration. The residual of iteration `k` is the
/// `sup_t L¹` distance between the FPK outputs of iterations `k` and `k−1`
/// (iteration 0 is the constant path `m₀`), so a fixed point reached after
/// one pass shows a zero residual at iteration 2. Non-convergence is logged
/// and reported, not raised.
pub fn solve_mfg_picard(model: &ModelSpec, m0: &GridDensity, n_t: usize, cfg: &PicardConfig, fpk_cfl: f64) -> Result<MfgSolution, MfgError> {
    cfg.validate()?;
    let grid = m0.grid().clone();
    let fpk_cfg = fpk_for_slices(n_t, model.horizon(), fpk_cfl);
    let constant = DensityPath { times: fpk_cfg.record_times(), fields: vec![vec![m0.clone()]; n_t + 1] };
    let mut current = constant.clone();
    let mut previous_output = constant;
    let mut log = Vec::new();
    let mut last = None;
    let mut converged = false;
    for iter in 1..=cfg.max_iters {
        let value = hjb_backward(model, &current, &grid, n_t)?;
        let (density, _) = solve_fpk_with(model, &ValueVelocity { model, value: &value }, std::slice::from_ref(m0), &fpk_cfg)?;
        let residual = density.sup_l1_distance(&previous_output)?;
        log.push(IterationRow { iter, residual });
        let fields = current
            .fields
            .iter()
            .zip(&density.fields)
            .map(|(old, new)| Ok(vec![new[0].blend(cfg.damping, &old[0], 1.0 - cfg.damping)?]))
            .collect::<Result<_, MeasureError>>()?;
        current = DensityPath { times: density.times.clone(), fields };
        previous_output = density.clone();
        last = Some((value, density));
        if iter > 1 && residual <= cfg.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("Picard iteration did not reach tol {} in {} iterations", cfg.tol, cfg.max_iters);
    }
    let (value, density) = last.expect("at least one iteration");
    Ok(MfgSolution { value, density, log, converged })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReductionRow {
    pub dt: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReductionTable {
    pub rows: Vec<ReductionRow>,
    /// Least-squares slope of `log error` against `log Δt`; `None` when some
    /// error vanishes.
    pub order: Option<f64>,
}

/// Least-squares slope of `log y` against `log x`.
pub fn fit_order(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() < 2 || ys.iter().any(|&y| !(y > 0.0)) {
        return None;
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    Some(sxy / sxx)
}

/// For each window length `Δt`, solves the one-window HJB problem on
/// `[0, Δt]` (running cost `h/Δt`, terminal cost `g/T`, measure frozen at
/// `m₀`) and reports `‖w_window(0, ·) − (h + g/T)(·, m₀)‖_∞` on the grid.
pub fn mpc_reduction_check(model: &ModelSpec, grid: &FvGrid, dt_list: &[f64]) -> Result<ReductionTable, MfgError> {
    if dt_list.is_empty() || dt_list.windows(2).any(|w| w[1] >= w[0]) || dt_list.iter().any(|&d| !(d > 0.0)) {
        return Err(MfgError::Invalid("dt_list must be positive and strictly decreasing".into()));
    }
    let m0 = model.initial_densities(grid)?.remove(0);
    let spec = model.population(0)?;
    let views = [m0.view()];
    let horizon = model.horizon();
    let surrogate = eval_on_midpoints(grid, &views, |x, m| spec.running_cost.value(x, m) + spec.terminal_cost.value(x, m) / horizon);
    let rows = dt_list
        .iter()
        .map(|&dt| -> Result<ReductionRow, MfgError> {
            let w = HjbWindow {
                model,
                grid,
                t_start: 0.0,
                t_end: dt,
                n_t: 1,
                running_scale: 1.0 / dt,
                terminal_scale: 1.0 / horizon,
                measure: MeasureSource::Frozen(&m0),
                min_substeps: 400,
                cfl: 0.45,
            }
            .solve()?;
            let error = w.values[0].iter().zip(&surrogate).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            Ok(ReductionRow { dt, error })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let errors: Vec<f64> = rows.iter().map(|r| r.error).collect();
    let order = fit_order(dt_list, &errors);
    Ok(ReductionTable { rows, order })
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub times: Vec<f64>,
    pub w1: Vec<f64>,
    pub max_w1: f64,
    pub brs: DensityPath,
    pub mfg: MfgSolution,
}

/// Runs the BRS Fokker–Planck equation and the MFG system from the same
/// `m₀` and reports `W₁` between the two densities at every time slice.
pub fn compare_brs_mfg(model: &ModelSpec, m0: &GridDensity, n_t: usize, picard: &PicardConfig, fpk_cfl: f64) -> Result<Comparison, MfgError> {
    if model.dim() != 1 {
        return Err(MfgError::Invalid("comparison needs d = 1".into()));
    }
    let fpk_cfg = fpk_for_slices(n_t, model.horizon(), fpk_cfl);
    let (brs, _) = solve_fpk(model, std::slice::from_ref(m0), &fpk_cfg)?;
    let mfg = solve_mfg_picard(model, m0, n_t, picard, fpk_cfl)?;
    let w1 = brs.fields.iter().zip(&mfg.density.fields).map(|(a, b)| wasserstein_1d(&a[0].view(), &b[0].view(), 1)).collect::<Result<Vec<_>, _>>()?;
    let max_w1 = w1.iter().copied().fold(0.0, f64::max);
    Ok(Comparison { times: brs.times.clone(), w1, max_w1, brs, mfg })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::moments;
    use crate::model::{ControlPenalty, CostFunction, DiffusionFunction, PopulationSpec};
    use crate::presets::QuadraticParams;

    fn grid() -> FvGrid {
        FvGrid::uniform_1d(-6.0, 6.0, 400).unwrap()
    }

    fn constant_path(model: &ModelSpec, grid: &FvGrid) -> DensityPath {
        let m0 = model.initial_densities(grid).unwrap().remove(0);
        DensityPath { times: vec![0.0, model.horizon()], fields: vec![vec![m0.clone()], vec![m0]] }
    }

    /// Riccati system `ȧ = 2a²/α − q/2`, `ḃ = −σ²a` for `w = a x² + b`,
    /// integrated backward by RK4.
    fn riccati(q: f64, r: f64, alpha: f64, sigma: f64, horizon: f64, t: f64) -> (f64, f64) {
        let steps = 20_000;
        let h = (horizon - t) / steps as f64;
        let rhs = |a: f64| (2.0 * a * a / alpha - 0.5 * q, -sigma * sigma * a);
        let (mut a, mut b) = (0.5 * r, 0.0);
        for _ in 0..steps {
            // Backward in time: d/ds with s = T − t flips the sign.
            let k1 = rhs(a);
            let k2 = rhs(a - 0.5 * h * k1.0);
            let k3 = rhs(a - 0.5 * h * k2.0);
            let k4 = rhs(a - h * k3.0);
            a -= h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
            b -= h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        }
        (a, b)
    }

    #[test]
    fn zero_costs_give_zero_value() {
        let mut pop = PopulationSpec::basic(1);
        pop.diffusion = DiffusionFunction::constant(vec![1.0]);
        let model = ModelSpec::new(1, 1.0, vec![pop]).unwrap();
        let g = FvGrid::uniform_1d(-3.0, 3.0, 60).unwrap();
        let w = hjb_backward(&model, &constant_path(&model, &g), &g, 10).unwrap();
        assert!(w.values.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn lq_value_matches_riccati() {
        let model = QuadraticParams::lq().build().unwrap();
        let g = grid();
        let w = hjb_backward(&model, &constant_path(&model, &g), &g, 20).unwrap();
        // Terminal slice is g at midpoints exactly.
        for (c, &v) in w.values[20].iter().enumerate() {
            let x = g.axis(0).midpoint(c);
            assert_eq!(v, 0.5 * x * x);
        }
        let mut worst: f64 = 0.0;
        for (k, &t) in w.times.iter().enumerate() {
            let (a, b) = riccati(1.0, 1.0, 1.0, 1.0, 1.0, t);
            assert!((a - 0.5).abs() < 1e-12);
            for (c, &v) in w.values[k].iter().enumerate() {
                let x = g.axis(0).midpoint(c);
                worst = worst.max((v - (a * x * x + b)).abs());
            }
        }
        assert!(worst <= 2e-2, "L∞ error {worst}");
        // Drift −∇w against the oracle drift −x.
        let drift_err = w.gradient(0).iter().enumerate().map(|(c, gw)| (gw - g.axis(0).midpoint(c)).abs()).fold(0.0, f64::max);
        assert!(drift_err <= 3e-2, "{drift_err}");
    }

    #[test]
    fn riccati_oracle_off_the_fixed_point() {
        // r = 2 moves the terminal slope off the fixed point a = 1/2.
        let model = QuadraticParams { terminal_weight: 2.0, ..QuadraticParams::lq() }.build().unwrap();
        let g = grid();
        let w = hjb_backward(&model, &constant_path(&model, &g), &g, 10).unwrap();
        let (a, b) = riccati(1.0, 2.0, 1.0, 1.0, 1.0, 0.0);
        let err = w.values[0]
            .iter()
            .enumerate()
            .filter(|(c, _)| g.axis(0).midpoint(*c).abs() <= 3.0)
            .map(|(c, v)| {
                let x = g.axis(0).midpoint(c);
                (v - (a * x * x + b)).abs()
            })
            .fold(0.0, f64::max);
        assert!(err <= 2e-2, "{err}");
    }

    #[test]
    fn linear_terminal_cost_follows_characteristics() {
        for alpha in [1.0, 2.0] {
            let mut pop = PopulationSpec::basic(1);
            pop.terminal_cost = CostFunction::local(|x| x[0], |_, g| g[0] = 1.0);
            pop.diffusion = DiffusionFunction::constant(vec![0.0]);
            pop.penalty = ControlPenalty::constant(alpha);
            let model = ModelSpec::new(1, 1.0, vec![pop]).unwrap();
            let g = FvGrid::uniform_1d(-3.0, 3.0, 60).unwrap();
            let w = hjb_backward(&model, &constant_path(&model, &g), &g, 4).unwrap();
            for (k, &t) in w.times.iter().enumerate() {
                for (c, &v) in w.values[k].iter().enumerate() {
                    let x = g.axis(0).midpoint(c);
                    assert!((v - (x - (1.0 - t) / (2.0 * alpha))).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn blow_up_is_reported() {
        // g = −x², α = 0.1: the Riccati coefficient a(s) = −1/(1 − 20s)
        // diverges at s = T − t = 0.05.
        let mut pop = PopulationSpec::basic(1);
        pop.terminal_cost = CostFunction::local(|x| -x[0] * x[0], |x, g| g[0] = -2.0 * x[0]);
        pop.diffusion = DiffusionFunction::constant(vec![0.0]);
        pop.penalty = ControlPenalty::constant(0.1);
        let model = ModelSpec::new(1, 1.0, vec![pop]).unwrap();
        let g = FvGrid::uniform_1d(-3.0, 3.0, 60).unwrap();
        let err = hjb_backward(&model, &constant_path(&model, &g), &g, 2).unwrap_err();
        assert!(err.to_string().contains("HJB unstable, refine grid/time"), "{err}");
    }

    #[test]
    fn decoupled_picard_reaches_fixed_point_immediately() {
        let model = QuadraticParams::lq().build().unwrap();
        let g = FvGrid::uniform_1d(-5.0, 5.0, 100).unwrap();
        let m0 = model.initial_densities(&g).unwrap().remove(0);
        let sol = solve_mfg_picard(&model, &m0, 10, &PicardConfig::default(), 0.9).unwrap();
        assert!(sol.converged);
        assert_eq!(sol.log.len(), 2);
        assert!(sol.log[1].residual <= 1e-12);
        // Drift −x from N(0.5, 0.25) with σ = 1: variance 1/2 + (1/4 − 1/2)e^{−2t}.
        let v = moments(&sol.density.final_fields()[0].view(), 2).variance.unwrap()[0];
        let expect = 0.5 - 0.25 * (-2.0f64).exp();
        assert!((v - expect).abs() <= 0.03 * expect, "{v} vs {expect}");
    }

    #[test]
    fn mean_coupled_residuals_decrease() {
        let model = QuadraticParams::lq_mean().build().unwrap();
        let g = FvGrid::uniform_1d(-5.0, 5.0, 100).unwrap();
        let m0 = model.initial_densities(&g).unwrap().remove(0);
        let sol = solve_mfg_picard(&model, &m0, 10, &PicardConfig { max_iters: 8, damping: 0.5, tol: 1e-10 }, 0.9).unwrap();
        assert!(sol.log.windows(2).all(|w| w[1].residual < w[0].residual), "{:?}", sol.log);
    }

    #[test]
    fn reduction_check_examples() {
        let mut pop = PopulationSpec::basic(1);
        pop.running_cost = CostFunction::local(|_| 2.5, |_, g| g[0] = 0.0);
        let model = ModelSpec::new(1, 1.0, vec![pop]).unwrap();
        let g = FvGrid::uniform_1d(-3.0, 3.0, 40).unwrap();
        let table = mpc_reduction_check(&model, &g, &[0.1, 0.05]).unwrap();
        assert!(table.rows.iter().all(|r| r.error < 1e-12), "{table:?}");

        let model = QuadraticParams::lq().build().unwrap();
        let table = mpc_reduction_check(&model, &grid(), &[0.1, 0.05, 0.025, 0.0125]).unwrap();
        let order = table.order.unwrap();
        assert!((order - 1.0).abs() <= 0.3, "{table:?}");
        for w in table.rows.windows(2) {
            let ratio = w[0].error / w[1].error;
            assert!((ratio - 2.0).abs() <= 0.8, "{ratio}");
        }
        assert!(mpc_reduction_check(&model, &grid(), &[0.05, 0.1]).is_err());
    }

    #[test]
    fn fit_order_recovers_slope() {
        let xs = [0.1, 0.05, 0.025];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.5)).collect();
        assert!((fit_order(&xs, &ys).unwrap() - 1.5).abs() < 1e-12);
        assert!(fit_order(&xs, &[1.0, 0.0, 1.0]).is_none());
    }

    #[test]
    fn comparison_without_costs_is_zero() {
        let model = ModelSpec::new(1, 1.0, vec![PopulationSpec::basic(1)]).unwrap();
        let g = FvGrid::uniform_1d(-5.0, 5.0, 80).unwrap();
        let m0 = model.initial_densities(&g).unwrap().remove(0);
        let cmp = compare_brs_mfg(&model, &m0, 5, &PicardConfig::default(), 0.9).unwrap();
        assert_eq!(cmp.max_w1, 0.0);
    }

    #[test]
    fn comparison_reports_lq_gap() {
        let model = QuadraticParams::lq().build().unwrap();
        let g = FvGrid::uniform_1d(-5.0, 5.0, 100).unwrap();
        let m0 = model.initial_densities(&g).unwrap().remove(0);
        let cmp = compare_brs_mfg(&model, &m0, 10, &PicardConfig::default(), 0.9).unwrap();
        // BRS drift is −2x, MFG drift is −x: the profiles separate.
        assert!(cmp.max_w1 > 1e-3 && cmp.max_w1.is_finite());
        assert_eq!(cmp.w1[0], 0.0);
    }

    #[test]
    fn mean_coupling_gap_is_continuous_in_strength() {
        let g = FvGrid::uniform_1d(-5.0, 5.0, 80).unwrap();
        let gap = |c: f64| {
            let model = QuadraticParams { mean_coupling: c, ..QuadraticParams::lq() }.build().unwrap();
            let m0 = model.initial_densities(&g).unwrap().remove(0);
            compare_brs_mfg(&model, &m0, 8, &PicardConfig::default(), 0.9).unwrap().w1
        };
        let base = gap(0.0);
        let small = gap(1e-6);
        let diff = base.iter().zip(&small).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-4, "{diff}");
    }
}
