//! Explicit finite-volume solver for
//! `∂_t m = −∇·(b m) + ½ Σ_k ∂²_{x_k}(σ_k² m)`, where `b` is the velocity of
//! the particles (for the BRS, `b = f − (1/α)∇(h + g/T)`).
//!
//! The diffusive flux across a face is `−(D_R m_R − D_L m_L)/Δx` with
//! `D = σ²/2`, so the operator is the conservative second difference of
//! `σ² m`. Advective face fluxes are centered where the local Péclet number
//! allows it without losing positivity and upwinded elsewhere; pure transport
//! is therefore plain upwind. The step size keeps every cell's total outflow
//! rate below `cfl_safety/dt`, which makes the update a convex combination.

use rayon::prelude::*;
use smallvec::SmallVec;
use thiserror::Error;

use crate::measures::{FvGrid, GridDensity, MeasureError, MeasureView};
use crate::model::{Buf, ModelError, ModelSpec};
use crate::particle_sim::{ReferenceLaw, ReferenceMeasure, TIME_MATCH_TOL};

/// Negative cell values down to this are accepted as rounding.
pub const NEGATIVE_TOL: f64 = 1e-13;
/// Boundary mass above this is flagged in reports.
pub const BOUNDARY_MASS_FLAG: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FpkError {
    #[error("CFL violated on axis {axis}, face {face}: dt = {dt} exceeds stable {limit}")]
    Cfl { axis: usize, face: usize, dt: f64, limit: f64 },
    #[error("negative density {value} in cell {cell} of population {pop}")]
    Negative { pop: usize, cell: usize, value: f64 },
    #[error("non-finite velocity on axis {axis}, face {face} of population {pop}")]
    NonFiniteVelocity { pop: usize, axis: usize, face: usize },
    #[error("invalid solver input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Boundary {
    #[default]
    NoFlux,
    /// Zero density outside the box: outgoing mass leaves the domain.
    Absorbing,
}

impl std::str::FromStr for Boundary {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "no_flux" => Ok(Boundary::NoFlux),
            "absorbing" => Ok(Boundary::Absorbing),
            _ => Err(format!("unknown boundary '{s}' (expected no_flux or absorbing)")),
        }
    }
}

impl std::fmt::Display for Boundary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Boundary::NoFlux => "no_flux",
            Boundary::Absorbing => "absorbing",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FpkConfig {
    pub cfl_safety: f64,
    /// `[low, high]` per axis; missing axes default to no-flux.
    pub boundaries: Vec<[Boundary; 2]>,
    pub t0: f64,
    pub t_final: f64,
    /// Number of equal record intervals over `[t0, t_final]`.
    pub record_every: usize,
}

impl Default for FpkConfig {
    fn default() -> Self {
        Self { cfl_safety: 0.9, boundaries: Vec::new(), t0: 0.0, t_final: 1.0, record_every: 10 }
    }
}

impl FpkConfig {
    fn boundary(&self, axis: usize) -> [Boundary; 2] {
        self.boundaries.get(axis).copied().unwrap_or_default()
    }

    pub fn all_no_flux(&self) -> bool {
        self.boundaries.iter().all(|b| b[0] == Boundary::NoFlux && b[1] == Boundary::NoFlux)
    }

    pub fn record_times(&self) -> Vec<f64> {
        let n = self.record_every.max(1);
        let span = self.t_final - self.t0;
        (0..=n).map(|k| if k == n { self.t_final } else { self.t0 + span * k as f64 / n as f64 }).collect()
    }

    fn validate(&self) -> Result<(), FpkError> {
        if !(self.cfl_safety > 0.0 && self.cfl_safety <= 1.0) {
            return Err(FpkError::Invalid(format!("cfl_safety must lie in (0, 1], got {}", self.cfl_safety)));
        }
        if !(self.t_final > self.t0) {
            return Err(FpkError::Invalid(format!("t_final ({}) must exceed t0 ({})", self.t_final, self.t0)));
        }
        if self.record_every == 0 {
            return Err(FpkError::Invalid("record_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// Number of faces normal to `axis` and the number of lines along it.
/// Face `j` of line `o` is stored at `o·(n_axis + 1) + j`.
pub fn face_count(grid: &FvGrid, axis: usize) -> usize {
    let n = grid.axis(axis).cells;
    (n + 1) * (grid.cell_count() / n)
}

/// Position of face `f` normal to `axis`.
pub fn face_position(grid: &FvGrid, axis: usize, f: usize, out: &mut [f64]) {
    let n = grid.axis(axis).cells;
    let (o, j) = (f / (n + 1), f % (n + 1));
    out[axis] = grid.axis(axis).face(j);
    if grid.dim() == 2 {
        let other = 1 - axis;
        out[other] = grid.axis(other).midpoint(o);
    }
}

/// Cell index of the `i`-th cell on line `o` along `axis`.
fn cell_on_line(grid: &FvGrid, axis: usize, o: usize, i: usize) -> usize {
    if grid.dim() == 1 {
        i
    } else if axis == 0 {
        i + o * grid.axis(0).cells
    } else {
        o + i * grid.axis(0).cells
    }
}

/// Particle velocity on cell faces, evaluated once per step from the frozen
/// current densities.
pub trait FaceVelocity: Sync {
    /// Writes velocities of population `pop` into `out[axis][face]`.
    fn face_velocities(&self, pop: usize, t: f64, fields: &[GridDensity], out: &mut [Vec<f64>]) -> Result<(), FpkError>;
}

/// BRS velocity `f − (1/α)∇(h + g/T)` evaluated at face centers against the
/// grid densities of all populations.
pub struct BrsVelocity<'a> {
    pub model: &'a ModelSpec,
}

impl FaceVelocity for BrsVelocity<'_> {
    fn face_velocities(&self, pop: usize, t: f64, fields: &[GridDensity], out: &mut [Vec<f64>]) -> Result<(), FpkError> {
        let views: SmallVec<[MeasureView<'_>; 2]> = fields.iter().map(|g| g.view()).collect();
        let grid = fields[pop].grid();
        let d = grid.dim();
        for (axis, faces) in out.iter_mut().enumerate() {
            faces.par_iter_mut().enumerate().try_for_each_init(
                || (Buf::from_elem(0.0, d), Buf::from_elem(0.0, d), Buf::from_elem(0.0, d)),
                |(x, b, s), (f, v)| -> Result<(), ModelError> {
                    face_position(grid, axis, f, x);
                    self.model.brs_drift_into(pop, t, x, &views, b, s)?;
                    *v = b[axis];
                    Ok(())
                },
            )?;
        }
        Ok(())
    }
}

/// Per-population solver workspace.
struct Workspace {
    velocity: Vec<Vec<f64>>,
    diff: Vec<Vec<f64>>,
}

impl Workspace {
    fn new(grid: &FvGrid) -> Self {
        Self {
            velocity: (0..grid.dim()).map(|k| vec![0.0; face_count(grid, k)]).collect(),
            diff: (0..grid.dim()).map(|_| vec![0.0; grid.cell_count()]).collect(),
        }
    }
}

/// `D = σ²/2` per axis at cell midpoints.
fn fill_diffusion(model: &ModelSpec, pop: usize, t: f64, grid: &FvGrid, diff: &mut [Vec<f64>]) -> Result<(), FpkError> {
    let d = grid.dim();
    let spec = model.population(pop)?;
    let mut x = [0.0; 2];
    let mut s: Buf = SmallVec::from_elem(0.0, d);
    for c in 0..grid.cell_count() {
        grid.midpoint_into(c, &mut x);
        spec.diffusion.eval_into(t, &x[..d], &mut s);
        for k in 0..d {
            if !s[k].is_finite() || s[k] < 0.0 {
                return Err(FpkError::Invalid(format!("diffusion {} at cell {c} of population {pop}", s[k])));
            }
            diff[k][c] = 0.5 * s[k] * s[k];
        }
    }
    Ok(())
}

/// Coefficients `(c_l, c_r)`, both nonnegative, of the rightward face flux
/// `F = c_l·m_L − c_r·m_R`. Advection is centered when
/// `|v|·Δx ≤ 2·min(D_L, D_R)` (the update then stays positive) and upwinded
/// otherwise. A missing neighbour marks a boundary face; absorbing faces see
/// zero density outside, half a cell away.
#[inline]
fn face_coefficients(v: f64, d_l: Option<f64>, d_r: Option<f64>, dx: f64) -> (f64, f64) {
    match (d_l, d_r) {
        (Some(dl), Some(dr)) => {
            if v.abs() * dx <= 2.0 * dl.min(dr) {
                (0.5 * v + dl / dx, -0.5 * v + dr / dx)
            } else {
                (v.max(0.0) + dl / dx, (-v).max(0.0) + dr / dx)
            }
        }
        (None, Some(dr)) => (0.0, (-v).max(0.0) + 2.0 * dr / dx),
        (Some(dl), None) => (v.max(0.0) + 2.0 * dl / dx, 0.0),
        (None, None) => (0.0, 0.0),
    }
}

/// Visits every face that carries flux with its neighbours and coefficients.
fn for_each_face(grid: &FvGrid, ws: &Workspace, bnd: &[[Boundary; 2]], mut visit: impl FnMut(usize, usize, Option<usize>, Option<usize>, f64, f64)) {
    for axis in 0..grid.dim() {
        let n = grid.axis(axis).cells;
        let dx = grid.axis(axis).width();
        let lines = grid.cell_count() / n;
        for o in 0..lines {
            for j in 0..=n {
                if (j == 0 && bnd[axis][0] == Boundary::NoFlux) || (j == n && bnd[axis][1] == Boundary::NoFlux) {
                    continue;
                }
                let f = o * (n + 1) + j;
                let left = if j > 0 { Some(cell_on_line(grid, axis, o, j - 1)) } else { None };
                let right = if j < n { Some(cell_on_line(grid, axis, o, j)) } else { None };
                let diff = &ws.diff[axis];
                let (cl, cr) = face_coefficients(ws.velocity[axis][f], left.map(|c| diff[c]), right.map(|c| diff[c]), dx);
                visit(axis, f, left, right, cl / dx, cr / dx);
            }
        }
    }
}

/// Largest stable step: every cell's outflow rate times `dt` stays below
/// `cfl_safety`, and `dt ≤ cfl_safety·min(Δx/max|b|, Δx²/max σ²)`.
/// Returns the limit and the face that determines it.
fn stable_dt(grid: &FvGrid, ws: &Workspace, bnd: &[[Boundary; 2]], cfl: f64) -> (f64, usize, usize) {
    let mut rate = vec![0.0; grid.cell_count()];
    let mut worst = (0.0f64, 0usize, 0usize);
    for_each_face(grid, ws, bnd, |axis, f, left, right, rl, rr| {
        if let Some(l) = left {
            rate[l] += rl;
        }
        if let Some(r) = right {
            rate[r] += rr;
        }
        if rl.max(rr) > worst.0 {
            worst = (rl.max(rr), axis, f);
        }
    });
    let mut classic: f64 = 0.0;
    for axis in 0..grid.dim() {
        let dx = grid.axis(axis).width();
        classic = ws.velocity[axis].iter().fold(classic, |acc, v| acc.max(v.abs() / dx));
        classic = ws.diff[axis].iter().fold(classic, |acc, d| acc.max(2.0 * d / (dx * dx)));
    }
    let max_rate = rate.iter().copied().fold(classic, f64::max);
    let limit = if max_rate > 0.0 { cfl / max_rate } else { f64::INFINITY };
    (limit, worst.1, worst.2)
}

/// Applies one explicit update of length `dt` to `m`.
fn update(grid: &FvGrid, m: &[f64], ws: &Workspace, bnd: &[[Boundary; 2]], dt: f64) -> Vec<f64> {
    let mut next = m.to_vec();
    for_each_face(grid, ws, bnd, |_, _, left, right, rl, rr| {
        let flux = dt * (left.map_or(0.0, |l| rl * m[l]) - right.map_or(0.0, |r| rr * m[r]));
        if flux != 0.0 {
            if let Some(l) = left {
                next[l] -= flux;
            }
            if let Some(r) = right {
                next[r] += flux;
            }
        }
    });
    next
}

fn check_grids(fields: &[GridDensity], model: &ModelSpec) -> Result<(), FpkError> {
    if fields.len() != model.population_count() {
        return Err(FpkError::Invalid(format!("{} fields for {} populations", fields.len(), model.population_count())));
    }
    if fields.iter().any(|g| g.grid() != fields[0].grid()) {
        return Err(FpkError::Invalid("populations must share one grid".into()));
    }
    if fields[0].grid().dim() != model.dim() {
        return Err(FpkError::Invalid("grid dimension differs from the model".into()));
    }
    Ok(())
}

fn finalize(pop: usize, grid: &FvGrid, values: Vec<f64>) -> Result<GridDensity, FpkError> {
    if let Some((cell, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < -NEGATIVE_TOL) {
        return Err(FpkError::Negative { pop, cell, value });
    }
    Ok(GridDensity::with_tolerance(grid.clone(), values, NEGATIVE_TOL)?)
}

fn fill_velocities(velocity: &dyn FaceVelocity, pop: usize, t: f64, fields: &[GridDensity], ws: &mut Workspace) -> Result<(), FpkError> {
    velocity.face_velocities(pop, t, fields, &mut ws.velocity)?;
    for (axis, faces) in ws.velocity.iter().enumerate() {
        if let Some(face) = faces.iter().position(|v| !v.is_finite()) {
            return Err(FpkError::NonFiniteVelocity { pop, axis, face });
        }
    }
    Ok(())
}

/// One explicit step of length `dt` under the BRS velocity.
pub fn fpk_step(model: &ModelSpec, fields: &[GridDensity], t: f64, dt: f64, cfg: &FpkConfig) -> Result<Vec<GridDensity>, FpkError> {
    fpk_step_with(model, &BrsVelocity { model }, fields, t, dt, cfg)
}

/// One explicit step of length `dt` under a given face velocity.
pub fn fpk_step_with(
    model: &ModelSpec,
    velocity: &dyn FaceVelocity,
    fields: &[GridDensity],
    t: f64,
    dt: f64,
    cfg: &FpkConfig,
) -> Result<Vec<GridDensity>, FpkError> {
    check_grids(fields, model)?;
    if !(dt > 0.0) {
        return Err(FpkError::Invalid(format!("dt must be positive, got {dt}")));
    }
    let grid = fields[0].grid();
    let bnd: Vec<[Boundary; 2]> = (0..grid.dim()).map(|k| cfg.boundary(k)).collect();
    let mut out = Vec::with_capacity(fields.len());
    let mut ws = Workspace::new(grid);
    for pop in 0..fields.len() {
        fill_velocities(velocity, pop, t, fields, &mut ws)?;
        fill_diffusion(model, pop, t, grid, &mut ws.diff)?;
        let (limit, axis, face) = stable_dt(grid, &ws, &bnd, cfg.cfl_safety);
        if dt > limit * (1.0 + 1e-12) {
            return Err(FpkError::Cfl { axis, face, dt, limit });
        }
        out.push(finalize(pop, grid, update(grid, fields[pop].values(), &ws, &bnd, dt))?);
    }
    Ok(out)
}

/// Densities of every population at the record times.
#[derive(Debug, Clone)]
pub struct DensityPath {
    pub times: Vec<f64>,
    /// `fields[k][pop]` at `times[k]`.
    pub fields: Vec<Vec<GridDensity>>,
}

impl DensityPath {
    /// Index of the recorded time equal to `t` (within a tiny tolerance).
    pub fn index_of(&self, t: f64) -> Option<usize> {
        self.times.iter().position(|s| (s - t).abs() <= TIME_MATCH_TOL)
    }

    /// Density at `t`, linear in time between records and clamped to the
    /// recorded range.
    pub fn density_at_time(&self, t: f64, pop: usize) -> Result<GridDensity, FpkError> {
        let n = self.times.len();
        if n == 0 {
            return Err(FpkError::Invalid("empty density path".into()));
        }
        if t <= self.times[0] {
            return Ok(self.fields[0][pop].clone());
        }
        if t >= self.times[n - 1] {
            return Ok(self.fields[n - 1][pop].clone());
        }
        let k = self.times.partition_point(|&s| s <= t) - 1;
        if t == self.times[k] {
            return Ok(self.fields[k][pop].clone());
        }
        let w = (t - self.times[k]) / (self.times[k + 1] - self.times[k]);
        Ok(self.fields[k][pop].blend(1.0 - w, &self.fields[k + 1][pop], w)?)
    }

    pub fn final_fields(&self) -> &[GridDensity] {
        self.fields.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// Largest `|mass − 1|` over records and populations.
    pub fn max_mass_drift(&self) -> f64 {
        self.fields.iter().flatten().map(|g| (g.mass() - 1.0).abs()).fold(0.0, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.fields.iter().flatten().map(GridDensity::min_value).fold(f64::INFINITY, f64::min)
    }

    /// Largest `sup_t L¹` difference to another path on the same records.
    pub fn sup_l1_distance(&self, other: &DensityPath) -> Result<f64, FpkError> {
        if self.times.len() != other.times.len() {
            return Err(FpkError::Invalid("density paths have different record times".into()));
        }
        let mut worst: f64 = 0.0;
        for (a, b) in self.fields.iter().zip(&other.fields) {
            for (x, y) in a.iter().zip(b) {
                worst = worst.max(x.l1_distance(y));
            }
        }
        Ok(worst)
    }
}

impl ReferenceLaw for DensityPath {
    fn law_at(&self, t: f64, pop: usize) -> Option<ReferenceMeasure<'_>> {
        let k = self.index_of(t)?;
        self.fields[k].get(pop).map(|g| ReferenceMeasure::Borrowed(g.view()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FpkReport {
    pub steps: usize,
    /// Largest `|mass − 1|` per population over the records.
    pub mass_drift: Vec<f64>,
    pub min_value: f64,
    pub max_boundary_mass: f64,
    /// Boundary mass exceeded [`BOUNDARY_MASS_FLAG`] at some record.
    pub boundary_flag: bool,
}

/// Solves with the BRS velocity from `m0` over `[t0, t_final]`.
pub fn solve_fpk(model: &ModelSpec, m0: &[GridDensity], cfg: &FpkConfig) -> Result<(DensityPath, FpkReport), FpkError> {
    solve_fpk_with(model, &BrsVelocity { model }, m0, cfg)
}

/// Adaptive explicit time loop; steps are shortened to land on record times.
pub fn solve_fpk_with(
    model: &ModelSpec,
    velocity: &dyn FaceVelocity,
    m0: &[GridDensity],
    cfg: &FpkConfig,
) -> Result<(DensityPath, FpkReport), FpkError> {
    cfg.validate()?;
    check_grids(m0, model)?;
    for (p, g) in m0.iter().enumerate() {
        if (g.mass() - 1.0).abs() > 1e-10 {
            return Err(FpkError::Invalid(format!("initial mass of population {p} is {}", g.mass())));
        }
    }
    let grid = m0[0].grid().clone();
    let bnd: Vec<[Boundary; 2]> = (0..grid.dim()).map(|k| cfg.boundary(k)).collect();
    let records = cfg.record_times();
    let mut fields = m0.to_vec();
    let mut path = DensityPath { times: vec![cfg.t0], fields: vec![fields.clone()] };
    let mut workspaces: Vec<Workspace> = (0..fields.len()).map(|_| Workspace::new(&grid)).collect();
    let mut t = cfg.t0;
    let mut steps = 0;
    for &target in &records[1..] {
        while t < target {
            // Freeze the measure-dependent velocity for every population, then
            // take a common step.
            let mut dt = target - t;
            for (pop, ws) in workspaces.iter_mut().enumerate() {
                fill_velocities(velocity, pop, t, &fields, ws)?;
                fill_diffusion(model, pop, t, &grid, &mut ws.diff)?;
                dt = dt.min(stable_dt(&grid, ws, &bnd, cfg.cfl_safety).0);
            }
            let last = dt >= target - t;
            let next: Vec<GridDensity> = workspaces
                .iter()
                .enumerate()
                .map(|(pop, ws)| finalize(pop, &grid, update(&grid, fields[pop].values(), ws, &bnd, dt)))
                .collect::<Result<_, _>>()?;
            fields = next;
            t = if last { target } else { t + dt };
            steps += 1;
        }
        path.times.push(target);
        path.fields.push(fields.clone());
    }
    let np = m0.len();
    let mass_drift = (0..np).map(|p| path.fields.iter().map(|f| (f[p].mass() - 1.0).abs()).fold(0.0, f64::max)).collect();
    let max_boundary_mass = path.fields.iter().flatten().map(GridDensity::boundary_mass).fold(0.0, f64::max);
    let report =
        FpkReport { steps, mass_drift, min_value: path.min_value(), max_boundary_mass, boundary_flag: max_boundary_mass > BOUNDARY_MASS_FLAG };
    if report.boundary_flag {
        log::warn!("boundary mass {max_boundary_mass:e} exceeds {BOUNDARY_MASS_FLAG:e}; consider a wider domain");
    }
    Ok((path, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::moments;
    use crate::model::{CostFunction, DiffusionFunction, InitialLaw, PopulationSpec};
    use crate::presets::QuadraticParams;
    use std::sync::Arc;

    fn gaussian_m0(grid: &FvGrid, mean: f64, var: f64) -> GridDensity {
        InitialLaw::gaussian(vec![mean], vec![var.sqrt()]).project(grid).unwrap()
    }

    fn heat_model(sigma: f64) -> ModelSpec {
        let mut pop = PopulationSpec::basic(1);
        pop.diffusion = DiffusionFunction::constant(vec![sigma]);
        ModelSpec::new(1, 1.0, vec![pop]).unwrap()
    }

    fn variance(g: &GridDensity) -> f64 {
        moments(&g.view(), 2).variance.unwrap()[0]
    }

    #[test]
    fn heat_equation_variance_grows_linearly() {
        let grid = FvGrid::uniform_1d(-6.0, 6.0, 400).unwrap();
        let m0 = gaussian_m0(&grid, 0.0, 0.25);
        let cfg = FpkConfig { t_final: 0.5, record_every: 2, ..Default::default() };
        let (path, rep) = solve_fpk(&heat_model(1.0), &[m0], &cfg).unwrap();
        let v = variance(&path.final_fields()[0]);
        assert!((v - 0.75).abs() <= 0.02 * 0.75, "variance {v}");
        assert!(rep.mass_drift[0] <= 1e-12);
        assert!(rep.min_value >= -NEGATIVE_TOL);
        assert_eq!(path.times, vec![0.0, 0.25, 0.5]);
    }

    #[test]
    fn ou_reaches_stationary_variance() {
        let model = QuadraticParams::ou().build().unwrap();
        let grid = FvGrid::uniform_1d(-6.0, 6.0, 400).unwrap();
        let m0 = model.initial_densities(&grid).unwrap();
        let cfg = FpkConfig { t_final: 8.0, record_every: 8, ..Default::default() };
        let (path, rep) = solve_fpk(&model, &m0, &cfg).unwrap();
        let fin = &path.final_fields()[0];
        let v = variance(fin);
        assert!((v - 0.5).abs() <= 0.02 * 0.5, "variance {v}");
        let exact = gaussian_m0(&grid, 0.0, 0.5);
        assert!(fin.l1_distance(&exact) <= 2e-2);
        assert!(rep.mass_drift[0] <= 1e-12, "{:?}", rep.mass_drift);
        assert!(!rep.boundary_flag);
    }

    #[test]
    fn advective_benchmark_is_first_order_in_space() {
        // Deterministic OU (σ = 0): the exact solution is a contracted
        // Gaussian; the upwind error halves with the cell width.
        let model = QuadraticParams { sigma: 0.0, init_mean: 0.0, ..QuadraticParams::ou() }.build().unwrap();
        let t = 0.5;
        let err = |cells: usize| {
            let grid = FvGrid::uniform_1d(-4.0, 4.0, cells).unwrap();
            let m0 = gaussian_m0(&grid, 0.0, 0.5);
            let cfg = FpkConfig { t_final: t, record_every: 1, ..Default::default() };
            let (path, _) = solve_fpk(&model, &[m0], &cfg).unwrap();
            let exact = gaussian_m0(&grid, 0.0, 0.5 * (-2.0 * t).exp());
            path.final_fields()[0].l1_distance(&exact)
        };
        let ratio = err(100) / err(200);
        assert!((1.6..=2.4).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn no_dynamics_leaves_density_unchanged() {
        let grid = FvGrid::uniform_1d(-3.0, 3.0, 50).unwrap();
        let m0 = gaussian_m0(&grid, 0.3, 0.4);
        let (path, _) = solve_fpk(&heat_model(0.0), std::slice::from_ref(&m0), &FpkConfig::default()).unwrap();
        assert_eq!(path.final_fields()[0].values(), m0.values());
    }

    #[test]
    fn symmetric_interaction_conserves_mean() {
        let mut pop = PopulationSpec::basic(1);
        pop.running_cost = CostFunction::new(
            Arc::new(|x, m| 0.5 * m[0].integrate(|y| (x[0] - y[0]).powi(2))),
            Arc::new(|x, m, g| g[0] = m[0].integrate(|y| x[0] - y[0])),
        );
        let model = ModelSpec::new(1, 1.0, vec![pop]).unwrap();
        let grid = FvGrid::uniform_1d(-5.0, 5.0, 120).unwrap();
        let m0 = GridDensity::from_fn(grid, |x| (-(x[0] - 1.0).powi(2)).exp() + (-(x[0] + 1.0).powi(2)).exp()).unwrap();
        let (path, _) = solve_fpk(&model, &[m0], &FpkConfig { t_final: 0.5, ..Default::default() }).unwrap();
        for f in &path.fields {
            assert!(f[0].mean()[0].abs() < 1e-12, "{}", f[0].mean()[0]);
        }
    }

    #[test]
    fn explicit_step_checks_cfl_and_reports_face() {
        let grid = FvGrid::uniform_1d(-1.0, 1.0, 20).unwrap();
        let m0 = gaussian_m0(&grid, 0.0, 0.1);
        let model = heat_model(1.0);
        let err = fpk_step(&model, std::slice::from_ref(&m0), 0.0, 0.1, &FpkConfig::default()).unwrap_err();
        assert!(matches!(err, FpkError::Cfl { axis: 0, .. }), "{err}");
        let ok = fpk_step(&model, &[m0], 0.0, 1e-4, &FpkConfig::default()).unwrap();
        assert!((ok[0].mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn absorbing_boundary_loses_mass() {
        let grid = FvGrid::uniform_1d(-1.0, 1.0, 40).unwrap();
        let m0 = gaussian_m0(&grid, 0.0, 0.1);
        let cfg = FpkConfig { boundaries: vec![[Boundary::Absorbing; 2]], t_final: 0.5, ..Default::default() };
        let (path, rep) = solve_fpk(&heat_model(1.0), &[m0], &cfg).unwrap();
        assert!(path.final_fields()[0].mass() < 0.9);
        assert!(rep.min_value >= 0.0);
    }

    #[test]
    fn two_dimensional_diffusion_is_separable() {
        let grid = FvGrid::new(vec![crate::measures::Axis::new(-4.0, 4.0, 60), crate::measures::Axis::new(-4.0, 4.0, 40)]).unwrap();
        let mut pop = PopulationSpec::basic(2);
        pop.diffusion = DiffusionFunction::constant(vec![1.0, 0.5]);
        pop.initial_law = InitialLaw::gaussian(vec![0.0, 0.0], vec![0.5, 0.5]);
        let model = ModelSpec::new(2, 1.0, vec![pop]).unwrap();
        let m0 = model.initial_densities(&grid).unwrap();
        let (path, rep) = solve_fpk(&model, &m0, &FpkConfig { t_final: 0.4, ..Default::default() }).unwrap();
        let var = moments(&path.final_fields()[0].view(), 2).variance.unwrap();
        assert!((var[0] - 0.65).abs() < 0.02 && (var[1] - 0.35).abs() < 0.02, "{var:?}");
        assert!(rep.mass_drift[0] <= 1e-12);
    }

    #[test]
    fn path_interpolates_in_time() {
        let grid = FvGrid::uniform_1d(-3.0, 3.0, 30).unwrap();
        let a = gaussian_m0(&grid, 0.0, 0.2);
        let b = gaussian_m0(&grid, 1.0, 0.2);
        let path = DensityPath { times: vec![0.0, 1.0], fields: vec![vec![a.clone()], vec![b.clone()]] };
        let mid = path.density_at_time(0.25, 0).unwrap();
        for c in 0..30 {
            assert!((mid.values()[c] - (0.75 * a.values()[c] + 0.25 * b.values()[c])).abs() < 1e-15);
        }
        assert!(path.law_at(1.0, 0).is_some());
        assert!(path.law_at(0.5, 0).is_none());
    }
}
