//! Euler–Maruyama simulation of the N-player game and of its interacting
//! particle approximation.
//!
//! Noise for a step is drawn sequentially (population, particle, axis) before
//! any particle is updated, so results do not depend on how the update is
//! split across threads.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::brs::{penalty_denominator, MpcConfig};
use crate::measures::{moments, wasserstein_1d, EmpiricalMeasure, MeasureError, MeasureView};
use crate::model::{Ingredient, ModelError, ModelSpec, SimRng};

/// Particles updated per parallel task.
const BLOCK: usize = 256;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("non-finite {ingredient} for particle {particle} of population {pop}")]
    NonFinite { pop: usize, particle: usize, ingredient: Ingredient },
    #[error("particle {particle} of population {pop}: {source}")]
    Particle { pop: usize, particle: usize, source: ModelError },
    #[error("reference law: {0}")]
    Reference(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

/// How a particle sees its own population.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Coupling {
    /// `m_{-i}`: the other N−1 particles (the N-player game).
    #[default]
    LeaveOneOut,
    /// The whole empirical measure (interacting particle approximation of
    /// the mean-field limit).
    FullEmpirical,
}

impl std::str::FromStr for Coupling {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "leave_one_out" => Ok(Coupling::LeaveOneOut),
            "full_empirical" => Ok(Coupling::FullEmpirical),
            _ => Err(format!("unknown coupling '{s}' (expected leave_one_out or full_empirical)")),
        }
    }
}

impl std::fmt::Display for Coupling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Coupling::LeaveOneOut => "leave_one_out",
            Coupling::FullEmpirical => "full_empirical",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub dt: f64,
    pub t0: f64,
    pub t_final: f64,
    pub n_particles: usize,
    pub seed: u64,
    pub record_every: usize,
    pub coupling: Coupling,
}

impl SimConfig {
    /// Number of steps and the step size that lands exactly on `t_final`.
    /// A step that does not divide the interval is adjusted with a warning.
    pub fn resolve_steps(&self) -> Result<(usize, f64), SimError> {
        let span = self.t_final - self.t0;
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(SimError::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(span > 0.0) || !span.is_finite() {
            return Err(SimError::Config(format!("t_final ({}) must exceed t0 ({})", self.t_final, self.t0)));
        }
        if self.n_particles < 2 {
            return Err(SimError::Config("n_particles must be at least 2".into()));
        }
        if self.record_every == 0 {
            return Err(SimError::Config("record_every must be at least 1".into()));
        }
        let n = (span / self.dt).round().max(1.0);
        let dt = span / n;
        if (dt - self.dt).abs() > 1e-9 * self.dt {
            log::warn!("dt {} does not divide [{}, {}]; using {} steps of {}", self.dt, self.t0, self.t_final, n, dt);
        }
        Ok((n as usize, dt))
    }
}

/// Particle positions per population (flat, `N·d` each) at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    dim: usize,
    positions: Vec<Vec<f64>>,
    t: f64,
    t0: f64,
    step_index: usize,
    seed: u64,
}

impl EnsembleState {
    pub fn new(dim: usize, positions: Vec<Vec<f64>>, t0: f64, seed: u64) -> Result<Self, SimError> {
        if dim == 0 || positions.is_empty() {
            return Err(SimError::Config("ensemble needs a dimension and at least one population".into()));
        }
        for (p, pos) in positions.iter().enumerate() {
            if pos.is_empty() || pos.len() % dim != 0 {
                return Err(SimError::Config(format!("population {p}: {} coordinates for dimension {dim}", pos.len())));
            }
            if let Some(j) = pos.iter().position(|v| !v.is_finite()) {
                return Err(SimError::Config(format!("population {p}: non-finite coordinate at particle {}", j / dim)));
            }
        }
        Ok(Self { dim, positions, t: t0, t0, step_index: 0, seed })
    }

    /// Samples `n` particles per population from the model's initial laws.
    pub fn sample_initial(model: &ModelSpec, n: usize, t0: f64, seed: u64, rng: &mut SimRng) -> Result<Self, SimError> {
        let d = model.dim();
        let positions = model
            .populations()
            .iter()
            .map(|pop| {
                let mut pts = vec![0.0; n * d];
                for chunk in pts.chunks_exact_mut(d) {
                    pop.initial_law.sample_into(rng, chunk);
                }
                pts
            })
            .collect();
        Self::new(d, positions, t0, seed)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn population_count(&self) -> usize {
        self.positions.len()
    }

    pub fn len(&self, pop: usize) -> usize {
        self.positions[pop].len() / self.dim
    }

    pub fn point(&self, pop: usize, i: usize) -> &[f64] {
        &self.positions[pop][i * self.dim..(i + 1) * self.dim]
    }

    pub fn positions(&self, pop: usize) -> &[f64] {
        &self.positions[pop]
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform empirical measure of every population.
    pub fn measures(&self) -> Result<Vec<EmpiricalMeasure>, MeasureError> {
        self.positions.iter().map(|p| EmpiricalMeasure::uniform(self.dim, p.clone())).collect()
    }
}

/// What a control sees when asked for player `index` of `pop`.
pub struct ControlQuery<'a> {
    pub pop: usize,
    pub index: usize,
    pub t: f64,
    pub x: &'a [f64],
    /// Coupling measures, one per population, as configured.
    pub coupling: &'a [MeasureView<'a>],
    /// The whole ensemble at the start of the step, one uniform measure
    /// per population.
    pub ensemble: &'a [EmpiricalMeasure],
    /// Whatever [`ControlPolicy::prepare_step`] returned for this step.
    pub prepared: Option<f64>,
}

/// Feedback control evaluated once per particle per step.
pub trait ControlPolicy: Sync {
    fn control_into(&self, model: &ModelSpec, q: &ControlQuery<'_>, out: &mut [f64]) -> Result<(), ModelError>;

    /// Called once per population and step before any particle is queried;
    /// a returned value is handed to every query of that step.
    fn prepare_step(&self, _model: &ModelSpec, _pop: usize, _t: f64) -> Result<Option<f64>, ModelError> {
        Ok(None)
    }
}

pub struct Uncontrolled;

impl ControlPolicy for Uncontrolled {
    fn control_into(&self, _: &ModelSpec, _: &ControlQuery<'_>, out: &mut [f64]) -> Result<(), ModelError> {
        out.iter_mut().for_each(|o| *o = 0.0);
        Ok(())
    }
}

/// Finite-window BRS control evaluated against the step's coupling measures.
pub struct BrsPolicy {
    pub mpc: MpcConfig,
}

impl ControlPolicy for BrsPolicy {
    fn control_into(&self, model: &ModelSpec, q: &ControlQuery<'_>, out: &mut [f64]) -> Result<(), ModelError> {
        let den = match q.prepared {
            Some(d) => d,
            None => penalty_denominator(model, q.pop, q.t, &self.mpc)?,
        };
        model.control_into(q.pop, q.x, q.coupling, den, out)
    }

    /// The penalty denominator depends only on the population and time.
    fn prepare_step(&self, model: &ModelSpec, pop: usize, t: f64) -> Result<Option<f64>, ModelError> {
        penalty_denominator(model, pop, t, &self.mpc).map(Some)
    }
}

/// Control given as a closure of `(pop, i, t, ensemble)`.
pub struct FnPolicy<F>(pub F);

impl<F> ControlPolicy for FnPolicy<F>
where
    F: Fn(usize, usize, f64, &[EmpiricalMeasure]) -> Vec<f64> + Sync,
{
    fn control_into(&self, _: &ModelSpec, q: &ControlQuery<'_>, out: &mut [f64]) -> Result<(), ModelError> {
        let u = (self.0)(q.pop, q.index, q.t, q.ensemble);
        if u.len() != out.len() {
            return Err(ModelError::Invalid(format!("control returned {} components for dimension {}", u.len(), out.len())));
        }
        out.copy_from_slice(&u);
        Ok(())
    }
}

fn draw_noise(rng: &mut SimRng, buf: &mut [f64]) {
    for v in buf.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
}

/// One Euler–Maruyama step:
/// `X_i ← X_i + (f(X_i, m) + u_i)·dt + σ(t, X_i)·√dt·ξ_i`.
pub fn em_step(
    model: &ModelSpec,
    state: &EnsembleState,
    control: &dyn ControlPolicy,
    dt: f64,
    rng: &mut SimRng,
    coupling: Coupling,
) -> Result<EnsembleState, SimError> {
    let mut buffers = StepBuffers::default();
    let mut next = state.clone();
    em_step_in_place(model, &mut next, control, dt, rng, coupling, &mut buffers)?;
    next.t = state.t + dt;
    Ok(next)
}

/// Scratch reused across steps: the noise draws and the next positions.
#[derive(Default)]
struct StepBuffers {
    noise: Vec<f64>,
    next: Vec<Vec<f64>>,
}

/// Step in place. Time bookkeeping is left to the caller except for
/// `step_index`.
fn em_step_in_place(
    model: &ModelSpec,
    state: &mut EnsembleState,
    control: &dyn ControlPolicy,
    dt: f64,
    rng: &mut SimRng,
    coupling: Coupling,
    buffers: &mut StepBuffers,
) -> Result<(), SimError> {
    if !(dt > 0.0) {
        return Err(SimError::Config(format!("dt must be positive, got {dt}")));
    }
    if state.population_count() != model.population_count() || state.dim != model.dim() {
        return Err(SimError::Config("ensemble does not match the model".into()));
    }
    let d = state.dim;
    let total: usize = state.positions.iter().map(Vec::len).sum();
    let noise = &mut buffers.noise;
    noise.resize(total, 0.0);
    draw_noise(rng, noise);

    // The measures borrow the current positions for the step and hand them
    // back as next step's output buffers.
    let measures = std::mem::take(&mut state.positions).into_iter().map(|p| EmpiricalMeasure::uniform(d, p)).collect::<Result<Vec<_>, _>>()?;
    let t = state.t;
    let sqrt_dt = dt.sqrt();
    let mut new_positions = std::mem::take(&mut buffers.next);
    new_positions.resize_with(measures.len(), Vec::new);
    for (out, m) in new_positions.iter_mut().zip(&measures) {
        out.resize(m.points().len(), 0.0);
    }
    let result = advance(model, &measures, &mut new_positions, control, t, dt, sqrt_dt, noise, coupling);
    let old: Vec<Vec<f64>> = measures.into_iter().map(EmpiricalMeasure::into_points).collect();
    if let Err(e) = result {
        state.positions = old;
        buffers.next = new_positions;
        return Err(e);
    }
    state.positions = new_positions;
    buffers.next = old;
    state.step_index += 1;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn advance(
    model: &ModelSpec,
    measures: &[EmpiricalMeasure],
    new_positions: &mut [Vec<f64>],
    control: &dyn ControlPolicy,
    t: f64,
    dt: f64,
    sqrt_dt: f64,
    noise: &[f64],
    coupling: Coupling,
) -> Result<(), SimError> {
    let d = model.dim();
    let mut offset = 0;
    for (p, out) in new_positions.iter_mut().enumerate() {
        let spec = model.population(p)?;
        let pop_noise = &noise[offset..offset + out.len()];
        offset += out.len();
        // A failure here is the one particle 0 would have hit first.
        let prepared = control.prepare_step(model, p, t).map_err(|source| SimError::Particle { pop: p, particle: 0, source })?;
        let zero_drift = spec.drift.is_zero();
        let const_sigma = spec.diffusion.constant_diagonal();
        let sigma_ok = |s: &[f64]| s.iter().all(|v| *v >= 0.0 && *v != f64::INFINITY);
        let const_sigma_ok = const_sigma.is_some_and(sigma_ok);
        let own = &measures[p];
        let leave_out = coupling == Coupling::LeaveOneOut;
        let first_error = out
            .par_chunks_mut(BLOCK * d)
            .enumerate()
            .map(|(b, block)| -> Option<SimError> {
                let mut scratch = vec![0.0; 3 * d];
                let (f, rest) = scratch.split_at_mut(d);
                let (u, s) = rest.split_at_mut(d);
                let mut views: Vec<MeasureView<'_>> = measures.iter().map(EmpiricalMeasure::view).collect();
                for (k, x) in block.chunks_exact_mut(d).enumerate() {
                    let i = b * BLOCK + k;
                    if leave_out {
                        views[p] = own.view_without(i);
                    }
                    let xi = own.point(i);
                    let wrap = |source| SimError::Particle { pop: p, particle: i, source };
                    if !zero_drift {
                        if let Err(e) = model.drift_into(p, xi, &views, f) {
                            return Some(wrap(e));
                        }
                    }
                    let q = ControlQuery { pop: p, index: i, t, x: xi, coupling: &views, ensemble: measures, prepared };
                    if let Err(e) = control.control_into(model, &q, u) {
                        return Some(wrap(e));
                    }
                    let (s, bad_sigma): (&[f64], bool) = match const_sigma {
                        Some(c) => (c, !const_sigma_ok),
                        None => {
                            spec.diffusion.eval_into(t, xi, s);
                            (s, !sigma_ok(s))
                        }
                    };
                    let z = &pop_noise[i * d..(i + 1) * d];
                    for a in 0..d {
                        x[a] = xi[a] + (f[a] + u[a]) * dt + s[a] * sqrt_dt * z[a];
                    }
                    if let Some(c) = spec.constraint {
                        c.apply(x);
                    }
                    if bad_sigma || x.iter().any(|v| !v.is_finite()) {
                        // Attribute the failure to the first offending ingredient.
                        let ingredient = if u.iter().any(|v| !v.is_finite()) {
                            Ingredient::Control
                        } else if bad_sigma {
                            Ingredient::Diffusion
                        } else {
                            Ingredient::Drift
                        };
                        return Some(SimError::NonFinite { pop: p, particle: i, ingredient });
                    }
                }
                None
            })
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .next();
        if let Some(e) = first_error {
            return Err(e);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub t: f64,
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    pub snapshots: Vec<EnsembleState>,
    pub metrics: Vec<MetricRow>,
}

impl TrajectoryRecord {
    pub fn final_state(&self) -> &EnsembleState {
        self.snapshots.last().expect("record holds the initial state")
    }
}

/// A law to compare particle ensembles against, looked up by time.
pub trait ReferenceLaw: Sync {
    fn law_at(&self, t: f64, pop: usize) -> Option<ReferenceMeasure<'_>>;
}

pub enum ReferenceMeasure<'a> {
    Borrowed(MeasureView<'a>),
    Owned(EmpiricalMeasure),
}

impl ReferenceMeasure<'_> {
    pub fn view(&self) -> MeasureView<'_> {
        match self {
            ReferenceMeasure::Borrowed(v) => *v,
            ReferenceMeasure::Owned(m) => m.view(),
        }
    }
}

/// Times closer than this are considered equal when matching grids.
pub const TIME_MATCH_TOL: f64 = 1e-9;

impl ReferenceLaw for TrajectoryRecord {
    fn law_at(&self, t: f64, pop: usize) -> Option<ReferenceMeasure<'_>> {
        let k = self.times.iter().position(|s| (s - t).abs() <= TIME_MATCH_TOL)?;
        let snap = &self.snapshots[k];
        if pop >= snap.population_count() {
            return None;
        }
        EmpiricalMeasure::uniform(snap.dim, snap.positions[pop].clone()).ok().map(ReferenceMeasure::Owned)
    }
}

fn snapshot_metrics(state: &EnsembleState, reference: Option<&dyn ReferenceLaw>, out: &mut Vec<MetricRow>) -> Result<(), SimError> {
    let t = state.t;
    for (p, m) in state.measures()?.iter().enumerate() {
        let mo = moments(&m.view(), 2);
        let var = mo.variance.unwrap_or_default();
        for k in 0..state.dim {
            out.push(MetricRow { t, name: format!("mean.p{p}.x{k}"), value: mo.mean[k] });
            out.push(MetricRow { t, name: format!("var.p{p}.x{k}"), value: var[k] });
        }
        if let Some(r) = reference {
            if state.dim == 1 {
                if let Some(law) = r.law_at(t, p) {
                    let w = wasserstein_1d(&m.view(), &law.view(), 1)?;
                    out.push(MetricRow { t, name: format!("w1.p{p}"), value: w });
                }
            }
        }
    }
    Ok(())
}

/// Runs the particle system under `policy`, recording every
/// `record_every` steps and at the final time. Moments are always recorded;
/// `W₁` to `reference` (1-D only) at the recorded times it covers.
pub fn simulate(
    model: &ModelSpec,
    cfg: &SimConfig,
    policy: &dyn ControlPolicy,
    reference: Option<&dyn ReferenceLaw>,
) -> Result<TrajectoryRecord, SimError> {
    let mut rng = SimRng::seed_from_u64(cfg.seed);
    let initial = EnsembleState::sample_initial(model, cfg.n_particles, cfg.t0, cfg.seed, &mut rng)?;
    simulate_from(model, cfg, policy, reference, initial, &mut rng)
}

/// As [`simulate`], starting from a given ensemble and generator.
pub fn simulate_from(
    model: &ModelSpec,
    cfg: &SimConfig,
    policy: &dyn ControlPolicy,
    reference: Option<&dyn ReferenceLaw>,
    initial: EnsembleState,
    rng: &mut SimRng,
) -> Result<TrajectoryRecord, SimError> {
    let (steps, dt) = cfg.resolve_steps()?;
    let mut state = initial;
    state.t0 = cfg.t0;
    state.t = cfg.t0;
    state.step_index = 0;
    let mut record = TrajectoryRecord { times: vec![state.t], snapshots: vec![state.clone()], metrics: Vec::new() };
    snapshot_metrics(&state, reference, &mut record.metrics)?;
    let mut buffers = StepBuffers::default();
    for k in 1..=steps {
        em_step_in_place(model, &mut state, policy, dt, rng, cfg.coupling, &mut buffers)?;
        state.t = if k == steps { cfg.t_final } else { cfg.t0 + k as f64 * dt };
        if k % cfg.record_every == 0 || k == steps {
            record.times.push(state.t);
            record.snapshots.push(state.clone());
            snapshot_metrics(&state, reference, &mut record.metrics)?;
        }
    }
    Ok(record)
}

/// The N-player game under the finite-window BRS control.
pub fn simulate_brs_nplayer(model: &ModelSpec, cfg: &SimConfig, mpc: &MpcConfig) -> Result<TrajectoryRecord, SimError> {
    mpc.validate(model.horizon())?;
    simulate(model, cfg, &BrsPolicy { mpc: *mpc }, None)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChaosRow {
    pub n: usize,
    pub mean_w1: f64,
    /// Sample standard deviation across seeds.
    pub std: f64,
    pub std_error: f64,
    pub seeds: usize,
}

/// `W₁` between the population-0 empirical measure at `t_final` and the
/// reference law there, for each `N` and seed, summarized per `N`.
pub fn propagation_of_chaos_study(
    model: &ModelSpec,
    cfg_base: &SimConfig,
    mpc: &MpcConfig,
    n_list: &[usize],
    reference: &dyn ReferenceLaw,
    seeds: &[u64],
) -> Result<Vec<ChaosRow>, SimError> {
    if model.dim() != 1 {
        return Err(SimError::Config("propagation-of-chaos study needs d = 1".into()));
    }
    if seeds.is_empty() || n_list.is_empty() {
        return Err(SimError::Config("need at least one N and one seed".into()));
    }
    for t in [cfg_base.t0, cfg_base.t_final] {
        if reference.law_at(t, 0).is_none() {
            return Err(SimError::Reference(format!("reference has no law at t = {t}; time grids do not match")));
        }
    }
    mpc.validate(model.horizon())?;
    let policy = BrsPolicy { mpc: *mpc };
    let mut rows = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let w: Vec<f64> = seeds
            .par_iter()
            .map(|&seed| -> Result<f64, SimError> {
                let cfg = SimConfig { n_particles: n, seed, record_every: usize::MAX, ..cfg_base.clone() };
                let rec = simulate(model, &cfg, &policy, None)?;
                let fin = EmpiricalMeasure::uniform(1, rec.final_state().positions(0).to_vec())?;
                let law = reference.law_at(cfg.t_final, 0).expect("checked above");
                Ok(wasserstein_1d(&fin.view(), &law.view(), 1)?)
            })
            .collect::<Result<_, _>>()?;
        let k = w.len() as f64;
        let mean = w.iter().sum::<f64>() / k;
        let std = if w.len() > 1 { (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt() } else { 0.0 };
        rows.push(ChaosRow { n, mean_w1: mean, std, std_error: std / k.sqrt(), seeds: w.len() });
    }
    Ok(rows)
}
