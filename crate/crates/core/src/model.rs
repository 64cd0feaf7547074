//! Game ingredients as values: drift `f(x, m)`, running cost `h(x, m)` and
//! terminal cost `g(x, m)` with analytic gradients, the control penalty
//! `α(t)`, diagonal diffusion `σ(t, x)` and the initial law `m₀`.
//!
//! Every function is evaluated against a slice of [`MeasureView`]s, one per
//! population, so the same [`ModelSpec`] couples to particle ensembles and to
//! grid densities alike.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use smallvec::SmallVec;
use thiserror::Error;

use crate::measures::{wasserstein_small_nd, EmpiricalMeasure, FvGrid, GridDensity, MeasureError, MeasureView};

/// Random number generator used for every stochastic component.
pub type SimRng = rand_chacha::ChaCha8Rng;

/// Scalar function of a point and the population measures.
pub type ScalarField = Arc<dyn Fn(&[f64], &[MeasureView<'_>]) -> f64 + Send + Sync>;
/// Vector function of a point and the population measures, written into the
/// output slice.
pub type VectorField = Arc<dyn Fn(&[f64], &[MeasureView<'_>], &mut [f64]) + Send + Sync>;
pub type TimeFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
/// `σ(t, x)` written into a diagonal.
pub type DiagonalField = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

/// Stack buffer for per-point vectors.
pub(crate) type Buf = SmallVec<[f64; 4]>;

/// Which model ingredient produced a non-finite value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ingredient {
    Drift,
    RunningGradient,
    TerminalGradient,
    Penalty,
    Diffusion,
    Control,
}

impl fmt::Display for Ingredient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Ingredient::Drift => "drift f",
            Ingredient::RunningGradient => "running cost gradient ∇h",
            Ingredient::TerminalGradient => "terminal cost gradient ∇g",
            Ingredient::Penalty => "control penalty α",
            Ingredient::Diffusion => "diffusion σ",
            Ingredient::Control => "control u",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("non-finite value from {ingredient} (population {pop}, x = {x:?})")]
    NonFinite { ingredient: Ingredient, pop: usize, x: Vec<f64> },
    #[error("penalty denominator nonpositive: {value} at t = {t}")]
    PenaltyNonPositive { t: f64, value: f64 },
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("population index {0} out of range")]
    NoSuchPopulation(usize),
    #[error("all sample pairs were degenerate (zero distance)")]
    DegenerateSamples,
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

/// Control penalty `α(t)` and its time derivative.
#[derive(Clone)]
pub struct ControlPenalty {
    alpha: TimeFn,
    alpha_dot: TimeFn,
}

impl ControlPenalty {
    pub fn new(alpha: TimeFn, alpha_dot: TimeFn) -> Self {
        Self { alpha, alpha_dot }
    }

    pub fn constant(a: f64) -> Self {
        Self::new(Arc::new(move |_| a), Arc::new(|_| 0.0))
    }

    /// `α(t) = a0 + slope·t`.
    pub fn affine(a0: f64, slope: f64) -> Self {
        Self::new(Arc::new(move |t| a0 + slope * t), Arc::new(move |_| slope))
    }

    pub fn alpha(&self, t: f64) -> f64 {
        (self.alpha)(t)
    }

    pub fn alpha_dot(&self, t: f64) -> f64 {
        (self.alpha_dot)(t)
    }

    /// Checks `α > 0` and `α̇` against forward differences on `samples + 1`
    /// equally spaced times in `[0, horizon]`.
    pub fn validate(&self, horizon: f64, samples: usize, tol: f64) -> Result<(), ModelError> {
        let eps = 1e-6 * horizon.max(1.0);
        for k in 0..=samples {
            let t = horizon * k as f64 / samples.max(1) as f64;
            let a = self.alpha(t);
            if !(a > 0.0) {
                return Err(ModelError::PenaltyNonPositive { t, value: a });
            }
            let fd = (self.alpha(t + eps) - a) / eps;
            let ad = self.alpha_dot(t);
            if (fd - ad).abs() > tol * (1.0 + ad.abs()) {
                return Err(ModelError::Invalid(format!("alpha_dot({t}) = {ad} inconsistent with finite difference {fd}")));
            }
        }
        Ok(())
    }
}

/// Scalar cost with its spatial gradient.
#[derive(Clone)]
pub struct CostFunction {
    value: ScalarField,
    gradient: VectorField,
    is_zero: bool,
}

impl CostFunction {
    pub fn new(value: ScalarField, gradient: VectorField) -> Self {
        Self { value, gradient, is_zero: false }
    }

    pub fn zero() -> Self {
        Self { value: Arc::new(|_, _| 0.0), gradient: Arc::new(|_, _, out| out.fill(0.0)), is_zero: true }
    }

    /// Built by [`CostFunction::zero`].
    pub fn is_zero(&self) -> bool {
        self.is_zero
    }

    /// Measure-independent cost from plain closures.
    pub fn local(value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static, gradient: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        Self::new(Arc::new(move |x, _| value(x)), Arc::new(move |x, _, out| gradient(x, out)))
    }

    pub fn value(&self, x: &[f64], m: &[MeasureView<'_>]) -> f64 {
        (self.value)(x, m)
    }

    pub fn gradient_into(&self, x: &[f64], m: &[MeasureView<'_>], out: &mut [f64]) {
        (self.gradient)(x, m, out)
    }

    pub fn gradient(&self, x: &[f64], m: &[MeasureView<'_>]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.gradient_into(x, m, &mut out);
        out
    }
}

#[derive(Clone)]
pub struct DriftFunction {
    value: VectorField,
    is_zero: bool,
}

impl DriftFunction {
    pub fn new(value: VectorField) -> Self {
        Self { value, is_zero: false }
    }

    pub fn zero() -> Self {
        Self { value: Arc::new(|_, _, out| out.fill(0.0)), is_zero: true }
    }

    pub fn local(f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        Self::new(Arc::new(move |x, _, out| f(x, out)))
    }

    /// Built by [`DriftFunction::zero`]; lets hot loops skip the call.
    pub fn is_zero(&self) -> bool {
        self.is_zero
    }

    pub fn eval_into(&self, x: &[f64], m: &[MeasureView<'_>], out: &mut [f64]) {
        (self.value)(x, m, out)
    }
}

/// Diagonal diffusion; the function writes the diagonal of `σ(t, x)`.
#[derive(Clone)]
pub struct DiffusionFunction {
    value: DiagonalField,
    constant: Option<Arc<[f64]>>,
}

impl DiffusionFunction {
    pub fn new(value: DiagonalField) -> Self {
        Self { value, constant: None }
    }

    pub fn constant(diag: Vec<f64>) -> Self {
        let diag: Arc<[f64]> = diag.into();
        let copy = diag.clone();
        Self { value: Arc::new(move |_, _, out| out.copy_from_slice(&copy)), constant: Some(diag) }
    }

    /// The diagonal when built by [`DiffusionFunction::constant`].
    pub fn constant_diagonal(&self) -> Option<&[f64]> {
        self.constant.as_deref()
    }

    pub fn eval_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.value)(t, x, out)
    }
}

type Sampler = Arc<dyn Fn(&mut SimRng, &mut [f64]) + Send + Sync>;
type Projector = Arc<dyn Fn(&FvGrid) -> Result<GridDensity, MeasureError> + Send + Sync>;

/// Initial law `m₀`: a sampler for particle runs and a projector onto grids.
#[derive(Clone)]
pub struct InitialLaw {
    sampler: Sampler,
    projector: Projector,
}

/// Three-point Gauss–Legendre nodes and weights on `[-1, 1]`.
const GL3: [(f64, f64); 3] = [(-0.774_596_669_241_483_4, 5.0 / 9.0), (0.0, 8.0 / 9.0), (0.774_596_669_241_483_4, 5.0 / 9.0)];

impl InitialLaw {
    pub fn new(sampler: Sampler, projector: Projector) -> Self {
        Self { sampler, projector }
    }

    /// Law given by a sampler and an (unnormalized) density; projection uses
    /// tensor Gauss–Legendre cell averages followed by normalization.
    pub fn from_density(
        sampler: impl Fn(&mut SimRng, &mut [f64]) + Send + Sync + 'static,
        density: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        let projector: Projector = Arc::new(move |grid: &FvGrid| {
            let dim = grid.dim();
            let mut values = Vec::with_capacity(grid.cell_count());
            let mut x = [0.0; 2];
            let mut mid = [0.0; 2];
            for c in 0..grid.cell_count() {
                grid.midpoint_into(c, &mut mid);
                let mut acc = 0.0;
                let nodes = 3usize.pow(dim as u32);
                for q in 0..nodes {
                    let mut w = 1.0;
                    let mut r = q;
                    for k in 0..dim {
                        let (node, wk) = GL3[r % 3];
                        r /= 3;
                        x[k] = mid[k] + 0.5 * grid.axis(k).width() * node;
                        w *= 0.5 * wk;
                    }
                    acc += w * density(&x[..dim]);
                }
                values.push(acc.max(0.0));
            }
            let mut g = GridDensity::new(grid.clone(), values)?;
            g.normalize()?;
            Ok(g)
        });
        Self { sampler: Arc::new(sampler), projector }
    }

    /// Independent Gaussian coordinates.
    pub fn gaussian(mean: Vec<f64>, std: Vec<f64>) -> Self {
        let (m2, s2) = (mean.clone(), std.clone());
        Self::from_density(
            move |rng, out| {
                for k in 0..out.len() {
                    let z: f64 = rng.sample(StandardNormal);
                    out[k] = mean[k] + std[k] * z;
                }
            },
            move |x| x.iter().zip(m2.iter().zip(&s2)).map(|(v, (m, s))| (-(v - m) * (v - m) / (2.0 * s * s)).exp()).product(),
        )
    }

    /// Point mass; projects into the cell containing the point.
    pub fn dirac(point: Vec<f64>) -> Self {
        let p2 = point.clone();
        Self::new(
            Arc::new(move |_, out| out.copy_from_slice(&point)),
            Arc::new(move |grid: &FvGrid| {
                let mut idx = [0usize; 2];
                for (k, a) in grid.axes().iter().enumerate() {
                    let i = ((p2[k] - a.min) / a.width()).floor();
                    if i < 0.0 || i >= a.cells as f64 {
                        return Err(MeasureError::Invalid("point mass outside grid".into()));
                    }
                    idx[k] = i as usize;
                }
                let mut values = vec![0.0; grid.cell_count()];
                values[grid.linear_index(&idx[..grid.dim()])] = 1.0 / grid.cell_volume();
                GridDensity::new(grid.clone(), values)
            }),
        )
    }

    pub fn sample_into(&self, rng: &mut SimRng, out: &mut [f64]) {
        (self.sampler)(rng, out)
    }

    pub fn project(&self, grid: &FvGrid) -> Result<GridDensity, MeasureError> {
        (self.projector)(grid)
    }
}

/// Reflecting floor on one coordinate (particle mode).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReflectBelow {
    pub axis: usize,
    pub floor: f64,
}

impl ReflectBelow {
    pub fn apply(&self, x: &mut [f64]) {
        let v = &mut x[self.axis];
        if *v < self.floor {
            *v = (2.0 * self.floor - *v).max(self.floor);
        }
    }
}

/// Ingredients of one population.
#[derive(Clone)]
pub struct PopulationSpec {
    pub drift: DriftFunction,
    pub running_cost: CostFunction,
    pub terminal_cost: CostFunction,
    pub penalty: ControlPenalty,
    pub diffusion: DiffusionFunction,
    pub initial_law: InitialLaw,
    /// Axes on which the control acts; others receive no control.
    pub control_mask: Vec<bool>,
    pub constraint: Option<ReflectBelow>,
}

impl PopulationSpec {
    /// Population with zero drift/costs, `α ≡ 1`, unit diffusion and a
    /// standard normal initial law; fields are meant to be overwritten.
    pub fn basic(dim: usize) -> Self {
        Self {
            drift: DriftFunction::zero(),
            running_cost: CostFunction::zero(),
            terminal_cost: CostFunction::zero(),
            penalty: ControlPenalty::constant(1.0),
            diffusion: DiffusionFunction::constant(vec![1.0; dim]),
            initial_law: InitialLaw::gaussian(vec![0.0; dim], vec![1.0; dim]),
            control_mask: vec![true; dim],
            constraint: None,
        }
    }
}

/// The full game: state dimension, horizon `T` and one `PopulationSpec` per population.
#[derive(Clone)]
pub struct ModelSpec {
    dim: usize,
    horizon: f64,
    populations: Vec<PopulationSpec>,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec").field("dim", &self.dim).field("horizon", &self.horizon).field("populations", &self.populations.len()).finish()
    }
}

impl ModelSpec {
    pub fn new(dim: usize, horizon: f64, populations: Vec<PopulationSpec>) -> Result<Self, ModelError> {
        if dim == 0 {
            return Err(ModelError::Invalid("dimension must be at least 1".into()));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(ModelError::Invalid(format!("horizon must be positive, got {horizon}")));
        }
        if populations.is_empty() {
            return Err(ModelError::Invalid("need at least one population".into()));
        }
        for (p, pop) in populations.iter().enumerate() {
            if pop.control_mask.len() != dim {
                return Err(ModelError::Invalid(format!("population {p}: control mask has wrong length")));
            }
            if let Some(c) = pop.constraint {
                if c.axis >= dim {
                    return Err(ModelError::Invalid(format!("population {p}: constraint axis out of range")));
                }
            }
            let mut x: Buf = SmallVec::from_elem(0.0, dim);
            let mut rng = SimRng::seed_from_u64(0);
            pop.initial_law.sample_into(&mut rng, &mut x);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::Invalid(format!("population {p}: initial law produced {x:?}")));
            }
        }
        Ok(Self { dim, horizon, populations })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn population_count(&self) -> usize {
        self.populations.len()
    }

    pub fn population(&self, p: usize) -> Result<&PopulationSpec, ModelError> {
        self.populations.get(p).ok_or(ModelError::NoSuchPopulation(p))
    }

    pub fn populations(&self) -> &[PopulationSpec] {
        &self.populations
    }

    /// Copy with a different horizon.
    pub fn with_horizon(&self, horizon: f64) -> Result<Self, ModelError> {
        Self::new(self.dim, horizon, self.populations.clone())
    }

    /// Copy with population `p` transformed by `edit`.
    pub fn map_population(&self, p: usize, edit: impl FnOnce(&mut PopulationSpec)) -> Result<Self, ModelError> {
        let mut pops = self.populations.clone();
        edit(pops.get_mut(p).ok_or(ModelError::NoSuchPopulation(p))?);
        Self::new(self.dim, self.horizon, pops)
    }

    /// Projects every population's initial law onto `grid`.
    pub fn initial_densities(&self, grid: &FvGrid) -> Result<Vec<GridDensity>, ModelError> {
        self.populations
            .iter()
            .map(|p| {
                let g = p.initial_law.project(grid)?;
                if (g.mass() - 1.0).abs() > 1e-10 {
                    return Err(ModelError::Invalid(format!("projected initial mass {}", g.mass())));
                }
                Ok(g)
            })
            .collect()
    }

    /// `∇ₓ(h + g/T)(x, m)` into `out`, naming the ingredient on non-finite
    /// output.
    pub(crate) fn surrogate_gradient_into(&self, pop: usize, x: &[f64], m: &[MeasureView<'_>], out: &mut [f64]) -> Result<(), ModelError> {
        let spec = &self.populations[pop];
        spec.running_cost.gradient_into(x, m, out);
        if spec.terminal_cost.is_zero() {
            if out.iter().all(|v| v.is_finite()) {
                return Ok(());
            }
            return Err(ModelError::NonFinite { ingredient: Ingredient::RunningGradient, pop, x: x.to_vec() });
        }
        let mut stack = [0.0; 4];
        let mut heap = Vec::new();
        let g: &mut [f64] = if x.len() <= stack.len() {
            &mut stack[..x.len()]
        } else {
            heap.resize(x.len(), 0.0);
            &mut heap
        };
        spec.terminal_cost.gradient_into(x, m, g);
        let inv_t = 1.0 / self.horizon;
        let mut finite = true;
        for (o, gk) in out.iter_mut().zip(g.iter()) {
            finite &= o.is_finite() && gk.is_finite();
            *o += gk * inv_t;
        }
        if !finite {
            let ingredient = if g.iter().all(|v| v.is_finite()) {
                Ingredient::RunningGradient
            } else {
                let mut h = vec![0.0; x.len()];
                spec.running_cost.gradient_into(x, m, &mut h);
                if h.iter().all(|v| v.is_finite()) {
                    Ingredient::TerminalGradient
                } else {
                    Ingredient::RunningGradient
                }
            };
            return Err(ModelError::NonFinite { ingredient, pop, x: x.to_vec() });
        }
        Ok(())
    }

    /// `-(1/denominator)·∇(h + g/T)` restricted to controlled axes.
    pub(crate) fn control_into(&self, pop: usize, x: &[f64], m: &[MeasureView<'_>], denominator: f64, out: &mut [f64]) -> Result<(), ModelError> {
        self.surrogate_gradient_into(pop, x, m, out)?;
        let mask = &self.populations[pop].control_mask;
        for (o, &on) in out.iter_mut().zip(mask) {
            *o = if on { -*o / denominator } else { 0.0 };
        }
        Ok(())
    }

    pub(crate) fn drift_into(&self, pop: usize, x: &[f64], m: &[MeasureView<'_>], out: &mut [f64]) -> Result<(), ModelError> {
        self.populations[pop].drift.eval_into(x, m, out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite { ingredient: Ingredient::Drift, pop, x: x.to_vec() });
        }
        Ok(())
    }

    pub(crate) fn checked_alpha(&self, pop: usize, t: f64) -> Result<f64, ModelError> {
        let a = self.populations[pop].penalty.alpha(t);
        if !a.is_finite() {
            return Err(ModelError::NonFinite { ingredient: Ingredient::Penalty, pop, x: vec![] });
        }
        if a <= 0.0 {
            return Err(ModelError::PenaltyNonPositive { t, value: a });
        }
        Ok(a)
    }

    /// BRS drift into `out`; `scratch` must have length `dim`.
    pub(crate) fn brs_drift_into(
        &self,
        pop: usize,
        t: f64,
        x: &[f64],
        m: &[MeasureView<'_>],
        out: &mut [f64],
        scratch: &mut [f64],
    ) -> Result<(), ModelError> {
        let a = self.checked_alpha(pop, t)?;
        self.drift_into(pop, x, m, out)?;
        self.control_into(pop, x, m, a, scratch)?;
        for (o, u) in out.iter_mut().zip(scratch.iter()) {
            *o += u;
        }
        Ok(())
    }
}

/// Drift of the limiting best-reply dynamics,
/// `f(x, m) − (1/α(t))·∇ₓ(h + g/T)(x, m)` (control-masked).
pub fn brs_drift(model: &ModelSpec, pop: usize, t: f64, x: &[f64], m: &[MeasureView<'_>]) -> Result<Vec<f64>, ModelError> {
    model.population(pop)?;
    let mut out = vec![0.0; model.dim()];
    let mut scratch = vec![0.0; model.dim()];
    model.brs_drift_into(pop, t, x, m, &mut out, &mut scratch)?;
    Ok(out)
}

/// Settings for [`validate_assumptions_with`].
#[derive(Debug, Clone)]
pub struct ValidationConfig {
    pub sample_count: usize,
    pub seed: u64,
    /// Half-width of the uniform perturbation applied to points and atoms.
    pub perturbation: f64,
    /// Atoms per sampled empirical measure (at most 10, exact transport).
    pub measure_size: usize,
    /// Quotients above this value are flagged.
    pub cap: f64,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self { sample_count: 100, seed: 0, perturbation: 0.05, measure_size: 6, cap: 1e4 }
    }
}

/// Largest sampled Lipschitz quotients of one population's ingredients.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AssumptionReport {
    pub drift_x: f64,
    pub drift_m: f64,
    pub running_gradient_x: f64,
    pub running_gradient_m: f64,
    pub terminal_gradient_x: f64,
    pub terminal_gradient_m: f64,
    pub diffusion_t: f64,
    pub diffusion_x: f64,
    /// Names of quotients above the cap (or non-finite).
    pub flagged: Vec<&'static str>,
    pub skipped_pairs: usize,
}

impl AssumptionReport {
    fn quotients(&self) -> [(&'static str, f64); 8] {
        [
            ("drift_x", self.drift_x),
            ("drift_m", self.drift_m),
            ("running_gradient_x", self.running_gradient_x),
            ("running_gradient_m", self.running_gradient_m),
            ("terminal_gradient_x", self.terminal_gradient_x),
            ("terminal_gradient_m", self.terminal_gradient_m),
            ("diffusion_t", self.diffusion_t),
            ("diffusion_x", self.diffusion_x),
        ]
    }
}

pub fn validate_assumptions(model: &ModelSpec, sample_count: usize, seed: u64) -> Result<Vec<AssumptionReport>, ModelError> {
    validate_assumptions_with(model, &ValidationConfig { sample_count, seed, ..Default::default() })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Empirical audit of the Lipschitz hypotheses: quotients of `f`, `∇h`,
/// `∇g` in `x` and in `W₁` (maximum over populations of the exact transport
/// distance between perturbed empirical measures), and of `σ` in `t` and `x`.
pub fn validate_assumptions_with(model: &ModelSpec, cfg: &ValidationConfig) -> Result<Vec<AssumptionReport>, ModelError> {
    if cfg.sample_count < 2 {
        return Err(ModelError::Invalid("sample_count must be at least 2".into()));
    }
    let d = model.dim();
    let np = model.population_count();
    let n_atoms = cfg.measure_size.clamp(1, 10);
    let mut rng = SimRng::seed_from_u64(cfg.seed);
    let mut reports = vec![AssumptionReport::default(); np];
    let mut any_valid = false;

    for _ in 0..cfg.sample_count {
        // Base and perturbed measures for every population.
        let mut base = Vec::with_capacity(np);
        let mut moved = Vec::with_capacity(np);
        for pop in model.populations() {
            let mut pts = vec![0.0; n_atoms * d];
            for chunk in pts.chunks_exact_mut(d) {
                pop.initial_law.sample_into(&mut rng, chunk);
            }
            let shifted: Vec<f64> = pts.iter().map(|v| v + rng.random_range(-cfg.perturbation..=cfg.perturbation)).collect();
            base.push(EmpiricalMeasure::uniform(d, pts)?);
            moved.push(EmpiricalMeasure::uniform(d, shifted)?);
        }
        let mut w_dist: f64 = 0.0;
        for (a, b) in base.iter().zip(&moved) {
            w_dist = w_dist.max(wasserstein_small_nd(a, b, 1)?);
        }
        let vb: Vec<MeasureView<'_>> = base.iter().map(|m| m.view()).collect();
        let vm: Vec<MeasureView<'_>> = moved.iter().map(|m| m.view()).collect();

        for (p, pop) in model.populations().iter().enumerate() {
            let mut x = vec![0.0; d];
            pop.initial_law.sample_into(&mut rng, &mut x);
            let y: Vec<f64> = x.iter().map(|v| v + rng.random_range(-cfg.perturbation..=cfg.perturbation)).collect();
            let dx = dist(&x, &y);
            let t1 = rng.random_range(0.0..=model.horizon());
            let t2 = rng.random_range(0.0..=model.horizon());
            let rep = &mut reports[p];

            let vec_eval = |which: u8, pt: &[f64], m: &[MeasureView<'_>]| -> Vec<f64> {
                let mut out = vec![0.0; d];
                match which {
                    0 => pop.drift.eval_into(pt, m, &mut out),
                    1 => pop.running_cost.gradient_into(pt, m, &mut out),
                    _ => pop.terminal_cost.gradient_into(pt, m, &mut out),
                }
                out
            };
            let mut usable = false;
            if dx > 0.0 {
                usable = true;
                for (which, slot) in [(0u8, &mut rep.drift_x), (1, &mut rep.running_gradient_x), (2, &mut rep.terminal_gradient_x)] {
                    let q = dist(&vec_eval(which, &x, &vb), &vec_eval(which, &y, &vb)) / dx;
                    *slot = slot.max(q);
                }
                let (mut sx, mut sy) = (vec![0.0; d], vec![0.0; d]);
                pop.diffusion.eval_into(t1, &x, &mut sx);
                pop.diffusion.eval_into(t1, &y, &mut sy);
                rep.diffusion_x = rep.diffusion_x.max(dist(&sx, &sy) / dx);
            } else {
                rep.skipped_pairs += 1;
            }
            if w_dist > 0.0 {
                usable = true;
                for (which, slot) in [(0u8, &mut rep.drift_m), (1, &mut rep.running_gradient_m), (2, &mut rep.terminal_gradient_m)] {
                    let q = dist(&vec_eval(which, &x, &vb), &vec_eval(which, &x, &vm)) / w_dist;
                    *slot = slot.max(q);
                }
            } else {
                rep.skipped_pairs += 1;
            }
            let dt = (t1 - t2).abs();
            if dt > 0.0 {
                let (mut s1, mut s2) = (vec![0.0; d], vec![0.0; d]);
                pop.diffusion.eval_into(t1, &x, &mut s1);
                pop.diffusion.eval_into(t2, &x, &mut s2);
                rep.diffusion_t = rep.diffusion_t.max(dist(&s1, &s2) / dt);
            } else {
                rep.skipped_pairs += 1;
            }
            any_valid |= usable;
        }
    }
    if !any_valid {
        return Err(ModelError::DegenerateSamples);
    }
    for rep in &mut reports {
        rep.flagged = rep.quotients().iter().filter(|(_, q)| !q.is_finite() || *q > cfg.cap).map(|(name, _)| *name).collect();
    }
    Ok(reports)
}
