//! Two application games.
//!
//! Wealth: agents carry an economic configuration `y` and wealth `z`;
//! configurations drift with `v(x)` and agents trade wealth through the
//! interaction cost
//! `h(x, m) = ∫ ξ((ρ(y) + ρ(y′))/2)·Ψ(y − y′)·φ(z − z′) m(dx′)` with the local
//! density `ρ(y) = ∫ Ψ(y − y′) m(dx′)`. Only `z` is controlled and wealth
//! noise is multiplicative, `σ = diag(0, √(2κ)·z)`.
//!
//! Crowd: two pedestrian populations on a box with running cost
//! `h_i = m_i(x) + λ·m_j(x)` and terminal costs `Ψ_i` pulling toward targets.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::measures::{next_memo_key, Axis, FvGrid, GridDensity, MeasureView};
use crate::model::{ControlPenalty, CostFunction, DiffusionFunction, DriftFunction, InitialLaw, ModelError, ModelSpec, PopulationSpec, ReflectBelow};

type RealFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Even real function with its derivative.
#[derive(Clone)]
pub struct EvenKernel {
    value: RealFn,
    derivative: RealFn,
}

impl EvenKernel {
    pub fn new(value: RealFn, derivative: RealFn) -> Self {
        Self { value, derivative }
    }

    /// `exp(−r²/(2w²))`.
    pub fn gaussian(width: f64) -> Self {
        let s = 1.0 / (width * width);
        Self::new(Arc::new(move |r| (-0.5 * r * r * s).exp()), Arc::new(move |r| -r * s * (-0.5 * r * r * s).exp()))
    }

    /// `r²/2`.
    pub fn quadratic() -> Self {
        Self::new(Arc::new(|r| 0.5 * r * r), Arc::new(|r| r))
    }

    pub fn constant(c: f64) -> Self {
        Self::new(Arc::new(move |_| c), Arc::new(|_| 0.0))
    }

    pub fn value(&self, r: f64) -> f64 {
        (self.value)(r)
    }

    pub fn derivative(&self, r: f64) -> f64 {
        (self.derivative)(r)
    }

    /// Samples evenness on `[0, 5·scale]`.
    fn check_even(&self, name: &str, scale: f64) -> Result<(), ModelError> {
        for k in 0..=200 {
            let r = 5.0 * scale * k as f64 / 200.0;
            let (a, b) = (self.value(r), self.value(-r));
            if (a - b).abs() > 1e-12 * (1.0 + a.abs()) {
                return Err(ModelError::Invalid(format!("{name} is not even: {name}({r}) = {a}, {name}({}) = {b}", -r)));
            }
        }
        Ok(())
    }
}

/// Trading intensity `ξ` as a function of the average local density.
#[derive(Clone)]
pub struct Transfer {
    value: RealFn,
    derivative: RealFn,
}

impl Transfer {
    pub fn new(value: RealFn, derivative: RealFn) -> Self {
        Self { value, derivative }
    }

    pub fn identity() -> Self {
        Self::new(Arc::new(|r| r), Arc::new(|_| 1.0))
    }

    pub fn constant(c: f64) -> Self {
        Self::new(Arc::new(move |_| c), Arc::new(|_| 0.0))
    }

    pub fn value(&self, r: f64) -> f64 {
        (self.value)(r)
    }

    pub fn derivative(&self, r: f64) -> f64 {
        (self.derivative)(r)
    }
}

pub type PointFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct WealthParams {
    /// Wealth diffusion constant.
    pub kappa: f64,
    /// Configuration speed `v(y, z)`.
    pub v: PointFn,
    pub psi: EvenKernel,
    pub phi: EvenKernel,
    pub xi: Transfer,
    /// Reflection floor for wealth.
    pub z_min: f64,
    pub initial: InitialLaw,
}

impl WealthParams {
    /// Gaussian `Ψ` of width `psi_width`, `φ = z²/2`, `ξ(r) = r`,
    /// `v = −v_rate·y`, `y ~ N(0, 1)` and log-normal wealth with median 1
    /// and log-spread `z_log_std`.
    pub fn with_defaults(kappa: f64, v_rate: f64, psi_width: f64, z_min: f64, z_log_std: f64) -> Self {
        Self {
            kappa,
            v: Arc::new(move |x| -v_rate * x[0]),
            psi: EvenKernel::gaussian(psi_width),
            phi: EvenKernel::quadratic(),
            xi: Transfer::identity(),
            z_min,
            initial: log_normal_wealth(z_log_std, z_min),
        }
    }
}

impl Default for WealthParams {
    fn default() -> Self {
        Self::with_defaults(0.05, 0.5, 1.0, 1e-6, 0.3)
    }
}

/// `y ~ N(0, 1)`, `log z ~ N(0, s²)` (samples below `z_min` are reflected).
pub fn log_normal_wealth(s: f64, z_min: f64) -> InitialLaw {
    InitialLaw::from_density(
        move |rng, out| {
            out[0] = rng.sample(StandardNormal);
            let n: f64 = rng.sample(StandardNormal);
            out[1] = (s * n).exp().max(z_min);
        },
        move |x| {
            if x[1] <= 0.0 {
                return 0.0;
            }
            let l = x[1].ln();
            (-0.5 * x[0] * x[0]).exp() * (-0.5 * l * l / (s * s)).exp() / x[1]
        },
    )
}

/// Local density `ρ` at every atom of the view's underlying support.
fn rho_at_atoms(m: &MeasureView<'_>, key: u64, psi: &EvenKernel) -> Arc<Vec<f64>> {
    m.support_memo(key, |y| m_full_rho(m, y[0], psi))
}

/// `ρ` of the underlying (non-excluded) measure at `y`.
fn m_full_rho(m: &MeasureView<'_>, y: f64, psi: &EvenKernel) -> f64 {
    let full = match *m {
        MeasureView::Empirical { measure, .. } => measure.view(),
        grid => grid,
    };
    full.integrate(|p| psi.value(y - p[0]))
}

/// `ρ_view(y_j)` corrected for the excluded atom of a leave-one-out view.
#[inline]
fn rho_view(m: &MeasureView<'_>, full: &[f64], j: usize, psi: &EvenKernel, excluded: Option<(f64, f64)>) -> f64 {
    match excluded {
        None => full[j],
        Some((wi, yi)) => {
            let mut p = [0.0; 2];
            m.base_point(j, &mut p);
            (full[j] - wi * psi.value(p[0] - yi)) / (1.0 - wi)
        }
    }
}

fn excluded_atom(m: &MeasureView<'_>) -> Option<(f64, f64)> {
    m.excluded().map(|i| {
        let mut p = [0.0; 2];
        m.base_point(i, &mut p);
        (m.base_weight(i), p[0])
    })
}

/// Builds the wealth game (`d = 2`, one population).
pub fn build_wealth_model(params: &WealthParams) -> Result<ModelSpec, ModelError> {
    if !(params.z_min > 0.0) {
        return Err(ModelError::Invalid(format!("z_min must be positive, got {}", params.z_min)));
    }
    if !(params.kappa > 0.0) {
        return Err(ModelError::Invalid(format!("kappa must be positive, got {}", params.kappa)));
    }
    params.psi.check_even("Psi", 1.0)?;
    params.phi.check_even("phi", 1.0)?;
    let key = next_memo_key();

    let (psi, phi, xi) = (params.psi.clone(), params.phi.clone(), params.xi.clone());
    let value = move |x: &[f64], m: &[MeasureView<'_>]| -> f64 {
        let view = &m[0];
        let full = rho_at_atoms(view, key, &psi);
        let ex = excluded_atom(view);
        let rho_x = view.integrate(|p| psi.value(x[0] - p[0]));
        let mut acc = 0.0;
        view.for_each_indexed_atom(|j, p, w| {
            if w == 0.0 {
                return;
            }
            let r = 0.5 * (rho_x + rho_view(view, &full, j, &psi, ex));
            acc += w * xi.value(r) * psi.value(x[0] - p[0]) * phi.value(x[1] - p[1]);
        });
        acc
    };
    let (psi, phi, xi) = (params.psi.clone(), params.phi.clone(), params.xi.clone());
    let gradient = move |x: &[f64], m: &[MeasureView<'_>], out: &mut [f64]| {
        let view = &m[0];
        let full = rho_at_atoms(view, key, &psi);
        let ex = excluded_atom(view);
        let (mut rho_x, mut drho_x) = (0.0, 0.0);
        view.for_each_atom(|p, w| {
            rho_x += w * psi.value(x[0] - p[0]);
            drho_x += w * psi.derivative(x[0] - p[0]);
        });
        let (mut gy, mut gz) = (0.0, 0.0);
        view.for_each_indexed_atom(|j, p, w| {
            if w == 0.0 {
                return;
            }
            let r = 0.5 * (rho_x + rho_view(view, &full, j, &psi, ex));
            let (ps, ph) = (psi.value(x[0] - p[0]), phi.value(x[1] - p[1]));
            let xv = xi.value(r);
            gy += w * (0.5 * xi.derivative(r) * drho_x * ps * ph + xv * psi.derivative(x[0] - p[0]) * ph);
            gz += w * xv * ps * phi.derivative(x[1] - p[1]);
        });
        out[0] = gy;
        out[1] = gz;
    };

    let v = params.v.clone();
    let two_kappa = (2.0 * params.kappa).sqrt();
    let pop = PopulationSpec {
        drift: DriftFunction::new(Arc::new(move |x, _, out| {
            out[0] = v(x);
            out[1] = 0.0;
        })),
        running_cost: CostFunction::new(Arc::new(value), Arc::new(gradient)),
        terminal_cost: CostFunction::zero(),
        penalty: ControlPenalty::constant(1.0),
        diffusion: DiffusionFunction::new(Arc::new(move |_, x, out| {
            out[0] = 0.0;
            out[1] = two_kappa * x[1].abs();
        })),
        initial_law: params.initial.clone(),
        control_mask: vec![false, true],
        constraint: Some(ReflectBelow { axis: 1, floor: params.z_min }),
    };
    ModelSpec::new(2, 1.0, vec![pop])
}

/// Wealth grid whose wealth axis starts at the reflection floor.
pub fn wealth_grid(params: &WealthParams, y: (f64, f64, usize), z_max: f64, z_cells: usize) -> Result<FvGrid, ModelError> {
    Ok(FvGrid::new(vec![Axis::new(y.0, y.1, y.2), Axis::new(params.z_min, z_max, z_cells)])?)
}

#[derive(Clone)]
pub struct CrowdParams {
    /// Weight on the other population's density.
    pub lambda: f64,
    pub sigma: [f64; 2],
    pub terminal: [CostFunction; 2],
    pub domain: [Axis; 2],
    pub kde_bandwidth: f64,
    pub horizon: f64,
    pub initial: [InitialLaw; 2],
}

/// `weight/2·|x − target|²` as a terminal cost.
pub fn quadratic_target(target: [f64; 2], weight: f64) -> CostFunction {
    CostFunction::local(
        move |x| 0.5 * weight * ((x[0] - target[0]).powi(2) + (x[1] - target[1]).powi(2)),
        move |x, g| {
            g[0] = weight * (x[0] - target[0]);
            g[1] = weight * (x[1] - target[1]);
        },
    )
}

impl CrowdParams {
    /// Two Gaussian groups on `[0, 10]²` crossing toward each other's start.
    pub fn crossing(lambda: f64) -> Self {
        let (a, b) = ([2.5, 5.0], [7.5, 5.0]);
        Self {
            lambda,
            sigma: [0.3, 0.3],
            terminal: [quadratic_target(b, 1.0), quadratic_target(a, 1.0)],
            domain: [Axis::new(0.0, 10.0, 40), Axis::new(0.0, 10.0, 40)],
            kde_bandwidth: 0.5,
            horizon: 4.0,
            initial: [InitialLaw::gaussian(a.to_vec(), vec![0.8, 0.8]), InitialLaw::gaussian(b.to_vec(), vec![0.8, 0.8])],
        }
    }

    pub fn grid(&self) -> Result<FvGrid, ModelError> {
        Ok(FvGrid::new(self.domain.to_vec())?)
    }
}

/// Builds the two-population crowd game (`d = 2`).
pub fn build_crowd_model(params: &CrowdParams) -> Result<ModelSpec, ModelError> {
    if !(params.lambda >= 0.0) {
        return Err(ModelError::Invalid(format!("lambda must be nonnegative, got {}", params.lambda)));
    }
    if !(params.kde_bandwidth > 0.0) {
        return Err(ModelError::Invalid("kde_bandwidth must be positive".into()));
    }
    if params.sigma.iter().any(|s| !(*s >= 0.0)) {
        return Err(ModelError::Invalid("sigma entries must be nonnegative".into()));
    }
    let pops = (0..2)
        .map(|i| {
            let j = 1 - i;
            let (lambda, bw) = (params.lambda, params.kde_bandwidth);
            let mut pop = PopulationSpec::basic(2);
            pop.running_cost = CostFunction::new(
                Arc::new(move |x, m| m[i].density_at(x, bw) + lambda * m[j].density_at(x, bw)),
                Arc::new(move |x, m, out| {
                    let mut other = [0.0; 2];
                    m[i].density_gradient(x, bw, out);
                    m[j].density_gradient(x, bw, &mut other);
                    out[0] += lambda * other[0];
                    out[1] += lambda * other[1];
                }),
            );
            pop.terminal_cost = params.terminal[i].clone();
            pop.diffusion = DiffusionFunction::constant(params.sigma.to_vec());
            pop.initial_law = params.initial[i].clone();
            pop
        })
        .collect();
    ModelSpec::new(2, params.horizon, pops)
}

/// Initial densities of both populations on `grid`, which must be the
/// parameter domain.
pub fn crowd_initial_densities(params: &CrowdParams, model: &ModelSpec, grid: &FvGrid) -> Result<Vec<GridDensity>, ModelError> {
    if grid.axes() != params.domain {
        return Err(ModelError::Invalid("population grids must match the crowd domain".into()));
    }
    model.initial_densities(grid)
}

/// `∫ min(m₁, m₂) dx` on a shared grid.
pub fn overlap(a: &GridDensity, b: &GridDensity) -> f64 {
    let vol = a.grid().cell_volume();
    a.values().iter().zip(b.values()).map(|(x, y)| x.min(*y)).sum::<f64>() * vol
}
