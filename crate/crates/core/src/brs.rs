//! One-window model-predictive control. Method 1 minimizes the discretized
//! objective over a piecewise-constant control on `[t, t+Δt]`, giving
//! `u = −∇ₓ(h + g/T) / (α(t) + Δt·α̇(t))`. Method 2 discretizes the HJB
//! equation over the same window and reads off the surrogate value
//! `h + g/T`, whose gradient gives the same control as `Δt → 0`.

use smallvec::SmallVec;

use crate::measures::MeasureView;
use crate::model::{Buf, ModelError, ModelSpec};
use crate::particle_sim::EnsembleState;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpcConfig {
    pub dt: f64,
    /// Include the `Δt·α̇(t)` correction in the penalty denominator.
    pub use_alpha_dot: bool,
}

impl MpcConfig {
    pub fn new(dt: f64) -> Self {
        Self { dt, use_alpha_dot: true }
    }

    pub fn validate(&self, horizon: f64) -> Result<(), ModelError> {
        if !(self.dt > 0.0) || self.dt > horizon {
            return Err(ModelError::Invalid(format!("MPC window must lie in (0, {horizon}], got {}", self.dt)));
        }
        Ok(())
    }
}

/// `α(t) + Δt·α̇(t)` (or `α(t)` without the correction).
pub fn penalty_denominator(model: &ModelSpec, pop: usize, t: f64, cfg: &MpcConfig) -> Result<f64, ModelError> {
    let penalty = &model.population(pop)?.penalty;
    let a = penalty.alpha(t);
    let den = if cfg.use_alpha_dot { a + cfg.dt * penalty.alpha_dot(t) } else { a };
    if !den.is_finite() {
        return Err(ModelError::NonFinite { ingredient: crate::model::Ingredient::Penalty, pop, x: vec![] });
    }
    if den <= 0.0 {
        return Err(ModelError::PenaltyNonPositive { t, value: den });
    }
    Ok(den)
}

/// Finite-window BRS control of player `i` of population `pop`, coupled to
/// the leave-one-out empirical measure of its own population and the full
/// empirical measures of the others.
pub fn brs_control_finite(model: &ModelSpec, pop: usize, i: usize, state: &EnsembleState, t: f64, cfg: &MpcConfig) -> Result<Vec<f64>, ModelError> {
    let measures = state.measures()?;
    if i >= measures[pop].len() {
        return Err(ModelError::Invalid(format!("player index {i} out of range")));
    }
    if measures[pop].len() < 2 {
        return Err(crate::measures::MeasureError::EmptyLeaveOneOut.into());
    }
    let views: SmallVec<[MeasureView<'_>; 2]> =
        measures.iter().enumerate().map(|(q, m)| if q == pop { m.view_without(i) } else { m.view() }).collect();
    let den = penalty_denominator(model, pop, t, cfg)?;
    let mut out = vec![0.0; model.dim()];
    model.control_into(pop, state.point(pop, i), &views, den, &mut out)?;
    Ok(out)
}

/// Surrogate value `(h + g/T)(x, m)` of the one-window problem.
pub fn mpc_value_surrogate(model: &ModelSpec, pop: usize, _t: f64, x: &[f64], m: &[MeasureView<'_>]) -> Result<f64, ModelError> {
    let spec = model.population(pop)?;
    Ok(spec.running_cost.value(x, m) + spec.terminal_cost.value(x, m) / model.horizon())
}

/// Limiting control `−(1/α(t))·∇ₓ(h + g/T)(x, m)`.
pub fn brs_control_limit(model: &ModelSpec, pop: usize, t: f64, x: &[f64], m: &[MeasureView<'_>]) -> Result<Vec<f64>, ModelError> {
    model.population(pop)?;
    let a = model.checked_alpha(pop, t)?;
    let mut out: Buf = SmallVec::from_elem(0.0, model.dim());
    model.control_into(pop, x, m, a, &mut out)?;
    Ok(out.to_vec())
}
