//! One-dimensional quadratic games: running cost `q/2·(x − c·mean(m))²`,
//! terminal cost `r/2·x²`, linear drift `−k·x`, affine penalty and constant
//! noise. Named presets: `ou`, `lq`, `lq_mean`.

use std::sync::Arc;

use crate::model::{ControlPenalty, CostFunction, DiffusionFunction, DriftFunction, InitialLaw, ModelError, ModelSpec, PopulationSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticParams {
    pub running_weight: f64,
    pub mean_coupling: f64,
    pub terminal_weight: f64,
    pub alpha: f64,
    pub alpha_slope: f64,
    pub sigma: f64,
    pub drift_rate: f64,
    pub horizon: f64,
    pub init_mean: f64,
    pub init_var: f64,
}

impl QuadraticParams {
    /// `h = x²/2`, no terminal cost, `T = 8`: the controlled state is an
    /// Ornstein–Uhlenbeck process with stationary variance `σ²/2`.
    pub fn ou() -> Self {
        Self {
            running_weight: 1.0,
            mean_coupling: 0.0,
            terminal_weight: 0.0,
            alpha: 1.0,
            alpha_slope: 0.0,
            sigma: 1.0,
            drift_rate: 0.0,
            horizon: 8.0,
            init_mean: 1.0,
            init_var: 0.25,
        }
    }

    /// `h = g = x²/2`, `T = 1`.
    pub fn lq() -> Self {
        Self { terminal_weight: 1.0, horizon: 1.0, init_mean: 0.5, ..Self::ou() }
    }

    /// As `lq` with `h = ½(x − mean(m))²`.
    pub fn lq_mean() -> Self {
        Self { mean_coupling: 1.0, ..Self::lq() }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "ou" => Some(Self::ou()),
            "lq" => Some(Self::lq()),
            "lq_mean" => Some(Self::lq_mean()),
            _ => None,
        }
    }

    pub fn build(&self) -> Result<ModelSpec, ModelError> {
        if !(self.init_var > 0.0) {
            return Err(ModelError::Invalid(format!("init_var must be positive, got {}", self.init_var)));
        }
        if self.sigma < 0.0 {
            return Err(ModelError::Invalid(format!("sigma must be nonnegative, got {}", self.sigma)));
        }
        let (q, c, r, k) = (self.running_weight, self.mean_coupling, self.terminal_weight, self.drift_rate);
        let mut pop = PopulationSpec::basic(1);
        pop.running_cost = if c == 0.0 {
            CostFunction::local(move |x| 0.5 * q * x[0] * x[0], move |x, g| g[0] = q * x[0])
        } else {
            CostFunction::new(
                Arc::new(move |x, m| 0.5 * q * (x[0] - c * m[0].mean()[0]).powi(2)),
                Arc::new(move |x, m, g| g[0] = q * (x[0] - c * m[0].mean()[0])),
            )
        };
        pop.terminal_cost =
            if r == 0.0 { CostFunction::zero() } else { CostFunction::local(move |x| 0.5 * r * x[0] * x[0], move |x, g| g[0] = r * x[0]) };
        pop.drift = if k == 0.0 { DriftFunction::zero() } else { DriftFunction::local(move |x, out| out[0] = -k * x[0]) };
        pop.penalty = ControlPenalty::affine(self.alpha, self.alpha_slope);
        pop.penalty.validate(self.horizon, 64, 1e-4)?;
        pop.diffusion = DiffusionFunction::constant(vec![self.sigma]);
        pop.initial_law = InitialLaw::gaussian(vec![self.init_mean], vec![self.init_var.sqrt()]);
        ModelSpec::new(1, self.horizon, vec![pop])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brs::brs_control_limit;
    use crate::measures::EmpiricalMeasure;

    #[test]
    fn presets_build() {
        for name in ["ou", "lq", "lq_mean"] {
            let m = QuadraticParams::by_name(name).unwrap().build().unwrap();
            assert_eq!(m.dim(), 1);
        }
        assert!(QuadraticParams::by_name("nope").is_none());
        assert!(QuadraticParams { alpha: -1.0, ..QuadraticParams::lq() }.build().is_err());
    }

    #[test]
    fn lq_control_combines_running_and_terminal_terms() {
        // ∇(h + g/T) = x + x/T with T = 1.
        let m = QuadraticParams::lq().build().unwrap();
        let e = EmpiricalMeasure::from_scalars(&[0.0]).unwrap();
        assert_eq!(brs_control_limit(&m, 0, 0.0, &[1.5], &[e.view()]).unwrap(), vec![-3.0]);
        let m = QuadraticParams::lq_mean().build().unwrap();
        let e = EmpiricalMeasure::from_scalars(&[1.0, 3.0]).unwrap();
        assert_eq!(brs_control_limit(&m, 0, 0.0, &[2.0], &[e.view()]).unwrap(), vec![-2.0]);
    }
}
