//! Flat `key = value` run configuration with dotted sections.
//!
//! Values resolve in order: built-in defaults, the `model.preset` defaults
//! for the `quad.*` keys, the config file, then command-line overrides.
//! Unknown keys are rejected by name.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::presets::QuadraticParams;

/// Written into every manifest.
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("line {line}: expected key = value, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("bad value for `{key}`: `{value}` ({reason})")]
    Value { key: String, value: String, reason: String },
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

const DEFAULTS: &[(&str, &str)] = &[
    ("model.preset", "lq"),
    ("quad.running_weight", ""),
    ("quad.mean_coupling", ""),
    ("quad.terminal_weight", ""),
    ("quad.alpha", ""),
    ("quad.alpha_slope", ""),
    ("quad.sigma", ""),
    ("quad.drift_rate", ""),
    ("quad.horizon", ""),
    ("quad.init_mean", ""),
    ("quad.init_var", ""),
    ("sim.dt", "0.01"),
    ("sim.t_final", "horizon"),
    ("sim.n_particles", "1000"),
    ("sim.seed", "0"),
    ("sim.seeds", "1"),
    ("sim.record_every", "10"),
    ("sim.coupling", "leave_one_out"),
    ("sim.reference", "none"),
    ("sim.w1_time", "1"),
    ("mpc.dt", "0.001"),
    ("mpc.use_alpha_dot", "true"),
    ("mpc.dt_list", "0.1,0.05,0.025,0.0125"),
    ("grid.min", "-6"),
    ("grid.max", "6"),
    ("grid.cells", "400"),
    ("fpk.cfl", "0.9"),
    ("fpk.boundary", "no_flux"),
    ("fpk.record_every", "8"),
    ("fpk.t_final", "horizon"),
    ("mfg.n_t", "100"),
    ("mfg.max_iters", "30"),
    ("mfg.damping", "0.5"),
    ("mfg.tol", "1e-4"),
    ("chaos.n_list", "250,1000,4000"),
    ("chaos.seeds", "20"),
    ("chaos.seed_base", "0"),
    ("chaos.t_final", "1"),
    ("wealth.kappa", "0.05"),
    ("wealth.v_rate", "0.5"),
    ("wealth.psi_width", "1"),
    ("wealth.z_min", "1e-6"),
    ("wealth.z_log_std", "0.3"),
    ("wealth.horizon", "1"),
    ("wealth.y_min", "-4"),
    ("wealth.y_max", "4"),
    ("wealth.y_cells", "24"),
    ("wealth.z_max", "4"),
    ("wealth.z_cells", "24"),
    ("wealth.n_particles", "500"),
    ("crowd.lambda", "1"),
    ("crowd.sigma", "0.3,0.3"),
    ("crowd.kde_bandwidth", "0.5"),
    ("crowd.horizon", "4"),
    ("crowd.cells", "40"),
    ("crowd.size", "10"),
    ("crowd.start0", "2.5,5"),
    ("crowd.start1", "7.5,5"),
    ("crowd.target0", "7.5,5"),
    ("crowd.target1", "2.5,5"),
    ("crowd.target_weight", "1"),
    ("crowd.init_std", "0.8"),
    ("crowd.t_final", "1"),
    ("crowd.n_particles", "0"),
];

/// Keys that select where or how fast a run happens, not what it computes;
/// they never enter the manifest.
const RUNTIME_KEYS: &[&str] = &["run.workers", "run.out"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax { line: n + 1, text: raw.to_string() })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn split_override(s: &str) -> Result<(String, String), ConfigError> {
    s.split_once('=').map(|(k, v)| (k.trim().to_string(), v.trim().to_string())).ok_or_else(|| ConfigError::Syntax { line: 0, text: s.to_string() })
}

impl RunConfig {
    /// Resolves config text plus `key=value` overrides.
    pub fn from_text(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut given = parse_pairs(text)?;
        for o in overrides {
            given.push(split_override(o)?);
        }
        let mut values: BTreeMap<String, String> = DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        for (k, v) in given {
            if !values.contains_key(&k) && !RUNTIME_KEYS.contains(&k.as_str()) {
                return Err(ConfigError::UnknownKey(k));
            }
            values.insert(k, v);
        }
        let mut cfg = Self { values };
        cfg.fill_preset()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_text(&text, overrides)
    }

    fn fill_preset(&mut self) -> Result<(), ConfigError> {
        let name = self.str("model.preset").to_string();
        let p = QuadraticParams::by_name(&name).ok_or_else(|| ConfigError::Value {
            key: "model.preset".into(),
            value: name.clone(),
            reason: "expected ou, lq or lq_mean".into(),
        })?;
        let preset = [
            ("quad.running_weight", p.running_weight),
            ("quad.mean_coupling", p.mean_coupling),
            ("quad.terminal_weight", p.terminal_weight),
            ("quad.alpha", p.alpha),
            ("quad.alpha_slope", p.alpha_slope),
            ("quad.sigma", p.sigma),
            ("quad.drift_rate", p.drift_rate),
            ("quad.horizon", p.horizon),
            ("quad.init_mean", p.init_mean),
            ("quad.init_var", p.init_var),
        ];
        for (k, v) in preset {
            let slot = self.values.get_mut(k).expect("default present");
            if slot.is_empty() {
                *slot = v.to_string();
            }
        }
        Ok(())
    }

    pub fn str(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn is_set(&self, key: &str) -> bool {
        !self.str(key).is_empty()
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.str(key);
        v.parse::<T>().map_err(|e| ConfigError::Value { key: key.into(), value: v.into(), reason: e.to_string() })
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.str(key);
        v.split(',')
            .map(|s| s.trim().parse::<T>().map_err(|e| ConfigError::Value { key: key.into(), value: v.into(), reason: e.to_string() }))
            .collect()
    }

    /// A time key that may read `horizon`.
    pub fn time(&self, key: &str, horizon: f64) -> Result<f64, ConfigError> {
        if self.str(key) == "horizon" {
            Ok(horizon)
        } else {
            self.get(key)
        }
    }

    pub fn quadratic(&self) -> Result<QuadraticParams, ConfigError> {
        Ok(QuadraticParams {
            running_weight: self.get("quad.running_weight")?,
            mean_coupling: self.get("quad.mean_coupling")?,
            terminal_weight: self.get("quad.terminal_weight")?,
            alpha: self.get("quad.alpha")?,
            alpha_slope: self.get("quad.alpha_slope")?,
            sigma: self.get("quad.sigma")?,
            drift_rate: self.get("quad.drift_rate")?,
            horizon: self.get("quad.horizon")?,
            init_mean: self.get("quad.init_mean")?,
            init_var: self.get("quad.init_var")?,
        })
    }

    /// Worker count, 0 meaning one per core.
    pub fn workers(&self) -> Result<usize, ConfigError> {
        if self.is_set("run.workers") {
            self.get("run.workers")
        } else {
            Ok(0)
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        if !self.values.contains_key(key) && !RUNTIME_KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey(key.into()));
        }
        self.values.insert(key.into(), value.into());
        Ok(())
    }

    /// Sorted resolved keys plus the artifact version; runtime keys are
    /// left out so the manifest is itself a valid config reproducing the run.
    pub fn manifest(&self, command: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# brsmfg {ARTIFACT_VERSION}");
        let _ = writeln!(s, "# command={command}");
        for (k, v) in &self.values {
            if !RUNTIME_KEYS.contains(&k.as_str()) {
                let _ = writeln!(s, "{k} = {v}");
            }
        }
        s
    }
}
