//! Best-reply strategies for mean-field games: particle systems, the
//! associated Fokker–Planck equation, the mean-field-game fixed point used as
//! a reference, and two application models.

// `!(x > 0.0)` is used on purpose so NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops over small coordinate arrays read closer to the formulas.
#![allow(clippy::needless_range_loop)]

pub mod applications;
pub mod brs;
pub mod config;
pub mod fokker_planck;
pub mod io;
pub mod measures;
pub mod mfg;
pub mod model;
pub mod particle_sim;
pub mod presets;
pub mod runner;
