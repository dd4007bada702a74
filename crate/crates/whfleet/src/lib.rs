//! Fleet-scale control of simulated electric water heaters.
//!
//! A population of thermostatically controlled water heaters is steered to
//! satisfy aggregate consumption constraints (signal tracking, consumption
//! caps, ramp limits) while every unit keeps obeying its thermostat physics
//! and a per-day switch budget. The coordination problem is posed as an
//! entropy-regularized optimal transport problem between the uncontrolled
//! trajectory law and a controlled one, subject to moment constraints on the
//! aggregate; the solver works on the dual with Monte-Carlo gradient
//! estimates built from importance-weighted trajectory samples, so the
//! continuous temperature state never has to be discretized.
//!
//! Module map:
//!
//! * [`model`] — water-heater physics, thermostat policies, switch-set
//!   sampling, and synthetic water-drain scenarios.
//! * [`constraints`] — aggregate constraint rows and the local transport cost.
//! * [`mcot`] — the dual solver: importance weights, gradient estimator, and
//!   the stochastic multiplier-ascent loop.
//! * [`control`] — experiment loops: train-and-evaluate, model predictive
//!   control, and online signal tracking.
//! * [`oracle`] — brute-force primal solver on tiny finite instances, used as
//!   ground truth in tests and by the `verify` subcommand.
//! * [`harness`] — configuration, CSV artifacts, and the run dispatcher
//!   behind the CLI.

pub mod constraints;
pub mod control;
pub mod error;
pub mod harness;
pub mod mcot;
pub mod model;
pub mod oracle;
pub mod rng;

pub use error::{Error, Result};
