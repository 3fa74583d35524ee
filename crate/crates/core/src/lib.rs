//! Threshold-constrained optimal control of SIR epidemics whose transmission
//! rate responds to the state of the epidemic.
//!
//! The crate simulates the controlled dynamics, builds the phase-plane
//! geometry that splits the state space into safe and unsafe starts, runs the
//! filling-the-box controller and numerically verifies its optimality.

// `!(v > 0.0)` also rejects NaN, which the suggested rewrite would not.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod controller;
pub mod dynamics;
pub mod error;
pub mod geometry;
pub mod numeric;
pub mod rate;
pub mod verification;

pub use controller::{
    filling_the_box_at_level, mu, run_filling_the_box, v_partials, value_function, FillingTheBoxRun, Regime,
    RunSummary, VPartials, ValueQuery,
};
pub use dynamics::{
    cost_j, simulate, simulate_backward, simulate_from, step, ControlSignal, EpidemicState, Event, EventKind,
    FeedbackPolicy, IntegratorConfig, PiecewiseConstant, Stop, Trajectory,
};
pub use error::{Error, Result};
pub use geometry::{compute_separatrix, compute_tilde_y, kappa, GeometryCache, RegionLabel};
pub use rate::{ModelInstance, ModelSpec, Polynomial, RateFamily, RateModel};
