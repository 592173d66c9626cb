//! Emergency-stopping path planning for highway driving.
//!
//! The library covers the full loop: adaptive potential fields over a
//! straight multi-lane road ([`potential_field`]), a blind-alley emergency
//! trigger that probes the field heading against the braking envelope
//! ([`emergency_trigger`]), a bounded cubic escape-curve planner driven by
//! a small dense QP ([`espp_planner`], [`clothoid`], [`qp_core`]), a
//! condensed MPC tracking controller on a two-degree-of-freedom bicycle
//! model ([`mpc_controller`], [`vehicle_model`]), and a deterministic
//! closed-loop cut-in scenario that exercises all of it ([`simulator`]).
//!
//! Heavy loops (field grids, candidate scoring, scenario sweeps) fan out
//! through [`par`], which maps onto rayon under the default `parallel`
//! feature and degrades to plain iteration without it.

pub mod clothoid;
pub mod config;
pub mod emergency_trigger;
pub mod error;
pub mod espp_planner;
pub mod geometry;
pub mod mpc_controller;
pub mod par;
pub mod potential_field;
pub mod qp_core;
pub mod simulator;
pub mod vehicle_model;

pub use config::SimConfig;
pub use error::{Error, Result};
pub use simulator::{run_scenario, sweep, sweep_seq, PlannerKind, SimOutput};
