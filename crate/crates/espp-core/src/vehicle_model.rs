//! Linear two-degree-of-freedom bicycle model.
//!
//! Lateral state [Y, beta, psi, psi_dot] evolves by a forward-Euler
//! discretization of the constant-speed single-track equations; the
//! longitudinal coordinate advances kinematically and braking is a constant
//! deceleration clamped at standstill. Below 0.1 m/s the lateral dynamics
//! freeze (the model divides by speed).

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LOW_SPEED_FREEZE: f64 = 0.1;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleParams {
    /// Mass, kg.
    pub m: f64,
    /// Yaw inertia, kg m^2.
    pub i_z: f64,
    /// Front/rear axle distances from the center of gravity, m.
    pub l_f: f64,
    pub l_r: f64,
    /// Front/rear cornering stiffness, N/rad.
    pub c_f: f64,
    pub c_r: f64,
    /// Footprint, m.
    pub width: f64,
    pub length: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleParams {
            m: 1530.0,
            i_z: 2315.3,
            l_f: 1.232,
            l_r: 1.468,
            c_f: 66900.0,
            c_r: 66900.0,
            width: 1.6,
            length: 4.7,
        }
    }
}

impl VehicleParams {
    pub fn wheelbase(&self) -> f64 {
        self.l_f + self.l_r
    }

    /// Understeer gradient (rad per m/s^2 of lateral acceleration): the
    /// steering a steady turn needs on top of the kinematic wheelbase term.
    /// Positive when the front axle saturates first.
    pub fn understeer_gradient(&self) -> f64 {
        self.m * (self.l_r * self.c_r - self.l_f * self.c_f)
            / (self.wheelbase() * self.c_f * self.c_r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m <= 0.0
            || self.i_z <= 0.0
            || self.l_f <= 0.0
            || self.l_r <= 0.0
            || self.c_f <= 0.0
            || self.c_r <= 0.0
            || self.width <= 0.0
            || self.length <= 0.0
        {
            return Err(Error::InvalidArgument(
                "vehicle parameters must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Full planar state. x/y in world meters, angles in radians.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub beta: f64,
    pub psi: f64,
    pub psi_dot: f64,
}

impl VehicleState {
    pub fn lateral(&self) -> SVector<f64, 4> {
        SVector::<f64, 4>::new(self.y, self.beta, self.psi, self.psi_dot)
    }
}

/// Discrete lateral model: x(k+1) = A x(k) + B u(k), y(k) = C x(k) with
/// outputs [Y, beta, psi_dot].
#[derive(Debug, Clone)]
pub struct DiscreteSS {
    pub a: SMatrix<f64, 4, 4>,
    pub b: SVector<f64, 4>,
    pub c: SMatrix<f64, 3, 4>,
}

/// Continuous sideslip/yaw accelerations at speed `v` for steering `delta_f`.
pub fn continuous_dynamics(
    beta: f64,
    psi_dot: f64,
    v: f64,
    delta_f: f64,
    p: &VehicleParams,
) -> (f64, f64) {
    let stiffness_sum = p.c_f + p.c_r;
    let stiffness_moment = p.c_r * p.l_r - p.c_f * p.l_f;
    let beta_dot = -stiffness_sum / (p.m * v) * beta
        + (stiffness_moment / (p.m * v * v) - 1.0) * psi_dot
        + p.c_f / (p.m * v) * delta_f;
    let psi_ddot = stiffness_moment / p.i_z * beta
        - (p.c_f * p.l_f * p.l_f + p.c_r * p.l_r * p.l_r) / (p.i_z * v) * psi_dot
        + p.c_f * p.l_f / p.i_z * delta_f;
    (beta_dot, psi_ddot)
}

/// Forward-Euler discretization at speed `v` and step `t_s`.
pub fn discretize(v: f64, t_s: f64, p: &VehicleParams) -> DiscreteSS {
    let stiffness_sum = p.c_f + p.c_r;
    let stiffness_moment = p.c_r * p.l_r - p.c_f * p.l_f;
    let mut a = SMatrix::<f64, 4, 4>::identity();
    a[(0, 1)] = t_s * v;
    a[(0, 2)] = t_s * v;
    a[(1, 1)] = 1.0 - t_s * stiffness_sum / (p.m * v);
    a[(1, 3)] = t_s * (stiffness_moment / (p.m * v * v) - 1.0);
    a[(3, 1)] = t_s * stiffness_moment / p.i_z;
    a[(3, 3)] = 1.0 - t_s * (p.c_f * p.l_f * p.l_f + p.c_r * p.l_r * p.l_r) / (p.i_z * v);
    a[(2, 3)] = t_s;
    let mut b = SVector::<f64, 4>::zeros();
    b[1] = t_s * p.c_f / (p.m * v);
    b[3] = t_s * p.c_f * p.l_f / p.i_z;
    let mut c = SMatrix::<f64, 3, 4>::zeros();
    c[(0, 0)] = 1.0;
    c[(1, 1)] = 1.0;
    c[(2, 3)] = 1.0;
    DiscreteSS { a, b, c }
}

/// Advance one step: lateral dynamics (frozen below 0.1 m/s), kinematic x,
/// constant-deceleration braking clamped at zero speed.
pub fn step(
    state: &VehicleState,
    delta_f: f64,
    decel: f64,
    t_s: f64,
    p: &VehicleParams,
) -> VehicleState {
    debug_assert!(decel >= 0.0);
    let mut next = *state;
    if state.v >= LOW_SPEED_FREEZE {
        let ss = discretize(state.v, t_s, p);
        let lat = ss.a * state.lateral() + ss.b * delta_f;
        next.y = lat[0];
        next.beta = lat[1];
        next.psi = lat[2];
        next.psi_dot = lat[3];
    }
    next.x = state.x + t_s * state.v * state.psi.cos();
    next.v = (state.v - decel * t_s).max(0.0);
    next
}
