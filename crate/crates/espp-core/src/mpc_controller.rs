//! Model-predictive tracking of the lateral reference.
//!
//! The controller condenses the discrete bicycle model over a prediction
//! horizon into dense matrices, then solves a small QP in the steering-rate
//! moves plus one slack variable. Position bounds are soft (linear slack
//! penalty); sideslip and yaw-rate bounds are hard; steering magnitude and
//! rate are box/cumulative constraints.

use nalgebra::{DMatrix, DVector, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::potential_field::RoadGeometry;
use crate::qp_core::{self, KktReport, QpProblem};
use crate::vehicle_model::DiscreteSS;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    /// Prediction and control horizons, steps.
    pub n_p: usize,
    pub n_c: usize,
    /// Controller period, s.
    pub t_s: f64,
    /// Output error weights for [Y, beta, psi_dot].
    pub q: [f64; 3],
    /// Steering-rate move weight.
    pub r: f64,
    /// Linear slack penalty on the position bounds.
    pub lambda: f64,
    /// Steering magnitude and per-step rate limits, rad.
    pub u_max: f64,
    pub du_max: f64,
    /// Hard output limits.
    pub beta_max: f64,
    pub psi_dot_max: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            n_p: 20,
            n_c: 5,
            t_s: 0.01,
            q: [0.01, 0.001, 0.001],
            r: 0.1,
            lambda: 0.15,
            u_max: 0.2,
            du_max: 0.015,
            beta_max: 0.3,
            psi_dot_max: 0.4,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_p == 0 || self.n_c == 0 || self.n_c > self.n_p {
            return Err(Error::InvalidArgument(format!(
                "horizons must satisfy 1 <= n_c <= n_p, got n_c = {}, n_p = {}",
                self.n_c, self.n_p
            )));
        }
        if self.t_s <= 0.0 || self.r <= 0.0 || self.lambda < 0.0 {
            return Err(Error::InvalidArgument(
                "t_s and r must be positive, lambda nonnegative".into(),
            ));
        }
        if self.q.iter().any(|&w| w < 0.0) {
            return Err(Error::InvalidArgument("output weights must be nonnegative".into()));
        }
        if self.u_max <= 0.0 || self.du_max <= 0.0 || self.beta_max <= 0.0 || self.psi_dot_max <= 0.0
        {
            return Err(Error::InvalidArgument("limits must be positive".into()));
        }
        Ok(())
    }
}

/// Lower/upper limits on the outputs [Y, beta, psi_dot].
#[derive(Debug, Clone, Copy)]
pub struct OutputBounds {
    pub y_min: [f64; 3],
    pub y_max: [f64; 3],
}

/// Output limits for the current mode: the position floor drops from the
/// road edge to the emergency-stopping-lane boundary when `emergency` is set.
pub fn output_bounds(road: &RoadGeometry, cfg: &MpcConfig, emergency: bool) -> OutputBounds {
    let floor = if emergency {
        road.esl_lower_y
    } else {
        road.lower_edge_y
    };
    OutputBounds {
        y_min: [floor, -cfg.beta_max, -cfg.psi_dot_max],
        y_max: [road.upper_edge_y, cfg.beta_max, cfg.psi_dot_max],
    }
}

/// Desired outputs [Y, beta, psi_dot] at each prediction step.
#[derive(Debug, Clone)]
pub struct Reference {
    pub rows: Vec<[f64; 3]>,
}

impl Reference {
    /// Track lateral positions with zero desired sideslip and yaw rate,
    /// clamping each position into `[clamp.0, clamp.1]`. Shorter inputs are
    /// padded with their last element.
    pub fn from_positions(ys: &[f64], n_p: usize, clamp: (f64, f64)) -> Result<Reference> {
        if ys.is_empty() {
            return Err(Error::InvalidArgument("empty reference".into()));
        }
        let rows = (0..n_p)
            .map(|k| {
                let y = ys[k.min(ys.len() - 1)].clamp(clamp.0, clamp.1);
                [y, 0.0, 0.0]
            })
            .collect();
        Ok(Reference { rows })
    }

    /// Fully specified rows (already clamped by the caller).
    pub fn from_rows(rows: Vec<[f64; 3]>, n_p: usize) -> Result<Reference> {
        if rows.len() != n_p {
            return Err(Error::InvalidArgument(format!(
                "reference has {} rows, horizon needs {n_p}",
                rows.len()
            )));
        }
        Ok(Reference { rows })
    }

    fn stacked(&self) -> DVector<f64> {
        let mut v = DVector::zeros(3 * self.rows.len());
        for (k, row) in self.rows.iter().enumerate() {
            v[3 * k] = row[0];
            v[3 * k + 1] = row[1];
            v[3 * k + 2] = row[2];
        }
        v
    }
}

/// Condensed QP plus the pieces tests and diagnostics need.
pub struct MpcQp {
    pub problem: QpProblem,
    /// Constant cost term: J_true = qp objective + constant.
    pub constant: f64,
    /// Stacked output sensitivity to the moves (3 n_p x n_c).
    pub theta: DMatrix<f64>,
    /// Free response Phi x0 + Gamma u_prev (3 n_p).
    pub base: DVector<f64>,
    /// Stacked reference (3 n_p).
    pub reference: DVector<f64>,
    /// Feasible starting point for the active-set solver.
    pub z0: DVector<f64>,
    pub n_c: usize,
}

/// One controller step's outcome.
#[derive(Debug, Clone, Copy)]
pub struct MpcStep {
    pub delta_f: f64,
    pub du0: f64,
    pub epsilon: f64,
    /// Full tracking cost at the optimum (constant term included).
    pub objective: f64,
    pub kkt: KktReport,
}

/// Condense the model and assemble the QP in z = [du(0..n_c-1), epsilon].
pub fn build_qp(
    ss: &DiscreteSS,
    x0: SVector<f64, 4>,
    u_prev: f64,
    reference: &Reference,
    bounds: &OutputBounds,
    cfg: &MpcConfig,
) -> Result<MpcQp> {
    cfg.validate()?;
    if reference.rows.len() != cfg.n_p {
        return Err(Error::InvalidArgument(format!(
            "reference rows {} != n_p {}",
            reference.rows.len(),
            cfg.n_p
        )));
    }
    let n_p = cfg.n_p;
    let n_c = cfg.n_c;
    let nz = n_c + 1;

    // powers of A and step-sum input maps S_k = (sum_{j<k} A^j) B
    let mut a_pow = Vec::with_capacity(n_p + 1);
    a_pow.push(nalgebra::SMatrix::<f64, 4, 4>::identity());
    for k in 0..n_p {
        a_pow.push(ss.a * a_pow[k]);
    }
    let mut s = Vec::with_capacity(n_p + 1);
    s.push(SVector::<f64, 4>::zeros());
    for k in 0..n_p {
        s.push(s[k] + a_pow[k] * ss.b);
    }

    let mut base = DVector::zeros(3 * n_p);
    let mut theta = DMatrix::zeros(3 * n_p, n_c);
    for k in 1..=n_p {
        let free = ss.c * (a_pow[k] * x0 + s[k] * u_prev);
        for c in 0..3 {
            base[3 * (k - 1) + c] = free[c];
        }
        for i in 0..n_c.min(k) {
            let block = ss.c * s[k - i];
            for c in 0..3 {
                theta[(3 * (k - 1) + c, i)] = block[c];
            }
        }
    }

    let reference_vec = reference.stacked();
    let error0 = &base - &reference_vec;

    // weighted quadratic cost in the moves, linear in the slack
    let mut q_bar = DVector::zeros(3 * n_p);
    for k in 0..n_p {
        for c in 0..3 {
            q_bar[3 * k + c] = cfg.q[c];
        }
    }
    let mut h = DMatrix::zeros(nz, nz);
    let mut f = DVector::zeros(nz);
    let theta_weighted = {
        let mut tw = theta.clone();
        for r in 0..3 * n_p {
            for c in 0..n_c {
                tw[(r, c)] *= q_bar[r];
            }
        }
        tw
    };
    let h_uu = 2.0 * (theta.transpose() * &theta_weighted);
    for i in 0..n_c {
        for j in 0..n_c {
            h[(i, j)] = h_uu[(i, j)] + if i == j { 2.0 * cfg.r } else { 0.0 };
        }
    }
    let f_u = 2.0 * (theta_weighted.transpose() * &error0);
    for i in 0..n_c {
        f[i] = f_u[i];
    }
    f[n_c] = cfg.lambda;
    let constant = error0
        .iter()
        .zip(q_bar.iter())
        .map(|(e, w)| w * e * e)
        .sum::<f64>();

    // rows: cumulative steering, soft position, hard sideslip / yaw rate
    let n_rows = 2 * n_c + 2 * n_p + 4 * n_p;
    let mut g = DMatrix::zeros(n_rows, nz);
    let mut rhs = DVector::zeros(n_rows);
    let mut row = 0;
    for i in 0..n_c {
        for j in 0..=i {
            g[(row, j)] = 1.0;
            g[(row + 1, j)] = -1.0;
        }
        rhs[row] = cfg.u_max - u_prev;
        rhs[row + 1] = cfg.u_max + u_prev;
        row += 2;
    }
    let mut worst_soft = 0.0f64;
    for k in 0..n_p {
        let y_row = 3 * k;
        for c in 0..n_c {
            g[(row, c)] = theta[(y_row, c)];
            g[(row + 1, c)] = -theta[(y_row, c)];
        }
        g[(row, n_c)] = -1.0;
        g[(row + 1, n_c)] = -1.0;
        rhs[row] = bounds.y_max[0] - base[y_row];
        rhs[row + 1] = base[y_row] - bounds.y_min[0];
        worst_soft = worst_soft.max(-rhs[row]).max(-rhs[row + 1]);
        row += 2;
        for (c_out, limit_lo, limit_hi) in [
            (1usize, bounds.y_min[1], bounds.y_max[1]),
            (2usize, bounds.y_min[2], bounds.y_max[2]),
        ] {
            let r0 = 3 * k + c_out;
            for c in 0..n_c {
                g[(row, c)] = theta[(r0, c)];
                g[(row + 1, c)] = -theta[(r0, c)];
            }
            rhs[row] = limit_hi - base[r0];
            rhs[row + 1] = base[r0] - limit_lo;
            row += 2;
        }
    }
    debug_assert_eq!(row, n_rows);

    let mut lb = DVector::from_element(nz, -cfg.du_max);
    let mut ub = DVector::from_element(nz, cfg.du_max);
    lb[n_c] = 0.0;
    ub[n_c] = f64::INFINITY;

    let mut z0 = DVector::zeros(nz);
    z0[n_c] = worst_soft.max(0.0) + 1e-6;

    Ok(MpcQp {
        problem: QpProblem::new(h, f, g, rhs, lb, ub),
        constant,
        theta,
        base,
        reference: reference_vec,
        z0,
        n_c,
    })
}

/// Candidate start with every move set to `du`: slack-covered rows get the
/// slack they need, and the start is kept only if all remaining rows hold.
fn feasible_uniform_start(problem: &QpProblem, n_c: usize, du: f64) -> Option<DVector<f64>> {
    let nz = n_c + 1;
    let mut z = DVector::from_element(nz, du);
    z[n_c] = 0.0;
    let mut epsilon = 0.0f64;
    for i in 0..problem.g.nrows() {
        let mut value = 0.0;
        for j in 0..n_c {
            value += problem.g[(i, j)] * du;
        }
        let residual = value - problem.rhs[i];
        if problem.g[(i, n_c)] < 0.0 {
            epsilon = epsilon.max(residual);
        } else if residual > 0.0 {
            return None;
        }
    }
    z[n_c] = epsilon + 1e-6;
    Some(z)
}

/// Stateful wrapper that carries the previous steering angle.
#[derive(Debug, Clone)]
pub struct MpcController {
    pub u_prev: f64,
}

impl Default for MpcController {
    fn default() -> Self {
        MpcController { u_prev: 0.0 }
    }
}

impl MpcController {
    pub fn new() -> Self {
        Self::default()
    }

    /// Solve one control step and advance the internal steering state.
    ///
    /// The default start holds the previous steering and sizes the slack to
    /// cover the soft rows. When the free response also breaks a hard row
    /// (saturated steering can push the sideslip past its bound), two
    /// uniform full-rate move patterns are tried as repaired starts before
    /// the step is reported infeasible.
    pub fn solve_step(
        &mut self,
        ss: &DiscreteSS,
        x0: SVector<f64, 4>,
        reference: &Reference,
        bounds: &OutputBounds,
        cfg: &MpcConfig,
    ) -> Result<MpcStep> {
        let qp = build_qp(ss, x0, self.u_prev, reference, bounds, cfg)?;
        let sol = match qp_core::solve_from(&qp.problem, qp.z0.clone()) {
            Ok(sol) => sol,
            Err(Error::Infeasible(_)) => {
                let repaired = [-cfg.du_max, cfg.du_max]
                    .iter()
                    .find_map(|&du| feasible_uniform_start(&qp.problem, qp.n_c, du));
                match repaired {
                    Some(z0) => qp_core::solve_from(&qp.problem, z0)?,
                    None => {
                        return Err(Error::Infeasible(
                            "no steering sequence satisfies the hard output bounds".into(),
                        ))
                    }
                }
            }
            Err(e) => return Err(e),
        };
        let du0 = sol.z[0];
        let epsilon = sol.z[qp.n_c];
        let delta_f = (self.u_prev + du0).clamp(-cfg.u_max, cfg.u_max);
        self.u_prev = delta_f;
        Ok(MpcStep {
            delta_f,
            du0,
            epsilon,
            objective: sol.objective + qp.constant,
            kkt: sol.kkt,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vehicle_model::{discretize, VehicleParams};
    use approx::assert_relative_eq;

    fn model30() -> DiscreteSS {
        discretize(30.0, 0.01, &VehicleParams::default())
    }

    fn road() -> RoadGeometry {
        RoadGeometry::default()
    }

    fn flat_reference(y: f64, n_p: usize) -> Reference {
        Reference::from_positions(&[y], n_p, (f64::NEG_INFINITY, f64::INFINITY)).unwrap()
    }

    #[test]
    fn qp_dimensions() {
        let cfg = MpcConfig::default();
        let bounds = output_bounds(&road(), &cfg, false);
        let x0 = SVector::<f64, 4>::new(2.0, 0.0, 0.0, 0.0);
        let qp = build_qp(&model30(), x0, 0.0, &flat_reference(2.0, 20), &bounds, &cfg).unwrap();
        assert_eq!(qp.problem.dim(), 6);
        assert_eq!(qp.problem.g.nrows(), 2 * 5 + 2 * 20 + 4 * 20);
        assert_eq!(qp.theta.nrows(), 60);
        assert_eq!(qp.theta.ncols(), 5);
    }

    #[test]
    fn condensed_prediction_matches_rollout() {
        let cfg = MpcConfig::default();
        let ss = model30();
        let bounds = output_bounds(&road(), &cfg, false);
        let x0 = SVector::<f64, 4>::new(1.5, 0.01, -0.02, 0.08);
        let u_prev = 0.03;
        let qp = build_qp(&ss, x0, u_prev, &flat_reference(2.0, 20), &bounds, &cfg).unwrap();
        let du = [0.01, -0.004, 0.002, 0.0, -0.001];
        // brute-force rollout of the same model
        let mut x = x0;
        let mut u = u_prev;
        let mut outputs = Vec::new();
        for k in 0..cfg.n_p {
            if k < cfg.n_c {
                u += du[k];
            }
            x = ss.a * x + ss.b * u;
            let y = ss.c * x;
            outputs.extend_from_slice(&[y[0], y[1], y[2]]);
        }
        let mut z = DVector::zeros(6);
        for (i, &d) in du.iter().enumerate() {
            z[i] = d;
        }
        let predicted = &qp.base + &qp.theta * z.rows(0, 5);
        for (i, &o) in outputs.iter().enumerate() {
            assert_relative_eq!(predicted[i], o, epsilon = 1e-12, max_relative = 1e-12);
        }
    }

    #[test]
    fn regulation_at_reference_is_quiescent() {
        let cfg = MpcConfig::default();
        let bounds = output_bounds(&road(), &cfg, false);
        let x0 = SVector::<f64, 4>::new(2.0, 0.0, 0.0, 0.0);
        let mut ctrl = MpcController::new();
        let step = ctrl
            .solve_step(&model30(), x0, &flat_reference(2.0, 20), &bounds, &cfg)
            .unwrap();
        assert!(step.du0.abs() < 1e-9);
        assert!(step.epsilon < 1e-3);
        assert!(step.kkt.stationarity < 1e-6);
    }

    #[test]
    fn tracking_error_steers_toward_reference() {
        let cfg = MpcConfig::default();
        let bounds = output_bounds(&road(), &cfg, false);
        let x0 = SVector::<f64, 4>::new(2.0, 0.0, 0.0, 0.0);
        let mut ctrl = MpcController::new();
        let step = ctrl
            .solve_step(&model30(), x0, &flat_reference(2.5, 20), &bounds, &cfg)
            .unwrap();
        assert!(step.du0 > 0.0, "positive steering lifts Y, got {}", step.du0);
        let mut down = MpcController::new();
        let s2 = down
            .solve_step(&model30(), x0, &flat_reference(1.5, 20), &bounds, &cfg)
            .unwrap();
        assert!(s2.du0 < 0.0);
    }

    #[test]
    fn horizon_one_matches_ridge_formula() {
        let cfg = MpcConfig {
            n_p: 1,
            n_c: 1,
            ..MpcConfig::default()
        };
        let ss = model30();
        // bounds wide open so nothing binds
        let bounds = OutputBounds {
            y_min: [-1e6, -1e6, -1e6],
            y_max: [1e6, 1e6, 1e6],
        };
        let x0 = SVector::<f64, 4>::new(2.0, 0.01, -0.02, 0.1);
        let u_prev = 0.03;
        let reference = Reference::from_rows(vec![[2.2, 0.0, 0.0]], 1).unwrap();
        let qp = build_qp(&ss, x0, u_prev, &reference, &bounds, &cfg).unwrap();
        let cfg_unbounded = MpcConfig {
            du_max: 10.0,
            u_max: 10.0,
            ..cfg
        };
        let qp_free = build_qp(&ss, x0, u_prev, &reference, &bounds, &cfg_unbounded).unwrap();
        let sol = qp_core::solve_from(&qp_free.problem, qp_free.z0.clone()).unwrap();
        // closed form: du* = -theta'Q e0 / (theta'Q theta + r)
        let theta = ss.c * ss.b;
        let free = ss.c * (ss.a * x0 + ss.b * u_prev);
        let e0 = [free[0] - 2.2, free[1], free[2]];
        let num: f64 = (0..3).map(|c| cfg.q[c] * theta[c] * e0[c]).sum();
        let den: f64 = (0..3).map(|c| cfg.q[c] * theta[c] * theta[c]).sum::<f64>() + cfg.r;
        let expected = -num / den;
        assert_relative_eq!(sol.z[0], expected, epsilon = 1e-9, max_relative = 1e-7);
        drop(qp);
    }

    #[test]
    fn steering_rate_and_magnitude_limits_bind() {
        let cfg = MpcConfig::default();
        let bounds = output_bounds(&road(), &cfg, false);
        let x0 = SVector::<f64, 4>::new(2.0, 0.0, 0.0, 0.0);
        let mut ctrl = MpcController::new();
        let step = ctrl
            .solve_step(&model30(), x0, &flat_reference(6.0, 20), &bounds, &cfg)
            .unwrap();
        assert!(step.du0 <= cfg.du_max + 1e-9);
        assert_relative_eq!(step.du0, cfg.du_max, epsilon = 1e-6);
        // near the magnitude ceiling the cumulative constraint binds instead
        let mut saturated = MpcController { u_prev: 0.197 };
        let s2 = saturated
            .solve_step(&model30(), x0, &flat_reference(6.0, 20), &bounds, &cfg)
            .unwrap();
        assert!(s2.delta_f <= cfg.u_max + 1e-9);
        assert!(s2.du0 <= 0.003 + 1e-9);
    }

    #[test]
    fn emergency_bound_switch_changes_the_command() {
        let cfg = MpcConfig::default();
        let ss = model30();
        // diving state: free response crosses below the road edge
        let x0 = SVector::<f64, 4>::new(0.3, 0.0, -0.12, 0.0);
        let dive = {
            // reference follows the dive so tracking itself asks for nothing
            let mut rows = Vec::new();
            let mut x = x0;
            for _ in 0..cfg.n_p {
                x = ss.a * x + ss.b * 0.0;
                rows.push([x[0], 0.0, 0.0]);
            }
            Reference::from_rows(rows, cfg.n_p).unwrap()
        };
        let normal = output_bounds(&road(), &cfg, false);
        let emergency = output_bounds(&road(), &cfg, true);
        assert_relative_eq!(normal.y_min[0], 0.0);
        assert_relative_eq!(emergency.y_min[0], -4.0);
        let mut c1 = MpcController::new();
        let s_normal = c1.solve_step(&ss, x0, &dive, &normal, &cfg).unwrap();
        let mut c2 = MpcController::new();
        let s_emergency = c2.solve_step(&ss, x0, &dive, &emergency, &cfg).unwrap();
        // emergency mode lets the dive proceed; normal mode fights it
        assert!(s_emergency.du0.abs() < 1e-6);
        assert!(
            (s_normal.du0 - s_emergency.du0).abs() > 1e-4,
            "bound switch must alter the first move: {} vs {}",
            s_normal.du0,
            s_emergency.du0
        );
        assert!(s_normal.epsilon >= 0.0 && s_emergency.epsilon >= 0.0);
    }

    #[test]
    fn slack_absorbs_unavoidable_violation() {
        let cfg = MpcConfig::default();
        let bounds = output_bounds(&road(), &cfg, false);
        // already a meter below the road edge
        let x0 = SVector::<f64, 4>::new(-1.0, 0.0, 0.0, 0.0);
        let mut ctrl = MpcController::new();
        let step = ctrl
            .solve_step(&model30(), x0, &flat_reference(2.0, 20), &bounds, &cfg)
            .unwrap();
        assert!(step.epsilon > 0.5, "slack must cover the violation");
        assert!(step.delta_f.is_finite());
    }

    #[test]
    fn solve_is_deterministic() {
        let cfg = MpcConfig::default();
        let bounds = output_bounds(&road(), &cfg, false);
        let x0 = SVector::<f64, 4>::new(1.7, 0.004, -0.03, 0.06);
        let reference = flat_reference(2.0, 20);
        let mut c1 = MpcController { u_prev: 0.01 };
        let mut c2 = MpcController { u_prev: 0.01 };
        let a = c1
            .solve_step(&model30(), x0, &reference, &bounds, &cfg)
            .unwrap();
        let b = c2
            .solve_step(&model30(), x0, &reference, &bounds, &cfg)
            .unwrap();
        assert_eq!(a.delta_f.to_bits(), b.delta_f.to_bits());
        assert_eq!(a.objective.to_bits(), b.objective.to_bits());
    }

    #[test]
    fn reference_padding_and_clamping() {
        let r = Reference::from_positions(&[1.0, -5.0], 4, (0.8, 7.2)).unwrap();
        assert_eq!(r.rows.len(), 4);
        assert_relative_eq!(r.rows[0][0], 1.0);
        assert_relative_eq!(r.rows[1][0], 0.8); // clamped
        assert_relative_eq!(r.rows[3][0], 0.8); // padded with last
        assert!(Reference::from_positions(&[], 4, (0.0, 1.0)).is_err());
    }
}
