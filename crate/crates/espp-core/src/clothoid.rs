//! Cubic-polynomial clothoid approximation and its fitting routines.
//!
//! The escape path is a cubic `f(r) = c0 + c1 r + c2 r^2 + c3 r^3` expressed
//! in the vehicle frame at plan time, with curvature approximated by
//! `kappa(r) = 6 c3 r + 2 c2`. Three fit routines of increasing constraint:
//! plain least squares, weighted least squares, and a box-bounded quadratic
//! program whose bounds encode lateral offset, heading, lateral acceleration
//! and curvature-rate comfort limits.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point2, Pose};
use crate::qp_core::{self, QpProblem};

/// Coefficients of the cubic, low order first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClothoidCoefficients {
    pub c: [f64; 4],
}

impl ClothoidCoefficients {
    pub fn new(c: [f64; 4]) -> Self {
        ClothoidCoefficients { c }
    }

    pub fn eval(&self, r: f64) -> f64 {
        self.c[0] + r * (self.c[1] + r * (self.c[2] + r * self.c[3]))
    }

    pub fn derivative(&self, r: f64) -> f64 {
        self.c[1] + r * (2.0 * self.c[2] + 3.0 * self.c[3] * r)
    }

    /// Small-slope curvature approximation.
    pub fn curvature(&self, r: f64) -> f64 {
        6.0 * self.c[3] * r + 2.0 * self.c[2]
    }

    /// Largest |curvature| over [0, r_end] (affine in r, so an endpoint).
    pub fn max_abs_curvature(&self, r_end: f64) -> f64 {
        self.curvature(0.0).abs().max(self.curvature(r_end).abs())
    }
}

/// Comfort and geometry limits that become box bounds on the coefficients.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct FitBounds {
    /// Lateral offset bound at the frame origin, m.
    pub e_y: f64,
    /// Heading-slope bound at the frame origin, rad.
    pub e_psi: f64,
    /// Yaw-rate ceiling, rad/s.
    pub omega_max: f64,
    /// Friction utilization (fraction of g available for braking).
    pub upsilon: f64,
    /// Gravity, m/s^2.
    pub gravity: f64,
    /// Curvature-rate ceiling, 1/(m s).
    pub kappa_dot_max: f64,
    /// Minimum turning radius, m.
    pub r_min: f64,
}

impl Default for FitBounds {
    fn default() -> Self {
        FitBounds {
            e_y: 0.7,
            e_psi: 0.05,
            omega_max: 4.9,
            upsilon: 0.75,
            gravity: 9.81,
            kappa_dot_max: 0.1,
            r_min: 6.12,
        }
    }
}

impl FitBounds {
    /// Bound on |c2| from the lateral-acceleration budget.
    pub fn c2_limit(&self) -> f64 {
        self.omega_max * self.omega_max / (2.0 * self.upsilon * self.gravity)
    }

    /// Bound on |c3| from the curvature-rate budget.
    pub fn c3_limit(&self) -> f64 {
        self.kappa_dot_max / 6.0
    }

    pub fn kappa_max(&self) -> f64 {
        1.0 / self.r_min
    }

    pub fn lower(&self) -> [f64; 4] {
        [-self.e_y, -self.e_psi, -self.c2_limit(), -self.c3_limit()]
    }

    pub fn upper(&self) -> [f64; 4] {
        [self.e_y, self.e_psi, self.c2_limit(), self.c3_limit()]
    }

    pub fn validate(&self) -> Result<()> {
        if self.e_y <= 0.0
            || self.e_psi <= 0.0
            || self.omega_max <= 0.0
            || self.upsilon <= 0.0
            || self.gravity <= 0.0
            || self.kappa_dot_max <= 0.0
            || self.r_min <= 0.0
        {
            return Err(Error::InvalidArgument(
                "fit bounds must all be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Express world points in the local frame of `pose`.
pub fn world_to_vehicle(points: &[Point2], pose: &Pose) -> Vec<Point2> {
    points.iter().map(|&p| pose.to_local(p)).collect()
}

/// Express local-frame points back in the world frame.
pub fn vehicle_to_world(points: &[Point2], pose: &Pose) -> Vec<Point2> {
    points.iter().map(|&p| pose.to_world(p)).collect()
}

fn design_matrix(points: &[Point2]) -> (DMatrix<f64>, DVector<f64>) {
    let n = points.len();
    let mut x = DMatrix::zeros(n, 4);
    let mut f = DVector::zeros(n);
    for (i, p) in points.iter().enumerate() {
        x[(i, 0)] = 1.0;
        x[(i, 1)] = p.x;
        x[(i, 2)] = p.x * p.x;
        x[(i, 3)] = p.x * p.x * p.x;
        f[i] = p.y;
    }
    (x, f)
}

fn check_points(points: &[Point2]) -> Result<()> {
    if points.len() < 4 {
        return Err(Error::InvalidArgument(format!(
            "need at least 4 points to fit a cubic, got {}",
            points.len()
        )));
    }
    if points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(Error::Numerical("non-finite fit point".into()));
    }
    Ok(())
}

/// Unweighted least-squares cubic fit (pseudoinverse route).
pub fn fit_ls(points: &[Point2]) -> Result<ClothoidCoefficients> {
    check_points(points)?;
    let (x, f) = design_matrix(points);
    let svd = x.svd(true, true);
    let s_max = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let s_min = svd
        .singular_values
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if s_max <= 0.0 || s_min < 1e-10 * s_max {
        return Err(Error::RankDeficient(
            "fewer than four distinct x stations".into(),
        ));
    }
    let c = svd
        .solve(&f, 0.0)
        .map_err(|e| Error::Numerical(format!("svd solve failed: {e}")))?;
    Ok(ClothoidCoefficients::new([c[0], c[1], c[2], c[3]]))
}

/// Weighted least squares: minimizes ||W (X c - F)||^2 via normal equations.
pub fn fit_weighted(points: &[Point2], weights: &[f64]) -> Result<ClothoidCoefficients> {
    let (a, b) = weighted_normal_equations(points, weights)?;
    let c = a
        .clone()
        .cholesky()
        .map(|ch| ch.solve(&b))
        .or_else(|| a.full_piv_lu().solve(&b))
        .ok_or_else(|| Error::RankDeficient("singular weighted normal equations".into()))?;
    Ok(ClothoidCoefficients::new([c[0], c[1], c[2], c[3]]))
}

/// Box-bounded weighted fit: same objective as `fit_weighted` plus comfort
/// bounds on each coefficient. With inactive bounds it reproduces
/// `fit_weighted` exactly.
pub fn fit_qp(
    points: &[Point2],
    weights: &[f64],
    bounds: &FitBounds,
) -> Result<(ClothoidCoefficients, qp_core::QpSolution)> {
    bounds.validate()?;
    let (a, b) = weighted_normal_equations(points, weights)?;
    let problem = QpProblem::box_only(
        a,
        -b,
        DVector::from_row_slice(&bounds.lower()),
        DVector::from_row_slice(&bounds.upper()),
    );
    let sol = qp_core::solve(&problem)?;
    let c = ClothoidCoefficients::new([sol.z[0], sol.z[1], sol.z[2], sol.z[3]]);
    Ok((c, sol))
}

/// Weighted residual energy ||W (X c - F)||^2, for comparing fits.
pub fn weighted_objective(points: &[Point2], weights: &[f64], c: &ClothoidCoefficients) -> f64 {
    points
        .iter()
        .zip(weights)
        .map(|(p, w)| {
            let r = w * (c.eval(p.x) - p.y);
            r * r
        })
        .sum()
}

fn weighted_normal_equations(
    points: &[Point2],
    weights: &[f64],
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    check_points(points)?;
    if weights.len() != points.len() {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {} points",
            weights.len(),
            points.len()
        )));
    }
    if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
        return Err(Error::InvalidArgument(
            "weights must be positive and finite".into(),
        ));
    }
    let (x, f) = design_matrix(points);
    let mut wx = x;
    let mut wf = f;
    for (i, &w) in weights.iter().enumerate() {
        for j in 0..4 {
            wx[(i, j)] *= w;
        }
        wf[i] *= w;
    }
    let a = wx.transpose() * &wx;
    let b = wx.transpose() * wf;
    Ok((a, b))
}
