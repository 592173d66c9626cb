//! Adaptive potential fields over a straight multi-lane road.
//!
//! The total field is the sum of four ingredients: Gaussian repulsive bumps
//! on lane dividers, inverse-square walls on the road edges, one or two
//! bivariate Gaussians per obstacle (the second trails the obstacle by a
//! headway to penalize tailgating), and a scaled Manhattan pull toward a
//! driving target. The steering reference is the direction of steepest
//! descent, psi_ref = atan2(F_y, F_x) with F = -grad U estimated by central
//! differences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::par;

/// Straight-road layout. y spans the road laterally; x runs along it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RoadGeometry {
    pub lower_edge_y: f64,
    pub upper_edge_y: f64,
    pub lane_divider_ys: Vec<f64>,
    /// Outer boundary of the emergency stopping lane below the road.
    pub esl_lower_y: f64,
    pub lane_width: f64,
}

impl Default for RoadGeometry {
    fn default() -> Self {
        RoadGeometry {
            lower_edge_y: 0.0,
            upper_edge_y: 8.0,
            lane_divider_ys: vec![4.0],
            esl_lower_y: -4.0,
            lane_width: 4.0,
        }
    }
}

impl RoadGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.lower_edge_y >= self.upper_edge_y {
            return Err(Error::InvalidArgument(
                "lower edge must lie below upper edge".into(),
            ));
        }
        if self.esl_lower_y >= self.lower_edge_y {
            return Err(Error::InvalidArgument(
                "emergency stopping lane must lie below the road".into(),
            ));
        }
        if self.lane_width <= 0.0 {
            return Err(Error::InvalidArgument("lane width must be positive".into()));
        }
        for &d in &self.lane_divider_ys {
            if d <= self.lower_edge_y || d >= self.upper_edge_y {
                return Err(Error::InvalidArgument(format!(
                    "divider y = {d} outside the road"
                )));
            }
        }
        Ok(())
    }

    /// Center of the lowest lane (between the lower edge and first divider).
    pub fn lower_lane_center(&self) -> f64 {
        let top = self
            .lane_divider_ys
            .iter()
            .cloned()
            .fold(self.upper_edge_y, f64::min);
        0.5 * (self.lower_edge_y + top)
    }
}

/// Field gains and adaptation parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct ApfConfig {
    /// Lane-divider bump amplitude.
    pub a_lane: f64,
    /// Lane-divider bump width, m.
    pub zeta: f64,
    /// Edge-wall gain.
    pub eta: f64,
    /// Distance floor for the edge walls, m.
    pub edge_clamp_distance: f64,
    /// Obstacle Gaussian amplitude.
    pub a_obs: f64,
    /// Weight of the obstacle-centered component (the trailing component
    /// gets 1 - w1).
    pub w1: f64,
    /// Baseline obstacle spreads, m.
    pub sigma_s0: f64,
    pub sigma_d0: f64,
    /// Spread growth per unit acceleration, s^2.
    pub k_s: f64,
    pub k_d: f64,
    /// Time headway that places the trailing component, s.
    pub headway_s: f64,
    /// Divisor applied to the Manhattan distance toward the target.
    pub target_scale: f64,
}

impl Default for ApfConfig {
    fn default() -> Self {
        ApfConfig {
            a_lane: 20.0,
            zeta: 0.4,
            eta: 0.02,
            edge_clamp_distance: 0.05,
            a_obs: 150.0,
            w1: 0.8,
            sigma_s0: 3.0,
            sigma_d0: 1.0,
            k_s: 0.5,
            k_d: 0.5,
            headway_s: 0.5,
            target_scale: 100.0,
        }
    }
}

impl ApfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.5..=1.0).contains(&self.w1) {
            return Err(Error::InvalidArgument(format!(
                "w1 = {} outside [0.5, 1]",
                self.w1
            )));
        }
        if self.zeta <= 0.0
            || self.sigma_s0 <= 0.0
            || self.sigma_d0 <= 0.0
            || self.edge_clamp_distance <= 0.0
            || self.target_scale <= 0.0
        {
            return Err(Error::InvalidArgument(
                "field widths, clamp and target scale must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One obstacle's field: a main Gaussian at the obstacle and a trailing one
/// a headway behind it, each with its own diagonal spread.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ObstaclePfParams {
    pub mu1: Point2,
    pub sigma_s1: f64,
    pub sigma_d1: f64,
    pub mu2: Point2,
    pub sigma_s2: f64,
    pub sigma_d2: f64,
    pub w1: f64,
}

impl ObstaclePfParams {
    /// Accelerating obstacles get wider spreads: sigma = sigma0 + k |a|.
    pub fn adaptive(
        position: Point2,
        speed: f64,
        a_long: f64,
        a_lat: f64,
        cfg: &ApfConfig,
    ) -> Self {
        let sigma_s = cfg.sigma_s0 + cfg.k_s * a_long.abs();
        let sigma_d = cfg.sigma_d0 + cfg.k_d * a_lat.abs();
        ObstaclePfParams {
            mu1: position,
            sigma_s1: sigma_s,
            sigma_d1: sigma_d,
            mu2: position.add(-cfg.headway_s * speed, 0.0),
            sigma_s2: sigma_s,
            sigma_d2: sigma_d,
            w1: cfg.w1,
        }
    }

    /// Fixed spreads and a single component, for the non-adaptive baseline.
    pub fn fixed(position: Point2, cfg: &ApfConfig) -> Self {
        ObstaclePfParams {
            mu1: position,
            sigma_s1: cfg.sigma_s0,
            sigma_d1: cfg.sigma_d0,
            mu2: position,
            sigma_s2: cfg.sigma_s0,
            sigma_d2: cfg.sigma_d0,
            w1: 1.0,
        }
    }
}

/// Which terms participate in the total field.
#[derive(Clone, Copy)]
pub enum FieldMode<'a> {
    /// Lanes + both edges + obstacles + target pull.
    Normal,
    /// Lanes + upper edge + obstacles + a caller-supplied escape-corridor
    /// term; the breached lower edge and the driving target are dropped.
    Emergency(&'a (dyn Fn(Point2) -> f64 + Sync)),
}

/// Sum of Gaussian bumps centered on each lane divider.
pub fn lane_potential(p: Point2, road: &RoadGeometry, cfg: &ApfConfig) -> f64 {
    road.lane_divider_ys
        .iter()
        .map(|&yc| {
            let d = p.y - yc;
            cfg.a_lane * (-d * d / (2.0 * cfg.zeta * cfg.zeta)).exp()
        })
        .sum()
}

fn edge_term(distance: f64, cfg: &ApfConfig) -> f64 {
    let d = distance.abs().max(cfg.edge_clamp_distance);
    0.5 * cfg.eta / (d * d)
}

/// Inverse-square walls on both road edges, distance floored at the clamp.
pub fn edge_potential(p: Point2, road: &RoadGeometry, cfg: &ApfConfig) -> f64 {
    edge_term(p.y - road.lower_edge_y, cfg) + edge_term(p.y - road.upper_edge_y, cfg)
}

fn upper_edge_potential(p: Point2, road: &RoadGeometry, cfg: &ApfConfig) -> f64 {
    edge_term(p.y - road.upper_edge_y, cfg)
}

fn gaussian(p: Point2, mu: Point2, sigma_s: f64, sigma_d: f64, amplitude: f64) -> f64 {
    let ds = (p.x - mu.x) / sigma_s;
    let dd = (p.y - mu.y) / sigma_d;
    amplitude / (2.0 * std::f64::consts::PI * sigma_s * sigma_d)
        * (-0.5 * (ds * ds + dd * dd)).exp()
}

/// Two-component obstacle field. Normalized like a probability density, so
/// widening the spreads lowers the peak while extending the reach.
pub fn obstacle_potential(p: Point2, params: &ObstaclePfParams, cfg: &ApfConfig) -> f64 {
    let u1 = gaussian(p, params.mu1, params.sigma_s1, params.sigma_d1, cfg.a_obs);
    let u2 = gaussian(p, params.mu2, params.sigma_s2, params.sigma_d2, cfg.a_obs);
    params.w1 * u1 + (1.0 - params.w1) * u2
}

/// Scaled Manhattan pull toward the driving target.
pub fn target_potential(p: Point2, target: Point2, cfg: &ApfConfig) -> f64 {
    p.manhattan(target) / cfg.target_scale
}

/// Total field for the given mode.
pub fn total_potential(
    p: Point2,
    road: &RoadGeometry,
    obstacles: &[ObstaclePfParams],
    target: Point2,
    cfg: &ApfConfig,
    mode: FieldMode,
) -> f64 {
    let obstacle_sum: f64 = obstacles
        .iter()
        .map(|o| obstacle_potential(p, o, cfg))
        .sum();
    match mode {
        FieldMode::Normal => {
            lane_potential(p, road, cfg)
                + edge_potential(p, road, cfg)
                + obstacle_sum
                + target_potential(p, target, cfg)
        }
        FieldMode::Emergency(corridor) => {
            lane_potential(p, road, cfg)
                + upper_edge_potential(p, road, cfg)
                + obstacle_sum
                + corridor(p)
        }
    }
}

/// Central-difference stencil width and the force floor below which the
/// field is reported as a local minimum.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct GradientRule {
    pub step: f64,
    pub min_force: f64,
}

impl Default for GradientRule {
    fn default() -> Self {
        GradientRule {
            step: 0.05,
            min_force: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradientOutcome {
    /// Steepest-descent force and the heading it points along.
    Force { force: Point2, psi_ref: f64 },
    /// Force magnitude below the floor: nowhere to go.
    LocalMinimum,
}

/// Steepest-descent direction of an arbitrary scalar field at `p`.
pub fn descend_gradient<F>(p: Point2, field: F, rule: &GradientRule) -> GradientOutcome
where
    F: Fn(Point2) -> f64,
{
    let h = rule.step;
    let fx = -(field(p.add(h, 0.0)) - field(p.add(-h, 0.0))) / (2.0 * h);
    let fy = -(field(p.add(0.0, h)) - field(p.add(0.0, -h))) / (2.0 * h);
    let norm = fx.hypot(fy);
    if !norm.is_finite() || norm < rule.min_force {
        return GradientOutcome::LocalMinimum;
    }
    GradientOutcome::Force {
        force: Point2::new(fx, fy),
        psi_ref: fy.atan2(fx),
    }
}

/// Row-major field samples over the grid `ys` x `xs` (rows indexed by y).
/// Rows are evaluated through the data-parallel facade.
pub fn field_grid<F>(xs: &[f64], ys: &[f64], field: F) -> Vec<f64>
where
    F: Fn(Point2) -> f64 + Sync,
{
    let rows = par::map(ys, |&y| {
        xs.iter().map(|&x| field(Point2::new(x, y))).collect::<Vec<f64>>()
    });
    rows.into_iter().flatten().collect()
}

/// Sequential twin of `field_grid`, kept for benchmarking both paths.
pub fn field_grid_seq<F>(xs: &[f64], ys: &[f64], field: F) -> Vec<f64>
where
    F: Fn(Point2) -> f64,
{
    let rows = par::map_seq(ys, |&y| {
        xs.iter().map(|&x| field(Point2::new(x, y))).collect::<Vec<f64>>()
    });
    rows.into_iter().flatten().collect()
}
