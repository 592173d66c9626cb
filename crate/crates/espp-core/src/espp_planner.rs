//! Emergency-stopping path planning.
//!
//! When the trigger fires, the planner derives an escape corridor off the
//! breached road edge: it predicts the threatening obstacle's reachable
//! sector, partitions the braking-distance box into regions, picks the stop
//! point that maximizes Manhattan displacement subject to entry-heading and
//! region feasibility, strings hybrid waypoints through breach/intersection/
//! stop anchors, and fits the bounded cubic through them. Exponential wall
//! potentials around the fitted curve plus a quadratic pull toward the stop
//! point then steer the field-based guidance while the vehicle brakes.

use serde::{Deserialize, Serialize};

use crate::clothoid::{self, ClothoidCoefficients, FitBounds};
use crate::emergency_trigger::WaypointChain;
use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Point2, Pose};
use crate::mpc_controller::Reference;
use crate::par;
use crate::potential_field::{descend_gradient, GradientOutcome, GradientRule, RoadGeometry};
use crate::vehicle_model::{VehicleParams, VehicleState};

/// Planner tuning. Geometry knobs for the escape region and corridor field.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct EsppConfig {
    /// Half-angle of the obstacle's predicted motion sector, rad.
    pub delta_psi_o_max: f64,
    /// Sector reach horizon, s (radius = horizon * obstacle speed).
    pub prediction_horizon_s: f64,
    /// Stop-point search grid spacing, m.
    pub grid_resolution: f64,
    /// Interior waypoint counts on the breach->intersection and
    /// intersection->stop segments.
    pub n_b2i: usize,
    pub n_i2s: usize,
    /// Refinement descent: step count and initial step length, m.
    pub p_num: usize,
    pub descent_step: f64,
    /// Corridor wall amplitude, stiffness and half-width.
    pub a_e: f64,
    pub b_w: f64,
    pub corridor_half_width: f64,
    /// Stop-point attraction gain.
    pub xi: f64,
    /// Carrot target placement: at least `lookahead_min` meters, otherwise
    /// `lookahead_time * speed`, ahead along the curve.
    pub lookahead_min: f64,
    pub lookahead_time: f64,
    /// Clamp window for the emergency entry heading, rad (both negative).
    pub entry_heading_min: f64,
    pub entry_heading_max: f64,
    /// Fit weights on the breach and stop anchors (others get 1).
    pub breach_weight: f64,
    pub stop_weight: f64,
}

impl Default for EsppConfig {
    fn default() -> Self {
        EsppConfig {
            delta_psi_o_max: 0.2,
            prediction_horizon_s: 0.2,
            grid_resolution: 0.25,
            n_b2i: 6,
            n_i2s: 12,
            p_num: 50,
            descent_step: 1.5,
            a_e: 2.0,
            b_w: 0.7,
            corridor_half_width: 1.0,
            xi: 0.2,
            lookahead_min: 2.0,
            lookahead_time: 0.5,
            entry_heading_min: -(std::f64::consts::FRAC_PI_2 - 0.1),
            entry_heading_max: -0.05,
            breach_weight: 10.0,
            stop_weight: 10.0,
        }
    }
}

impl EsppConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.entry_heading_min < self.entry_heading_max && self.entry_heading_max < 0.0) {
            return Err(Error::InvalidArgument(
                "entry heading window must be negative and ordered".into(),
            ));
        }
        if self.entry_heading_min <= -std::f64::consts::FRAC_PI_2 {
            return Err(Error::InvalidArgument(
                "entry heading floor must stay above -pi/2".into(),
            ));
        }
        if self.grid_resolution <= 0.0
            || self.descent_step <= 0.0
            || self.corridor_half_width <= 0.0
            || self.a_e <= 0.0
            || self.b_w <= 0.0
            || self.xi < 0.0
            || self.delta_psi_o_max <= 0.0
            || self.prediction_horizon_s <= 0.0
        {
            return Err(Error::InvalidArgument(
                "planner gains and geometry must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Circular sector the obstacle can sweep within the prediction horizon.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MotionSector {
    pub apex: Point2,
    pub heading: f64,
    pub half_angle: f64,
    pub radius: f64,
}

impl MotionSector {
    pub fn area(&self) -> f64 {
        self.half_angle * self.radius * self.radius
    }

    pub fn contains(&self, p: Point2) -> bool {
        let dx = p.x - self.apex.x;
        let dy = p.y - self.apex.y;
        let r = dx.hypot(dy);
        if r > self.radius + 1e-12 {
            return false;
        }
        if r < 1e-12 {
            return true;
        }
        wrap_angle(dy.atan2(dx) - self.heading).abs() <= self.half_angle + 1e-12
    }

    /// Interval of x the sector occupies.
    pub fn x_extent(&self) -> (f64, f64) {
        let mut lo = self.apex.x;
        let mut hi = self.apex.x;
        let mut consider = |theta: f64| {
            let x = self.apex.x + self.radius * theta.cos();
            lo = lo.min(x);
            hi = hi.max(x);
        };
        consider(self.heading - self.half_angle);
        consider(self.heading + self.half_angle);
        for extreme in [0.0, std::f64::consts::PI, -std::f64::consts::PI] {
            if wrap_angle(extreme - self.heading).abs() <= self.half_angle {
                consider(extreme);
            }
        }
        (lo, hi)
    }
}

/// Sector swept around the obstacle's current heading.
pub fn predict_motion_sector(
    position: Point2,
    heading: f64,
    speed: f64,
    cfg: &EsppConfig,
) -> MotionSector {
    MotionSector {
        apex: position,
        heading,
        half_angle: cfg.delta_psi_o_max,
        radius: cfg.prediction_horizon_s * speed.max(0.0),
    }
}

/// Partition label within the escape box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    /// Beyond the obstacle's x-shadow (far side).
    S1,
    /// Inside the predicted motion sector.
    S2,
    /// In the sector's x-shadow but outside the sector.
    S3,
    /// Before the x-shadow (near side).
    S4,
}

/// Escape geometry: braking box off the breach point, candidate band inside
/// the emergency stopping lane, and the sector partition.
#[derive(Debug, Clone)]
pub struct EscapeRegion {
    pub p_bp: Point2,
    /// x-interval [breach, breach + braking distance].
    pub box_x: (f64, f64),
    /// Candidate y-band: [esl floor + half width, road edge].
    pub band_y: (f64, f64),
    pub sector: MotionSector,
    pub sector_x: (f64, f64),
    /// Sector x-extent clipped to the box, when they overlap.
    pub shadow_x: Option<(f64, f64)>,
    /// Corner points where the shadow meets the candidate band.
    pub dividing_points: Vec<Point2>,
}

pub fn build_escape_region(
    p_bp: Point2,
    d_brake: f64,
    sector: MotionSector,
    road: &RoadGeometry,
    vehicle_width: f64,
) -> Result<EscapeRegion> {
    if !(d_brake > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "braking distance must be positive, got {d_brake}"
        )));
    }
    let band_lo = road.esl_lower_y + 0.5 * vehicle_width;
    let band_hi = road.lower_edge_y;
    if band_lo >= band_hi {
        return Err(Error::InvalidGeometry(format!(
            "stopping band is empty: vehicle width {vehicle_width} does not fit the lane"
        )));
    }
    let box_x = (p_bp.x, p_bp.x + d_brake);
    let sector_x = sector.x_extent();
    let shadow = (sector_x.0.max(box_x.0), sector_x.1.min(box_x.1));
    let shadow_x = (shadow.0 <= shadow.1).then_some(shadow);
    let dividing_points = shadow_x
        .map(|(lo, hi)| {
            vec![
                Point2::new(lo, band_hi),
                Point2::new(hi, band_hi),
                Point2::new(hi, band_lo),
            ]
        })
        .unwrap_or_default();
    Ok(EscapeRegion {
        p_bp,
        box_x,
        band_y: (band_lo, band_hi),
        sector,
        sector_x,
        shadow_x,
        dividing_points,
    })
}

impl EscapeRegion {
    /// Total, disjoint partition: sector first, then by x against the
    /// sector's extent.
    pub fn classify(&self, p: Point2) -> Region {
        if self.sector.contains(p) {
            return Region::S2;
        }
        if p.x < self.sector_x.0 {
            Region::S4
        } else if p.x > self.sector_x.1 {
            Region::S1
        } else {
            Region::S3
        }
    }
}

/// Chosen stop point with its construction byproducts.
#[derive(Debug, Clone, Copy)]
pub struct StopPointSelection {
    pub point: Point2,
    pub intersection_x: f64,
    /// Two-segment path length breach -> intersection -> stop.
    pub length: f64,
    pub region: Region,
    pub score: f64,
}

/// Grid search over the candidate band. A candidate is feasible when the
/// breach->stop bearing sits strictly inside (entry_heading, 0) (so the
/// two-segment construction exists), and, while the obstacle is still
/// turning toward the lane, when it avoids the sector/shadow and lands in
/// the region its path length dictates: far side if the path reaches the
/// braking distance, near side otherwise. Ties prefer larger x, then larger
/// |y - y_bp|.
pub fn select_stop_point(
    region: &EscapeRegion,
    entry_heading: f64,
    d_brake: f64,
    constraints_active: bool,
    cfg: &EsppConfig,
) -> Result<StopPointSelection> {
    let res = cfg.grid_resolution;
    let bp = region.p_bp;
    let nx = ((region.box_x.1 - region.box_x.0) / res).floor() as usize;
    let ny = ((region.band_y.1 - region.band_y.0) / res).floor() as usize;
    let tan_entry = entry_heading.tan();
    let columns: Vec<usize> = (1..=nx).collect();
    let per_column = par::map(&columns, |&i| {
        let x = region.box_x.0 + i as f64 * res;
        let mut found = Vec::new();
        for j in 1..=ny {
            let y = region.band_y.1 - j as f64 * res;
            let dx = x - bp.x;
            let dy = y - bp.y;
            let bearing = dy.atan2(dx);
            if !(bearing > entry_heading && bearing < 0.0) {
                continue;
            }
            let intersection_x = bp.x + dy / tan_entry;
            let length = (intersection_x - bp.x).hypot(dy) + (x - intersection_x);
            let class = region.classify(Point2::new(x, y));
            if constraints_active {
                if class == Region::S2 || class == Region::S3 {
                    continue;
                }
                let required = if length >= d_brake {
                    Region::S1
                } else {
                    Region::S4
                };
                if class != required {
                    continue;
                }
            }
            found.push(StopPointSelection {
                point: Point2::new(x, y),
                intersection_x,
                length,
                region: class,
                score: dx.abs() + dy.abs(),
            });
        }
        found
    });
    let mut best: Option<StopPointSelection> = None;
    for candidate in per_column.into_iter().flatten() {
        let better = match &best {
            None => true,
            Some(b) => {
                candidate.score > b.score
                    || (candidate.score == b.score
                        && (candidate.point.x > b.point.x
                            || (candidate.point.x == b.point.x
                                && (candidate.point.y - bp.y).abs() > (b.point.y - bp.y).abs())))
            }
        };
        if better {
            best = Some(candidate);
        }
    }
    best.ok_or(Error::NoFeasibleStopPoint)
}

/// Breach, intersection and stop anchor points of the two-segment skeleton.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EsppAnchors {
    pub p_bp: Point2,
    pub p_ip: Point2,
    pub p_sp: Point2,
    pub entry_heading: f64,
    pub length: f64,
}

/// Intersection of the entry ray from the breach with the horizontal line
/// through the stop point. The stop bearing must lie in [entry_heading, 0).
pub fn build_anchors(p_bp: Point2, p_sp: Point2, entry_heading: f64) -> Result<EsppAnchors> {
    if !(entry_heading > -std::f64::consts::FRAC_PI_2 && entry_heading < 0.0) {
        return Err(Error::InvalidGeometry(format!(
            "entry heading {entry_heading} outside (-pi/2, 0)"
        )));
    }
    let dx = p_sp.x - p_bp.x;
    let dy = p_sp.y - p_bp.y;
    if dx <= 0.0 || dy >= 0.0 {
        return Err(Error::InvalidGeometry(format!(
            "stop point must lie ahead and below the breach (dx = {dx}, dy = {dy})"
        )));
    }
    let bearing = dy.atan2(dx);
    if bearing < entry_heading - 1e-12 {
        return Err(Error::InvalidGeometry(format!(
            "stop bearing {bearing} steeper than the entry heading {entry_heading}"
        )));
    }
    let intersection_x = (p_bp.x + dy / entry_heading.tan()).min(p_sp.x);
    let p_ip = Point2::new(intersection_x, p_sp.y);
    let length = p_bp.distance(p_ip) + p_ip.distance(p_sp);
    Ok(EsppAnchors {
        p_bp,
        p_ip,
        p_sp,
        entry_heading,
        length,
    })
}

/// Waypoint list for the fit: the retained field prefix, the breach anchor,
/// evenly spaced interior points on each segment, and the stop anchor. The
/// intersection anchor itself is a knee, not a waypoint.
pub fn assemble_hybrid_waypoints(
    prefix: &[Point2],
    anchors: &EsppAnchors,
    n_b2i: usize,
    n_i2s: usize,
) -> Vec<Point2> {
    let mut out = Vec::with_capacity(prefix.len() + n_b2i + n_i2s + 2);
    out.extend_from_slice(prefix);
    out.push(anchors.p_bp);
    for k in 1..=n_b2i {
        let t = k as f64 / (n_b2i + 1) as f64;
        out.push(anchors.p_bp.lerp(anchors.p_ip, t));
    }
    for k in 1..=n_i2s {
        let t = k as f64 / (n_i2s + 1) as f64;
        out.push(anchors.p_ip.lerp(anchors.p_sp, t));
    }
    out.push(anchors.p_sp);
    out
}

/// Which side of the corridor a wall bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorridorSide {
    Left,
    Right,
}

const EXPONENT_CAP: f64 = 50.0;

/// Exponential wall potential around the curve shifted by the corridor
/// half-width: zero on the shifted curve, saturating at `a_e` toward the
/// interior, growing without bound outside. Points are in the plan frame.
pub fn corridor_wall_potential(
    p: Point2,
    curve: &ClothoidCoefficients,
    side: CorridorSide,
    cfg: &EsppConfig,
) -> f64 {
    let fp = curve.derivative(p.x);
    let slope_norm = (1.0 + fp * fp).sqrt();
    let shift = cfg.corridor_half_width * slope_norm;
    let wall_y = match side {
        CorridorSide::Right => curve.eval(p.x) - shift,
        CorridorSide::Left => curve.eval(p.x) + shift,
    };
    let dy = p.y - wall_y;
    // distance measured along the wall's normal line; for near-zero slope
    // this is just the vertical offset
    let dist = if fp.abs() < 1e-6 {
        dy.abs()
    } else {
        dy.abs() * slope_norm
    };
    let sign = if dy >= 0.0 { 1.0 } else { -1.0 };
    let exponent = match side {
        CorridorSide::Right => -cfg.b_w * sign * dist,
        CorridorSide::Left => cfg.b_w * sign * dist,
    };
    let e = exponent.min(EXPONENT_CAP).exp();
    cfg.a_e * (1.0 - e) * (1.0 - e)
}

/// Quadratic pull toward the stop target: 0.5 xi D^2.
pub fn stop_attraction_potential(p: Point2, target: Point2, xi: f64) -> f64 {
    let d = p.distance(target);
    0.5 * xi * d * d
}

/// Everything downstream consumers need from one planning event.
#[derive(Debug, Clone)]
pub struct EsppPlan {
    pub coeffs: ClothoidCoefficients,
    pub anchors: EsppAnchors,
    /// Plan frame: the ego pose at plan time. The curve lives in this frame.
    pub frame: Pose,
    pub region: EscapeRegion,
    pub selection: StopPointSelection,
    /// Stop anchor in the plan frame; the curve is consumed on [0, x].
    pub sp_local: Point2,
    pub hybrid_world: Vec<Point2>,
    /// Refinement descent track (world frame) and its potential sequence.
    pub p_new: Vec<Point2>,
    pub u_descent: Vec<f64>,
}

impl EsppPlan {
    /// Carrot point on the curve ahead of the ego, clamped at the stop.
    pub fn lookahead_target_local(&self, ego_world: Point2, speed: f64, cfg: &EsppConfig) -> Point2 {
        let x_ego = self.frame.to_local(ego_world).x;
        let ahead = cfg.lookahead_min.max(cfg.lookahead_time * speed.max(0.0));
        let x_t = (x_ego + ahead).min(self.sp_local.x);
        Point2::new(x_t, self.coeffs.eval(x_t))
    }

    /// Corridor walls plus stop attraction at a world point, with the
    /// attraction aimed at a frozen local target.
    pub fn corridor_potential(&self, p_world: Point2, target_local: Point2, cfg: &EsppConfig) -> f64 {
        let local = self.frame.to_local(p_world);
        corridor_wall_potential(local, &self.coeffs, CorridorSide::Left, cfg)
            + corridor_wall_potential(local, &self.coeffs, CorridorSide::Right, cfg)
            + stop_attraction_potential(local, target_local, cfg.xi)
    }

    /// Tracking reference sampled along the fitted curve at per-step arc
    /// stations, clamped at the stop point. Desired yaw rate follows the
    /// curve's curvature while moving, zero at the stop.
    pub fn curve_reference(
        &self,
        ego: &VehicleState,
        n_p: usize,
        t_s: f64,
        y_clamp: (f64, f64),
    ) -> Result<Reference> {
        let x_ego = self.frame.to_local(Point2::new(ego.x, ego.y)).x;
        let mut rows = Vec::with_capacity(n_p);
        for k in 1..=n_p {
            let x_k = (x_ego + k as f64 * ego.v * t_s).min(self.sp_local.x);
            let world = self.frame.to_world(Point2::new(x_k, self.coeffs.eval(x_k)));
            let psi_dot_d = if x_k < self.sp_local.x {
                self.coeffs.curvature(x_k) * ego.v
            } else {
                0.0
            };
            rows.push([world.y.clamp(y_clamp.0, y_clamp.1), 0.0, psi_dot_d]);
        }
        Reference::from_rows(rows, n_p)
    }
}

/// A threatening vehicle's kinematic snapshot at plan time.
#[derive(Debug, Clone, Copy)]
pub struct ObstacleSnapshot {
    pub pose: Pose,
    pub speed: f64,
}

/// Inputs to one planning event.
pub struct PlanContext<'a> {
    pub ego: VehicleState,
    /// Field heading at the trigger instant.
    pub psi_ref: f64,
    /// Probe chain at the trigger instant.
    pub chain: &'a WaypointChain,
    pub obstacles: &'a [ObstacleSnapshot],
    pub road: &'a RoadGeometry,
    pub d_brake: f64,
    pub vehicle: &'a VehicleParams,
    pub fit_bounds: &'a FitBounds,
    pub cfg: &'a EsppConfig,
}

/// Run the full planning pipeline once.
pub fn plan_espp(ctx: &PlanContext) -> Result<EsppPlan> {
    ctx.cfg.validate()?;
    ctx.road.validate()?;
    ctx.fit_bounds.validate()?;
    let cfg = ctx.cfg;
    let ego_pos = Point2::new(ctx.ego.x, ctx.ego.y);
    let entry = ctx
        .psi_ref
        .clamp(cfg.entry_heading_min, cfg.entry_heading_max);

    // breach point along the clamped entry ray
    if ctx.ego.y <= ctx.road.lower_edge_y {
        return Err(Error::InvalidGeometry(
            "ego is already below the road edge".into(),
        ));
    }
    let (entry_sin, entry_cos) = entry.sin_cos();
    let t = (ctx.road.lower_edge_y - ctx.ego.y) / entry_sin;
    let p_bp = ego_pos.add(t * entry_cos, t * entry_sin);

    let primary = ctx.obstacles.first();
    let sector = match primary {
        Some(o) => predict_motion_sector(o.pose.position(), o.pose.psi, o.speed, cfg),
        // no obstacle: a point sector far behind never interferes
        None => MotionSector {
            apex: p_bp.add(-1e9, 0.0),
            heading: 0.0,
            half_angle: cfg.delta_psi_o_max,
            radius: 0.0,
        },
    };
    let region = build_escape_region(p_bp, ctx.d_brake, sector, ctx.road, ctx.vehicle.width)?;
    // the sector/length coupling applies while the obstacle still turns
    // toward the lane; once it straightens away it is dropped
    let constraints_active = primary.map_or(false, |o| o.pose.psi <= 0.0);
    let selection = select_stop_point(&region, entry, ctx.d_brake, constraints_active, cfg)?;
    let anchors = build_anchors(p_bp, selection.point, entry)?;

    // field prefix: ego plus chain points still on the road before the breach
    let mut prefix = vec![ego_pos];
    for p in &ctx.chain.points {
        if p.y <= ctx.road.lower_edge_y || p.x >= p_bp.x {
            break;
        }
        if p.x > prefix.last().unwrap().x {
            prefix.push(*p);
        }
    }
    let hybrid_world = assemble_hybrid_waypoints(&prefix, &anchors, cfg.n_b2i, cfg.n_i2s);

    let frame = Pose::new(ctx.ego.x, ctx.ego.y, ctx.ego.psi);
    let local = clothoid::world_to_vehicle(&hybrid_world, &frame);
    for w in local.windows(2) {
        if w[1].x - w[0].x < 1e-9 {
            return Err(Error::NonMonotoneWaypoints(format!(
                "x stations {:.3} -> {:.3}",
                w[0].x, w[1].x
            )));
        }
    }
    let mut weights = vec![1.0; local.len()];
    weights[prefix.len()] = cfg.breach_weight;
    let last = weights.len() - 1;
    weights[last] = cfg.stop_weight;
    let (coeffs, _fit_sol) = clothoid::fit_qp(&local, &weights, ctx.fit_bounds)?;

    let sp_local = frame.to_local(selection.point);
    let max_kappa = coeffs.max_abs_curvature(sp_local.x);
    if max_kappa > ctx.fit_bounds.kappa_max() {
        log::warn!(
            "fitted curvature {max_kappa:.4} exceeds the turning limit {:.4}",
            ctx.fit_bounds.kappa_max()
        );
    }

    // refinement descent in the plan frame against the frozen stop target
    let target = Point2::new(sp_local.x, coeffs.eval(sp_local.x));
    let field = |p: Point2| {
        corridor_wall_potential(p, &coeffs, CorridorSide::Left, cfg)
            + corridor_wall_potential(p, &coeffs, CorridorSide::Right, cfg)
            + stop_attraction_potential(p, target, cfg.xi)
    };
    let rule = GradientRule::default();
    let mut p = Point2::new(0.0, 0.0);
    let mut u = field(p);
    let mut p_new = vec![frame.to_world(p)];
    let mut u_descent = vec![u];
    'descent: for _ in 0..cfg.p_num {
        let (force, norm) = match descend_gradient(p, field, &rule) {
            GradientOutcome::Force { force, .. } => {
                let n = force.x.hypot(force.y);
                (force, n)
            }
            GradientOutcome::LocalMinimum => break,
        };
        let dir = Point2::new(force.x / norm, force.y / norm);
        let mut step_len = cfg.descent_step;
        for _ in 0..20 {
            let cand = p.add(dir.x * step_len, dir.y * step_len);
            let u_cand = field(cand);
            if u_cand < u - 1e-12 {
                p = cand;
                u = u_cand;
                p_new.push(frame.to_world(p));
                u_descent.push(u);
                continue 'descent;
            }
            step_len *= 0.5;
        }
        break;
    }

    Ok(EsppPlan {
        coeffs,
        anchors,
        frame,
        region,
        selection,
        sp_local,
        hybrid_world,
        p_new,
        u_descent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emergency_trigger::generate_waypoints;
    use approx::assert_relative_eq;

    fn cfg() -> EsppConfig {
        EsppConfig::default()
    }

    fn road() -> RoadGeometry {
        RoadGeometry::default()
    }

    #[test]
    fn sector_reach_and_area() {
        let s = predict_motion_sector(Point2::new(50.0, 6.0), -0.2, 32.0, &cfg());
        assert_relative_eq!(s.radius, 6.4, epsilon = 1e-12);
        assert_relative_eq!(s.area(), 0.2 * 6.4 * 6.4, epsilon = 1e-12);
        assert_relative_eq!(s.area(), 8.192, epsilon = 1e-12);
        let (lo, hi) = s.x_extent();
        assert_relative_eq!(lo, 50.0, epsilon = 1e-12); // apex itself
        assert_relative_eq!(hi, 56.4, epsilon = 1e-12); // heading range includes 0
        // zero speed degenerates to a point
        let point = predict_motion_sector(Point2::new(50.0, 6.0), -0.2, 0.0, &cfg());
        assert_relative_eq!(point.area(), 0.0);
        assert!(point.contains(Point2::new(50.0, 6.0)));
        assert!(!point.contains(Point2::new(50.1, 6.0)));
    }

    #[test]
    fn sector_membership() {
        let s = predict_motion_sector(Point2::new(50.0, 6.0), -0.2, 32.0, &cfg());
        assert!(s.contains(Point2::new(53.0, 5.5))); // bearing -0.165, inside
        assert!(!s.contains(Point2::new(52.0, 2.0))); // bearing -1.107, outside the fan
        assert!(!s.contains(Point2::new(57.0, 6.0))); // beyond the radius
        assert!(s.contains(Point2::new(50.0, 6.0))); // apex
    }

    #[test]
    fn region_partition_is_total_and_consistent() {
        let sector = predict_motion_sector(Point2::new(50.0, 6.0), -0.2, 32.0, &cfg());
        let region = build_escape_region(
            Point2::new(10.0, 0.0),
            76.16,
            sector,
            &road(),
            1.6,
        )
        .unwrap();
        assert_relative_eq!(region.box_x.1, 86.16, epsilon = 1e-12);
        assert_relative_eq!(region.band_y.0, -3.2, epsilon = 1e-12);
        assert_relative_eq!(region.band_y.1, 0.0, epsilon = 1e-12);
        assert_eq!(region.classify(Point2::new(30.0, -1.0)), Region::S4);
        assert_eq!(region.classify(Point2::new(52.0, -1.0)), Region::S3);
        assert_eq!(region.classify(Point2::new(70.0, -1.0)), Region::S1);
        assert_eq!(region.classify(Point2::new(53.0, 5.5)), Region::S2);
        // every box point gets exactly one label; S2 implies sector membership
        for i in 0..40 {
            for j in 0..12 {
                let p = Point2::new(10.0 + i as f64 * 2.0, -3.2 + j as f64 * 0.3);
                let class = region.classify(p);
                if class == Region::S2 {
                    assert!(region.sector.contains(p));
                } else {
                    assert!(!region.sector.contains(p));
                }
            }
        }
        // dividing points trace the shadow corners on the band
        assert_eq!(region.dividing_points.len(), 3);
        assert_relative_eq!(region.dividing_points[0].x, 50.0, epsilon = 1e-12);
        assert_relative_eq!(region.dividing_points[1].x, 56.4, epsilon = 1e-12);
        assert_relative_eq!(region.dividing_points[2].y, -3.2, epsilon = 1e-12);
    }

    #[test]
    fn stop_point_far_corner_when_path_is_long() {
        // narrow vehicle so the band floor lands exactly on the grid
        let sector = predict_motion_sector(Point2::new(10.0, 4.0), -0.2, 32.0, &cfg());
        let region =
            build_escape_region(Point2::new(0.0, 0.0), 20.0, sector, &road(), 1.5).unwrap();
        assert_relative_eq!(region.band_y.0, -3.25, epsilon = 1e-12);
        let sel = select_stop_point(
            &region,
            -std::f64::consts::FRAC_PI_4,
            20.0,
            true,
            &cfg(),
        )
        .unwrap();
        assert_relative_eq!(sel.point.x, 20.0, epsilon = 1e-12);
        assert_relative_eq!(sel.point.y, -3.25, epsilon = 1e-12);
        assert_eq!(sel.region, Region::S1);
        assert!(sel.length >= 20.0);
        assert_relative_eq!(sel.score, 23.25, epsilon = 1e-12);
        // intersection via the entry ray: x_ip = |dy| for a 45-degree entry
        assert_relative_eq!(sel.intersection_x, 3.25, epsilon = 1e-9);
    }

    #[test]
    fn stop_point_tie_breaks_toward_larger_x() {
        // distant sector casts no shadow on the box: everything is S4, so
        // only candidates with two-segment length under d_brake survive
        let sector = predict_motion_sector(Point2::new(1000.0, 6.0), -0.2, 32.0, &cfg());
        let region =
            build_escape_region(Point2::new(0.0, 0.0), 4.0, sector, &road(), 1.5).unwrap();
        let sel = select_stop_point(
            &region,
            -std::f64::consts::FRAC_PI_4,
            4.0,
            true,
            &cfg(),
        )
        .unwrap();
        // (3.0, -2.25) and (2.75, -2.5) both score 5.25 inside the bearing
        // window with path length under d_brake; larger x wins
        assert_relative_eq!(sel.score, 5.25, epsilon = 1e-12);
        assert_relative_eq!(sel.point.x, 3.0, epsilon = 1e-12);
        assert_relative_eq!(sel.point.y, -2.25, epsilon = 1e-12);
        assert!(sel.length < 4.0);
        assert_eq!(sel.region, Region::S4);
    }

    #[test]
    fn stop_point_none_when_sector_smothers_the_box() {
        // hugely fast obstacle just behind the breach shadows the whole box
        let wide = EsppConfig {
            prediction_horizon_s: 10.0,
            ..cfg()
        };
        let sector = predict_motion_sector(Point2::new(-5.0, 2.0), -0.2, 100.0, &wide);
        let region =
            build_escape_region(Point2::new(0.0, 0.0), 20.0, sector, &road(), 1.6).unwrap();
        let err = select_stop_point(&region, -0.5, 20.0, true, &wide);
        assert!(matches!(err, Err(Error::NoFeasibleStopPoint)));
    }

    #[test]
    fn anchors_worked_example() {
        let a = build_anchors(
            Point2::new(0.0, 0.0),
            Point2::new(10.0, -3.0),
            -std::f64::consts::FRAC_PI_4,
        )
        .unwrap();
        assert_relative_eq!(a.p_ip.x, 3.0, epsilon = 1e-12);
        assert_relative_eq!(a.p_ip.y, -3.0, epsilon = 1e-12);
        assert_relative_eq!(a.length, 3.0 * 2.0f64.sqrt() + 7.0, epsilon = 1e-12);
        // stop on the entry ray collapses the second leg
        let collinear = build_anchors(
            Point2::new(0.0, 0.0),
            Point2::new(3.0, -3.0),
            -std::f64::consts::FRAC_PI_4,
        )
        .unwrap();
        assert_relative_eq!(collinear.p_ip.x, 3.0, epsilon = 1e-9);
        assert_relative_eq!(collinear.length, 3.0 * 2.0f64.sqrt(), epsilon = 1e-9);
        // behind, above, or steeper than the entry ray are invalid
        assert!(build_anchors(Point2::new(0.0, 0.0), Point2::new(-1.0, -3.0), -0.5).is_err());
        assert!(build_anchors(Point2::new(0.0, 0.0), Point2::new(5.0, 1.0), -0.5).is_err());
        assert!(build_anchors(Point2::new(0.0, 0.0), Point2::new(1.0, -3.0), -0.5).is_err());
    }

    #[test]
    fn hybrid_waypoint_count_and_spacing() {
        let anchors = build_anchors(
            Point2::new(10.0, 0.0),
            Point2::new(30.0, -3.0),
            -std::f64::consts::FRAC_PI_4,
        )
        .unwrap();
        let prefix = vec![
            Point2::new(4.0, 1.5),
            Point2::new(6.0, 1.0),
            Point2::new(8.0, 0.5),
        ];
        let pts = assemble_hybrid_waypoints(&prefix, &anchors, 2, 3);
        assert_eq!(pts.len(), 3 + 2 + 3 + 2);
        assert_relative_eq!(pts[3].x, 10.0); // breach follows the prefix
        // interior points split each segment evenly
        assert_relative_eq!(pts[4].x, 10.0 + (13.0 - 10.0) / 3.0, epsilon = 1e-12);
        assert_relative_eq!(pts[5].x, 10.0 + 2.0 * (13.0 - 10.0) / 3.0, epsilon = 1e-12);
        let last = pts.len() - 1;
        assert_relative_eq!(pts[last].x, 30.0);
        assert_relative_eq!(pts[last].y, -3.0);
        // the knee itself is absent: jump from segment 1 into segment 2
        assert!(pts.iter().all(|p| (p.x - 13.0).abs() > 1e-9));
    }

    #[test]
    fn corridor_wall_zero_on_shift_plateau_inside_barrier_outside() {
        let c = cfg();
        let flat = ClothoidCoefficients::new([0.0, 0.0, 0.0, 0.0]);
        // exactly on the shifted curve
        let on_wall = corridor_wall_potential(
            Point2::new(5.0, -c.corridor_half_width),
            &flat,
            CorridorSide::Right,
            &c,
        );
        assert_relative_eq!(on_wall, 0.0, epsilon = 1e-15);
        // centerline value
        let center =
            corridor_wall_potential(Point2::new(5.0, 0.0), &flat, CorridorSide::Right, &c);
        let expected = 2.0 * (1.0 - (-0.7f64).exp()).powi(2);
        assert_relative_eq!(center, expected, epsilon = 1e-12);
        // interior saturates toward a_e
        let deep =
            corridor_wall_potential(Point2::new(5.0, 40.0), &flat, CorridorSide::Right, &c);
        assert_relative_eq!(deep, c.a_e, epsilon = 1e-9);
        // outside the wall the barrier grows monotonically, overtakes the
        // interior plateau within a meter, and stays finite far out
        let out1 =
            corridor_wall_potential(Point2::new(5.0, -2.0), &flat, CorridorSide::Right, &c);
        let out2 =
            corridor_wall_potential(Point2::new(5.0, -3.0), &flat, CorridorSide::Right, &c);
        let far =
            corridor_wall_potential(Point2::new(5.0, -1e6), &flat, CorridorSide::Right, &c);
        assert!(out2 > out1 && out1 > center);
        assert!(far.is_finite());
        // left wall mirrors
        let left_on = corridor_wall_potential(
            Point2::new(5.0, c.corridor_half_width),
            &flat,
            CorridorSide::Left,
            &c,
        );
        assert_relative_eq!(left_on, 0.0, epsilon = 1e-15);
        let left_out =
            corridor_wall_potential(Point2::new(5.0, 2.0), &flat, CorridorSide::Left, &c);
        assert!(left_out > center);
    }

    #[test]
    fn sloped_corridor_shifts_walls_by_slope_factor() {
        let c = cfg();
        let sloped = ClothoidCoefficients::new([0.0, 1.0, 0.0, 0.0]); // 45 degrees
        let offset = c.corridor_half_width * 2.0f64.sqrt();
        let on_wall = corridor_wall_potential(
            Point2::new(0.0, -offset),
            &sloped,
            CorridorSide::Right,
            &c,
        );
        assert_relative_eq!(on_wall, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn attraction_worked_example() {
        let u = stop_attraction_potential(Point2::new(0.0, 0.0), Point2::new(3.0, 4.0), 0.2);
        assert_relative_eq!(u, 2.5, epsilon = 1e-12);
    }

    fn nominal_context<'a>(
        chain: &'a WaypointChain,
        obstacles: &'a [ObstacleSnapshot],
        road: &'a RoadGeometry,
        vehicle: &'a VehicleParams,
        bounds: &'a FitBounds,
        config: &'a EsppConfig,
    ) -> PlanContext<'a> {
        PlanContext {
            ego: VehicleState {
                x: 100.0,
                y: 1.5,
                v: 30.0,
                beta: 0.0,
                psi: -0.05,
                psi_dot: 0.0,
            },
            psi_ref: -0.5,
            chain,
            obstacles,
            road,
            d_brake: 76.16,
            vehicle,
            fit_bounds: bounds,
            cfg: config,
        }
    }

    #[test]
    fn plan_pipeline_produces_a_consistent_escape() {
        let chain = generate_waypoints(Point2::new(100.0, 1.5), -0.5, 0.3, 20).unwrap();
        let obstacles = [ObstacleSnapshot {
            pose: Pose::new(106.0, 2.2, -0.15),
            speed: 29.0,
        }];
        let r = road();
        let vehicle = VehicleParams::default();
        let bounds = FitBounds::default();
        let config = cfg();
        let ctx = nominal_context(&chain, &obstacles, &r, &vehicle, &bounds, &config);
        let plan = plan_espp(&ctx).unwrap();

        // breach point on the edge along the entry ray
        assert_relative_eq!(plan.anchors.p_bp.y, 0.0, epsilon = 1e-12);
        assert!(plan.anchors.p_bp.x > 100.0 && plan.anchors.p_bp.x < 106.0);
        // stop point deep in the escape box, inside the band
        assert!(plan.selection.point.x > plan.anchors.p_bp.x + 0.5 * ctx.d_brake);
        assert!(plan.selection.point.y <= -1.0 && plan.selection.point.y >= -3.2);
        // hybrid count: prefix + interiors + breach + stop
        let prefix_len = plan.hybrid_world.len() - config.n_b2i - config.n_i2s - 2;
        assert!(prefix_len >= 1);
        // curve ends near the stop anchor (weight 10 pins it)
        let sp = plan.sp_local;
        assert!((plan.coeffs.eval(sp.x) - sp.y).abs() < 0.35);
        // descent strictly decreases the corridor potential
        assert!(plan.u_descent.len() >= 2, "descent must make progress");
        for w in plan.u_descent.windows(2) {
            assert!(w[1] < w[0]);
        }
        assert_eq!(plan.p_new.len(), plan.u_descent.len());
        // reference rows span the horizon and stay in the lateral domain
        let reference = plan
            .curve_reference(&ctx.ego, 20, 0.01, (r.esl_lower_y, r.upper_edge_y))
            .unwrap();
        assert_eq!(reference.rows.len(), 20);
        for row in &reference.rows {
            assert!(row[0] >= r.esl_lower_y && row[0] <= r.upper_edge_y);
            assert_eq!(row[1], 0.0);
        }
        // lookahead target advances with the ego and clamps at the stop
        let near = plan.lookahead_target_local(Point2::new(100.0, 1.5), 30.0, &config);
        assert_relative_eq!(near.x, 15.0, epsilon = 1e-9); // 0.5 s * 30 m/s
        let at_stop = plan.lookahead_target_local(plan.selection.point, 30.0, &config);
        assert_relative_eq!(at_stop.x, plan.sp_local.x, epsilon = 1e-9);
    }

    #[test]
    fn plan_without_obstacles_still_escapes() {
        let chain = generate_waypoints(Point2::new(100.0, 1.5), -0.5, 0.3, 20).unwrap();
        let r = road();
        let vehicle = VehicleParams::default();
        let bounds = FitBounds::default();
        let config = cfg();
        let ctx = nominal_context(&chain, &[], &r, &vehicle, &bounds, &config);
        let plan = plan_espp(&ctx).unwrap();
        assert!(plan.selection.point.x > plan.anchors.p_bp.x);
    }

    #[test]
    fn plan_rejects_ego_below_edge() {
        let chain = generate_waypoints(Point2::new(100.0, -0.5), -0.5, 0.3, 20).unwrap();
        let r = road();
        let vehicle = VehicleParams::default();
        let bounds = FitBounds::default();
        let config = cfg();
        let mut ctx = nominal_context(&chain, &[], &r, &vehicle, &bounds, &config);
        ctx.ego.y = -0.5;
        assert!(matches!(
            plan_espp(&ctx),
            Err(Error::InvalidGeometry(_))
        ));
    }

    #[test]
    fn steep_field_heading_is_clamped_into_the_window() {
        // psi_ref steeper than -pi/2 would walk backward; the clamp keeps
        // the construction forward-progressing
        let chain = generate_waypoints(Point2::new(100.0, 1.5), -2.0, 0.3, 20).unwrap();
        let obstacles = [ObstacleSnapshot {
            pose: Pose::new(106.0, 2.2, -0.15),
            speed: 29.0,
        }];
        let r = road();
        let vehicle = VehicleParams::default();
        let bounds = FitBounds::default();
        let config = cfg();
        let mut ctx = nominal_context(&chain, &obstacles, &r, &vehicle, &bounds, &config);
        ctx.psi_ref = -2.0;
        let plan = plan_espp(&ctx).unwrap();
        assert_relative_eq!(
            plan.anchors.entry_heading,
            config.entry_heading_min,
            epsilon = 1e-12
        );
        assert!(plan.selection.point.x > plan.anchors.p_bp.x);
    }
}
