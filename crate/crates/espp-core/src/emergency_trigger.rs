//! Blind-alley detection: when the steepest-descent heading drives a straight
//! probe chain off the retainable road and the braking envelope no longer
//! covers the distance to the breach, an emergency stop must be planned.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::potential_field::RoadGeometry;

/// Straight probe of `count` waypoints spaced `step` meters along `psi_ref`.
#[derive(Debug, Clone)]
pub struct WaypointChain {
    pub origin: Point2,
    pub psi_ref: f64,
    pub step: f64,
    pub points: Vec<Point2>,
}

impl WaypointChain {
    pub fn last(&self) -> Point2 {
        *self.points.last().expect("chain is never empty")
    }
}

/// Build the probe chain: point k sits k*step along the heading, k = 1..count.
pub fn generate_waypoints(
    ego: Point2,
    psi_ref: f64,
    step: f64,
    count: usize,
) -> Result<WaypointChain> {
    if count == 0 {
        return Err(Error::InvalidArgument("waypoint count must be positive".into()));
    }
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "waypoint spacing must be positive, got {step}"
        )));
    }
    let (s, c) = psi_ref.sin_cos();
    let points = (1..=count)
        .map(|k| ego.add(k as f64 * step * c, k as f64 * step * s))
        .collect();
    Ok(WaypointChain {
        origin: ego,
        psi_ref,
        step,
        points,
    })
}

/// Reaction delay plus constant-deceleration stopping model.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct BrakingModel {
    pub reaction_time: f64,
    pub max_decel: f64,
}

impl Default for BrakingModel {
    fn default() -> Self {
        BrakingModel {
            reaction_time: 0.5,
            max_decel: 0.75 * 9.81,
        }
    }
}

impl BrakingModel {
    /// Distance covered from speed `v` to standstill: v t_r + v^2 / (2 a).
    pub fn braking_distance(&self, v: f64) -> f64 {
        debug_assert!(v >= 0.0 && self.max_decel > 0.0);
        v * self.reaction_time + v * v / (2.0 * self.max_decel)
    }
}

/// Where the heading ray leaves the road through the lower edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayIntersection {
    pub point: Point2,
    pub distance: f64,
}

/// Intersection of ray(ego, psi_ref) with the lower road edge, if the ray
/// descends and the ego is still above the edge.
pub fn estimate_intersection(
    ego: Point2,
    psi_ref: f64,
    road: &RoadGeometry,
) -> Option<RayIntersection> {
    if ego.y <= road.lower_edge_y {
        return None;
    }
    let (s, c) = psi_ref.sin_cos();
    if s >= -1e-12 {
        return None;
    }
    let t = (road.lower_edge_y - ego.y) / s;
    let point = ego.add(t * c, t * s);
    Some(RayIntersection {
        point,
        distance: ego.distance(point),
    })
}

/// One trigger evaluation: chain breach and braking-envelope comparison.
#[derive(Debug, Clone, Copy)]
pub struct TriggerDecision {
    pub triggered: bool,
    pub chain_breaches: bool,
    pub p_int: Option<Point2>,
    pub d_e2r: Option<f64>,
    pub d_brake: f64,
}

/// Emergency iff the chain's far end has left the road through the lower
/// edge AND the edge is strictly inside the braking envelope. An exact tie
/// does not trigger.
pub fn evaluate_trigger(
    chain: &WaypointChain,
    ego_speed: f64,
    road: &RoadGeometry,
    model: &BrakingModel,
) -> TriggerDecision {
    let d_brake = model.braking_distance(ego_speed);
    let chain_breaches = chain.last().y <= road.lower_edge_y;
    let hit = estimate_intersection(chain.origin, chain.psi_ref, road);
    let d_e2r = hit.map(|h| h.distance);
    let triggered = chain_breaches && d_e2r.map_or(false, |d| d < d_brake);
    TriggerDecision {
        triggered,
        chain_breaches,
        p_int: hit.map(|h| h.point),
        d_e2r,
        d_brake,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn road() -> RoadGeometry {
        RoadGeometry::default()
    }

    #[test]
    fn chain_marches_along_the_heading() {
        let chain = generate_waypoints(Point2::new(0.0, 2.0), -0.3, 0.3, 20).unwrap();
        assert_eq!(chain.points.len(), 20);
        let tip = chain.last();
        assert_relative_eq!(tip.x, 6.0 * (-0.3f64).cos(), epsilon = 1e-12);
        assert_relative_eq!(tip.y, 2.0 + 6.0 * (-0.3f64).sin(), epsilon = 1e-12);
        // equal spacing
        for w in chain.points.windows(2) {
            assert_relative_eq!(w[0].distance(w[1]), 0.3, epsilon = 1e-12);
        }
        assert!(generate_waypoints(Point2::new(0.0, 2.0), -0.3, 0.3, 0).is_err());
        assert!(generate_waypoints(Point2::new(0.0, 2.0), -0.3, 0.0, 5).is_err());
    }

    #[test]
    fn breach_threshold_heading() {
        // tip y = 2 + 6 sin(psi): crosses zero near psi = -0.3398
        let ego = Point2::new(0.0, 2.0);
        let shallow = generate_waypoints(ego, -0.33, 0.3, 20).unwrap();
        assert!(shallow.last().y > road().lower_edge_y);
        let steep = generate_waypoints(ego, -0.35, 0.3, 20).unwrap();
        assert!(steep.last().y <= road().lower_edge_y);
    }

    #[test]
    fn braking_distance_matches_hand_value() {
        let m = BrakingModel::default();
        assert_relative_eq!(m.max_decel, 7.3575, epsilon = 1e-12);
        assert_relative_eq!(
            m.braking_distance(30.0),
            15.0 + 900.0 / 14.715,
            epsilon = 1e-12
        );
        assert_relative_eq!(m.braking_distance(30.0), 76.16207951070336, epsilon = 1e-9);
        assert_relative_eq!(m.braking_distance(0.0), 0.0);
    }

    #[test]
    fn ray_edge_intersection() {
        let hit = estimate_intersection(
            Point2::new(0.0, 2.0),
            -std::f64::consts::FRAC_PI_4,
            &road(),
        )
        .unwrap();
        assert_relative_eq!(hit.point.x, 2.0, epsilon = 1e-12);
        assert_relative_eq!(hit.point.y, 0.0, epsilon = 1e-12);
        assert_relative_eq!(hit.distance, 2.0 * 2.0f64.sqrt(), epsilon = 1e-12);
        // ascending or level rays never cross
        assert!(estimate_intersection(Point2::new(0.0, 2.0), 0.1, &road()).is_none());
        assert!(estimate_intersection(Point2::new(0.0, 2.0), 0.0, &road()).is_none());
        // already at or below the edge
        assert!(estimate_intersection(Point2::new(0.0, -0.5), -0.3, &road()).is_none());
    }

    #[test]
    fn trigger_requires_breach_and_short_envelope() {
        let ego = Point2::new(0.0, 2.0);
        // steep dive straight down: breach at distance exactly 2
        let chain = generate_waypoints(ego, -std::f64::consts::FRAC_PI_2, 0.3, 20).unwrap();
        let generous = BrakingModel {
            reaction_time: 0.5,
            max_decel: 1.9,
        };
        let d = evaluate_trigger(&chain, 2.0, &road(), &generous);
        assert!(d.chain_breaches);
        assert_relative_eq!(d.d_e2r.unwrap(), 2.0, epsilon = 1e-12);
        assert!(d.d_brake > 2.0);
        assert!(d.triggered);
    }

    #[test]
    fn exact_tie_does_not_trigger() {
        let ego = Point2::new(0.0, 2.0);
        let chain = generate_waypoints(ego, -std::f64::consts::FRAC_PI_2, 0.3, 20).unwrap();
        // v = 2, t_r = 0.5, a = 2: d_brake = 1 + 4/4 = 2 exactly; d_e2r = 2
        let model = BrakingModel {
            reaction_time: 0.5,
            max_decel: 2.0,
        };
        let d = evaluate_trigger(&chain, 2.0, &road(), &model);
        assert_eq!(d.d_e2r.unwrap().to_bits(), 2.0f64.to_bits());
        assert_eq!(d.d_brake.to_bits(), 2.0f64.to_bits());
        assert!(!d.triggered, "tie must not trigger");
    }

    #[test]
    fn no_breach_means_no_trigger_even_if_close() {
        let ego = Point2::new(0.0, 2.0);
        let chain = generate_waypoints(ego, -0.33, 0.3, 20).unwrap(); // shallow, no breach
        let model = BrakingModel {
            reaction_time: 0.5,
            max_decel: 0.1, // enormous braking distance
        };
        let d = evaluate_trigger(&chain, 30.0, &road(), &model);
        assert!(!d.chain_breaches);
        assert!(d.d_e2r.is_some()); // the ray itself does cross eventually
        assert!(d.d_e2r.unwrap() < d.d_brake);
        assert!(!d.triggered);
    }
}
