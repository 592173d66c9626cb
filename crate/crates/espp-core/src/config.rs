//! Aggregate simulation configuration: one JSON document covering road,
//! field, planner, fit, vehicle, controller, braking and scenario knobs,
//! with dotted-path overrides for one-off experiments.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clothoid::FitBounds;
use crate::emergency_trigger::BrakingModel;
use crate::error::{Error, Result};
use crate::espp_planner::EsppConfig;
use crate::mpc_controller::MpcConfig;
use crate::potential_field::{ApfConfig, GradientRule, RoadGeometry};
use crate::vehicle_model::VehicleParams;

/// Closed-loop scenario: a faster neighbor-lane vehicle overtakes, cuts
/// into the ego lane once it leads by a car length, and brakes hard.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    /// Simulation horizon and step, s.
    pub duration_s: f64,
    pub t_s: f64,
    /// Ego start pose and speed.
    pub ego_x0: f64,
    pub ego_y0: f64,
    pub ego_speed: f64,
    /// Obstacle start: `initial_gap` ahead of the ego in the next lane,
    /// moving `obstacle_speed_factor` times the ego speed.
    pub initial_gap: f64,
    pub obstacle_y0: f64,
    pub obstacle_speed_factor: f64,
    /// Cut-in script: the lead (m) that starts the cut, the heading ramp
    /// time (s), the heading it ramps to (rad), and the time constant (s)
    /// on which the heading straightens back out while the brake is held —
    /// the cutter ends up stopped in the ego lane, road-parallel.
    pub cut_lead: f64,
    pub cut_duration: f64,
    pub cut_heading: f64,
    pub cut_recover_s: f64,
    /// Bumper-to-bumper gap (m) below which the follow-the-field-and-brake
    /// variant finally brakes; it reacts to tailgating distance instead of
    /// the blind-alley detector.
    pub fb_proximity_gap: f64,
    /// Consecutive triggering control steps required to latch an emergency.
    pub trigger_debounce_steps: usize,
    /// Minimum field force magnitude for a step to count toward the trigger;
    /// near the field minimum the heading flips sign with negligible force
    /// behind it, and those steps must not arm an emergency.
    pub trigger_force_floor: f64,
    /// Slew limit (rad/s) of the guide heading handed to the tracker; the
    /// horizon (s, scaled by speed) at which the field is sampled ahead of
    /// the guide — sampling ahead damps the sign flips the descent heading
    /// exhibits right at the field minimum; and the gain (1/s) pulling the
    /// guide's lateral position back toward the ego so it cannot run away
    /// from the vehicle that tracks it.
    pub guide_turn_rate: f64,
    pub guide_lookahead_s: f64,
    pub guide_pull: f64,
    /// Slew limit (rad/s^2) on the guide heading's own rate, so the
    /// reference never demands a step change of yaw rate.
    pub guide_turn_accel: f64,
    /// Hard cap (m) on how far the guide's lateral position may lead the
    /// ego, so the tracking error handed to the controller stays bounded.
    pub guide_max_lead: f64,
    /// Time constant (s) of the reference's approach to the guide line: the
    /// horizon rows close the current gap exponentially instead of stepping
    /// onto the guide, which keeps the closed loop from overshooting it.
    pub guide_approach_s: f64,
    /// Steering allowance (rad) that sizes the glide onto the planned stop
    /// line: the glide heading stays inside what this much steering can
    /// still level out at the current speed.
    pub glide_steer_budget: f64,
    /// Ego speeds covered by the sweep, m/s.
    pub sweep_speeds: Vec<f64>,
    /// Recorded in metrics for bookkeeping; the scenario is deterministic.
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            duration_s: 15.0,
            t_s: 0.01,
            ego_x0: 0.0,
            ego_y0: 2.0,
            ego_speed: 30.0,
            initial_gap: 2.0,
            obstacle_y0: 6.0,
            obstacle_speed_factor: 16.0 / 15.0,
            cut_lead: 4.7,
            cut_duration: 0.5,
            cut_heading: -0.2,
            cut_recover_s: 0.35,
            fb_proximity_gap: 2.5,
            trigger_debounce_steps: 10,
            trigger_force_floor: 0.03,
            guide_turn_rate: 0.26,
            guide_lookahead_s: 0.5,
            guide_pull: 1.5,
            guide_turn_accel: 1.0,
            guide_max_lead: 0.4,
            guide_approach_s: 1.0,
            glide_steer_budget: 0.039,
            sweep_speeds: vec![20.0, 25.0, 30.0, 35.0],
            seed: 42,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_s > 0.0 && self.duration_s > 0.0) {
            return Err(Error::Config("step and duration must be positive".into()));
        }
        if !(self.ego_speed > 0.0) {
            return Err(Error::Config("ego speed must be positive".into()));
        }
        if self.obstacle_speed_factor <= 1.0 {
            return Err(Error::Config(
                "the obstacle must be faster than the ego or the cut never happens".into(),
            ));
        }
        if !(self.cut_duration > 0.0 && self.cut_recover_s > 0.0) {
            return Err(Error::Config(
                "cut ramp duration and recovery time must be positive".into(),
            ));
        }
        if !(self.fb_proximity_gap > 0.0) {
            return Err(Error::Config("proximity gap must be positive".into()));
        }
        if self.cut_heading >= 0.0 {
            return Err(Error::Config("the cut must steer toward the ego lane".into()));
        }
        if self.trigger_debounce_steps == 0 {
            return Err(Error::Config("debounce must be at least one step".into()));
        }
        if self.trigger_force_floor < 0.0 {
            return Err(Error::Config("trigger force floor cannot be negative".into()));
        }
        if !(self.guide_turn_rate > 0.0)
            || !(self.guide_turn_accel > 0.0)
            || !(self.guide_lookahead_s > 0.0)
            || self.guide_pull < 0.0
            || !(self.guide_max_lead > 0.0)
            || !(self.guide_approach_s > 0.0)
            || !(self.glide_steer_budget > 0.0)
        {
            return Err(Error::Config(
                "guide turn rate, accel, lookahead, max lead, approach time and glide \
                 steering budget must be positive, pull nonnegative"
                    .into(),
            ));
        }
        if self.sweep_speeds.is_empty() || self.sweep_speeds.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("sweep speeds must be positive".into()));
        }
        Ok(())
    }
}

/// Everything a closed-loop run needs, with workable defaults throughout.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub road: RoadGeometry,
    pub apf: ApfConfig,
    pub gradient: GradientRule,
    pub espp: EsppConfig,
    pub fit: FitBounds,
    pub vehicle: VehicleParams,
    pub mpc: MpcConfig,
    pub braking: BrakingModel,
    pub scenario: ScenarioConfig,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.road.validate()?;
        self.apf.validate()?;
        self.espp.validate()?;
        self.fit.validate()?;
        self.vehicle.validate()?;
        self.mpc.validate()?;
        self.scenario.validate()?;
        if !(self.braking.reaction_time >= 0.0 && self.braking.max_decel > 0.0) {
            return Err(Error::Config(
                "braking needs a nonnegative reaction time and positive deceleration".into(),
            ));
        }
        if (self.mpc.t_s - self.scenario.t_s).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "controller step {} must equal the simulation step {}",
                self.mpc.t_s, self.scenario.t_s
            )));
        }
        let road = &self.road;
        for (name, y) in [
            ("ego_y0", self.scenario.ego_y0),
            ("obstacle_y0", self.scenario.obstacle_y0),
        ] {
            if y <= road.lower_edge_y || y >= road.upper_edge_y {
                return Err(Error::Config(format!(
                    "{name} = {y} must lie strictly inside the road"
                )));
            }
        }
        Ok(())
    }
}

/// Read a JSON config; missing fields fall back to defaults.
pub fn load_config(path: &Path) -> Result<SimConfig> {
    let text = std::fs::read_to_string(path)?;
    let cfg: SimConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

/// Apply one `section.field=value` override. The path must name an existing
/// field; the value is parsed as JSON, falling back to a bare string.
pub fn apply_override(cfg: &mut SimConfig, path: &str, raw: &str) -> Result<()> {
    let mut value = serde_json::to_value(&*cfg)
        .map_err(|e| Error::Config(format!("serialize: {e}")))?;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed setting path '{path}'")));
    }
    let (leaf, sections) = parts.split_last().expect("path has at least one part");
    let mut cursor = &mut value;
    for part in sections {
        cursor = cursor
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("'{path}' descends into a non-object")))?
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown section in '{path}'")))?;
    }
    let obj = cursor
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("'{path}' descends into a non-object")))?;
    if !obj.contains_key(*leaf) {
        return Err(Error::Config(format!("unknown setting '{path}'")));
    }
    let parsed =
        serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    obj.insert((*leaf).to_string(), parsed);
    *cfg = serde_json::from_value(value)
        .map_err(|e| Error::Config(format!("'{path}={raw}': {e}")))?;
    Ok(())
}

/// Parse a `key=value` pair as passed on a command line.
pub fn parse_override(spec: &str) -> Result<(String, String)> {
    match spec.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(Error::Config(format!(
            "override '{spec}' must look like section.field=value"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn defaults_validate() {
        SimConfig::default().validate().unwrap();
    }

    #[test]
    fn json_round_trip_preserves_defaults() {
        let cfg = SimConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: SimConfig = serde_json::from_str(&text).unwrap();
        assert_relative_eq!(back.apf.a_obs, cfg.apf.a_obs);
        assert_relative_eq!(back.mpc.r, cfg.mpc.r);
        assert_eq!(back.scenario.sweep_speeds, cfg.scenario.sweep_speeds);
    }

    #[test]
    fn partial_json_fills_missing_fields() {
        let cfg: SimConfig = serde_json::from_str(r#"{"mpc": {"n_p": 30}}"#).unwrap();
        assert_eq!(cfg.mpc.n_p, 30);
        assert_eq!(cfg.mpc.n_c, MpcConfig::default().n_c);
        assert_relative_eq!(cfg.scenario.ego_speed, 30.0);
    }

    #[test]
    fn override_sets_nested_field() {
        let mut cfg = SimConfig::default();
        apply_override(&mut cfg, "scenario.ego_speed", "25").unwrap();
        assert_relative_eq!(cfg.scenario.ego_speed, 25.0);
        apply_override(&mut cfg, "apf.w1", "0.6").unwrap();
        assert_relative_eq!(cfg.apf.w1, 0.6);
        apply_override(&mut cfg, "scenario.sweep_speeds", "[10, 20]").unwrap();
        assert_eq!(cfg.scenario.sweep_speeds, vec![10.0, 20.0]);
    }

    #[test]
    fn override_rejects_unknown_paths_and_bad_types() {
        let mut cfg = SimConfig::default();
        assert!(apply_override(&mut cfg, "mpc.bogus", "1").is_err());
        assert!(apply_override(&mut cfg, "nonsense.ego_speed", "1").is_err());
        assert!(apply_override(&mut cfg, "scenario.ego_speed", "fast").is_err());
        // failed overrides must not corrupt the config
        assert_relative_eq!(cfg.scenario.ego_speed, 30.0);
    }

    #[test]
    fn parse_override_splits_once() {
        let (k, v) = parse_override("mpc.q=[1, 2, 3]").unwrap();
        assert_eq!(k, "mpc.q");
        assert_eq!(v, "[1, 2, 3]");
        assert!(parse_override("no-equals").is_err());
        assert!(parse_override("=5").is_err());
    }

    #[test]
    fn validation_rejects_incoherent_steps() {
        let mut cfg = SimConfig::default();
        cfg.scenario.t_s = 0.02;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = SimConfig::default();
        cfg.scenario.obstacle_speed_factor = 0.9;
        assert!(cfg.validate().is_err());
        let mut cfg = SimConfig::default();
        cfg.scenario.obstacle_y0 = 9.0;
        assert!(cfg.validate().is_err());
    }
}
