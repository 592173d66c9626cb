//! Closed-loop sudden-cut-in scenario: a faster vehicle overtakes in the
//! next lane, cuts in front of the ego once it leads by a car length, and
//! brakes hard. Four guidance stacks run against the same script, from a
//! conventional static field up to the full emergency-stopping pipeline,
//! and a common metric set makes them comparable.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{ScenarioConfig, SimConfig};
use crate::emergency_trigger::{evaluate_trigger, generate_waypoints, BrakingModel};
use crate::error::{Error, Result};
use crate::espp_planner::{plan_espp, EsppPlan, ObstacleSnapshot, PlanContext};
use crate::geometry::{wrap_angle, OrientedRect, Point2, Pose};
use crate::mpc_controller::{output_bounds, MpcController, Reference};
use crate::par;
use crate::potential_field::{
    descend_gradient, target_potential, total_potential, FieldMode, GradientOutcome,
    ObstaclePfParams,
};
use crate::vehicle_model::{discretize, step as vehicle_step, VehicleState, LOW_SPEED_FREEZE};

/// Guidance stack under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlannerKind {
    /// Conventional static field, no braking, no emergency handling.
    CpfCs,
    /// Adaptive field that brakes when the emergency is detected but keeps
    /// the normal field and lane bounds: no planned escape.
    ApfFb,
    /// Adaptive field + trigger; on emergency the breached edge barrier is
    /// dropped and the vehicle brakes, with no planned escape path.
    ApfNolr,
    /// Full pipeline: trigger, planned escape curve, corridor field, brake.
    EsppApf,
}

/// Below this speed the linear tracking model degenerates (its forward-Euler
/// update diverges and tiny yaw rates demand large angles), so the steering
/// is relaxed toward zero instead.
const MIN_CONTROL_SPEED: f64 = 3.0;

/// Rate-limited relaxation of the steering angle toward zero, used whenever
/// the tracking problem is skipped or has no solution under the hard bounds.
fn unwind_steering(u_prev: f64, du_max: f64) -> f64 {
    u_prev.signum() * (u_prev.abs() - du_max).max(0.0)
}

/// Proportional gain of the guide-heading slew (1/s). Inside the rate limit
/// the heading approaches its goal on this time scale instead of switching at
/// full rate, which would feed step changes of yaw rate to the tracker.
const HEADING_GAIN: f64 = 4.0;

/// Lag, s, between the guide demanding a heading and the tracked car
/// achieving it; the band flare is led by this much.
const FLARE_LEAD_S: f64 = 0.3;

/// Offset, m, under which the stop-line glide stops steering; without it
/// the goal heading keeps hunting over centimeters as speed drains away.
const GLIDE_DEADBAND_M: f64 = 0.12;

/// One slew step of a heading toward `goal`, rolling the heading's own rate
/// `w`: the rate chases a proportional demand under the rate and acceleration
/// limits, so the heading handed to the tracker is smooth in value and rate.
fn slew_heading(psi: f64, w: &mut f64, goal: f64, rate: f64, accel: f64, dt: f64) -> f64 {
    let err = wrap_angle(goal - psi);
    let w_des = (err * HEADING_GAIN).clamp(-rate, rate);
    *w += (w_des - *w).clamp(-accel * dt, accel * dt);
    wrap_angle(psi + *w * dt)
}

pub const ALL_PLANNERS: [PlannerKind; 4] = [
    PlannerKind::CpfCs,
    PlannerKind::ApfFb,
    PlannerKind::ApfNolr,
    PlannerKind::EsppApf,
];

impl fmt::Display for PlannerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            PlannerKind::CpfCs => "cpf-cs",
            PlannerKind::ApfFb => "apf-fb",
            PlannerKind::ApfNolr => "apf-nolr",
            PlannerKind::EsppApf => "espp-apf",
        };
        f.write_str(name)
    }
}

impl FromStr for PlannerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cpf-cs" => Ok(PlannerKind::CpfCs),
            "apf-fb" => Ok(PlannerKind::ApfFb),
            "apf-nolr" => Ok(PlannerKind::ApfNolr),
            "espp-apf" => Ok(PlannerKind::EsppApf),
            other => Err(Error::InvalidArgument(format!(
                "unknown planner '{other}' (expected cpf-cs, apf-fb, apf-nolr or espp-apf)"
            ))),
        }
    }
}

/// Guidance mode recorded per step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Normal,
    Emergency,
    /// Emergency was latched but no escape plan could be built: brake and
    /// hold the lane.
    Fallback,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Mode::Normal => "normal",
            Mode::Emergency => "emergency",
            Mode::Fallback => "fallback",
        };
        f.write_str(name)
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Mode::Normal),
            "emergency" => Ok(Mode::Emergency),
            "fallback" => Ok(Mode::Fallback),
            other => Err(Error::InvalidArgument(format!("unknown mode '{other}'"))),
        }
    }
}

/// One logged simulation step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajectoryRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub beta: f64,
    pub psi: f64,
    pub psi_dot: f64,
    pub delta_f: f64,
    pub mode: Mode,
    pub u_total: f64,
}

/// Obstacle track point, kept for plotting and the final-footprint check.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ObstacleRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub psi: f64,
}

/// Milestones of one run.
#[derive(Debug, Clone, Serialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SimEvent {
    CutStarted { t: f64 },
    EmergencyLatched { t: f64, psi_ref: f64 },
    PlanReady { t: f64, stop_x: f64, stop_y: f64 },
    PlanFailed { t: f64, reason: String },
    BrakingStarted { t: f64 },
    Collision { t: f64 },
    EgoStopped { t: f64 },
    ObstacleStopped { t: f64 },
}

/// Comparable outcome measures of one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean absolute path curvature (1/m) over the driven trajectory.
    pub ac: f64,
    /// Cut-to-standstill response time, absent when the ego never stops.
    pub rt_s: Option<f64>,
    /// Collision avoided throughout.
    pub ca: bool,
    /// Safe stop: standstill, footprint inside the emergency stopping
    /// lane, clear of the stopped obstacle.
    pub ss: bool,
    pub max_steer_rad: f64,
    pub max_lat_accel_mps2: f64,
    pub stop_x_m: f64,
    pub stop_y_m: f64,
    pub planner: String,
    pub speed_mps: f64,
    pub seed: u64,
}

/// Full record of one closed-loop run.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub rows: Vec<TrajectoryRow>,
    pub obstacle: Vec<ObstacleRow>,
    pub events: Vec<SimEvent>,
    pub metrics: Metrics,
    pub plan: Option<EsppPlan>,
    /// Obstacle field params at the latch instant, for field snapshots.
    pub latch_params: Option<ObstaclePfParams>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ObstaclePhase {
    Cruise,
    Ramp { t0: f64 },
    Settle,
}

/// Scripted cut-in vehicle: cruise, heading ramp, then full braking while
/// the heading straightens back out in the ego lane.
#[derive(Debug, Clone)]
struct ObstacleSim {
    x: f64,
    y: f64,
    v: f64,
    psi: f64,
    phase: ObstaclePhase,
    a_long: f64,
    a_lat: f64,
}

impl ObstacleSim {
    fn new(sc: &ScenarioConfig) -> Self {
        ObstacleSim {
            x: sc.ego_x0 + sc.initial_gap,
            y: sc.obstacle_y0,
            v: sc.ego_speed * sc.obstacle_speed_factor,
            psi: 0.0,
            phase: ObstaclePhase::Cruise,
            a_long: 0.0,
            a_lat: 0.0,
        }
    }

    fn pose(&self) -> Pose {
        Pose::new(self.x, self.y, self.psi)
    }

    fn step(
        &mut self,
        t: f64,
        dt: f64,
        ego_x: f64,
        sc: &ScenarioConfig,
        braking: &BrakingModel,
        events: &mut Vec<SimEvent>,
    ) {
        let (v_prev, psi_prev) = (self.v, self.psi);
        if self.phase == ObstaclePhase::Cruise && self.x - ego_x >= sc.cut_lead {
            self.phase = ObstaclePhase::Ramp { t0: t };
            events.push(SimEvent::CutStarted { t });
        }
        match self.phase {
            ObstaclePhase::Cruise => {}
            ObstaclePhase::Ramp { t0 } => {
                let progress = ((t - t0) / sc.cut_duration).min(1.0);
                self.psi = sc.cut_heading * progress;
                if t - t0 >= sc.cut_duration {
                    self.phase = ObstaclePhase::Settle;
                }
            }
            ObstaclePhase::Settle => {
                // The cutter straightens out in the ego lane while braking,
                // ending road-parallel; the decay time sets how deep into
                // the lane it settles.
                self.psi *= (-dt / sc.cut_recover_s).exp();
            }
        }
        self.x += dt * self.v * self.psi.cos();
        self.y += dt * self.v * self.psi.sin();
        if self.phase == ObstaclePhase::Settle {
            let v_new = (self.v - braking.max_decel * dt).max(0.0);
            if self.v > 0.0 && v_new == 0.0 {
                events.push(SimEvent::ObstacleStopped { t });
            }
            self.v = v_new;
        }
        self.a_long = (self.v - v_prev) / dt;
        self.a_lat = self.v * (self.psi - psi_prev) / dt;
    }
}

struct ControllerState {
    mpc: MpcController,
    mode: Mode,
    consecutive_triggers: usize,
    plan: Option<EsppPlan>,
    brake_at: Option<f64>,
    psi_ref: f64,
    /// Guide: a virtual particle the tracker follows. Its heading follows
    /// the field sampled ahead of it but turns no faster than the slew
    /// limit (the raw descent heading flips sign across the field minimum
    /// faster than the vehicle can respond), and its lateral position flows
    /// along that heading while being pulled gently back toward the ego.
    guide_psi: f64,
    guide_w: f64,
    guide_y: f64,
    latch_params: Option<ObstaclePfParams>,
}

/// Run one closed-loop scenario with the chosen guidance stack.
pub fn run_scenario(cfg: &SimConfig, planner: PlannerKind) -> Result<SimOutput> {
    cfg.validate()?;
    let sc = &cfg.scenario;
    let road = &cfg.road;
    let dt = sc.t_s;
    let steps = (sc.duration_s / dt).round() as usize;

    let mut ego = VehicleState {
        x: sc.ego_x0,
        y: sc.ego_y0,
        v: sc.ego_speed,
        beta: 0.0,
        psi: 0.0,
        psi_dot: 0.0,
    };
    let mut obstacle = ObstacleSim::new(sc);
    let mut ctl = ControllerState {
        mpc: MpcController::new(),
        mode: Mode::Normal,
        consecutive_triggers: 0,
        plan: None,
        brake_at: None,
        psi_ref: 0.0,
        guide_psi: 0.0,
        guide_w: 0.0,
        guide_y: sc.ego_y0,
        latch_params: None,
    };

    let mut rows: Vec<TrajectoryRow> = Vec::with_capacity(steps);
    let mut obstacle_rows: Vec<ObstacleRow> = Vec::with_capacity(steps);
    let mut events: Vec<SimEvent> = Vec::new();
    let mut collided = false;
    let mut ego_stopped_at: Option<f64> = None;

    let normal_clamp = (
        road.lower_edge_y + 0.5 * cfg.vehicle.width,
        road.upper_edge_y - 0.5 * cfg.vehicle.width,
    );
    let emergency_clamp = (
        road.esl_lower_y + 0.5 * cfg.vehicle.width,
        road.upper_edge_y - 0.5 * cfg.vehicle.width,
    );

    for k in 0..steps {
        let t = k as f64 * dt;
        obstacle.step(t, dt, ego.x, sc, &cfg.braking, &mut events);
        obstacle_rows.push(ObstacleRow {
            t,
            x: obstacle.x,
            y: obstacle.y,
            v: obstacle.v,
            psi: obstacle.psi,
        });

        let ego_pos = Point2::new(ego.x, ego.y);
        let obstacle_params = match planner {
            PlannerKind::CpfCs => ObstaclePfParams::fixed(Point2::new(obstacle.x, obstacle.y), &cfg.apf),
            _ => ObstaclePfParams::adaptive(
                Point2::new(obstacle.x, obstacle.y),
                obstacle.v,
                obstacle.a_long,
                obstacle.a_lat,
                &cfg.apf,
            ),
        };
        let obstacles = [obstacle_params];
        let target = Point2::new(ego.x + 100.0, road.lower_lane_center());

        let delta_f;
        let mut u_total = f64::NAN;
        let mut force_mag = 0.0;
        if ego.v >= LOW_SPEED_FREEZE {
            // field heading under the current composition
            let nolr_escape = |p: Point2| target_potential(p, target, &cfg.apf);
            let lookahead = ctl.plan.as_ref().map(|plan| {
                (plan.lookahead_target_local(ego_pos, ego.v, &cfg.espp), plan)
            });
            let espp_escape = |p: Point2| match &lookahead {
                Some((target_local, plan)) => plan.corridor_potential(p, *target_local, &cfg.espp),
                None => 0.0,
            };
            let mode_now = match (planner, ctl.mode) {
                (PlannerKind::ApfNolr, Mode::Emergency) => FieldMode::Emergency(&nolr_escape),
                (PlannerKind::EsppApf, Mode::Emergency) => FieldMode::Emergency(&espp_escape),
                _ => FieldMode::Normal,
            };
            let field =
                |p: Point2| total_potential(p, road, &obstacles, target, &cfg.apf, mode_now);
            u_total = field(ego_pos);
            let mut force_mag = 0.0;
            if let GradientOutcome::Force { force, psi_ref } =
                descend_gradient(ego_pos, &field, &cfg.gradient)
            {
                ctl.psi_ref = psi_ref;
                force_mag = force.x.hypot(force.y);
            }
            let chain = generate_waypoints(ego_pos, ctl.psi_ref, ego.v * dt, cfg.mpc.n_p)?;

            // The guide heading follows the field sampled ahead of the guide:
            // the lookahead turns the sign flips around the field minimum into
            // a damped approach, and the slew limit keeps the reference inside
            // the tracker's bandwidth. The guide's lateral position then flows
            // along its heading, with a soft pull back toward the ego. Once an
            // escape is underway and the ego has left the travel lanes, the
            // guide locks onto the planned stop line so the run ends on it
            // level instead of chasing the field around the stop-point well.
            let rate = sc.guide_turn_rate;
            let stop_line = if ctl.mode == Mode::Emergency {
                ctl.plan.as_ref().map(|plan| plan.selection.point.y)
            } else {
                None
            };
            // Glide law onto the planned stop line: the goal heading follows
            // the parabola that a fixed steering allowance can still level
            // out at the current speed, so one continuous profile covers
            // dive, hold and flare with no overshoot. Steering per unit of
            // lateral acceleration grows as the car slows, which is why the
            // achievable leveling rate is recomputed from speed each step.
            let k_us = cfg.vehicle.understeer_gradient();
            let wheelbase = cfg.vehicle.wheelbase();
            let glide_goal = |offset: f64| -> f64 {
                let v = ego.v.max(1.0);
                let w_bar = sc.glide_steer_budget * v / (wheelbase + k_us * v * v);
                let mag = (2.0 * w_bar * offset.abs() / v).sqrt();
                offset.signum() * mag.min(0.6)
            };
            // Lateral band the tracker may actually occupy right now: until a
            // breach is open this is the road itself, afterwards the stopping
            // band. The guide must flare before its floor — demanding a dive
            // the tracker is not allowed to follow only winds up the error
            // and bounces the car off the boundary constraint.
            let (band_lo, band_hi) = if ctl.mode == Mode::Emergency
                && matches!(planner, PlannerKind::ApfNolr | PlannerKind::EsppApf)
            {
                emergency_clamp
            } else {
                normal_clamp
            };
            // Lead-predicted lateral position: where the car will be once it
            // answers the current demand. Both the stop glide and the band
            // flare aim from here, which cancels the tracking lag that would
            // otherwise carry excess heading into every level-out.
            let y_lead = ego.y + ego.v * ego.psi.sin() * FLARE_LEAD_S;
            let mut psi_goal = ctl.guide_psi;
            if let Some(stop_y) = stop_line {
                let off = stop_y - y_lead;
                psi_goal = glide_goal(off.signum() * (off.abs() - GLIDE_DEADBAND_M).max(0.0));
            } else {
                // The probe shortens to the obstacle gap so a vehicle cutting
                // in just ahead lands inside the sampled window instead of
                // behind it; on a clear road the full speed-scaled lookahead
                // keeps lane keeping smooth.
                let mut probe_dist = (ego.v * sc.guide_lookahead_s).max(2.0);
                let gap_ahead = obstacle.x - ego.x;
                if gap_ahead > 2.0 {
                    probe_dist = probe_dist.min(gap_ahead);
                }
                let probe = Point2::new(
                    ego.x + probe_dist * ctl.guide_psi.cos(),
                    (ctl.guide_y + probe_dist * ctl.guide_psi.sin())
                        .clamp(band_lo, band_hi),
                );
                if let GradientOutcome::Force { psi_ref: psi_probe, .. } =
                    descend_gradient(probe, &field, &cfg.gradient)
                {
                    psi_goal = psi_probe;
                }
            }
            // Glide envelope toward the band: the goal heading never demands
            // a steeper approach to either bound than the flare law can
            // level out, so the guide settles onto the bound instead of
            // overshooting through it.
            psi_goal = psi_goal
                .max(glide_goal(band_lo - y_lead))
                .min(glide_goal(band_hi - y_lead));
            ctl.guide_psi = slew_heading(
                ctl.guide_psi,
                &mut ctl.guide_w,
                psi_goal,
                rate,
                sc.guide_turn_accel,
                dt,
            );
            ctl.guide_y = (ctl.guide_y
                + ego.v * dt * ctl.guide_psi.sin()
                + sc.guide_pull * dt * (ego.y - ctl.guide_y))
                .clamp(band_lo, band_hi);
            // The reference anchor is the guide capped to a band around the
            // ego: the error handed to the controller stays bounded, while
            // the guide itself keeps following the field.
            let anchor = ctl
                .guide_y
                .clamp(ego.y - sc.guide_max_lead, ego.y + sc.guide_max_lead);

            // Emergency detection, shared by every adaptive-field stack: the
            // probe chain must breach the last safe lane while the stop rule
            // still fits, with a force floor so the near-minimum heading
            // flips (which carry almost no force) cannot arm it.
            let armed = match planner {
                PlannerKind::CpfCs | PlannerKind::ApfFb => false,
                PlannerKind::ApfNolr | PlannerKind::EsppApf => ctl.mode == Mode::Normal,
            };
            // The field+brake variant has no emergency detector: it brakes
            // only once it is tailgating whatever blocks its lane.
            if planner == PlannerKind::ApfFb && ctl.brake_at.is_none() {
                let bumper_gap = (obstacle.x - ego.x) - cfg.vehicle.length;
                let same_lane = (obstacle.y - ego.y).abs() < cfg.vehicle.width;
                if same_lane && bumper_gap < sc.fb_proximity_gap {
                    ctl.brake_at = Some(t + cfg.braking.reaction_time);
                }
            }
            if armed {
                let decision = evaluate_trigger(&chain, ego.v, road, &cfg.braking);
                ctl.consecutive_triggers =
                    if decision.triggered && force_mag >= sc.trigger_force_floor {
                        ctl.consecutive_triggers + 1
                    } else {
                        0
                    };
                if ctl.consecutive_triggers >= sc.trigger_debounce_steps {
                    events.push(SimEvent::EmergencyLatched {
                        t,
                        psi_ref: ctl.psi_ref,
                    });
                    ctl.brake_at = Some(t + cfg.braking.reaction_time);
                    ctl.latch_params = Some(obstacle_params);
                    ctl.mode = Mode::Emergency;
                    if planner == PlannerKind::EsppApf {
                        let snapshot = [ObstacleSnapshot {
                            pose: obstacle.pose(),
                            speed: obstacle.v,
                        }];
                        let ctx = PlanContext {
                            ego,
                            psi_ref: ctl.psi_ref,
                            chain: &chain,
                            obstacles: &snapshot,
                            road,
                            d_brake: decision.d_brake,
                            vehicle: &cfg.vehicle,
                            fit_bounds: &cfg.fit,
                            cfg: &cfg.espp,
                        };
                        match plan_espp(&ctx) {
                            Ok(plan) => {
                                events.push(SimEvent::PlanReady {
                                    t,
                                    stop_x: plan.selection.point.x,
                                    stop_y: plan.selection.point.y,
                                });
                                ctl.plan = Some(plan);
                            }
                            Err(e) => {
                                events.push(SimEvent::PlanFailed {
                                    t,
                                    reason: e.to_string(),
                                });
                                ctl.mode = Mode::Fallback;
                            }
                        }
                    }
                }
            }

            // tracking reference and bounds for the current mode
            let emergency_bounds =
                ctl.mode == Mode::Emergency && matches!(planner, PlannerKind::ApfNolr | PlannerKind::EsppApf);
            let clamp = if emergency_bounds {
                emergency_clamp
            } else {
                normal_clamp
            };
            if ego.v >= MIN_CONTROL_SPEED {
                // In every mode the tracker follows the guide; the field
                // composition behind the probe is what changes between lane
                // keeping and the planned escape corridor. The horizon rows
                // roll the guide forward under its own slew limit so the
                // controller sees the turn coming, and the current gap to
                // the guide fades exponentially so the rows describe an
                // approach rather than a step.
                let rho = (-dt / sc.guide_approach_s).exp();
                // On the glide the rows are anchored to the ego itself: the
                // glide recomputes its heading from the remaining offset, so
                // a second lateral integrator (the guide particle) would only
                // re-introduce a standing gap for the tracker to chase.
                let mut y_k = if stop_line.is_some() { ego.y } else { anchor };
                let mut psi_k = ctl.guide_psi;
                let mut w_k = ctl.guide_w;
                let mut fade = y_k - ego.y;
                let ys: Vec<f64> = (0..cfg.mpc.n_p)
                    .map(|_| {
                        let goal_k = match stop_line {
                            Some(stop_y) => {
                                let off = stop_y - y_k;
                                glide_goal(off.signum() * (off.abs() - GLIDE_DEADBAND_M).max(0.0))
                            }
                            None => psi_goal,
                        }
                        .max(glide_goal(band_lo - y_k))
                        .min(glide_goal(band_hi - y_k));
                        psi_k = slew_heading(psi_k, &mut w_k, goal_k, rate, sc.guide_turn_accel, dt);
                        y_k += ego.v * dt * psi_k.sin();
                        fade *= rho;
                        y_k - fade
                    })
                    .collect();
                let reference = Reference::from_positions(&ys, cfg.mpc.n_p, clamp)?;
                let bounds = output_bounds(road, &cfg.mpc, emergency_bounds);
                let ss = discretize(ego.v, dt, &cfg.vehicle);
                match ctl.mpc.solve_step(&ss, ego.lateral(), &reference, &bounds, &cfg.mpc) {
                    Ok(step) => delta_f = step.delta_f,
                    Err(Error::Infeasible(reason)) => {
                        log::debug!("t={t:.2}: unwinding steering, tracking infeasible: {reason}");
                        delta_f = unwind_steering(ctl.mpc.u_prev, cfg.mpc.du_max);
                        ctl.mpc.u_prev = delta_f;
                    }
                    Err(e) => return Err(e),
                }
            } else {
                delta_f = unwind_steering(ctl.mpc.u_prev, cfg.mpc.du_max);
                ctl.mpc.u_prev = delta_f;
            }
        } else {
            delta_f = unwind_steering(ctl.mpc.u_prev, cfg.mpc.du_max);
            ctl.mpc.u_prev = delta_f;
        }

        log::trace!(
            "t={t:.2} x={:.2} y={:.3} v={:.2} psi={:.4} psi_ref={:.4} guide={:.4} gy={:.3} mode={} delta_f={delta_f:.4} u={u_total:.4}",
            ego.x, ego.y, ego.v, ego.psi, ctl.psi_ref, ctl.guide_psi, ctl.guide_y, ctl.mode
        );

        let braking_now = planner != PlannerKind::CpfCs
            && ctl.brake_at.map_or(false, |tb| t >= tb);
        if braking_now && !events.iter().any(|e| matches!(e, SimEvent::BrakingStarted { .. })) {
            events.push(SimEvent::BrakingStarted { t });
        }
        let decel = if braking_now { cfg.braking.max_decel } else { 0.0 };
        ego = vehicle_step(&ego, delta_f, decel, dt, &cfg.vehicle);

        rows.push(TrajectoryRow {
            t,
            x: ego.x,
            y: ego.y,
            v: ego.v,
            beta: ego.beta,
            psi: ego.psi,
            psi_dot: ego.psi_dot,
            delta_f,
            mode: ctl.mode,
            u_total,
        });

        if ego_stopped_at.is_none() && ego.v < LOW_SPEED_FREEZE {
            ego_stopped_at = Some(t);
            events.push(SimEvent::EgoStopped { t });
        }

        let ego_rect = footprint(ego.x, ego.y, ego.psi, cfg);
        let obstacle_rect = footprint(obstacle.x, obstacle.y, obstacle.psi, cfg);
        if ego_rect.overlaps(&obstacle_rect) {
            events.push(SimEvent::Collision { t });
            collided = true;
            break;
        }
        if ego.v < LOW_SPEED_FREEZE && obstacle.v <= 0.0 {
            break;
        }
    }

    let metrics = compute_metrics(
        cfg,
        planner,
        &rows,
        &obstacle,
        &events,
        collided,
        ego_stopped_at,
    );
    Ok(SimOutput {
        rows,
        obstacle: obstacle_rows,
        events,
        metrics,
        plan: ctl.plan,
        latch_params: ctl.latch_params,
    })
}

fn footprint(x: f64, y: f64, psi: f64, cfg: &SimConfig) -> OrientedRect {
    OrientedRect {
        center: Point2::new(x, y),
        heading: psi,
        length: cfg.vehicle.length,
        width: cfg.vehicle.width,
    }
}

fn compute_metrics(
    cfg: &SimConfig,
    planner: PlannerKind,
    rows: &[TrajectoryRow],
    obstacle: &ObstacleSim,
    events: &[SimEvent],
    collided: bool,
    ego_stopped_at: Option<f64>,
) -> Metrics {
    let t_cut = events.iter().find_map(|e| match e {
        SimEvent::CutStarted { t } => Some(*t),
        _ => None,
    });
    let rt_s = match (t_cut, ego_stopped_at) {
        (Some(tc), Some(ts)) if ts >= tc => Some(ts - tc),
        _ => None,
    };
    let (mut max_steer, mut max_lat) = (0.0f64, 0.0f64);
    for r in rows {
        max_steer = max_steer.max(r.delta_f.abs());
        max_lat = max_lat.max((r.v * r.psi_dot).abs());
    }
    let last = rows.last();
    let (stop_x, stop_y) = last.map_or((f64::NAN, f64::NAN), |r| (r.x, r.y));
    let stopped = last.map_or(false, |r| r.v < LOW_SPEED_FREEZE);

    let ss = if collided || !stopped {
        false
    } else {
        let r = last.unwrap();
        let rect = footprint(r.x, r.y, r.psi, cfg);
        let in_band = rect.corners().iter().all(|c| {
            c.y >= cfg.road.esl_lower_y - 1e-9 && c.y <= cfg.road.lower_edge_y + 1e-9
        });
        let obstacle_rect = footprint(obstacle.x, obstacle.y, obstacle.psi, cfg);
        in_band && !rect.overlaps(&obstacle_rect)
    };

    Metrics {
        ac: average_curvature(rows),
        rt_s,
        ca: !collided,
        ss,
        max_steer_rad: max_steer,
        max_lat_accel_mps2: max_lat,
        stop_x_m: stop_x,
        stop_y_m: stop_y,
        planner: planner.to_string(),
        speed_mps: cfg.scenario.ego_speed,
        seed: cfg.scenario.seed,
    }
}

const CURVATURE_SUBSAMPLE: usize = 5;
const CURVATURE_MIN_SPACING: f64 = 0.05;

/// Mean absolute curvature of the driven path: circumcircle curvature over
/// consecutive position triples, subsampled and with near-stationary points
/// dropped so a standstill contributes nothing.
pub fn average_curvature(rows: &[TrajectoryRow]) -> f64 {
    let mut pts: Vec<Point2> = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        if i % CURVATURE_SUBSAMPLE != 0 {
            continue;
        }
        let p = Point2::new(r.x, r.y);
        if pts.last().map_or(true, |q| q.distance(p) >= CURVATURE_MIN_SPACING) {
            pts.push(p);
        }
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for w in pts.windows(3) {
        let (a, b, c) = (w[0], w[1], w[2]);
        let ab = b.distance(a);
        let bc = c.distance(b);
        let ca = c.distance(a);
        if ab < CURVATURE_MIN_SPACING || bc < CURVATURE_MIN_SPACING || ca < CURVATURE_MIN_SPACING {
            continue;
        }
        let cross = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
        sum += 2.0 * cross.abs() / (ab * bc * ca);
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Row-major planner x speed sweep, fanned out through the data-parallel
/// facade. Cell order is deterministic regardless of scheduling.
pub fn sweep(cfg: &SimConfig, planners: &[PlannerKind], speeds: &[f64]) -> Result<Vec<Metrics>> {
    let cells: Vec<(PlannerKind, f64)> = planners
        .iter()
        .flat_map(|p| speeds.iter().map(move |v| (*p, *v)))
        .collect();
    par::map(&cells, |&(planner, speed)| run_cell(cfg, planner, speed))
        .into_iter()
        .collect()
}

/// Sequential twin of [`sweep`] with identical results.
pub fn sweep_seq(cfg: &SimConfig, planners: &[PlannerKind], speeds: &[f64]) -> Result<Vec<Metrics>> {
    let cells: Vec<(PlannerKind, f64)> = planners
        .iter()
        .flat_map(|p| speeds.iter().map(move |v| (*p, *v)))
        .collect();
    par::map_seq(&cells, |&(planner, speed)| run_cell(cfg, planner, speed))
        .into_iter()
        .collect()
}

fn run_cell(cfg: &SimConfig, planner: PlannerKind, speed: f64) -> Result<Metrics> {
    let mut cell_cfg = cfg.clone();
    cell_cfg.scenario.ego_speed = speed;
    run_scenario(&cell_cfg, planner).map(|out| out.metrics)
}

pub const TRAJECTORY_HEADER: &str = "t,x,y,v,beta,psi,psi_dot,delta_f,mode,u_total";

/// Write the trajectory as CSV. Floats use the shortest representation
/// that parses back to the same value.
pub fn write_trajectory_csv(path: &Path, rows: &[TrajectoryRow]) -> Result<()> {
    let mut text = String::with_capacity(rows.len() * 64 + 64);
    text.push_str(TRAJECTORY_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.t, r.x, r.y, r.v, r.beta, r.psi, r.psi_dot, r.delta_f, r.mode, r.u_total
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Parse a trajectory CSV written by [`write_trajectory_csv`].
pub fn read_trajectory_csv(path: &Path) -> Result<Vec<TrajectoryRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == TRAJECTORY_HEADER => {}
        other => {
            return Err(Error::InvalidArgument(format!(
                "unexpected trajectory header: {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(Error::InvalidArgument(format!(
                "line {}: expected 10 fields, got {}",
                i + 2,
                fields.len()
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::InvalidArgument(format!("line {}: {e}", i + 2)))
        };
        rows.push(TrajectoryRow {
            t: num(fields[0])?,
            x: num(fields[1])?,
            y: num(fields[2])?,
            v: num(fields[3])?,
            beta: num(fields[4])?,
            psi: num(fields[5])?,
            psi_dot: num(fields[6])?,
            delta_f: num(fields[7])?,
            mode: fields[8].parse()?,
            u_total: num(fields[9])?,
        });
    }
    Ok(rows)
}
