//! Mode logic for the full robot. The supervisor runs at the control rate
//! and holds the applied reference (walking, standing) or the flight input
//! (jumping); joint control, the frontal thruster pair and the pendulum
//! tracking law run at every plant step.

use crate::contact::ContactForces;
use crate::control::{
    frontal_stabilizer, joint_inputs_for_accel, joint_tracking, mix_flight, mix_walking, vlip_tracking, ThrusterCommand,
};
use crate::dynamics::{forward_kinematics, Inputs, Joints, KinematicFrames, LegAngles, RobotState, Side, Vec6};
use crate::erg::{build_constraints, erg_update, ErgState};
use crate::gait::{bezier_sample, leg_ik, schedule, BezierParams, GaitError, Mode, PhaseDescriptor, Vec2};
use crate::mpc::{BallisticReference, Input, MpcController, MpcError};
use crate::numerics::{smoothstep, Vec3};
use crate::reduced_models::{project_to_twobody, project_to_vlip, two_body_dynamics, TwoBodyParams, VlipState};

use super::config::SimConfig;

/// Finite-difference step for joint reference rates (s).
const REF_STEP: f64 = 1e-3;
/// Normal force that marks a landed foot (N).
const LANDED_FORCE: f64 = 1.0;

#[derive(Debug, Clone)]
struct WalkCycle {
    stance: Side,
    swing_curve: BezierParams,
    stance_curve: BezierParams,
    /// Stance foot on the ground plane at cycle start.
    anchor: Vec3,
    start: f64,
}

#[derive(Debug, Clone)]
struct StandPlan {
    feet: [Vec3; 2],
    from: Vec3,
    /// Body velocity at the start of the blend.
    from_velocity: Vec3,
    to: Vec3,
    start: f64,
    /// Take-off time when a jump follows.
    takeoff: Option<f64>,
    /// Joint posture blended out over the first half cycle after landing.
    blend: Option<Joints>,
}

impl StandPlan {
    fn empty() -> Self {
        Self {
            feet: [Vec3::zeros(); 2],
            from: Vec3::zeros(),
            from_velocity: Vec3::zeros(),
            to: Vec3::zeros(),
            start: 0.0,
            takeoff: None,
            blend: None,
        }
    }
}

#[derive(Debug, Clone)]
struct FlightPlan {
    mpc: MpcController,
    input: Input,
    knee: f64,
}

#[derive(Debug, Clone)]
enum Activity {
    Walk(WalkCycle),
    Stand(StandPlan),
    Flight(Box<FlightPlan>),
}

/// Supervisor outputs of the latest control tick.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TickReport {
    pub min_hw: Option<f64>,
    pub min_hr: Option<f64>,
    pub x_w: Vec3,
    pub x_r: Vec3,
    pub mpc_cost: Option<f64>,
    pub mpc_fallback: bool,
    pub posture_residual: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Controller {
    cfg: SimConfig,
    two_body: TwoBodyParams,
    lateral: f64,
    activity: Activity,
    phase: Option<PhaseDescriptor>,
    erg: ErgState,
    pub report: TickReport,
}

fn sagittal(v: &Vec3) -> Vec2 {
    Vec2::new(v.x, v.z)
}

impl Controller {
    pub fn new(cfg: &SimConfig, state: &RobotState) -> Self {
        let p = &cfg.robot;
        let lateral = (p.l1[1] + p.l2[1]).abs();
        let frames = forward_kinematics(p, state);
        let stand = StandPlan {
            feet: feet_on_ground(&frames),
            from: state.position,
            from_velocity: Vec3::zeros(),
            to: state.position,
            start: 0.0,
            takeoff: None,
            blend: None,
        };
        Self {
            cfg: cfg.clone(),
            two_body: TwoBodyParams::from_robot(p),
            lateral,
            activity: Activity::Stand(stand),
            phase: None,
            erg: ErgState::at(state.position),
            report: TickReport { x_w: state.position, x_r: state.position, ..TickReport::default() },
        }
    }

    pub fn mode(&self) -> Mode {
        match self.activity {
            Activity::Walk(_) => Mode::Walk,
            Activity::Stand(_) => Mode::Stand,
            Activity::Flight(_) => Mode::Jump,
        }
    }

    pub fn phase(&self) -> Option<&PhaseDescriptor> {
        self.phase.as_ref()
    }

    /// Control-rate update: scheduler, cycle set-up, ERG or MPC.
    pub fn tick(&mut self, t: f64, state: &RobotState, contact: &ContactForces) -> Result<(), MpcError> {
        let phase = schedule(t, &self.cfg.gait);
        let new_cycle = self.phase.is_none_or(|p| p.phase_index != phase.phase_index || p.cycle != phase.cycle);
        if new_cycle {
            self.begin_cycle(t, &phase, state);
        }
        self.phase = Some(phase);
        self.report = TickReport::default();
        match &mut self.activity {
            Activity::Flight(plan) => {
                let s = project_to_twobody(state);
                let (rx, rz) = plan.mpc.reference.position;
                let (u, sol) = plan.mpc.step(&s)?;
                plan.input = u;
                self.report.mpc_fallback = sol.is_none();
                self.report.mpc_cost = sol.as_ref().map(|s| s.cost);
                self.report.posture_residual = sol.as_ref().map(|s| s.posture_residual);
                self.erg = ErgState::at(state.position);
                self.erg.x_r = Vec3::new(rx, state.position.y, rz);
            }
            _ => {
                if let Activity::Stand(plan) = &mut self.activity {
                    if plan.blend.is_some() {
                        // Until a foot carries load it lands where it is.
                        let frames = forward_kinematics(&self.cfg.robot, state);
                        let now = feet_on_ground(&frames);
                        for side in Side::BOTH {
                            if contact.foot(side).force.z < LANDED_FORCE {
                                plan.feet[side.index()] = now[side.index()];
                            }
                        }
                        let mid = (plan.feet[0] + plan.feet[1]) * 0.5;
                        plan.to = Vec3::new(mid.x, mid.y, self.cfg.gait.body_height);
                    }
                }
                let target = self.body_reference(t);
                self.erg.x_r = target;
                let frames = forward_kinematics(&self.cfg.robot, state);
                let vlip = self.vlip_state(state, &frames, contact);
                if let Ok(cs) = build_constraints(&vlip, &self.cfg.gains, &self.cfg.ground) {
                    let (next, _) = erg_update(&self.erg, &cs, &self.cfg.erg, self.cfg.dt_control());
                    self.erg = next;
                    self.report.min_hw = Some(cs.eval(&next.x_w).min());
                    self.report.min_hr = Some(cs.eval(&next.x_r).min());
                } else {
                    self.erg.x_w = target;
                }
            }
        }
        self.report.x_w = self.erg.x_w;
        self.report.x_r = self.erg.x_r;
        Ok(())
    }

    fn begin_cycle(&mut self, t: f64, phase: &PhaseDescriptor, state: &RobotState) {
        let p = &self.cfg.robot;
        let frames = forward_kinematics(p, state);
        let was_flight = matches!(self.activity, Activity::Flight(_));
        // The first cycle after a flight absorbs the landing in stance.
        let landing = was_flight && phase.mode != Mode::Jump;
        if was_flight && phase.mode != Mode::Jump {
            // Restart the governor where the tracking law produces no force
            // step at the current velocity.
            self.erg = ErgState::at(state.position + self.lead(&state.velocity));
        }
        let mode = if landing { Mode::Stand } else { phase.mode };
        self.activity = match mode {
            Mode::Walk => {
                let swing = phase.swing.unwrap_or(Side::Left);
                let stance = swing.other();
                let rt = state.rotation.transpose();
                let rel = |side: Side| sagittal(&rt.apply(&(frames.leg(side).foot - state.position)));
                let foot = frames.leg(stance).foot;
                Activity::Walk(WalkCycle {
                    stance,
                    swing_curve: self.cfg.gait.swing.with_start(rel(swing)),
                    stance_curve: self.cfg.gait.stance.with_start(rel(stance)),
                    anchor: Vec3::new(foot.x, foot.y, 0.0),
                    start: t,
                })
            }
            Mode::Stand => {
                let feet = match &self.activity {
                    Activity::Stand(s) if phase.cycle > 0 => s.feet,
                    _ => feet_on_ground(&frames),
                };
                let mid = (feet[0] + feet[1]) * 0.5;
                let (from, from_velocity) = match &self.activity {
                    _ if landing => (state.position, state.velocity),
                    Activity::Stand(s) if phase.cycle > 0 => (s.to, Vec3::zeros()),
                    _ => (self.erg.x_r, Vec3::zeros()),
                };
                let to = Vec3::new(mid.x, mid.y, self.cfg.gait.body_height);
                let end = phase.phase_start
                    + self.cfg.gait.phases.get(phase.phase_index).map_or(f64::INFINITY, |ph| ph.cycles() as f64)
                        * self.cfg.gait.cycle_period;
                let last_cycle = end - t <= self.cfg.gait.cycle_period + 1e-9;
                let takeoff = (!landing && phase.next_mode == Mode::Jump && last_cycle).then_some(end);
                let blend = landing.then_some(state.joints);
                Activity::Stand(StandPlan { feet, from, from_velocity, to, start: t, takeoff, blend })
            }
            Mode::Jump => match std::mem::replace(&mut self.activity, Activity::Stand(StandPlan::empty())) {
                Activity::Flight(plan) => Activity::Flight(plan),
                _ => {
                    let (a, b) = phase.jump.unwrap_or((0.0, 0.0));
                    let reference = BallisticReference::anchored(
                        a,
                        b,
                        self.cfg.mpc.reference_period,
                        (state.position.x, state.position.z),
                    );
                    let hover = Input::new(0.0, self.two_body.total_mass() * self.two_body.gravity, 0.0);
                    let mpc = MpcController::new(self.two_body, self.cfg.mpc.clone(), reference, hover);
                    let knee = self.flight_knee();
                    Activity::Flight(Box::new(FlightPlan { mpc, input: hover, knee }))
                }
            },
        };
    }

    fn flight_knee(&self) -> f64 {
        let z = -(self.cfg.gait.body_height + self.cfg.jump.extension);
        self.leg_angles(Side::Left, Vec2::new(0.0, z)).knee
    }

    /// Desired body position at time `t`, with the velocity lead that lets
    /// the zero-velocity tracking law follow a moving reference.
    fn body_reference(&self, t: f64) -> Vec3 {
        let (p, v) = self.body_trajectory(t);
        p + self.lead(&v)
    }

    fn lead(&self, v: &Vec3) -> Vec3 {
        let g = &self.cfg.gains;
        Vec3::from_fn(|i, _| g.com_kd[i] / g.com_kp[i] * v[i])
    }

    fn body_trajectory(&self, t: f64) -> (Vec3, Vec3) {
        let period = self.cfg.gait.cycle_period;
        match &self.activity {
            Activity::Walk(w) => {
                let st = bezier_sample(&w.stance_curve, (t - w.start) / period, period);
                let y = w.anchor.y - w.stance.sign() * self.lateral;
                (
                    Vec3::new(w.anchor.x - st.position.x, y, -st.position.y),
                    Vec3::new(-st.velocity.x, 0.0, -st.velocity.y),
                )
            }
            Activity::Stand(s) => {
                let span = 0.5 * period;
                let u = ((t - s.start) / span).clamp(0.0, 1.0);
                // Cubic Hermite from (from, from_velocity) to (to, 0).
                let (u2, u3) = (u * u, u * u * u);
                let tangent = s.from_velocity * span;
                let mut p = s.from * (2.0 * u3 - 3.0 * u2 + 1.0)
                    + tangent * (u3 - 2.0 * u2 + u)
                    + s.to * (3.0 * u2 - 2.0 * u3);
                let mut v = if u < 1.0 {
                    (s.from * (6.0 * u2 - 6.0 * u) + tangent * (3.0 * u2 - 4.0 * u + 1.0) + s.to * (6.0 * u - 6.0 * u2))
                        / span
                } else {
                    Vec3::zeros()
                };
                if let Some((lift, rate)) = self.extension(s, t) {
                    p.z += lift;
                    v.z += rate;
                }
                (p, v)
            }
            Activity::Flight(_) => (self.erg.x_r, Vec3::zeros()),
        }
    }

    /// Pre-take-off leg extension `(offset, rate)`.
    fn extension(&self, s: &StandPlan, t: f64) -> Option<(f64, f64)> {
        let takeoff = s.takeoff?;
        let j = &self.cfg.jump;
        let begin = takeoff - j.extension_lead;
        let span = (j.extension_lead - j.thrust_ramp).max(1e-9);
        let u = (t - begin) / span;
        let rate = if (0.0..1.0).contains(&u) { j.extension * 6.0 * u * (1.0 - u) / span } else { 0.0 };
        Some((j.extension * smoothstep(u), rate))
    }

    /// Weight of the hover feed-forward during the take-off ramp.
    fn thrust_ramp(&self, t: f64) -> f64 {
        match &self.activity {
            Activity::Stand(StandPlan { takeoff: Some(tk), .. }) => {
                let r = self.cfg.jump.thrust_ramp;
                if r <= 0.0 {
                    0.0
                } else {
                    smoothstep((t - (tk - r)) / r)
                }
            }
            _ => 0.0,
        }
    }

    fn vlip_state(&self, state: &RobotState, frames: &KinematicFrames, contact: &ContactForces) -> VlipState {
        project_to_vlip(&self.cfg.robot, state, frames, contact).unwrap_or_else(|_| {
            let cop = match &self.activity {
                Activity::Walk(w) => w.anchor,
                _ => {
                    let f = feet_on_ground(frames);
                    (f[0] + f[1]) * 0.5
                }
            };
            VlipState {
                position: state.position,
                velocity: state.velocity,
                cop,
                mass: self.cfg.robot.total_mass(),
                gravity: self.cfg.robot.gravity,
            }
        })
    }

    /// Joint angles for a body-frame sagittal foot target relative to the
    /// body origin, pulled inside the workspace when out of reach.
    fn leg_angles(&self, side: Side, target: Vec2) -> LegAngles {
        let p = &self.cfg.robot;
        let pelvis = p.l1(side);
        let mut rel = Vec3::new(target.x, side.sign() * self.lateral, target.y) - pelvis;
        for _ in 0..40 {
            match leg_ik(&rel, p, side) {
                Ok(a) => return a,
                Err(GaitError::Unreachable { distance, max_reach, .. }) => {
                    let scale = if distance > max_reach { 0.99 } else { 1.02 };
                    let hip = p.l2(side);
                    rel.x = hip.x + (rel.x - hip.x) * scale;
                    rel.z = hip.z + (rel.z - hip.z) * scale;
                }
                Err(_) => break,
            }
        }
        LegAngles::default()
    }

    fn foot_targets(&self, t: f64) -> Option<[Vec2; 2]> {
        let period = self.cfg.gait.cycle_period;
        match &self.activity {
            Activity::Walk(w) => {
                let s = (t - w.start) / period;
                let mut out = [Vec2::zeros(); 2];
                out[w.stance.index()] = bezier_sample(&w.stance_curve, s, period).position;
                out[w.stance.other().index()] = bezier_sample(&w.swing_curve, s, period).position;
                Some(out)
            }
            Activity::Stand(s) => {
                let (body, _) = self.body_trajectory(t);
                Some(s.feet.map(|f| sagittal(&(f - body))))
            }
            Activity::Flight(_) => None,
        }
    }

    fn joint_reference(&self, t: f64) -> Option<Joints> {
        let feet = self.foot_targets(t)?;
        let mut j = Joints::default();
        for side in Side::BOTH {
            j.set_leg(side, self.leg_angles(side, feet[side.index()]));
        }
        if let Activity::Stand(StandPlan { blend: Some(q0), start, .. }) = &self.activity {
            let w = smoothstep((t - start) / (0.5 * self.cfg.gait.cycle_period));
            j = Joints(std::array::from_fn(|i| q0.0[i] + (j.0[i] - q0.0[i]) * w));
        }
        Some(j)
    }

    /// Plant-rate command given the live state and ground forces.
    pub fn command(&self, t: f64, state: &RobotState, contact: &ContactForces) -> (Inputs, ThrusterCommand) {
        let p = &self.cfg.robot;
        let g = &self.cfg.gains;
        let (roll, _, yaw) = state.rotation.euler_zyx();
        let frontal =
            frontal_stabilizer(roll, yaw, state.omega.x, state.omega.z, &g.roll, &g.yaw, p.lt[1]);
        let ground = contact.stacked();
        let (accel, thrust) = match &self.activity {
            Activity::Flight(plan) => {
                let thrust = mix_flight(plan.input[0], plan.input[1], &frontal, g.thrust_max);
                let s = project_to_twobody(state);
                let q_acc = two_body_dynamics(&self.two_body, &s, &plan.input)[2];
                let mut target = Joints::default();
                let mut target_rates = Joints::default();
                let mut ff = Joints::default();
                for side in Side::BOTH {
                    target.0[Joints::frontal_index(side)] = 0.0;
                    target.0[Joints::knee_index(side)] = plan.knee;
                    // Hips share the model acceleration; the PD only removes their difference.
                    target.0[Joints::hip_index(side)] = s.hip();
                    target_rates.0[Joints::hip_index(side)] = s.0[6];
                    ff.0[Joints::hip_index(side)] = q_acc;
                }
                let accel = joint_tracking(&state.joints, &state.joint_rates, &target, &target_rates, &ff, &g.joint);
                (accel, thrust)
            }
            _ => {
                let frames = forward_kinematics(p, state);
                let vlip = self.vlip_state(state, &frames, contact);
                let mut u_tc = vlip_tracking(&vlip, &self.erg.x_w, &Vec3::zeros(), g)
                    .map(|c| c.u_tc)
                    .unwrap_or_else(|_| Vec3::zeros());
                let w = self.thrust_ramp(t);
                if w > 0.0 {
                    let hover = Vec3::new(0.0, 0.0, p.total_mass() * p.gravity);
                    u_tc = u_tc * (1.0 - w) + hover * w;
                }
                let thrust = mix_walking(&u_tc, &frontal, g.thrust_max);
                let h = REF_STEP;
                let q0 = self.joint_reference(t).unwrap_or(state.joints);
                let qp = self.joint_reference(t + h).unwrap_or(q0);
                let qm = self.joint_reference((t - h).max(0.0)).unwrap_or(q0);
                let span = if t - h < 0.0 { t + h } else { 2.0 * h };
                let rates = Joints(std::array::from_fn(|i| (qp.0[i] - qm.0[i]) / span));
                let ff = Joints(std::array::from_fn(|i| {
                    if t - h < 0.0 {
                        0.0
                    } else {
                        (qp.0[i] - 2.0 * q0.0[i] + qm.0[i]) / (h * h)
                    }
                }));
                let accel = joint_tracking(&state.joints, &state.joint_rates, &q0, &rates, &ff, &g.joint);
                (accel, thrust)
            }
        };
        let stacked = thrust.stacked();
        let joint: Vec6 = joint_inputs_for_accel(p, state, &accel, &stacked, &ground);
        (Inputs { joint, thrust: stacked, ground }, thrust)
    }
}

fn feet_on_ground(frames: &KinematicFrames) -> [Vec3; 2] {
    Side::BOTH.map(|s| {
        let f = frames.leg(s).foot;
        Vec3::new(f.x, f.y, 0.0)
    })
}
