use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::contact::{ground_forces_at, ContactForces};
use crate::dynamics::{
    center_of_mass, forward_kinematics, foot_velocity, integrate_rk4, Inputs, Joints, RobotState, Side, Vec6,
};
use crate::gait::{leg_ik, Mode};
use crate::numerics::{rot_x, rot_y, rot_z, Vec3};

use super::config::SimConfig;
use super::controller::Controller;

/// Normal force below which a foot counts as unloaded (N).
const LIFTOFF_FORCE: f64 = 0.1;
/// Consecutive unloaded plant steps that make a lift-off.
const LIFTOFF_STEPS: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    Touchdown { side: Side },
    Liftoff { side: Side },
    Saturation,
    MpcFallback,
    ModeChange { mode: Mode },
    Fall { height: f64 },
    Diverged,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Event {
    pub time: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Termination {
    Completed,
    Fell { time: f64, height: f64 },
    Diverged { time: f64, reason: String },
}

/// State and controller quantities at one control tick.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub time: f64,
    pub mode: Mode,
    pub phase_index: usize,
    pub position: Vec3,
    pub velocity: Vec3,
    /// `(roll, pitch, yaw)`.
    pub euler: (f64, f64, f64),
    pub omega: Vec3,
    pub joints: Joints,
    pub com: Vec3,
    pub feet: [Vec3; 2],
    /// Pelvis, hip, knee and foot points of each leg.
    pub links: [[Vec3; 4]; 2],
    pub thrust: Vec6,
    pub grf: [Vec3; 2],
    pub min_hw: Option<f64>,
    pub min_hr: Option<f64>,
    pub x_w: Vec3,
    pub x_r: Vec3,
    pub mpc_cost: Option<f64>,
    pub posture_residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimLog {
    pub samples: Vec<Sample>,
    pub events: Vec<Event>,
    pub termination: Termination,
    pub dt_control: f64,
    pub runtime_s: f64,
    pub body_height: f64,
}

impl SimLog {
    /// Samples and events only, for determinism checks.
    pub fn same_trajectory(&self, other: &SimLog) -> bool {
        self.samples == other.samples && self.events == other.events && self.termination == other.termination
    }
}

/// Standing neutral stance with both feet resting on the ground plane.
pub fn initial_state(cfg: &SimConfig) -> RobotState {
    let p = &cfg.robot;
    let ic = &cfg.initial;
    let lateral = (p.l1[1] + p.l2[1]).abs();
    let mut state = RobotState::default();
    for side in Side::BOTH {
        let target = Vec3::new(ic.foot_x, side.sign() * lateral, -cfg.gait.body_height) - p.l1(side);
        if let Ok(a) = leg_ik(&target, p, side) {
            state.joints.set_leg(side, a);
        }
    }
    if ic.joint_noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.sim.seed);
        let normal = Normal::new(0.0, ic.joint_noise).expect("finite noise level");
        for q in state.joints.0.iter_mut() {
            *q += normal.sample(&mut rng);
        }
    }
    state.rotation = rot_z(ic.yaw_deg.to_radians())
        .compose(&rot_y(ic.pitch_deg.to_radians()))
        .compose(&rot_x(ic.roll_deg.to_radians()));
    // Rest on the lowest foot with static penetration under the full weight.
    let frames = forward_kinematics(p, &state);
    let lowest = frames.legs.iter().map(|l| l.foot.z).fold(f64::INFINITY, f64::min);
    let sink = p.total_mass() * p.gravity / (2.0 * cfg.ground.k_gp);
    state.position.z = -lowest - sink;
    state
}

struct FootMonitor {
    height: f64,
    loaded: bool,
    unloaded_steps: u32,
}

pub fn run_simulation(cfg: &SimConfig) -> SimLog {
    run_from(cfg, initial_state(cfg))
}

pub fn run_from(cfg: &SimConfig, mut state: RobotState) -> SimLog {
    let clock = Instant::now();
    let p = &cfg.robot;
    let dt = cfg.sim.dt_sim;
    let divisor = cfg.control_divisor();
    let ticks = cfg.ticks();
    let mut ctl = Controller::new(cfg, &state);
    let mut samples = Vec::with_capacity(ticks);
    let mut events = Vec::new();
    let mut termination = Termination::Completed;
    let mut contact = ground_forces_at(p, &state, &cfg.ground);
    let mut monitors = {
        let frames = forward_kinematics(p, &state);
        Side::BOTH.map(|s| FootMonitor {
            height: frames.leg(s).foot.z,
            loaded: contact.foot(s).force.z > LIFTOFF_FORCE,
            unloaded_steps: 0,
        })
    };
    let mut saturated = false;
    let mut mode = None;

    'outer: for k in 0..ticks {
        let t = k as f64 * cfg.dt_control();
        if let Err(e) = ctl.tick(t, &state, &contact) {
            termination = Termination::Diverged { time: t, reason: e.to_string() };
            events.push(Event { time: t, kind: EventKind::Diverged });
            break;
        }
        if mode != Some(ctl.mode()) {
            mode = Some(ctl.mode());
            events.push(Event { time: t, kind: EventKind::ModeChange { mode: ctl.mode() } });
        }
        if ctl.report.mpc_fallback {
            events.push(Event { time: t, kind: EventKind::MpcFallback });
        }
        for sub in 0..divisor {
            let ts = t + sub as f64 * dt;
            let (inputs, thrust) = ctl.command(ts, &state, &contact);
            if sub == 0 {
                samples.push(make_sample(cfg, t, &ctl, &state, &contact, &thrust.stacked()));
            }
            if thrust.saturated && !saturated {
                events.push(Event { time: ts, kind: EventKind::Saturation });
            }
            saturated = thrust.saturated;
            let held = inputs;
            let stepped = integrate_rk4(p, &state, dt, |s| Inputs { ground: ground_forces_at(p, s, &cfg.ground).stacked(), ..held });
            let next = match stepped {
                Ok(n) if n.is_finite() && n.max_abs() <= cfg.sim.blowup => n,
                Ok(_) => {
                    termination = Termination::Diverged { time: ts + dt, reason: "state exceeded blow-up bound".into() };
                    events.push(Event { time: ts + dt, kind: EventKind::Diverged });
                    break 'outer;
                }
                Err(e) => {
                    termination = Termination::Diverged { time: ts, reason: e.to_string() };
                    events.push(Event { time: ts, kind: EventKind::Diverged });
                    break 'outer;
                }
            };
            state = next;
            contact = ground_forces_at(p, &state, &cfg.ground);
            let frames = forward_kinematics(p, &state);
            for side in Side::BOTH {
                let m = &mut monitors[side.index()];
                let h = frames.leg(side).foot.z;
                let vz = foot_velocity(p, &state, side).z;
                if m.height >= 0.0 && h < 0.0 && vz < 0.0 {
                    events.push(Event { time: ts + dt, kind: EventKind::Touchdown { side } });
                }
                m.height = h;
                let fz = contact.foot(side).force.z;
                if fz >= LIFTOFF_FORCE {
                    m.loaded = true;
                    m.unloaded_steps = 0;
                } else if m.loaded {
                    m.unloaded_steps += 1;
                    if m.unloaded_steps >= LIFTOFF_STEPS {
                        m.loaded = false;
                        events.push(Event { time: ts + dt, kind: EventKind::Liftoff { side } });
                    }
                }
            }
            if state.position.z < cfg.sim.fall_height {
                termination = Termination::Fell { time: ts + dt, height: state.position.z };
                events.push(Event { time: ts + dt, kind: EventKind::Fall { height: state.position.z } });
                break 'outer;
            }
        }
    }
    SimLog {
        samples,
        events,
        termination,
        dt_control: cfg.dt_control(),
        runtime_s: clock.elapsed().as_secs_f64(),
        body_height: cfg.gait.body_height,
    }
}

fn make_sample(
    cfg: &SimConfig,
    t: f64,
    ctl: &Controller,
    state: &RobotState,
    contact: &ContactForces,
    thrust: &Vec6,
) -> Sample {
    let frames = forward_kinematics(&cfg.robot, state);
    let r = &ctl.report;
    Sample {
        time: t,
        mode: ctl.mode(),
        phase_index: ctl.phase().map_or(0, |p| p.phase_index),
        position: state.position,
        velocity: state.velocity,
        euler: state.rotation.euler_zyx(),
        omega: state.omega,
        joints: state.joints,
        com: center_of_mass(&cfg.robot, state),
        feet: Side::BOTH.map(|s| frames.leg(s).foot),
        links: Side::BOTH.map(|s| {
            let l = frames.leg(s);
            [l.pelvis, l.hip, l.knee, l.foot]
        }),
        thrust: *thrust,
        grf: Side::BOTH.map(|s| contact.foot(s).force),
        min_hw: r.min_hw,
        min_hr: r.min_hr,
        x_w: r.x_w,
        x_r: r.x_r,
        mpc_cost: r.mpc_cost,
        posture_residual: r.posture_residual,
    }
}
