//! Walking gait generation: zero-velocity-endpoint quartic Bezier foot
//! curves, closed-form leg inverse kinematics, and the phase scheduler.

use std::f64::consts::PI;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{LegAngles, RobotParams, Side};
use crate::numerics::Vec3;

pub type Vec2 = Vector2<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GaitError {
    #[error("{side:?} foot target unreachable: sagittal distance {distance:.4} m outside [{min_reach:.4}, {max_reach:.4}] m")]
    Unreachable { side: Side, distance: f64, min_reach: f64, max_reach: f64 },
    #[error("{side:?} foot target inside the frontal offset circle ({radius:.4} m < {offset:.4} m)")]
    FrontalSingular { side: Side, radius: f64, offset: f64 },
    #[error("invalid gait plan: {0}")]
    InvalidPlan(String),
}

/// Quartic Bezier curve in the x-z plane with `P1 = P0` and `P3 = P4`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BezierParams {
    pub p0: [f64; 2],
    pub p2: [f64; 2],
    pub p4: [f64; 2],
}

impl BezierParams {
    pub fn swing_default() -> Self {
        Self { p0: [-0.21, -0.60], p2: [-0.20, -0.50], p4: [0.10, -0.60] }
    }

    pub fn stance_default() -> Self {
        Self { p0: [0.10, -0.60], p2: [0.01, -0.63], p4: [-0.21, -0.60] }
    }

    /// Full control polygon `[P0, P1, P2, P3, P4]`.
    pub fn control_points(&self) -> [Vec2; 5] {
        let (a, b, c) = (Vec2::from(self.p0), Vec2::from(self.p2), Vec2::from(self.p4));
        [a, a, b, c, c]
    }

    /// Same curve with its start point replaced.
    pub fn with_start(&self, start: Vec2) -> Self {
        Self { p0: [start.x, start.y], ..*self }
    }
}

/// Sample of a Bezier curve; `clamped` is set when the phase was outside `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BezierSample {
    pub position: Vec2,
    pub velocity: Vec2,
    pub acceleration: Vec2,
    pub clamped: bool,
}

fn clamp_phase(s: f64) -> (f64, bool) {
    if s < 0.0 {
        (0.0, true)
    } else if s > 1.0 {
        (1.0, true)
    } else {
        (s, false)
    }
}

pub fn bezier_eval(bp: &BezierParams, s: f64) -> Vec2 {
    bezier_sample(bp, s, 1.0).position
}

/// Time derivative for a curve traversed uniformly over `period` seconds.
pub fn bezier_vel(bp: &BezierParams, s: f64, period: f64) -> Vec2 {
    bezier_sample(bp, s, period).velocity
}

pub fn bezier_sample(bp: &BezierParams, s: f64, period: f64) -> BezierSample {
    let (s, clamped) = clamp_phase(s);
    let (a, b, c) = (Vec2::from(bp.p0), Vec2::from(bp.p2), Vec2::from(bp.p4));
    let t = 1.0 - s;
    let position = a * (t.powi(4) + 4.0 * s * t.powi(3)) + b * (6.0 * s * s * t * t) + c * (4.0 * s.powi(3) * t + s.powi(4));
    let d1 = b - a;
    let d2 = c - b;
    let ds = (d1 * t + d2 * s) * (12.0 * s * t);
    let dss = d1 * (12.0 * t * (1.0 - 3.0 * s)) + d2 * (12.0 * s * (2.0 - 3.0 * s));
    BezierSample { position, velocity: ds / period, acceleration: dss / (period * period), clamped }
}

/// De Casteljau evaluation of an arbitrary control polygon.
pub fn de_casteljau(points: &[Vec2], s: f64) -> Vec2 {
    let mut work = points.to_vec();
    for level in (1..work.len()).rev() {
        for i in 0..level {
            work[i] = work[i] * (1.0 - s) + work[i + 1] * s;
        }
    }
    work[0]
}

/// Sagittal reach limits of the hip-to-foot chain over all knee angles.
pub fn sagittal_reach(params: &RobotParams) -> (f64, f64) {
    let o = Vec2::new(params.l3[0] - params.l4a, params.l3[2]);
    let b = params.l4b;
    let rho = o.norm();
    ((rho - b).abs(), rho + b)
}

fn wrap(a: f64) -> f64 {
    let mut x = (a + PI).rem_euclid(2.0 * PI) - PI;
    if x <= -PI {
        x += 2.0 * PI;
    }
    x
}

/// Joint angles placing the foot at `target`, expressed relative to the
/// pelvis joint in the body frame.
///
/// The frontal angle comes from the y-z components around the lateral hip
/// offset; the knee then fixes the sagittal hip-to-foot distance on the
/// branch that contains the straight standing leg, and the hip sagittal
/// angle aligns the chain with the target direction.
pub fn leg_ik(target: &Vec3, params: &RobotParams, side: Side) -> Result<LegAngles, GaitError> {
    let l2 = params.l2(side);
    let offset = l2.y;
    let radius_sq = target.y * target.y + target.z * target.z;
    let wz_sq = radius_sq - offset * offset;
    if wz_sq < 0.0 {
        return Err(GaitError::FrontalSingular { side, radius: radius_sq.sqrt(), offset: offset.abs() });
    }
    let uz = -wz_sq.sqrt();
    let frontal = wrap(target.z.atan2(target.y) - uz.atan2(offset));
    // Sagittal target relative to the hip joint (l2 may carry x/z parts).
    let w = Vec2::new(target.x - l2.x, uz - l2.z);
    let dist = w.norm();
    let (min_reach, max_reach) = sagittal_reach(params);
    let tol = 1e-12;
    if dist > max_reach + tol || dist < min_reach - tol {
        return Err(GaitError::Unreachable { side, distance: dist, min_reach, max_reach });
    }
    let o = Vec2::new(params.l3[0] - params.l4a, params.l3[2]);
    let b = params.l4b;
    let rho = o.norm();
    let psi = o.x.atan2(o.y);
    let cos_arg = ((rho * rho + b * b - dist * dist) / (2.0 * b * rho)).clamp(-1.0, 1.0);
    let knee = wrap(psi + cos_arg.acos());
    let (sk, ck) = knee.sin_cos();
    let v = Vec2::new(o.x - b * sk, o.y - b * ck);
    let hip = wrap(w.x.atan2(w.y) - v.x.atan2(v.y));
    Ok(LegAngles { frontal, hip, knee })
}

/// Foot position relative to the pelvis joint in the body frame.
pub fn leg_fk(angles: &LegAngles, params: &RobotParams, side: Side) -> Vec3 {
    let chain = params.l3(side) + params.shank_in_thigh(angles.knee);
    let thigh = crate::numerics::rot_y(angles.hip).apply(&chain) + params.l2(side);
    crate::numerics::rot_x(angles.frontal).apply(&thigh)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Walk,
    Stand,
    Jump,
}

/// One block of the plan, measured in gait cycles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum PhaseSpec {
    Walk { cycles: u32 },
    Stand { cycles: u32 },
    /// Ballistic jump with forward speed `a` and vertical amplitude `b`.
    Jump { cycles: u32, a: f64, b: f64 },
}

impl PhaseSpec {
    pub fn mode(&self) -> Mode {
        match self {
            PhaseSpec::Walk { .. } => Mode::Walk,
            PhaseSpec::Stand { .. } => Mode::Stand,
            PhaseSpec::Jump { .. } => Mode::Jump,
        }
    }

    pub fn cycles(&self) -> u32 {
        match *self {
            PhaseSpec::Walk { cycles } | PhaseSpec::Stand { cycles } | PhaseSpec::Jump { cycles, .. } => cycles,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaitPlan {
    pub cycle_period: f64,
    pub swing: BezierParams,
    pub stance: BezierParams,
    pub phases: Vec<PhaseSpec>,
    /// Nominal body height above ground (m).
    pub body_height: f64,
}

impl Default for GaitPlan {
    fn default() -> Self {
        Self {
            cycle_period: 0.75,
            swing: BezierParams::swing_default(),
            stance: BezierParams::stance_default(),
            phases: vec![
                PhaseSpec::Walk { cycles: 3 },
                PhaseSpec::Stand { cycles: 1 },
                PhaseSpec::Jump { cycles: 2, a: 0.9, b: 0.8 },
                PhaseSpec::Walk { cycles: 4 },
                PhaseSpec::Stand { cycles: 1 },
                PhaseSpec::Jump { cycles: 2, a: 1.2, b: 0.3 },
                PhaseSpec::Walk { cycles: 3 },
            ],
            body_height: 0.6,
        }
    }
}

/// Where the scheduler is at a given time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseDescriptor {
    pub mode: Mode,
    /// Swing leg while walking.
    pub swing: Option<Side>,
    /// Normalized phase within the current cycle.
    pub s: f64,
    pub time: f64,
    /// Index into the plan; `phases.len()` for the terminal stand.
    pub phase_index: usize,
    /// Cycle number within the phase.
    pub cycle: u32,
    /// Start time of the current phase block.
    pub phase_start: f64,
    /// Global index of the current walking cycle.
    pub walk_cycle: u32,
    /// Jump parameters `(a, b)` when jumping.
    pub jump: Option<(f64, f64)>,
    /// Phase that follows the current one.
    pub next_mode: Mode,
}

impl PhaseDescriptor {
    /// Time since the start of the current cycle.
    pub fn cycle_time(&self, period: f64) -> f64 {
        self.s * period
    }
}

impl GaitPlan {
    pub fn total_cycles(&self) -> u32 {
        self.phases.iter().map(PhaseSpec::cycles).sum()
    }

    pub fn duration(&self) -> f64 {
        self.total_cycles() as f64 * self.cycle_period
    }

    pub fn step_length(&self) -> f64 {
        self.swing.p4[0] - self.swing.p0[0]
    }

    pub fn validate(&self) -> Result<(), GaitError> {
        if !(self.cycle_period > 0.0) || !self.cycle_period.is_finite() {
            return Err(GaitError::InvalidPlan(format!("cycle_period must be positive, got {}", self.cycle_period)));
        }
        if self.phases.is_empty() {
            return Err(GaitError::InvalidPlan("phase list is empty".into()));
        }
        if self.phases.iter().any(|p| p.cycles() == 0) {
            return Err(GaitError::InvalidPlan("every phase needs at least one cycle".into()));
        }
        if !(self.body_height > 0.0) {
            return Err(GaitError::InvalidPlan("body_height must be positive".into()));
        }
        Ok(())
    }
}

/// Maps time onto the plan. Time past the end of the plan yields a
/// terminal standing phase.
pub fn schedule(t: f64, plan: &GaitPlan) -> PhaseDescriptor {
    let t = t.max(0.0);
    let period = plan.cycle_period;
    // Integer cycle index with a small tolerance so exact boundaries land in the new cycle.
    let global = ((t / period) + 1e-9).floor() as u32;
    let mut start_cycle = 0u32;
    let mut walk_before = 0u32;
    for (i, phase) in plan.phases.iter().enumerate() {
        let n = phase.cycles();
        if global < start_cycle + n {
            let cycle = global - start_cycle;
            let s = ((t - global as f64 * period) / period).clamp(0.0, 1.0);
            let walk_cycle = walk_before + if phase.mode() == Mode::Walk { cycle } else { 0 };
            let swing = (phase.mode() == Mode::Walk)
                .then_some(if walk_cycle.is_multiple_of(2) { Side::Left } else { Side::Right });
            let jump = match *phase {
                PhaseSpec::Jump { a, b, .. } => Some((a, b)),
                _ => None,
            };
            let next_mode = plan.phases.get(i + 1).map(PhaseSpec::mode).unwrap_or(Mode::Stand);
            return PhaseDescriptor {
                mode: phase.mode(),
                swing,
                s,
                time: t,
                phase_index: i,
                cycle,
                phase_start: start_cycle as f64 * period,
                walk_cycle,
                jump,
                next_mode,
            };
        }
        if phase.mode() == Mode::Walk {
            walk_before += n;
        }
        start_cycle += n;
    }
    let s = ((t - global as f64 * period) / period).clamp(0.0, 1.0);
    PhaseDescriptor {
        mode: Mode::Stand,
        swing: None,
        s,
        time: t,
        phase_index: plan.phases.len(),
        cycle: global - start_cycle,
        phase_start: start_cycle as f64 * period,
        walk_cycle: walk_before,
        jump: None,
        next_mode: Mode::Stand,
    }
}

/// Nominal body reference for the plan starting at the origin: the body
/// rides the stance curve while walking, holds still while standing and
/// advances at the jump's forward speed while jumping.
pub fn desired_com_trajectory(t: f64, plan: &GaitPlan) -> (Vec3, Vec3) {
    let t = t.max(0.0);
    let period = plan.cycle_period;
    let mut x = 0.0;
    let mut elapsed = 0.0;
    let mut vx = 0.0;
    let start = plan.stance.p0[0];
    for phase in &plan.phases {
        let dur = phase.cycles() as f64 * period;
        let local = (t - elapsed).clamp(0.0, dur);
        let active = t >= elapsed && t < elapsed + dur;
        match *phase {
            PhaseSpec::Walk { cycles } => {
                if t >= elapsed + dur {
                    x += cycles as f64 * plan.step_length();
                } else {
                    let k = ((local / period) + 1e-9).floor().min(cycles as f64 - 1.0);
                    let sample = bezier_sample(&plan.stance, (local - k * period) / period, period);
                    x += k * plan.step_length() + start - sample.position.x;
                    if active {
                        vx = -sample.velocity.x;
                    }
                }
            }
            PhaseSpec::Stand { .. } => {}
            PhaseSpec::Jump { a, .. } => {
                x += a * local;
                if active {
                    vx = a;
                }
            }
        }
        elapsed += dur;
        if t < elapsed {
            break;
        }
    }
    (Vec3::new(x, 0.0, plan.body_height), Vec3::new(vx, 0.0, 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{forward_kinematics, Joints, RobotState};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bezier_endpoints_and_midpoint() {
        let sw = BezierParams::swing_default();
        assert_eq!(bezier_eval(&sw, 0.0), Vec2::from(sw.p0));
        assert_eq!(bezier_eval(&sw, 1.0), Vec2::from(sw.p4));
        let mid = bezier_eval(&sw, 0.5);
        assert!((mid - Vec2::new(-0.109375, -0.5625)).amax() < 1e-12);
        assert_eq!(bezier_vel(&sw, 0.0, 0.75), Vec2::zeros());
        assert_eq!(bezier_vel(&sw, 1.0, 0.75), Vec2::zeros());
        assert!(bezier_sample(&sw, 1.2, 0.75).clamped);
        assert!(!bezier_sample(&sw, 0.7, 0.75).clamped);
    }

    #[test]
    fn bezier_matches_de_casteljau_and_derivatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let bp = BezierParams {
                p0: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                p2: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                p4: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
            };
            let s: f64 = rng.gen_range(0.0..1.0);
            let oracle = de_casteljau(&bp.control_points(), s);
            assert!((bezier_eval(&bp, s) - oracle).amax() < 1e-12);
            let h = 1e-5;
            if s > h && s < 1.0 - h {
                let fd = (bezier_eval(&bp, s + h) - bezier_eval(&bp, s - h)) / (2.0 * h);
                assert!((bezier_sample(&bp, s, 1.0).velocity - fd).amax() < 1e-8);
                let fdd = (bezier_vel(&bp, s + h, 1.0) - bezier_vel(&bp, s - h, 1.0)) / (2.0 * h);
                assert!((bezier_sample(&bp, s, 1.0).acceleration - fdd).amax() < 1e-7);
            }
        }
    }

    fn fk_pelvis_relative(p: &RobotParams, angles: &LegAngles, side: Side) -> Vec3 {
        let mut st = RobotState::default();
        st.joints.set_leg(side, *angles);
        let f = forward_kinematics(p, &st);
        f.leg(side).foot - f.leg(side).pelvis
    }

    #[test]
    fn ik_roundtrip_random_targets() {
        let p = RobotParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let side = if rng.gen_bool(0.5) { Side::Left } else { Side::Right };
            let angles = LegAngles {
                frontal: rng.gen_range(-0.6..0.6),
                hip: rng.gen_range(-1.2..1.2),
                knee: rng.gen_range(-2.5..0.3),
            };
            let target = fk_pelvis_relative(&p, &angles, side);
            let sol = leg_ik(&target, &p, side).unwrap();
            let back = fk_pelvis_relative(&p, &sol, side);
            worst = worst.max((back - target).norm());
            assert_relative_eq!(leg_fk(&sol, &p, side), back, epsilon = 1e-12);
        }
        assert!(worst < 1e-9, "worst roundtrip error {worst}");
    }

    #[test]
    fn ik_special_targets() {
        let p = RobotParams::default();
        let (_, max_reach) = sagittal_reach(&p);
        // Full extension straight below the hip.
        let t = Vec3::new(0.0, 0.05, -max_reach);
        let a = leg_ik(&t, &p, Side::Left).unwrap();
        assert!(a.frontal.abs() < 1e-12);
        let v = leg_fk(&a, &p, Side::Left);
        assert!((v - t).norm() < 1e-9);
        // Neutral lateral offset gives a zero frontal angle.
        let a = leg_ik(&Vec3::new(-0.1, -0.05, -0.5), &p, Side::Right).unwrap();
        assert!(a.frontal.abs() < 1e-12);
        let err = leg_ik(&Vec3::new(0.0, 0.05, -1.0), &p, Side::Left).unwrap_err();
        assert!(matches!(err, GaitError::Unreachable { .. }));
        // Standing posture contains the straight knee.
        let stand = fk_pelvis_relative(&p, &LegAngles::default(), Side::Left);
        let a = leg_ik(&stand, &p, Side::Left).unwrap();
        assert!(a.knee.abs() < 1e-12 && a.hip.abs() < 1e-12);
    }

    #[test]
    fn ik_branch_continuous_along_gait() {
        let p = RobotParams::default();
        let plan = GaitPlan::default();
        let lift = Vec3::from(p.l1);
        for curve in [plan.swing, plan.stance] {
            let mut prev: Option<LegAngles> = None;
            for i in 0..=200 {
                let b = bezier_eval(&curve, i as f64 / 200.0);
                let target = Vec3::new(b.x, 0.15, b.y) - lift;
                let a = leg_ik(&target, &p, Side::Left).unwrap();
                if let Some(q) = prev {
                    assert!((a.knee - q.knee).abs() < 0.05 && (a.hip - q.hip).abs() < 0.05);
                }
                prev = Some(a);
            }
        }
    }

    #[test]
    fn default_plan_schedule() {
        let plan = GaitPlan::default();
        assert_eq!(plan.total_cycles(), 16);
        assert_relative_eq!(plan.duration(), 12.0, epsilon = 1e-12);
        let d = schedule(0.0, &plan);
        assert_eq!(d.mode, Mode::Walk);
        assert_eq!(d.s, 0.0);
        assert_eq!(d.swing, Some(Side::Left));
        let d = schedule(1.1, &plan);
        assert_eq!((d.mode, d.cycle), (Mode::Walk, 1));
        assert_relative_eq!(d.s, 0.35 / 0.75, epsilon = 1e-12);
        assert_eq!(d.swing, Some(Side::Right));
        assert_eq!(schedule(2.25 + 1e-9, &plan).mode, Mode::Stand);
        assert_eq!(schedule(2.2499, &plan).mode, Mode::Walk);
        let j = schedule(3.2, &plan);
        assert_eq!(j.mode, Mode::Jump);
        assert_eq!(j.jump, Some((0.9, 0.8)));
        assert_relative_eq!(j.phase_start, 3.0, epsilon = 1e-12);
        assert_eq!(schedule(8.5, &plan).jump, Some((1.2, 0.3)));
        assert_eq!(schedule(4.6, &plan).walk_cycle, 3);
        let end = schedule(12.5, &plan);
        assert_eq!(end.mode, Mode::Stand);
        assert_eq!(end.phase_index, plan.phases.len());
    }

    #[test]
    fn schedule_is_piecewise_constant() {
        let plan = GaitPlan::default();
        let mut changes = 0;
        let mut prev = schedule(0.0, &plan);
        for k in 1..=12_000 {
            let d = schedule(k as f64 * 1e-3, &plan);
            assert!((0.0..=1.0).contains(&d.s));
            if d.mode != prev.mode {
                changes += 1;
            }
            prev = d;
        }
        assert_eq!(changes, 7);
    }

    #[test]
    fn com_reference_progression() {
        let plan = GaitPlan::default();
        assert_relative_eq!(plan.step_length(), 0.31, epsilon = 1e-12);
        let (p1, _) = desired_com_trajectory(0.75 - 1e-9, &plan);
        assert!((p1.x - 0.31).abs() < 1e-6);
        let (a, v) = desired_com_trajectory(2.5, &plan);
        let (b, _) = desired_com_trajectory(2.9, &plan);
        assert_eq!(a, b);
        assert_eq!(v, Vec3::zeros());
        assert!((a.x - 0.93).abs() < 1e-9);
        for k in 1..16 {
            let tb = k as f64 * 0.75;
            let (l, _) = desired_com_trajectory(tb - 1e-9, &plan);
            let (r, _) = desired_com_trajectory(tb + 1e-9, &plan);
            assert!((l - r).norm() < 1e-6, "jump at boundary {tb}");
        }
        assert_eq!(a.z, 0.6);
        let _ = Joints::default();
    }
}
