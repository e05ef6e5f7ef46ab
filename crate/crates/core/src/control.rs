//! Low-level controllers: joint tracking through collocated feedback
//! linearization, thruster roll/yaw stabilization, pendulum force
//! allocation, and thruster mixing.

use nalgebra::{Matrix3, SMatrix};
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    bias_forces, contact_map, mass_matrix, solve_mass, thruster_map, Joints, RobotParams, RobotState, Vec12, Vec6,
    NDOF,
};
use crate::numerics::Vec3;
use crate::reduced_models::{ReducedModelError, VlipState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdGains {
    pub kp: f64,
    pub kd: f64,
}

impl PdGains {
    pub const fn new(kp: f64, kd: f64) -> Self {
        Self { kp, kd }
    }

    pub fn apply(&self, error: f64, rate_error: f64) -> f64 {
        self.kp * error + self.kd * rate_error
    }

    pub fn is_valid(&self) -> bool {
        self.kp > 0.0 && self.kd >= 0.0 && self.kp.is_finite() && self.kd.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlGains {
    /// Joint-space acceleration PD.
    pub joint: PdGains,
    /// Roll PD in N·m per rad and N·m·s per rad.
    pub roll: PdGains,
    pub yaw: PdGains,
    /// Body position PD per axis (1/s², 1/s).
    pub com_kp: [f64; 3],
    pub com_kd: [f64; 3],
    /// Per-thruster force magnitude limit (N).
    pub thrust_max: f64,
}

impl Default for ControlGains {
    fn default() -> Self {
        Self {
            joint: PdGains::new(1600.0, 80.0),
            roll: PdGains::new(40.0, 2.0),
            yaw: PdGains::new(40.0, 2.0),
            com_kp: [50.0, 50.0, 100.0],
            com_kd: [15.0, 15.0, 30.0],
            thrust_max: 30.0,
        }
    }
}

impl ControlGains {
    pub fn com_kp(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vec3::from(self.com_kp))
    }
    pub fn com_kd(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vec3::from(self.com_kd))
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, g) in [("joint", self.joint), ("roll", self.roll), ("yaw", self.yaw)] {
            if !g.is_valid() {
                return Err(format!("gains.{name} requires kp > 0 and kd >= 0"));
            }
        }
        if self.com_kp.iter().any(|v| !(*v > 0.0)) || self.com_kd.iter().any(|v| !(*v >= 0.0)) {
            return Err("gains.com_kp must be positive and gains.com_kd non-negative".into());
        }
        if !(self.thrust_max > 0.0) {
            return Err("gains.thrust_max must be positive".into());
        }
        Ok(())
    }
}

/// Desired joint accelerations `q̈_des + k_p (q_des − q) + k_d (q̇_des − q̇)`.
pub fn joint_tracking(
    joints: &Joints,
    rates: &Joints,
    target: &Joints,
    target_rates: &Joints,
    feedforward: &Joints,
    gains: &PdGains,
) -> Vec6 {
    Vec6::from_fn(|i, _| feedforward.0[i] + gains.apply(target.0[i] - joints.0[i], target_rates.0[i] - rates.0[i]))
}

/// Joint inputs realizing the desired joint accelerations on the full model
/// given the thruster and ground forces currently acting. Hip channels are
/// solved from the inverse mass matrix; knee channels pass through.
pub fn joint_inputs_for_accel(
    params: &RobotParams,
    state: &RobotState,
    accel: &Vec6,
    thrust: &Vec6,
    ground: &Vec6,
) -> Vec6 {
    let m = mass_matrix(params, state);
    let rhs: Vec12 = thruster_map(params, state) * thrust + contact_map(params, state) * ground - bias_forces(params, state);
    let drift = solve_mass(&m, &rhs).unwrap_or_else(|_| Vec12::zeros());
    let minv = m
        .cholesky()
        .map(|c| c.inverse())
        .unwrap_or_else(SMatrix::<f64, NDOF, NDOF>::identity);
    let hh = minv.fixed_view::<4, 4>(6, 6).into_owned();
    let want = accel.fixed_rows::<4>(0) - drift.fixed_rows::<4>(6);
    let hips = hh.lu().solve(&want).unwrap_or_else(nalgebra::Vector4::zeros);
    let mut u = Vec6::zeros();
    u.fixed_rows_mut::<4>(0).copy_from(&hips);
    u[4] = accel[4];
    u[5] = accel[5];
    u
}

/// Antisymmetric thruster pair `(u_tL, −u_tL)` with `u_tL = [u_yaw, 0, u_roll]`.
///
/// Forces are scaled by the lateral mount distance so the gains act as
/// moment gains.
pub fn frontal_stabilizer(
    roll: f64,
    yaw: f64,
    roll_rate: f64,
    yaw_rate: f64,
    roll_gains: &PdGains,
    yaw_gains: &PdGains,
    lateral_arm: f64,
) -> (Vec3, Vec3) {
    let span = 2.0 * lateral_arm.abs().max(1e-6);
    // +F_z on the left thruster rolls about +x; +F_x on the left thruster yaws about −z.
    let u_roll = -roll_gains.apply(roll, roll_rate) / span;
    let u_yaw = yaw_gains.apply(yaw, yaw_rate) / span;
    let left = Vec3::new(u_yaw, 0.0, u_roll);
    (left, -left)
}

/// Outputs of the pendulum tracking law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VlipCommand {
    /// Leg-length acceleration input.
    pub u_r: f64,
    /// Net thruster force.
    pub u_tc: Vec3,
    /// Desired total force on the point mass from leg and thrusters.
    pub force: Vec3,
    /// Force the leg is predicted to transmit to the ground contact.
    pub grf: Vec3,
}

/// PD tracking of a body reference, with the along-leg share of the
/// required force delivered by the leg and the remainder by the thrusters.
pub fn vlip_tracking(
    s: &VlipState,
    p_ref: &Vec3,
    v_ref: &Vec3,
    gains: &ControlGains,
) -> Result<VlipCommand, ReducedModelError> {
    let r = s.checked_leg()?;
    let a_des = gains.com_kp() * (p_ref - s.position) + gains.com_kd() * (v_ref - s.velocity);
    let force = (a_des - s.gravity_vec()) * s.mass;
    let rh = r.normalize();
    let grf = rh * rh.dot(&force);
    Ok(VlipCommand { u_r: r.dot(&a_des), u_tc: force - grf, force, grf })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ThrusterCommand {
    pub left: Vec3,
    pub right: Vec3,
    pub saturated: bool,
}

impl ThrusterCommand {
    pub fn stacked(&self) -> Vec6 {
        Vec6::new(self.left.x, self.left.y, self.left.z, self.right.x, self.right.y, self.right.z)
    }

    pub fn net(&self) -> Vec3 {
        self.left + self.right
    }

    fn saturate(mut self, limit: f64) -> Self {
        for f in [&mut self.left, &mut self.right] {
            let n = f.norm();
            if n > limit {
                *f *= limit / n;
                self.saturated = true;
            }
        }
        if self.saturated {
            log::debug!("thruster command saturated at {limit} N");
        }
        self
    }
}

/// Splits the net walking force evenly and adds the frontal pair.
pub fn mix_walking(u_tc: &Vec3, frontal: &(Vec3, Vec3), limit: f64) -> ThrusterCommand {
    ThrusterCommand { left: u_tc / 2.0 + frontal.0, right: u_tc / 2.0 + frontal.1, saturated: false }.saturate(limit)
}

/// Sagittal flight force split evenly plus the frontal pair.
pub fn mix_flight(u_x: f64, u_z: f64, frontal: &(Vec3, Vec3), limit: f64) -> ThrusterCommand {
    mix_walking(&Vec3::new(u_x, 0.0, u_z), frontal, limit)
}
