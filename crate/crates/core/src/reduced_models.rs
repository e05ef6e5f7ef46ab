//! Reduced-order models: the variable-length inverted pendulum used while
//! walking, and the planar body/leg double pendulum used in flight.

use nalgebra::{Matrix4, SVector, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contact::ContactForces;
use crate::dynamics::{KinematicFrames, RobotParams, RobotState, Side};
use crate::numerics::{rk4_step, NumericsError, Vec3, VecN};

/// Minimum admissible pendulum length (m).
pub const MIN_LEG_LENGTH: f64 = 0.05;
/// Minimum total normal force for a meaningful centre of pressure (N).
pub const MIN_SUPPORT_FORCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReducedModelError {
    #[error("pendulum leg collapsed: length {length:.4} m")]
    DegenerateLeg { length: f64 },
    #[error("no ground support: total normal force {total:.3e} N")]
    NoSupport { total: f64 },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VlipState {
    pub position: Vec3,
    pub velocity: Vec3,
    /// Centre of pressure.
    pub cop: Vec3,
    pub mass: f64,
    pub gravity: f64,
}

impl VlipState {
    /// Leg vector `r = p_B − c`.
    pub fn leg(&self) -> Vec3 {
        self.position - self.cop
    }

    pub fn gravity_vec(&self) -> Vec3 {
        Vec3::new(0.0, 0.0, -self.gravity)
    }

    /// Leg vector, rejecting degenerate lengths.
    pub fn checked_leg(&self) -> Result<Vec3, ReducedModelError> {
        let r = self.leg();
        let length = r.norm();
        if !(length >= MIN_LEG_LENGTH) {
            return Err(ReducedModelError::DegenerateLeg { length });
        }
        Ok(r)
    }
}

/// Result of one pendulum evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VlipAccel {
    pub accel: Vec3,
    /// Constraint multiplier; the leg force is `r λ`.
    pub lambda: f64,
    pub grf: Vec3,
}

/// Point mass on a massless extensible leg whose constraint row is
/// `(p_B − c)ᵀ p̈_B = u_r`, driven additionally by the net thrust `u_tc`.
pub fn vlip_dynamics(s: &VlipState, u_r: f64, u_tc: &Vec3) -> Result<VlipAccel, ReducedModelError> {
    let r = s.checked_leg()?;
    let free = s.gravity_vec() + u_tc / s.mass;
    let lambda = s.mass * (u_r - r.dot(&free)) / r.norm_squared();
    let accel = free + r * (lambda / s.mass);
    Ok(VlipAccel { accel, lambda, grf: r * lambda })
}

/// Collapses the full model onto the pendulum: the centre of pressure is
/// the normal-force-weighted foot average.
pub fn project_to_vlip(
    params: &RobotParams,
    state: &RobotState,
    frames: &KinematicFrames,
    contact: &ContactForces,
) -> Result<VlipState, ReducedModelError> {
    let total = contact.total_normal();
    if !(total >= MIN_SUPPORT_FORCE) {
        return Err(ReducedModelError::NoSupport { total });
    }
    let cop = Side::BOTH.iter().fold(Vec3::zeros(), |acc, &side| {
        acc + frames.leg(side).foot * (contact.foot(side).force.z / total)
    });
    Ok(VlipState {
        position: state.position,
        velocity: state.velocity,
        cop,
        mass: params.total_mass(),
        gravity: params.gravity,
    })
}

pub type Vec8 = SVector<f64, 8>;

/// Planar two-body pendulum parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoBodyParams {
    pub m1: f64,
    pub m2: f64,
    /// Body origin to leg mass point (m).
    pub length: f64,
    pub i1: f64,
    pub i2: f64,
    pub gravity: f64,
}

impl TwoBodyParams {
    pub fn from_robot(p: &RobotParams) -> Self {
        Self {
            m1: p.m_body,
            m2: 2.0 * (p.m_hip + p.m_knee),
            length: p.l1[2].abs() + p.l3[2].abs(),
            i1: p.i_body[1],
            i2: 2.0 * (p.i_hip[1] + p.i_knee[1]),
            gravity: p.gravity,
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.m1 + self.m2
    }
}

/// `[p_x, p_z, q, θ, ṗ_x, ṗ_z, q̇, θ̇]`: body position, hip angle, body pitch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TwoBodyState(pub Vec8);

impl TwoBodyState {
    pub fn x(&self) -> f64 {
        self.0[0]
    }
    pub fn z(&self) -> f64 {
        self.0[1]
    }
    pub fn hip(&self) -> f64 {
        self.0[2]
    }
    pub fn pitch(&self) -> f64 {
        self.0[3]
    }
    /// Absolute leg angle `θ + q`.
    pub fn leg_angle(&self) -> f64 {
        self.0[2] + self.0[3]
    }

    /// Leg mass point in the x-z plane.
    pub fn leg_point(&self, p: &TwoBodyParams) -> (f64, f64) {
        let (s, c) = self.leg_angle().sin_cos();
        (self.x() - p.length * s, self.z() - p.length * c)
    }

    pub fn center_of_mass(&self, p: &TwoBodyParams) -> (f64, f64) {
        let (lx, lz) = self.leg_point(p);
        let m = p.total_mass();
        ((p.m1 * self.x() + p.m2 * lx) / m, (p.m1 * self.z() + p.m2 * lz) / m)
    }
}

fn two_body_system(p: &TwoBodyParams, s: &TwoBodyState) -> (Matrix4<f64>, Vector4<f64>) {
    let (sn, cs) = s.leg_angle().sin_cos();
    let phi_dot = s.0[6] + s.0[7];
    let m = p.total_mass();
    let ml = p.m2 * p.length;
    let a = p.m2 * p.length * p.length + p.i2;
    #[rustfmt::skip]
    let mass = Matrix4::new(
        m,        0.0,     -ml * cs, -ml * cs,
        0.0,      m,        ml * sn,  ml * sn,
        -ml * cs, ml * sn,  a,        a,
        -ml * cs, ml * sn,  a,        a + p.i1,
    );
    let grav_leg = ml * p.gravity * sn;
    let bias = Vector4::new(
        ml * sn * phi_dot * phi_dot,
        ml * cs * phi_dot * phi_dot + m * p.gravity,
        grav_leg,
        grav_leg,
    );
    (mass, bias)
}

/// Accelerations `[p̈_x, p̈_z, q̈, θ̈]` under `u = [u_x, u_z, u_h]`; the pitch row is unactuated.
pub fn two_body_dynamics(p: &TwoBodyParams, s: &TwoBodyState, u: &Vector3<f64>) -> Vector4<f64> {
    let (mass, bias) = two_body_system(p, s);
    let b = Vector4::new(u[0], u[1], u[2], 0.0);
    mass.cholesky()
        .expect("two-body mass matrix is positive definite for positive masses")
        .solve(&(b - bias))
}

pub fn two_body_derivative(p: &TwoBodyParams, s: &TwoBodyState, u: &Vector3<f64>) -> Vec8 {
    let acc = two_body_dynamics(p, s, u);
    let mut d = Vec8::zeros();
    d.fixed_rows_mut::<4>(0).copy_from(&s.0.fixed_rows::<4>(4));
    d.fixed_rows_mut::<4>(4).copy_from(&acc);
    d
}

/// One RK4 step with the input held.
pub fn two_body_step(
    p: &TwoBodyParams,
    s: &TwoBodyState,
    u: &Vector3<f64>,
    dt: f64,
) -> Result<TwoBodyState, ReducedModelError> {
    let x = VecN::from_iterator(8, s.0.iter().copied());
    let next = rk4_step(
        |_, x| {
            let st = TwoBodyState(Vec8::from_iterator(x.iter().copied()));
            VecN::from_iterator(8, two_body_derivative(p, &st, u).iter().copied())
        },
        &x,
        0.0,
        dt,
    )?;
    Ok(TwoBodyState(Vec8::from_iterator(next.iter().copied())))
}

pub fn two_body_energy(p: &TwoBodyParams, s: &TwoBodyState) -> f64 {
    let (sn, cs) = s.leg_angle().sin_cos();
    let phi_dot = s.0[6] + s.0[7];
    let (vx, vz) = (s.0[4], s.0[5]);
    let v2x = vx - p.length * cs * phi_dot;
    let v2z = vz + p.length * sn * phi_dot;
    let kinetic = 0.5 * p.m1 * (vx * vx + vz * vz)
        + 0.5 * p.m2 * (v2x * v2x + v2z * v2z)
        + 0.5 * p.i1 * s.0[7] * s.0[7]
        + 0.5 * p.i2 * phi_dot * phi_dot;
    let potential = p.gravity * (p.m1 * s.z() + p.m2 * (s.z() - p.length * cs));
    kinetic + potential
}

/// Planar projection of the full state: body x/z, body pitch, and the mean
/// sagittal hip angle.
pub fn project_to_twobody(state: &RobotState) -> TwoBodyState {
    let (_, pitch, _) = state.rotation.euler_zyx();
    let world_omega = state.rotation.matrix() * state.omega;
    let hip = 0.5 * (state.joints.hip(Side::Left) + state.joints.hip(Side::Right));
    let hip_rate = 0.5 * (state.joint_rates.hip(Side::Left) + state.joint_rates.hip(Side::Right));
    TwoBodyState(Vec8::from([
        state.position.x,
        state.position.z,
        hip,
        pitch,
        state.velocity.x,
        state.velocity.z,
        hip_rate,
        world_omega.y,
    ]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contact::FootForce;
    use crate::dynamics::forward_kinematics;
    use crate::numerics::rot_y;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn vlip(r: Vec3) -> VlipState {
        VlipState { position: r, velocity: Vec3::zeros(), cop: Vec3::zeros(), mass: 4.0, gravity: 9.81 }
    }

    #[test]
    fn static_vertical_support() {
        let s = vlip(Vec3::new(0.0, 0.0, 0.6));
        let out = vlip_dynamics(&s, 0.0, &Vec3::zeros()).unwrap();
        assert_relative_eq!(out.lambda * 0.36, 4.0 * 9.81 * 0.6, epsilon = 1e-12);
        assert_relative_eq!(out.grf, Vec3::new(0.0, 0.0, 39.24), epsilon = 1e-12);
        assert_relative_eq!(out.accel, Vec3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn thrust_cancelling_gravity() {
        let s = vlip(Vec3::new(0.2, -0.1, 0.5));
        let out = vlip_dynamics(&s, 0.0, &Vec3::new(0.0, 0.0, 4.0 * 9.81)).unwrap();
        assert_relative_eq!(out.accel, Vec3::zeros(), epsilon = 1e-12);
        assert_relative_eq!(out.lambda, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn vertical_leg_length_acceleration() {
        let s = vlip(Vec3::new(0.0, 0.0, 0.5));
        let out = vlip_dynamics(&s, 1.0, &Vec3::zeros()).unwrap();
        assert_relative_eq!(out.accel.z, 1.0 / 0.5, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_leg_rejected() {
        let s = vlip(Vec3::new(0.0, 0.0, 0.01));
        assert!(matches!(vlip_dynamics(&s, 0.0, &Vec3::zeros()), Err(ReducedModelError::DegenerateLeg { .. })));
    }

    proptest! {
        #[test]
        fn vlip_constraint_residual(
            rx in -0.4f64..0.4, ry in -0.4f64..0.4, rz in 0.2f64..0.8,
            ur in -5.0f64..5.0, tx in -30.0f64..30.0, ty in -30.0f64..30.0, tz in -30.0f64..60.0,
        ) {
            let s = vlip(Vec3::new(rx, ry, rz));
            let out = vlip_dynamics(&s, ur, &Vec3::new(tx, ty, tz)).unwrap();
            prop_assert!((s.leg().dot(&out.accel) - ur).abs() < 1e-12 * (1.0 + ur.abs() + out.accel.norm()));
        }

        #[test]
        fn cop_weights_convex(fl in 0.0f64..100.0, fr in 0.0f64..100.0) {
            prop_assume!(fl + fr > 1e-3);
            let p = RobotParams::default();
            let st = RobotState { position: Vec3::new(0.0, 0.0, 0.6), ..RobotState::default() };
            let frames = forward_kinematics(&p, &st);
            let c = contact_with(fl, fr);
            let v = project_to_vlip(&p, &st, &frames, &c).unwrap();
            let (yl, yr) = (frames.legs[0].foot.y, frames.legs[1].foot.y);
            prop_assert!(v.cop.y <= yl.max(yr) + 1e-12 && v.cop.y >= yl.min(yr) - 1e-12);
            let lam = fl / (fl + fr);
            prop_assert!((v.cop - (frames.legs[0].foot * lam + frames.legs[1].foot * (1.0 - lam))).norm() < 1e-12);
        }
    }

    fn contact_with(fl: f64, fr: f64) -> ContactForces {
        let foot = |f: f64| FootForce { force: Vec3::new(0.0, 0.0, f), in_contact: f > 0.0 };
        ContactForces { feet: [foot(fl), foot(fr)] }
    }

    #[test]
    fn cop_projection_cases() {
        let p = RobotParams::default();
        let st = RobotState { position: Vec3::new(0.0, 0.0, 0.6), ..RobotState::default() };
        let frames = forward_kinematics(&p, &st);
        let single = project_to_vlip(&p, &st, &frames, &contact_with(20.0, 0.0)).unwrap();
        assert_relative_eq!(single.cop, frames.legs[0].foot, epsilon = 1e-15);
        let both = project_to_vlip(&p, &st, &frames, &contact_with(10.0, 10.0)).unwrap();
        assert_relative_eq!(both.cop, (frames.legs[0].foot + frames.legs[1].foot) / 2.0, epsilon = 1e-15);
        assert_eq!(both.mass, 4.0);
        assert!(matches!(
            project_to_vlip(&p, &st, &frames, &contact_with(0.0, 0.0)),
            Err(ReducedModelError::NoSupport { .. })
        ));
    }

    #[test]
    fn two_body_force_balance_and_free_fall() {
        let p = TwoBodyParams::from_robot(&RobotParams::default());
        assert_eq!(p.m1, 2.0);
        assert_eq!(p.m2, 2.0);
        let s = TwoBodyState(Vec8::from([0.0, 0.6, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
        let acc = two_body_dynamics(&p, &s, &Vector3::new(0.0, 4.0 * 9.81, 0.0));
        assert!(acc.amax() < 1e-12);
        let acc = two_body_dynamics(&p, &s, &Vector3::zeros());
        assert_relative_eq!(acc, Vector4::new(0.0, -9.81, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn two_body_pitch_is_unactuated() {
        let p = TwoBodyParams::from_robot(&RobotParams::default());
        let s = TwoBodyState(Vec8::from([0.0, 0.6, 0.3, -0.1, 0.2, 0.1, 0.5, -0.3]));
        // A hip torque produces equal and opposite angular momentum in body and leg.
        let (mass, _) = two_body_system(&p, &s);
        let base = two_body_dynamics(&p, &s, &Vector3::zeros());
        let with = two_body_dynamics(&p, &s, &Vector3::new(0.0, 0.0, 1.0));
        let delta = with - base;
        let response = mass * delta;
        assert_relative_eq!(response, Vector4::new(0.0, 0.0, 1.0, 0.0), epsilon = 1e-12);
        assert_relative_eq!(delta[3] * p.i1, -1.0, epsilon = 1e-9);
    }

    #[test]
    fn two_body_energy_conserved() {
        let p = TwoBodyParams::from_robot(&RobotParams::default());
        let mut s = TwoBodyState(Vec8::from([0.0, 1.0, 0.4, 0.2, 0.5, 1.0, 2.0, -1.0]));
        let e0 = two_body_energy(&p, &s);
        for _ in 0..2000 {
            s = two_body_step(&p, &s, &Vector3::zeros(), 5e-4).unwrap();
        }
        assert!((two_body_energy(&p, &s) - e0).abs() < 1e-7);
    }

    #[test]
    fn twobody_projection() {
        let mut st = RobotState::default();
        assert_eq!(project_to_twobody(&st).pitch(), 0.0);
        st.rotation = rot_y(0.2);
        assert_relative_eq!(project_to_twobody(&st).pitch(), 0.2, epsilon = 1e-12);
        st.joints.0[2] = 0.3;
        st.joints.0[3] = 0.3;
        assert_relative_eq!(project_to_twobody(&st).hip(), 0.3, epsilon = 1e-15);
    }
}
