//! Full 12-DoF rigid-body model of the thruster-assisted biped.
//!
//! Mass is lumped into five bodies: the torso (with the pelvis motors), and a
//! hip-motor and knee-motor mass per leg. The lower leg is a massless
//! parallel linkage whose knee coordinate is driven directly by an
//! acceleration input. Equations of motion are assembled in the generalized
//! speeds `v = [ω_B (body frame); ṗ_B; γ̇_hL; γ̇_hR; φ̇_hL; φ̇_hR; φ̇_kL; φ̇_kR]`
//! from per-body velocity Jacobians and velocity-product accelerations, which
//! is equivalent to the Euler-Lagrange form with the SO(3) attitude terms.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{
    orthonormalize, rk4_step, rot_x, rot_y, skew, so3_exp, solve_linear, Mat3, MatN, NumericsError,
    RotationMatrix, Vec3, VecN,
};

/// Number of generalized coordinates (and speeds).
pub const NDOF: usize = 12;
/// Speeds that carry mass: body twist plus frontal and sagittal hips.
pub const NMASSIVE: usize = 10;

pub type Vec6 = SVector<f64, 6>;
pub type Vec12 = SVector<f64, NDOF>;
pub type Mat12 = SMatrix<f64, NDOF, NDOF>;
pub type Mat12x6 = SMatrix<f64, NDOF, 6>;
type Jac = SMatrix<f64, 3, NDOF>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("mass matrix factorization failed: {0}")]
    Singular(#[from] NumericsError),
    #[error("non-finite state or input")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];

    pub fn index(self) -> usize {
        match self {
            Side::Left => 0,
            Side::Right => 1,
        }
    }

    /// +1 for the left leg, −1 for the right; multiplies lateral offsets.
    pub fn sign(self) -> f64 {
        match self {
            Side::Left => 1.0,
            Side::Right => -1.0,
        }
    }

    pub fn other(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }

    /// Mirrors a left-side vector into this side's frame.
    pub fn mirror(self, v: &Vec3) -> Vec3 {
        Vec3::new(v.x, self.sign() * v.y, v.z)
    }
}

/// Geometry and inertia of the robot. Vectors are left-side values; the
/// right side flips the `y` component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobotParams {
    /// Body origin to pelvis (frontal hip joint), body frame.
    pub l1: [f64; 3],
    /// Pelvis to hip sagittal joint, pelvis frame.
    pub l2: [f64; 3],
    /// Hip sagittal joint to knee, hip frame.
    pub l3: [f64; 3],
    /// Lower-leg linkage offset behind the knee.
    pub l4a: f64,
    /// Lower-leg shin length.
    pub l4b: f64,
    /// Body origin to thruster mount, body frame.
    pub lt: [f64; 3],
    pub m_body: f64,
    pub m_hip: f64,
    pub m_knee: f64,
    /// Principal moments of inertia, each in its own local frame.
    pub i_body: [f64; 3],
    pub i_hip: [f64; 3],
    pub i_knee: [f64; 3],
    pub gravity: f64,
}

impl Default for RobotParams {
    fn default() -> Self {
        Self {
            l1: [0.0, 0.1, -0.1],
            l2: [0.0, 0.05, 0.0],
            l3: [0.0, 0.0, -0.3],
            l4a: 0.1,
            l4b: 0.3,
            lt: [0.0, 0.15, 0.0],
            m_body: 2.0,
            m_hip: 0.5,
            m_knee: 0.5,
            i_body: [1e-3; 3],
            i_hip: [1e-4; 3],
            i_knee: [1e-4; 3],
            gravity: 9.81,
        }
    }
}

impl RobotParams {
    pub fn total_mass(&self) -> f64 {
        self.m_body + 2.0 * (self.m_hip + self.m_knee)
    }

    pub fn l1(&self, side: Side) -> Vec3 {
        side.mirror(&Vec3::from(self.l1))
    }
    pub fn l2(&self, side: Side) -> Vec3 {
        side.mirror(&Vec3::from(self.l2))
    }
    pub fn l3(&self, side: Side) -> Vec3 {
        side.mirror(&Vec3::from(self.l3))
    }
    pub fn lt(&self, side: Side) -> Vec3 {
        side.mirror(&Vec3::from(self.lt))
    }

    /// Lower-leg vector in the knee frame, `[−l4a cos φk, 0, −(l4b + l4a sin φk)]`.
    pub fn l4_knee(&self, knee: f64) -> Vec3 {
        let (s, c) = knee.sin_cos();
        Vec3::new(-self.l4a * c, 0.0, -(self.l4b + self.l4a * s))
    }

    /// Knee-to-foot vector expressed in the thigh frame (before the knee rotation):
    /// `Ry(φk) l4K(φk) = [−l4a − l4b sin φk, 0, −l4b cos φk]`.
    pub fn shank_in_thigh(&self, knee: f64) -> Vec3 {
        let (s, c) = knee.sin_cos();
        Vec3::new(-self.l4a - self.l4b * s, 0.0, -self.l4b * c)
    }

    fn shank_in_thigh_deriv(&self, knee: f64) -> Vec3 {
        let (s, c) = knee.sin_cos();
        Vec3::new(-self.l4b * c, 0.0, self.l4b * s)
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [("m_body", self.m_body), ("m_hip", self.m_hip), ("m_knee", self.m_knee), ("gravity", self.gravity)];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(format!("robot.{name} must be positive, got {v}"));
            }
        }
        for (name, inertia) in [("i_body", self.i_body), ("i_hip", self.i_hip), ("i_knee", self.i_knee)] {
            if inertia.iter().any(|v| !(*v > 0.0)) {
                return Err(format!("robot.{name} must be positive definite"));
            }
        }
        if !(self.l3[2] < 0.0) {
            return Err("robot.l3 must point downward (negative z)".into());
        }
        if !(self.l4a >= 0.0 && self.l4b > 0.0) {
            return Err("robot.l4a must be non-negative and robot.l4b positive".into());
        }
        Ok(())
    }
}

fn diag(v: [f64; 3]) -> Mat3 {
    Mat3::from_diagonal(&Vec3::from(v))
}

/// Joint coordinates ordered `[γ_hL, γ_hR, φ_hL, φ_hR, φ_kL, φ_kR]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Joints(pub [f64; 6]);

impl Joints {
    pub fn frontal_index(side: Side) -> usize {
        side.index()
    }
    pub fn hip_index(side: Side) -> usize {
        2 + side.index()
    }
    pub fn knee_index(side: Side) -> usize {
        4 + side.index()
    }
    pub fn frontal(&self, side: Side) -> f64 {
        self.0[Self::frontal_index(side)]
    }
    pub fn hip(&self, side: Side) -> f64 {
        self.0[Self::hip_index(side)]
    }
    pub fn knee(&self, side: Side) -> f64 {
        self.0[Self::knee_index(side)]
    }
    pub fn set_leg(&mut self, side: Side, leg: LegAngles) {
        self.0[Self::frontal_index(side)] = leg.frontal;
        self.0[Self::hip_index(side)] = leg.hip;
        self.0[Self::knee_index(side)] = leg.knee;
    }
    pub fn leg(&self, side: Side) -> LegAngles {
        LegAngles { frontal: self.frontal(side), hip: self.hip(side), knee: self.knee(side) }
    }
    pub fn as_vec6(&self) -> Vec6 {
        Vec6::from(self.0)
    }
}

/// The three joint angles of one leg.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LegAngles {
    pub frontal: f64,
    pub hip: f64,
    pub knee: f64,
}

/// Full model state.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotState {
    pub rotation: RotationMatrix,
    pub position: Vec3,
    pub joints: Joints,
    /// Body angular velocity in the body frame.
    pub omega: Vec3,
    pub velocity: Vec3,
    pub joint_rates: Joints,
}

impl Default for RobotState {
    fn default() -> Self {
        Self {
            rotation: RotationMatrix::identity(),
            position: Vec3::zeros(),
            joints: Joints::default(),
            omega: Vec3::zeros(),
            velocity: Vec3::zeros(),
            joint_rates: Joints::default(),
        }
    }
}

impl RobotState {
    /// Generalized speeds `v` (12 entries).
    pub fn speeds(&self) -> Vec12 {
        let mut v = Vec12::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.omega);
        v.fixed_rows_mut::<3>(3).copy_from(&self.velocity);
        v.fixed_rows_mut::<6>(6).copy_from(&self.joint_rates.as_vec6());
        v
    }

    pub fn set_speeds(&mut self, v: &Vec12) {
        self.omega = v.fixed_rows::<3>(0).into_owned();
        self.velocity = v.fixed_rows::<3>(3).into_owned();
        for i in 0..6 {
            self.joint_rates.0[i] = v[6 + i];
        }
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.matrix().iter().all(|v| v.is_finite())
            && self.position.iter().all(|v| v.is_finite())
            && self.omega.iter().all(|v| v.is_finite())
            && self.velocity.iter().all(|v| v.is_finite())
            && self.joints.0.iter().chain(self.joint_rates.0.iter()).all(|v| v.is_finite())
    }

    /// Largest absolute entry over all state components.
    pub fn max_abs(&self) -> f64 {
        let mut m = self.position.amax().max(self.omega.amax()).max(self.velocity.amax());
        for v in self.joints.0.iter().chain(self.joint_rates.0.iter()) {
            m = m.max(v.abs());
        }
        m
    }

    /// Reflection across the sagittal (x-z) plane: swaps legs, negates
    /// frontal angles and lateral components.
    pub fn mirrored(&self) -> RobotState {
        let s = Mat3::from_diagonal(&Vec3::new(1.0, -1.0, 1.0));
        let mut joints = Joints::default();
        let mut rates = Joints::default();
        for side in Side::BOTH {
            let o = side.other();
            joints.0[Joints::frontal_index(o)] = -self.joints.frontal(side);
            joints.0[Joints::hip_index(o)] = self.joints.hip(side);
            joints.0[Joints::knee_index(o)] = self.joints.knee(side);
            rates.0[Joints::frontal_index(o)] = -self.joint_rates.frontal(side);
            rates.0[Joints::hip_index(o)] = self.joint_rates.hip(side);
            rates.0[Joints::knee_index(o)] = self.joint_rates.knee(side);
        }
        RobotState {
            rotation: RotationMatrix::from_matrix_unchecked(s * self.rotation.matrix() * s),
            position: s * self.position,
            joints,
            omega: -(s * self.omega),
            velocity: s * self.velocity,
            joint_rates: rates,
        }
    }
}

/// Inertial positions and frame angular velocities for one leg.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LegFrames {
    pub pelvis: Vec3,
    pub hip: Vec3,
    pub knee: Vec3,
    pub foot: Vec3,
    pub thruster: Vec3,
    /// Angular velocity of the hip-motor frame, inertial coordinates.
    pub omega_hip: Vec3,
    /// Angular velocity of the thigh (knee-motor) frame, inertial coordinates.
    pub omega_knee: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinematicFrames {
    pub legs: [LegFrames; 2],
}

impl KinematicFrames {
    pub fn leg(&self, side: Side) -> &LegFrames {
        &self.legs[side.index()]
    }
}

/// Everything the equations of motion need from one leg.
struct LegTerms {
    frames: LegFrames,
    rot_hip: Mat3,
    rot_thigh: Mat3,
    jac_hip: Jac,
    jac_knee: Jac,
    jac_foot: Jac,
    jac_thruster: Jac,
    ang_hip: Jac,
    ang_thigh: Jac,
    acc_hip: Vec3,
    acc_knee: Vec3,
    alpha_hip: Vec3,
    alpha_thigh: Vec3,
}

fn leg_terms(params: &RobotParams, state: &RobotState, side: Side) -> LegTerms {
    let r = *state.rotation.matrix();
    let q = &state.joints;
    let qd = &state.joint_rates;
    let (gamma, phi_h, phi_k) = (q.frontal(side), q.hip(side), q.knee(side));
    let (gd, phd, pkd) = (qd.frontal(side), qd.hip(side), qd.knee(side));
    let col_gamma = 6 + Joints::frontal_index(side);
    let col_hip = 6 + Joints::hip_index(side);
    let col_knee = 6 + Joints::knee_index(side);

    let rot_hip = r * rot_x(gamma).matrix();
    let rot_thigh = rot_hip * rot_y(phi_h).matrix();
    let axis_x = r.column(0).into_owned();
    let axis_y = rot_hip.column(1).into_owned();

    let d1 = r * params.l1(side);
    let d2 = rot_hip * params.l2(side);
    let d3 = rot_thigh * params.l3(side);
    let d4 = rot_thigh * params.shank_in_thigh(phi_k);
    let dt = r * params.lt(side);

    let p_b = state.position;
    let pelvis = p_b + d1;
    let hip = pelvis + d2;
    let knee = hip + d3;
    let foot = knee + d4;
    let thruster = p_b + dt;

    let w = r * state.omega;
    let w_hip = w + axis_x * gd;
    let w_thigh = w_hip + axis_y * phd;

    // Velocity Jacobian of a point whose offset from the body origin is `rel`,
    // with chain offsets from the frontal and sagittal joints.
    let point_jac = |rel: &Vec3, from_pelvis: Option<&Vec3>, from_hip: Option<&Vec3>| -> Jac {
        let mut j = Jac::zeros();
        j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(rel) * r));
        j.fixed_view_mut::<3, 3>(0, 3).copy_from(&Mat3::identity());
        if let Some(d) = from_pelvis {
            j.set_column(col_gamma, &axis_x.cross(d));
        }
        if let Some(d) = from_hip {
            j.set_column(col_hip, &axis_y.cross(d));
        }
        j
    };

    let jac_hip = point_jac(&(hip - p_b), Some(&(hip - pelvis)), None);
    let jac_knee = point_jac(&(knee - p_b), Some(&(knee - pelvis)), Some(&(knee - hip)));
    let mut jac_foot = point_jac(&(foot - p_b), Some(&(foot - pelvis)), Some(&(foot - hip)));
    jac_foot.set_column(col_knee, &(rot_thigh * params.shank_in_thigh_deriv(phi_k)));
    let jac_thruster = point_jac(&dt, None, None);

    let mut ang_hip = Jac::zeros();
    ang_hip.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    ang_hip.set_column(col_gamma, &axis_x);
    let mut ang_thigh = ang_hip;
    ang_thigh.set_column(col_hip, &axis_y);

    // Velocity-product accelerations (all generalized accelerations zero).
    // The body angular acceleration vanishes because ω_B is constant in the body frame.
    let alpha_hip = w.cross(&(axis_x * gd));
    let alpha_thigh = alpha_hip + w_hip.cross(&(axis_y * phd));
    let acc_pelvis = w.cross(&w.cross(&d1));
    let acc_hip = acc_pelvis + alpha_hip.cross(&d2) + w_hip.cross(&w_hip.cross(&d2));
    let acc_knee = acc_hip + alpha_thigh.cross(&d3) + w_thigh.cross(&w_thigh.cross(&d3));

    let _ = pkd;
    LegTerms {
        frames: LegFrames { pelvis, hip, knee, foot, thruster, omega_hip: w_hip, omega_knee: w_thigh },
        rot_hip,
        rot_thigh,
        jac_hip,
        jac_knee,
        jac_foot,
        jac_thruster,
        ang_hip,
        ang_thigh,
        acc_hip,
        acc_knee,
        alpha_hip,
        alpha_thigh,
    }
}

pub fn forward_kinematics(params: &RobotParams, state: &RobotState) -> KinematicFrames {
    KinematicFrames { legs: Side::BOTH.map(|s| leg_terms(params, state, s).frames) }
}

/// Inertial foot velocity including the knee-rate contribution.
pub fn foot_velocity(params: &RobotParams, state: &RobotState, side: Side) -> Vec3 {
    leg_terms(params, state, side).jac_foot * state.speeds()
}

/// Velocity Jacobian `∂ṗ_F/∂v` of one foot over all 12 speeds.
pub fn foot_jacobian(params: &RobotParams, state: &RobotState, side: Side) -> SMatrix<f64, 3, NDOF> {
    leg_terms(params, state, side).jac_foot
}

/// Mass matrix over the 12 speeds; the massless knee block is the identity.
pub fn mass_matrix(params: &RobotParams, state: &RobotState) -> Mat12 {
    let r = state.rotation.matrix();
    let mut m = Mat12::zeros();
    let ib = diag(params.i_body);
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&ib);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&(Mat3::identity() * params.m_body));
    let _ = r;
    for side in Side::BOTH {
        let t = leg_terms(params, state, side);
        let ih = t.rot_hip * diag(params.i_hip) * t.rot_hip.transpose();
        let ik = t.rot_thigh * diag(params.i_knee) * t.rot_thigh.transpose();
        m += t.jac_hip.transpose() * t.jac_hip * params.m_hip
            + t.jac_knee.transpose() * t.jac_knee * params.m_knee
            + t.ang_hip.transpose() * ih * t.ang_hip
            + t.ang_thigh.transpose() * ik * t.ang_thigh;
    }
    for k in NMASSIVE..NDOF {
        m[(k, k)] = 1.0;
    }
    m
}

/// Velocity-product, gyroscopic and gravity terms `h`; knee rows are zero.
pub fn bias_forces(params: &RobotParams, state: &RobotState) -> Vec12 {
    let g_vec = Vec3::new(0.0, 0.0, -params.gravity);
    let mut h = Vec12::zeros();
    let ib = diag(params.i_body);
    let wb = state.omega;
    h.fixed_rows_mut::<3>(0).copy_from(&wb.cross(&(ib * wb)));
    h.fixed_rows_mut::<3>(3).copy_from(&(-g_vec * params.m_body));
    for side in Side::BOTH {
        let t = leg_terms(params, state, side);
        let ih = t.rot_hip * diag(params.i_hip) * t.rot_hip.transpose();
        let ik = t.rot_thigh * diag(params.i_knee) * t.rot_thigh.transpose();
        let wh = t.frames.omega_hip;
        let wk = t.frames.omega_knee;
        h += t.jac_hip.transpose() * ((t.acc_hip - g_vec) * params.m_hip)
            + t.jac_knee.transpose() * ((t.acc_knee - g_vec) * params.m_knee)
            + t.ang_hip.transpose() * (ih * t.alpha_hip + wh.cross(&(ih * wh)))
            + t.ang_thigh.transpose() * (ik * t.alpha_thigh + wk.cross(&(ik * wk)));
    }
    h
}

fn stack_map(jl: &Jac, jr: &Jac) -> Mat12x6 {
    let mut b = Mat12x6::zeros();
    b.fixed_view_mut::<NDOF, 3>(0, 0).copy_from(&jl.transpose());
    b.fixed_view_mut::<NDOF, 3>(0, 3).copy_from(&jr.transpose());
    for k in NMASSIVE..NDOF {
        b.row_mut(k).fill(0.0);
    }
    b
}

/// Generalized-force map of the two thruster forces (inertial, N).
pub fn thruster_map(params: &RobotParams, state: &RobotState) -> Mat12x6 {
    let l = leg_terms(params, state, Side::Left);
    let r = leg_terms(params, state, Side::Right);
    stack_map(&l.jac_thruster, &r.jac_thruster)
}

/// Generalized-force map of the two ground reaction forces (inertial, N).
pub fn contact_map(params: &RobotParams, state: &RobotState) -> Mat12x6 {
    let l = leg_terms(params, state, Side::Left);
    let r = leg_terms(params, state, Side::Right);
    stack_map(&l.jac_foot, &r.jac_foot)
}

/// Joint input map `[0_{6×6}; I_{6×6}]`.
pub fn joint_map() -> Mat12x6 {
    let mut b = Mat12x6::zeros();
    b.fixed_view_mut::<6, 6>(6, 0).copy_from(&SMatrix::<f64, 6, 6>::identity());
    b
}

/// Generalized accelerations `[ω̇_B; p̈_B; γ̈_hL; γ̈_hR; φ̈_hL; φ̈_hR; φ̈_kL; φ̈_kR]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneralizedAccel(pub Vec12);

impl GeneralizedAccel {
    pub fn angular(&self) -> Vec3 {
        self.0.fixed_rows::<3>(0).into_owned()
    }
    pub fn linear(&self) -> Vec3 {
        self.0.fixed_rows::<3>(3).into_owned()
    }
    pub fn joints(&self) -> Vec6 {
        self.0.fixed_rows::<6>(6).into_owned()
    }
}

/// External inputs acting on the plant.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Inputs {
    /// `[u_PL, u_PR, u_HL, u_HR, φ̈_kL, φ̈_kR]`: hip torques (N·m), knee accelerations (rad/s²).
    pub joint: Vec6,
    /// `[u_tL; u_tR]` inertial thruster forces (N).
    pub thrust: Vec6,
    /// `[u_gL; u_gR]` inertial ground reaction forces (N).
    pub ground: Vec6,
}

fn to_dmatrix(m: &Mat12) -> MatN {
    MatN::from_iterator(NDOF, NDOF, m.iter().copied())
}

/// Solves `M a = Σ B u − h` given precomputed `M` and right-hand side.
pub fn solve_mass(m: &Mat12, rhs: &Vec12) -> Result<Vec12, DynamicsError> {
    let x = solve_linear(&to_dmatrix(m), &VecN::from_iterator(NDOF, rhs.iter().copied()))?;
    Ok(Vec12::from_iterator(x.iter().copied()))
}

pub fn forward_dynamics(
    params: &RobotParams,
    state: &RobotState,
    inputs: &Inputs,
) -> Result<GeneralizedAccel, DynamicsError> {
    if !inputs.joint.iter().chain(inputs.thrust.iter()).chain(inputs.ground.iter()).all(|v| v.is_finite()) {
        return Err(DynamicsError::NonFinite);
    }
    let m = mass_matrix(params, state);
    let rhs = joint_map() * inputs.joint + thruster_map(params, state) * inputs.thrust
        + contact_map(params, state) * inputs.ground
        - bias_forces(params, state);
    Ok(GeneralizedAccel(solve_mass(&m, &rhs)?))
}

/// Time derivative of the full state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateDerivative {
    pub rotation: Mat3,
    pub position: Vec3,
    pub joints: Joints,
    pub accel: GeneralizedAccel,
}

pub fn state_derivative(
    params: &RobotParams,
    state: &RobotState,
    inputs: &Inputs,
) -> Result<StateDerivative, DynamicsError> {
    let accel = forward_dynamics(params, state, inputs)?;
    Ok(StateDerivative {
        rotation: state.rotation.matrix() * skew(&state.omega),
        position: state.velocity,
        joints: state.joint_rates,
        accel,
    })
}

/// Kinetic and potential energy `(K, V)`.
pub fn energy(params: &RobotParams, state: &RobotState) -> (f64, f64) {
    let g = params.gravity;
    let ib = diag(params.i_body);
    let mut k = 0.5 * params.m_body * state.velocity.norm_squared() + 0.5 * state.omega.dot(&(ib * state.omega));
    let mut v = params.m_body * g * state.position.z;
    let speeds = state.speeds();
    for side in Side::BOTH {
        let t = leg_terms(params, state, side);
        let ih = t.rot_hip * diag(params.i_hip) * t.rot_hip.transpose();
        let ik = t.rot_thigh * diag(params.i_knee) * t.rot_thigh.transpose();
        let vh = t.jac_hip * speeds;
        let vk = t.jac_knee * speeds;
        let wh = t.frames.omega_hip;
        let wk = t.frames.omega_knee;
        k += 0.5 * (params.m_hip * vh.norm_squared() + params.m_knee * vk.norm_squared());
        k += 0.5 * (wh.dot(&(ih * wh)) + wk.dot(&(ik * wk)));
        v += g * (params.m_hip * t.frames.hip.z + params.m_knee * t.frames.knee.z);
    }
    (k, v)
}

/// Whole-robot centre of mass.
pub fn center_of_mass(params: &RobotParams, state: &RobotState) -> Vec3 {
    let frames = forward_kinematics(params, state);
    let mut c = state.position * params.m_body;
    for leg in &frames.legs {
        c += leg.hip * params.m_hip + leg.knee * params.m_knee;
    }
    c / params.total_mass()
}

const PACKED: usize = 24;

fn pack(state: &RobotState, xi: &Vec3) -> VecN {
    let mut x = VecN::zeros(PACKED);
    x.fixed_rows_mut::<3>(0).copy_from(xi);
    x.fixed_rows_mut::<3>(3).copy_from(&state.position);
    for i in 0..6 {
        x[6 + i] = state.joints.0[i];
    }
    x.fixed_rows_mut::<3>(12).copy_from(&state.omega);
    x.fixed_rows_mut::<3>(15).copy_from(&state.velocity);
    for i in 0..6 {
        x[18 + i] = state.joint_rates.0[i];
    }
    x
}

fn unpack(base: &RotationMatrix, x: &VecN) -> RobotState {
    let xi = Vec3::new(x[0], x[1], x[2]);
    let mut s = RobotState {
        rotation: RotationMatrix::from_matrix_unchecked(base.matrix() * so3_exp(&xi).matrix()),
        position: Vec3::new(x[3], x[4], x[5]),
        omega: Vec3::new(x[12], x[13], x[14]),
        velocity: Vec3::new(x[15], x[16], x[17]),
        ..RobotState::default()
    };
    for i in 0..6 {
        s.joints.0[i] = x[6 + i];
        s.joint_rates.0[i] = x[18 + i];
    }
    s
}

/// One RK4 step of the full model. The attitude is carried as a local
/// rotation vector `ξ` about the step's initial attitude (`R = R₀ exp ξ`),
/// integrated through the inverse differential of the exponential map, and
/// folded back with an exact exponential update at the end of the step.
///
/// `inputs` is evaluated at every stage so contact forces stay live.
pub fn integrate_rk4<F>(
    params: &RobotParams,
    state: &RobotState,
    dt: f64,
    mut inputs: F,
) -> Result<RobotState, DynamicsError>
where
    F: FnMut(&RobotState) -> Inputs,
{
    let base = state.rotation;
    let x0 = pack(state, &Vec3::zeros());
    let mut failure: Option<DynamicsError> = None;
    let x1 = rk4_step(
        |_, x| {
            let s = unpack(&base, x);
            let u = inputs(&s);
            match forward_dynamics(params, &s, &u) {
                Ok(acc) => {
                    let xi = Vec3::new(x[0], x[1], x[2]);
                    let w = s.omega;
                    let xi_dot = w + xi.cross(&w) * 0.5 + xi.cross(&xi.cross(&w)) / 12.0;
                    let mut d = VecN::zeros(PACKED);
                    d.fixed_rows_mut::<3>(0).copy_from(&xi_dot);
                    d.fixed_rows_mut::<3>(3).copy_from(&s.velocity);
                    for i in 0..6 {
                        d[6 + i] = s.joint_rates.0[i];
                    }
                    d.fixed_rows_mut::<12>(12).copy_from(&acc.0);
                    d
                }
                Err(e) => {
                    failure.get_or_insert(e);
                    VecN::from_element(PACKED, f64::NAN)
                }
            }
        },
        &x0,
        0.0,
        dt,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let x1 = x1?;
    let mut next = unpack(&base, &x1);
    next.rotation = RotationMatrix::from_matrix_unchecked(orthonormalize(*next.rotation.matrix()));
    if !next.is_finite() {
        return Err(DynamicsError::NonFinite);
    }
    Ok(next)
}
