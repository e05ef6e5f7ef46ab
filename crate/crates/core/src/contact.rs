//! Compliant unilateral ground with undamped rebound and Stribeck friction.

use serde::{Deserialize, Serialize};

use crate::dynamics::{foot_velocity, forward_kinematics, KinematicFrames, RobotParams, RobotState, Side, Vec6};
use crate::numerics::Vec3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroundParams {
    /// Penetration stiffness (N/m).
    pub k_gp: f64,
    /// Penetration damping (N·s/m), active only while compressing.
    pub k_gd: f64,
    pub mu_c: f64,
    pub mu_s: f64,
    /// Viscous friction coefficient (N·s/m).
    pub mu_v: f64,
    /// Stribeck velocity (m/s).
    pub v_s: f64,
    /// Velocity scale of the smoothed sign function (m/s).
    pub sign_eps: f64,
    /// Minimum admissible normal force used by the reference governor (N).
    pub u_z_min: f64,
}

impl Default for GroundParams {
    fn default() -> Self {
        Self {
            k_gp: 8000.0,
            k_gd: 268.0,
            mu_c: 0.54,
            mu_s: 0.6,
            mu_v: 0.85,
            v_s: 0.01,
            sign_eps: 0.02,
            u_z_min: 2.0,
        }
    }
}

impl GroundParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.k_gp > 0.0) {
            return Err("ground.k_gp must be positive".into());
        }
        if !(self.k_gd >= 0.0) {
            return Err("ground.k_gd must be non-negative".into());
        }
        if !(self.mu_c > 0.0 && self.mu_c <= self.mu_s) {
            return Err("ground friction requires 0 < mu_c <= mu_s".into());
        }
        if !(self.mu_v >= 0.0) {
            return Err("ground.mu_v must be non-negative".into());
        }
        if !(self.v_s > 0.0 && self.sign_eps > 0.0) {
            return Err("ground.v_s and ground.sign_eps must be positive".into());
        }
        if !(self.u_z_min >= 0.0) {
            return Err("ground.u_z_min must be non-negative".into());
        }
        Ok(())
    }
}

/// Force on one foot.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FootForce {
    pub force: Vec3,
    pub in_contact: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ContactForces {
    pub feet: [FootForce; 2],
}

impl ContactForces {
    pub fn foot(&self, side: Side) -> &FootForce {
        &self.feet[side.index()]
    }

    /// `[u_gL; u_gR]` as consumed by the contact input map.
    pub fn stacked(&self) -> Vec6 {
        let l = self.feet[0].force;
        let r = self.feet[1].force;
        Vec6::new(l.x, l.y, l.z, r.x, r.y, r.z)
    }

    pub fn total_normal(&self) -> f64 {
        self.feet.iter().map(|f| f.force.z).sum()
    }
}

pub fn normal_force(p_z: f64, v_z: f64, gp: &GroundParams) -> f64 {
    if p_z >= 0.0 {
        return 0.0;
    }
    let damping = if v_z > 0.0 { 0.0 } else { gp.k_gd };
    (-gp.k_gp * p_z - damping * v_z).max(0.0)
}

pub fn friction_force(v_t: f64, f_z: f64, gp: &GroundParams) -> f64 {
    let stribeck = gp.mu_c + (gp.mu_s - gp.mu_c) * (-(v_t * v_t) / (gp.v_s * gp.v_s)).exp();
    -stribeck * f_z * (v_t / gp.sign_eps).tanh() - gp.mu_v * v_t
}

/// Force on a single foot given its inertial position and velocity.
pub fn foot_force(position: &Vec3, velocity: &Vec3, gp: &GroundParams) -> FootForce {
    if position.z >= 0.0 {
        return FootForce::default();
    }
    let fz = normal_force(position.z, velocity.z, gp);
    FootForce {
        force: Vec3::new(friction_force(velocity.x, fz, gp), friction_force(velocity.y, fz, gp), fz),
        in_contact: true,
    }
}

pub fn ground_forces(frames: &KinematicFrames, foot_velocities: &[Vec3; 2], gp: &GroundParams) -> ContactForces {
    let mut out = ContactForces::default();
    for side in Side::BOTH {
        let i = side.index();
        out.feet[i] = foot_force(&frames.legs[i].foot, &foot_velocities[i], gp);
    }
    out
}

/// Convenience wrapper computing kinematics and foot velocities from the state.
pub fn ground_forces_at(params: &RobotParams, state: &RobotState, gp: &GroundParams) -> ContactForces {
    let frames = forward_kinematics(params, state);
    let vel = Side::BOTH.map(|s| foot_velocity(params, state, s));
    ground_forces(&frames, &vel, gp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn normal_force_examples() {
        let gp = GroundParams::default();
        assert_relative_eq!(normal_force(-0.001, 0.0, &gp), 8.0, epsilon = 1e-12);
        assert_relative_eq!(normal_force(-0.001, 1.0, &gp), 8.0, epsilon = 1e-12);
        assert_relative_eq!(normal_force(-0.001, -0.01, &gp), 8.0 + 2.68, epsilon = 1e-12);
        assert_eq!(normal_force(0.01, -1.0, &gp), 0.0);
        assert_eq!(normal_force(-0.001, -10.0, &gp), 8.0 + 2680.0);
        // Rebound at high speed never pulls.
        assert_eq!(normal_force(-1e-6, 5.0, &gp), 8000.0 * 1e-6);
    }

    #[test]
    fn friction_examples() {
        let gp = GroundParams::default();
        assert_eq!(friction_force(0.0, 10.0, &gp), 0.0);
        let v = 2.0;
        assert_relative_eq!(friction_force(v, 10.0, &gp), -5.4 - 0.85 * v, epsilon = 1e-9);
        assert_relative_eq!(friction_force(-v, 10.0, &gp), 5.4 + 0.85 * v, epsilon = 1e-9);
        let coeff = 0.54 + 0.06 * (-1.0f64).exp();
        assert_relative_eq!(coeff, 0.562_072, epsilon = 1e-6);
        let sharp = GroundParams { sign_eps: 1e-9, ..gp.clone() };
        assert_relative_eq!(friction_force(0.01, 10.0, &sharp), -coeff * 10.0 - 0.85 * 0.01, epsilon = 1e-9);
    }

    #[test]
    fn single_foot_penetration() {
        let gp = GroundParams::default();
        let pen = -0.0024525;
        let left = foot_force(&Vec3::new(0.0, 0.1, pen), &Vec3::zeros(), &gp);
        let right = foot_force(&Vec3::new(0.0, -0.1, 0.05), &Vec3::zeros(), &gp);
        assert_relative_eq!(left.force.z, 19.62, epsilon = 1e-9);
        assert!(left.in_contact && !right.in_contact);
        assert_eq!(right.force, Vec3::zeros());
        let c = ContactForces { feet: [left, right] };
        assert_relative_eq!(c.stacked()[2], 19.62, epsilon = 1e-9);
        assert_eq!(c.stacked()[5], 0.0);
    }

    proptest! {
        #[test]
        fn unilateral_and_gated(pz in -0.05f64..0.05, vz in -5.0f64..5.0, vx in -5.0f64..5.0, vy in -5.0f64..5.0) {
            let gp = GroundParams::default();
            let f = foot_force(&Vec3::new(0.0, 0.0, pz), &Vec3::new(vx, vy, vz), &gp);
            prop_assert!(f.force.z >= 0.0);
            if pz > 0.0 {
                prop_assert_eq!(f.force, Vec3::zeros());
            }
        }

        #[test]
        fn friction_bounded(v in -10.0f64..10.0, fz in 0.0f64..500.0) {
            let gp = GroundParams::default();
            let u = friction_force(v, fz, &gp);
            prop_assert!(u.abs() <= gp.mu_s * fz + gp.mu_v * v.abs() + 1e-12);
            prop_assert!(u * v <= 0.0);
        }

        #[test]
        fn friction_continuous(v in -1.0f64..1.0, fz in 0.0f64..200.0) {
            let gp = GroundParams::default();
            let d = 1e-9;
            let jump = (friction_force(v + d, fz, &gp) - friction_force(v, fz, &gp)).abs();
            // Lipschitz bound of the smoothed law.
            let lip = gp.mu_s * fz / gp.sign_eps + 2.0 * (gp.mu_s - gp.mu_c) * fz / gp.v_s + gp.mu_v;
            prop_assert!(jump <= lip * d * 1.01 + 1e-12);
        }
    }
}
