//! Explicit reference governor on the walking body reference.
//!
//! The applied reference `x_w` is moved toward the desired reference `x_r`
//! while keeping the predicted ground reaction force inside the friction
//! pyramid and above a minimum normal force.

use nalgebra::{DMatrix, Matrix3, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::contact::GroundParams;
use crate::control::ControlGains;
use crate::numerics::Vec3;
use crate::reduced_models::{ReducedModelError, VlipState};

pub const NCON: usize = 5;
pub type Vec5 = SVector<f64, NCON>;
pub type Mat5x3 = SMatrix<f64, NCON, 3>;

/// Singular values below this are treated as zero in the nullspace basis.
pub const NULL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ErgParams {
    pub alpha_r: f64,
    pub alpha_t: f64,
    pub alpha_n: f64,
    /// Diagonal of the Lyapunov weight `P`.
    pub p_diag: [f64; 3],
    /// Scale the normal direction to unit length.
    pub normalize_rows: bool,
    /// Stop discrete steps at the constraint boundary when currently feasible.
    pub truncate_steps: bool,
}

impl Default for ErgParams {
    fn default() -> Self {
        Self { alpha_r: 5.0, alpha_t: 5.0, alpha_n: 5.0, p_diag: [1.0; 3], normalize_rows: true, truncate_steps: true }
    }
}

impl ErgParams {
    pub fn p(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vec3::from(self.p_diag))
    }

    pub fn validate(&self) -> Result<(), String> {
        if [self.alpha_r, self.alpha_t, self.alpha_n].iter().any(|a| !(*a > 0.0)) {
            return Err("erg alpha rates must be positive".into());
        }
        if self.p_diag.iter().any(|v| !(*v > 0.0)) {
            return Err("erg.p_diag must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErgState {
    /// Desired reference.
    pub x_r: Vec3,
    /// Applied reference.
    pub x_w: Vec3,
}

impl ErgState {
    pub fn at(x: Vec3) -> Self {
        Self { x_r: x, x_w: x }
    }
}

/// Constraint rows `h(x) = J x + d ≥ 0`, affine in the reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintSet {
    pub j: Mat5x3,
    pub d: Vec5,
}

impl ConstraintSet {
    pub fn eval(&self, x: &Vec3) -> Vec5 {
        self.j * x + self.d
    }
}

/// Pyramid rows on a force: `μu_z ± u_x`, `μu_z ± u_y`, `u_z − u_z,min`.
pub fn pyramid_rows(force: &Vec3, mu: f64, u_z_min: f64) -> Vec5 {
    Vec5::new(
        mu * force.z + force.x,
        mu * force.z - force.x,
        mu * force.z + force.y,
        mu * force.z - force.y,
        force.z - u_z_min,
    )
}

fn pyramid_matrix(mu: f64) -> Mat5x3 {
    Mat5x3::new(1.0, 0.0, mu, -1.0, 0.0, mu, 0.0, 1.0, mu, 0.0, -1.0, mu, 0.0, 0.0, 1.0)
}

/// Ground force predicted by the pendulum tracking law for an applied
/// reference `x_ref` (zero velocity reference).
pub fn predicted_grf(s: &VlipState, gains: &ControlGains, x_ref: &Vec3) -> Result<Vec3, ReducedModelError> {
    let rh = s.checked_leg()?.normalize();
    let f = (gains.com_kp() * (x_ref - s.position) - gains.com_kd() * s.velocity - s.gravity_vec()) * s.mass;
    Ok(rh * rh.dot(&f))
}

pub fn build_constraints(s: &VlipState, gains: &ControlGains, gp: &GroundParams) -> Result<ConstraintSet, ReducedModelError> {
    let rh = s.checked_leg()?.normalize();
    let proj = rh * rh.transpose() * s.mass;
    let lin = proj * gains.com_kp();
    let offset = proj * (-gains.com_kp() * s.position - gains.com_kd() * s.velocity - s.gravity_vec());
    let c = pyramid_matrix(gp.mu_s);
    let mut d = c * offset;
    d[4] -= gp.u_z_min;
    Ok(ConstraintSet { j: c * lin, d })
}

/// Switching gains `(α̂_r, α̂_t, α̂_n)` from the constraint minima.
pub fn switching_gains(min_hw: f64, min_hr: f64, p: &ErgParams) -> (f64, f64, f64) {
    let ar = if min_hw >= 0.0 || min_hr >= 0.0 { p.alpha_r } else { 0.0 };
    let at = if min_hw >= 0.0 || min_hr < 0.0 { p.alpha_t } else { 0.0 };
    let an = if min_hw <= min_hr && min_hr < 0.0 {
        p.alpha_n
    } else if min_hr < min_hw && min_hw < 0.0 {
        -p.alpha_n
    } else {
        0.0
    };
    (ar, at, an)
}

/// Orthonormal basis of the nullspace of the given rows.
pub fn nullspace(rows: &[SMatrix<f64, 1, 3>]) -> Vec<Vec3> {
    if rows.is_empty() {
        return vec![Vec3::x(), Vec3::y(), Vec3::z()];
    }
    let m = rows.len().max(3);
    let mut c = DMatrix::<f64>::zeros(m, 3);
    for (i, r) in rows.iter().enumerate() {
        let n = r.norm();
        if n > 0.0 {
            c.row_mut(i).copy_from(&(r / n));
        }
    }
    let svd = c.clone().svd(false, true);
    let vt = svd.v_t.expect("right singular vectors requested");
    let basis: Vec<Vec3> = (0..3)
        .filter(|&i| svd.singular_values[i] < NULL_TOL)
        .map(|i| Vec3::new(vt[(i, 0)], vt[(i, 1)], vt[(i, 2)]))
        .collect();
    debug_assert!(basis.iter().all(|n| (&c * n).amax() < 1e-8));
    basis
}

fn argmin(v: &Vec5) -> usize {
    // Lowest index wins exact ties.
    (0..NCON).fold(0, |best, i| if v[i] < v[best] { i } else { best })
}

/// Continuous-time governor field at the current applied reference.
#[derive(Debug, Clone, PartialEq)]
pub struct ErgRate {
    pub v_r: Vec3,
    pub v_t: Vec3,
    pub v_n: Vec3,
    pub gains: (f64, f64, f64),
    pub min_hw: f64,
    pub min_hr: f64,
    /// `Q = P(α̂_r I + Σ α̂_t n nᵀ + α̂_n r rᵀ)`.
    pub q: Matrix3<f64>,
    pub null_basis: Vec<Vec3>,
    /// Row used for the normal direction.
    pub normal_row: usize,
}

impl ErgRate {
    pub fn total(&self) -> Vec3 {
        self.v_r + self.v_t + self.v_n
    }
}

pub fn erg_rate(e: &ErgState, cs: &ConstraintSet, p: &ErgParams) -> ErgRate {
    let hw = cs.eval(&e.x_w);
    let hr = cs.eval(&e.x_r);
    let (min_hw, min_hr) = (hw.min(), hr.min());
    let gains = switching_gains(min_hw, min_hr, p);
    let (ar, at, an) = gains;
    let violated: Vec<SMatrix<f64, 1, 3>> = (0..NCON).filter(|&i| hr[i] < 0.0).map(|i| cs.j.row(i).into_owned()).collect();
    let null_basis = nullspace(&violated);
    let normal_row = if min_hw < 0.0 { argmin(&hw) } else { argmin(&hr) };
    let mut rk = cs.j.row(normal_row).transpose();
    if p.normalize_rows {
        let n = rk.norm();
        if n > 0.0 {
            rk /= n;
        }
    }
    let err = e.x_r - e.x_w;
    let tangential: Matrix3<f64> = null_basis.iter().map(|n| n * n.transpose()).sum();
    let normal = rk * rk.transpose();
    let q = p.p() * (Matrix3::identity() * ar + tangential * at + normal * an);
    ErgRate {
        v_r: err * ar,
        v_t: tangential * err * at,
        v_n: normal * err * an,
        gains,
        min_hw,
        min_hr,
        q,
        null_basis,
        normal_row,
    }
}

/// Diagnostics of one discrete update.
#[derive(Debug, Clone, PartialEq)]
pub struct ErgStep {
    pub rate: ErgRate,
    /// Fraction of the proposed step actually taken (1 unless truncated).
    pub fraction: f64,
}

/// Largest `τ ∈ [0, 1]` keeping `h(x + τ δ) ≥ 0` given `h(x) ≥ 0`.
fn feasible_fraction(cs: &ConstraintSet, x: &Vec3, delta: &Vec3) -> f64 {
    let h = cs.eval(x);
    let dh = cs.j * delta;
    (0..NCON).filter(|&i| dh[i] < 0.0).fold(1.0f64, |tau, i| tau.min((h[i] / -dh[i]).max(0.0)))
}

/// Forward-Euler update of the applied reference over `dt`.
///
/// When the applied reference is feasible the tangential motion is taken
/// first and each part is stopped at the constraint boundary.
pub fn erg_update(e: &ErgState, cs: &ConstraintSet, p: &ErgParams, dt: f64) -> (ErgState, ErgStep) {
    let rate = erg_rate(e, cs, p);
    let mut x = e.x_w;
    let mut fraction: f64 = 1.0;
    if p.truncate_steps && rate.min_hw >= 0.0 {
        for part in [rate.v_t, rate.v_r + rate.v_n] {
            let delta = part * dt;
            let tau = feasible_fraction(cs, &x, &delta);
            fraction = fraction.min(tau);
            x += delta * tau;
        }
    } else {
        x += rate.total() * dt;
    }
    (ErgState { x_r: e.x_r, x_w: x }, ErgStep { rate, fraction })
}

pub fn lyapunov(e: &ErgState, p: &ErgParams) -> f64 {
    let err = e.x_r - e.x_w;
    (err.transpose() * p.p() * err)[(0, 0)]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GovernorSample {
    pub time: f64,
    pub x_r: Vec3,
    pub x_w: Vec3,
    pub min_hw: f64,
    pub min_hr: f64,
}

/// Runs the governor for `steps` updates against fixed constraints while the
/// desired reference follows `script`. Sample `k` is taken after update `k`.
pub fn run_governor(
    cs: &ConstraintSet,
    p: &ErgParams,
    x_w0: Vec3,
    dt: f64,
    steps: usize,
    script: impl Fn(f64) -> Vec3,
) -> Vec<GovernorSample> {
    let mut e = ErgState { x_r: script(0.0), x_w: x_w0 };
    (0..steps)
        .map(|k| {
            let t = k as f64 * dt;
            e.x_r = script(t);
            e = erg_update(&e, cs, p, dt).0;
            GovernorSample {
                time: t + dt,
                x_r: e.x_r,
                x_w: e.x_w,
                min_hw: cs.eval(&e.x_w).min(),
                min_hr: cs.eval(&e.x_r).min(),
            }
        })
        .collect()
}

/// Offset along `dir` from `x` at which `h` first reaches zero, if any.
pub fn boundary_offset(cs: &ConstraintSet, x: &Vec3, dir: &Vec3) -> Option<f64> {
    let h = cs.eval(x);
    let dh = cs.j * dir;
    (0..NCON).filter(|&i| dh[i] < 0.0).map(|i| h[i] / -dh[i]).reduce(f64::min)
}


#[cfg(test)]
mod scripted {
    use super::*;
    use crate::numerics::smoothstep;
    use crate::reduced_models::VlipState;

    #[test]
    fn dip_below_support_limit() {
        let s = VlipState { position: Vec3::new(0.0, 0.0, 0.6), velocity: Vec3::zeros(), cop: Vec3::zeros(), mass: 4.0, gravity: 9.81 };
        let cs = build_constraints(&s, &ControlGains::default(), &GroundParams::default()).unwrap();
        let down = -Vec3::z();
        let edge = boundary_offset(&cs, &s.position, &down).unwrap();
        let (deep, rest) = (0.3, edge - 0.01);
        let depth = |t: f64| deep * smoothstep((t - 0.2) / 0.3) - (deep - rest) * smoothstep((t - 1.2) / 0.3);
        let trace = run_governor(&cs, &ErgParams::default(), s.position, 0.01, 300, |t| s.position + down * depth(t));
        let infeasible = trace.iter().filter(|g| g.min_hr < 0.0).count() as f64 * 0.01;
        assert!(infeasible >= 0.5, "{infeasible}");
        assert!(trace.iter().all(|g| g.min_hw >= -1e-3));
        let back = trace.iter().rposition(|g| g.min_hr < 0.0).unwrap() + 1;
        let t_back = trace[back].time;
        let settled = trace[back..].iter().find(|g| (g.x_w - g.x_r).norm() < 1e-4).expect("converges");
        assert!(settled.time - t_back <= 1.0, "{}", settled.time - t_back);
    }
}
