//! Small dense linear algebra, rotations and fixed-step integration.
//!
//! Fixed-size quantities use nalgebra's stack types; variable-size vectors
//! and matrices are `DVector`/`DMatrix` and every routine here checks the
//! dimensions it is handed.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type VecN = DVector<f64>;
pub type MatN = DMatrix<f64>;

/// Tolerance used when checking rotation matrix invariants.
pub const ROTATION_TOL: f64 = 1e-9;

/// Pivots with magnitude below this are treated as singular.
pub const PIVOT_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("singular matrix: pivot {pivot} has magnitude {magnitude:e}")]
    Singular { pivot: usize, magnitude: f64 },
    #[error("integration fault: non-finite value in RK4 stage {stage}")]
    IntegrationFault { stage: usize },
    #[error("step size must be positive, got {0}")]
    InvalidStep(f64),
}

/// A proper rotation matrix (orthonormal, determinant +1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(Mat3);

impl RotationMatrix {
    pub fn identity() -> Self {
        Self(Mat3::identity())
    }

    /// Wraps a matrix, projecting it back onto SO(3) if it has drifted.
    pub fn from_matrix(m: Mat3) -> Self {
        Self(orthonormalize(m))
    }

    /// Wraps a matrix without projection. The caller guarantees validity.
    pub fn from_matrix_unchecked(m: Mat3) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn compose(&self, other: &RotationMatrix) -> Self {
        Self(self.0 * other.0)
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    /// Infinity norm of `RᵀR − I`.
    pub fn orthogonality_error(&self) -> f64 {
        (self.0.transpose() * self.0 - Mat3::identity()).abs().max()
    }

    pub fn is_valid(&self) -> bool {
        self.orthogonality_error() < ROTATION_TOL && (self.0.determinant() - 1.0).abs() < ROTATION_TOL
    }

    /// Z-Y-X Euler angles `(roll, pitch, yaw)` such that `R = Rz(yaw) Ry(pitch) Rx(roll)`.
    pub fn euler_zyx(&self) -> (f64, f64, f64) {
        let m = &self.0;
        let pitch = (-m[(2, 0)]).clamp(-1.0, 1.0).asin();
        let roll = m[(2, 1)].atan2(m[(2, 2)]);
        let yaw = m[(1, 0)].atan2(m[(0, 0)]);
        (roll, pitch, yaw)
    }
}

impl Default for RotationMatrix {
    fn default() -> Self {
        Self::identity()
    }
}

impl std::ops::Mul for RotationMatrix {
    type Output = RotationMatrix;
    fn mul(self, rhs: RotationMatrix) -> RotationMatrix {
        self.compose(&rhs)
    }
}

pub fn rot_x(angle: f64) -> RotationMatrix {
    let (s, c) = angle.sin_cos();
    RotationMatrix(Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c))
}

pub fn rot_y(angle: f64) -> RotationMatrix {
    let (s, c) = angle.sin_cos();
    RotationMatrix(Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c))
}

pub fn rot_z(angle: f64) -> RotationMatrix {
    let (s, c) = angle.sin_cos();
    RotationMatrix(Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
}

/// Cross-product matrix: `skew(v) * w == v.cross(&w)`.
/// Cubic ease `3u² − 2u³` on `u` clamped to `[0, 1]`.
pub fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Exponential map from a rotation vector to SO(3) (Rodrigues' formula).
pub fn so3_exp(phi: &Vec3) -> RotationMatrix {
    let theta2 = phi.norm_squared();
    let k = skew(phi);
    let (a, b) = if theta2 < 1e-12 {
        // Taylor expansions of sin(t)/t and (1-cos t)/t^2.
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    RotationMatrix(Mat3::identity() + k * a + k * k * b)
}

/// Projects a nearly orthonormal matrix back onto SO(3) with two Björck
/// iterations. Quadratically convergent for small drift.
pub fn orthonormalize(m: Mat3) -> Mat3 {
    let mut r = m;
    for _ in 0..2 {
        r = r * (Mat3::identity() * 3.0 - r.transpose() * r) * 0.5;
    }
    r
}

/// Propagates `Ṙ = R [ω]×` over `dt` with the exact exponential update.
pub fn so3_step(r: &RotationMatrix, omega_body: &Vec3, dt: f64) -> RotationMatrix {
    let inc = so3_exp(&(omega_body * dt));
    RotationMatrix(orthonormalize(r.0 * inc.0))
}

/// Classical fourth-order Runge-Kutta step for `ẋ = f(t, x)`.
pub fn rk4_step<F>(mut f: F, x: &VecN, t: f64, dt: f64) -> Result<VecN, NumericsError>
where
    F: FnMut(f64, &VecN) -> VecN,
{
    if !(dt > 0.0) {
        return Err(NumericsError::InvalidStep(dt));
    }
    let check = |k: &VecN, stage: usize| -> Result<(), NumericsError> {
        if k.len() != x.len() {
            return Err(NumericsError::DimensionMismatch { expected: x.len(), got: k.len() });
        }
        if k.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(NumericsError::IntegrationFault { stage })
        }
    };
    let k1 = f(t, x);
    check(&k1, 1)?;
    let k2 = f(t + 0.5 * dt, &(x + &k1 * (0.5 * dt)));
    check(&k2, 2)?;
    let k3 = f(t + 0.5 * dt, &(x + &k2 * (0.5 * dt)));
    check(&k3, 3)?;
    let k4 = f(t + dt, &(x + &k3 * dt));
    check(&k4, 4)?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
pub fn solve_linear(a: &MatN, b: &VecN) -> Result<VecN, NumericsError> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(NumericsError::DimensionMismatch { expected: n, got: a.ncols() });
    }
    if b.len() != n {
        return Err(NumericsError::DimensionMismatch { expected: n, got: b.len() });
    }
    let mut m = a.clone();
    let mut x = b.clone();
    for col in 0..n {
        let (piv, mag) = (col..n)
            .map(|r| (r, m[(r, col)].abs()))
            .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if !(mag >= PIVOT_TOL) {
            return Err(NumericsError::Singular { pivot: col, magnitude: mag.max(0.0) });
        }
        if piv != col {
            m.swap_rows(piv, col);
            x.swap_rows(piv, col);
        }
        let d = m[(col, col)];
        for r in col + 1..n {
            let factor = m[(r, col)] / d;
            if factor == 0.0 {
                continue;
            }
            for c in col..n {
                m[(r, c)] -= factor * m[(col, c)];
            }
            x[r] -= factor * x[col];
        }
    }
    for row in (0..n).rev() {
        let mut acc = x[row];
        for c in row + 1..n {
            acc -= m[(row, c)] * x[c];
        }
        x[row] = acc / m[(row, row)];
    }
    Ok(x)
}

/// Central-difference Jacobian with per-coordinate step `h·(1 + |x_i|)`.
pub fn fd_jacobian<F>(mut f: F, x: &VecN, h: f64) -> MatN
where
    F: FnMut(&VecN) -> VecN,
{
    let f0 = f(x);
    let mut jac = MatN::zeros(f0.len(), x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let step = h * (1.0 + x[i].abs());
        xp[i] = x[i] + step;
        let fp = f(&xp);
        xp[i] = x[i] - step;
        let fm = f(&xp);
        xp[i] = x[i];
        jac.set_column(i, &((fp - fm) / (2.0 * step)));
    }
    jac
}

/// Default relative step for [`fd_jacobian`].
pub const FD_STEP: f64 = 1e-6;
