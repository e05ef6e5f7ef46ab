//! Dense strictly convex QP solver (dual active set, Goldfarb-Idnani).
//!
//! Solves `min ½ xᵀHx + fᵀx` subject to `A_eq x = b_eq` and `l ≤ x ≤ u`.
//! Equalities enter the active set first and are never dropped. Violated
//! inequalities are added most-violated first with lowest-index ties, so
//! the iteration sequence is a deterministic function of the inputs.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::numerics::{MatN, VecN};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("QP dimension mismatch: {0}")]
    Dimension(String),
    #[error("Hessian is not positive definite")]
    NotConvex,
    #[error("QP infeasible: constraint {constraint} cannot be satisfied")]
    Infeasible { constraint: usize },
    #[error("QP did not converge in {iterations} iterations (max violation {violation:.3e})")]
    NoConvergence { iterations: usize, violation: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: MatN,
    pub f: VecN,
    pub a_eq: MatN,
    pub b_eq: VecN,
    /// Lower bounds; `-∞` for none.
    pub lower: VecN,
    /// Upper bounds; `+∞` for none.
    pub upper: VecN,
}

impl QpProblem {
    /// Unconstrained problem of dimension `n`.
    pub fn unconstrained(h: MatN, f: VecN) -> Self {
        let n = f.len();
        Self {
            h,
            f,
            a_eq: MatN::zeros(0, n),
            b_eq: VecN::zeros(0),
            lower: VecN::from_element(n, f64::NEG_INFINITY),
            upper: VecN::from_element(n, f64::INFINITY),
        }
    }

    pub fn dim(&self) -> usize {
        self.f.len()
    }

    pub fn objective(&self, x: &VecN) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.f.dot(x)
    }

    fn check(&self) -> Result<(), QpError> {
        let n = self.dim();
        if self.h.shape() != (n, n) {
            return Err(QpError::Dimension(format!("H is {:?}, expected {n}x{n}", self.h.shape())));
        }
        if self.a_eq.ncols() != n || self.a_eq.nrows() != self.b_eq.len() {
            return Err(QpError::Dimension("equality block shape".into()));
        }
        if self.lower.len() != n || self.upper.len() != n {
            return Err(QpError::Dimension("bound vector length".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: VecN,
    pub objective: f64,
    /// Equality multipliers.
    pub lambda_eq: VecN,
    /// Lower-bound multipliers (≥ 0).
    pub mu_lower: VecN,
    /// Upper-bound multipliers (≥ 0).
    pub mu_upper: VecN,
    pub iterations: usize,
    /// Stationarity residual `‖Hx + f − A_eqᵀλ − μ_l + μ_u‖∞`.
    pub kkt_residual: f64,
    /// `max |μ_i s_i|` over bound constraints.
    pub complementarity: f64,
    /// Largest primal constraint violation.
    pub primal_residual: f64,
}

/// Constraint `nᵀx ≥ b`, referenced by index into the combined list.
#[derive(Clone, Copy)]
enum Kind {
    Eq(usize),
    Lower(usize),
    Upper(usize),
}

struct Constraints<'a> {
    p: &'a QpProblem,
}

impl Constraints<'_> {
    fn normal(&self, k: Kind) -> VecN {
        let n = self.p.dim();
        match k {
            Kind::Eq(i) => self.p.a_eq.row(i).transpose(),
            Kind::Lower(i) => {
                let mut v = VecN::zeros(n);
                v[i] = 1.0;
                v
            }
            Kind::Upper(i) => {
                let mut v = VecN::zeros(n);
                v[i] = -1.0;
                v
            }
        }
    }

    fn rhs(&self, k: Kind) -> f64 {
        match k {
            Kind::Eq(i) => self.p.b_eq[i],
            Kind::Lower(i) => self.p.lower[i],
            Kind::Upper(i) => -self.p.upper[i],
        }
    }

    /// Most violated bound, lowest index on ties (lower before upper per variable).
    fn most_violated(&self, x: &VecN, active: &[Kind], tol: f64) -> Option<(Kind, f64)> {
        let mut best: Option<(Kind, f64)> = None;
        let is_active = |k: Kind| {
            active.iter().any(|a| match (a, k) {
                (Kind::Lower(i), Kind::Lower(j)) | (Kind::Upper(i), Kind::Upper(j)) => *i == j,
                _ => false,
            })
        };
        for i in 0..self.p.dim() {
            for k in [Kind::Lower(i), Kind::Upper(i)] {
                let b = self.rhs(k);
                if !b.is_finite() || is_active(k) {
                    continue;
                }
                let s = self.normal(k).dot(x) - b;
                if s < -tol && best.is_none_or(|(_, v)| s < v) {
                    best = Some((k, s));
                }
            }
        }
        best
    }
}

/// Entry in the working set: constraint, orientation sign for equalities, multiplier.
struct Active {
    kind: Kind,
    sign: f64,
    mult: f64,
}

pub const MAX_ITERATIONS: usize = 200;
const FEAS_TOL: f64 = 1e-10;

pub fn solve_qp(p: &QpProblem) -> Result<QpSolution, QpError> {
    solve_qp_with_limit(p, MAX_ITERATIONS)
}

pub fn solve_qp_with_limit(p: &QpProblem, max_iter: usize) -> Result<QpSolution, QpError> {
    p.check()?;
    let n = p.dim();
    let chol = p.h.clone().cholesky().ok_or(QpError::NotConvex)?;
    let hinv = chol.inverse();
    let cons = Constraints { p };
    let mut x = -(&hinv * &p.f);
    let mut active: Vec<Active> = Vec::new();
    let mut iterations = 0usize;

    // Step directions for adding constraint with normal `np`.
    let directions = |active: &[Active], np: &VecN| -> (VecN, VecN) {
        let q = active.len();
        if q == 0 {
            return (&hinv * np, VecN::zeros(0));
        }
        let mut nmat = MatN::zeros(n, q);
        for (j, a) in active.iter().enumerate() {
            nmat.set_column(j, &(cons.normal(a.kind) * a.sign));
        }
        let hn = &hinv * &nmat;
        let gram = nmat.transpose() * &hn;
        let hnp = &hinv * np;
        let rhs = nmat.transpose() * &hnp;
        let r = gram.lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(q));
        let z = hnp - hn * &r;
        (z, r)
    };

    let add = |x: &mut VecN, active: &mut Vec<Active>, kind: Kind, sign: f64, iterations: &mut usize, id: usize|
     -> Result<(), QpError> {
        let np = cons.normal(kind) * sign;
        let bp = cons.rhs(kind) * sign;
        let mut mult_p = 0.0;
        loop {
            *iterations += 1;
            if *iterations > max_iter {
                return Err(QpError::NoConvergence { iterations: *iterations - 1, violation: (bp - np.dot(x)).max(0.0) });
            }
            let s = np.dot(x) - bp;
            let (z, r) = directions(active, &np);
            let znp = z.dot(&np);
            let t2 = if z.amax() > 1e-14 && znp > 1e-14 { -s / znp } else { f64::INFINITY };
            let mut t1 = f64::INFINITY;
            let mut drop: Option<usize> = None;
            for (j, a) in active.iter().enumerate() {
                if matches!(a.kind, Kind::Eq(_)) {
                    continue;
                }
                if r[j] > 1e-14 {
                    let ratio = a.mult / r[j];
                    if ratio < t1 {
                        t1 = ratio;
                        drop = Some(j);
                    }
                }
            }
            let t = t1.min(t2);
            if !t.is_finite() {
                return Err(QpError::Infeasible { constraint: id });
            }
            if t2.is_finite() {
                *x += &z * t;
            }
            for (j, a) in active.iter_mut().enumerate() {
                a.mult -= t * r[j];
            }
            mult_p += t;
            if t2 <= t1 {
                active.push(Active { kind, sign, mult: mult_p });
                return Ok(());
            }
            let j = drop.expect("partial step has a blocking constraint");
            active.remove(j);
        }
    };

    for i in 0..p.a_eq.nrows() {
        let kind = Kind::Eq(i);
        let s = cons.normal(kind).dot(&x) - cons.rhs(kind);
        let sign = if s > 0.0 { -1.0 } else { 1.0 };
        add(&mut x, &mut active, kind, sign, &mut iterations, i)?;
    }
    let scale = 1.0 + p.f.amax() + p.h.amax();
    while let Some((kind, _)) = cons.most_violated(&x, &active.iter().map(|a| a.kind).collect::<Vec<_>>(), FEAS_TOL * scale) {
        let id = match kind {
            Kind::Lower(i) | Kind::Upper(i) => p.a_eq.nrows() + 2 * i + matches!(kind, Kind::Upper(_)) as usize,
            Kind::Eq(i) => i,
        };
        add(&mut x, &mut active, kind, 1.0, &mut iterations, id)?;
    }

    // Snap active bounds exactly.
    for a in &active {
        match a.kind {
            Kind::Lower(i) => x[i] = p.lower[i],
            Kind::Upper(i) => x[i] = p.upper[i],
            Kind::Eq(_) => {}
        }
    }
    let mut lambda_eq = VecN::zeros(p.a_eq.nrows());
    let mut mu_lower = VecN::zeros(n);
    let mut mu_upper = VecN::zeros(n);
    for a in &active {
        match a.kind {
            Kind::Eq(i) => lambda_eq[i] = a.mult * a.sign,
            Kind::Lower(i) => mu_lower[i] = a.mult,
            Kind::Upper(i) => mu_upper[i] = a.mult,
        }
    }
    let grad = &p.h * &x + &p.f;
    let stationarity = &grad - p.a_eq.transpose() * &lambda_eq - &mu_lower + &mu_upper;
    let mut complementarity: f64 = 0.0;
    let mut primal: f64 = (&p.a_eq * &x - &p.b_eq).amax();
    for i in 0..n {
        if p.lower[i].is_finite() {
            complementarity = complementarity.max((mu_lower[i] * (x[i] - p.lower[i])).abs());
            primal = primal.max(p.lower[i] - x[i]);
        }
        if p.upper[i].is_finite() {
            complementarity = complementarity.max((mu_upper[i] * (p.upper[i] - x[i])).abs());
            primal = primal.max(x[i] - p.upper[i]);
        }
    }
    Ok(QpSolution {
        objective: p.objective(&x),
        x,
        lambda_eq,
        mu_lower,
        mu_upper,
        iterations,
        kkt_residual: stationarity.amax(),
        complementarity,
        primal_residual: primal.max(0.0),
    })
}

/// Exhaustive reference solver: enumerates every free/lower/upper pattern,
/// solves the resulting equality-constrained problem and keeps the best
/// feasible candidate. Exponential in `n`; intended for `n ≤ 6`.
pub fn solve_qp_bruteforce(p: &QpProblem) -> Option<VecN> {
    let n = p.dim();
    let me = p.a_eq.nrows();
    let mut best: Option<(f64, VecN)> = None;
    let patterns = 3usize.pow(n as u32);
    'outer: for code in 0..patterns {
        let mut c = code;
        let mut fixed = Vec::new();
        for i in 0..n {
            match c % 3 {
                1 if p.lower[i].is_finite() => fixed.push((i, p.lower[i])),
                2 if p.upper[i].is_finite() => fixed.push((i, p.upper[i])),
                0 => {}
                _ => continue 'outer,
            }
            c /= 3;
        }
        let m = me + fixed.len();
        let mut kkt = DMatrix::zeros(n + m, n + m);
        let mut rhs = DVector::zeros(n + m);
        kkt.view_mut((0, 0), (n, n)).copy_from(&p.h);
        rhs.rows_mut(0, n).copy_from(&(-&p.f));
        for i in 0..me {
            for j in 0..n {
                kkt[(n + i, j)] = p.a_eq[(i, j)];
                kkt[(j, n + i)] = p.a_eq[(i, j)];
            }
            rhs[n + i] = p.b_eq[i];
        }
        for (k, &(i, v)) in fixed.iter().enumerate() {
            kkt[(n + me + k, i)] = 1.0;
            kkt[(i, n + me + k)] = 1.0;
            rhs[n + me + k] = v;
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        let x = sol.rows(0, n).into_owned();
        let feasible = (0..n).all(|i| x[i] >= p.lower[i] - 1e-9 && x[i] <= p.upper[i] + 1e-9)
            && (&p.a_eq * &x - &p.b_eq).amax() < 1e-8;
        if !feasible {
            continue;
        }
        let obj = p.objective(&x);
        if best.as_ref().is_none_or(|(b, _)| obj < *b - 1e-14) {
            best = Some((obj, x));
        }
    }
    best.map(|(_, x)| x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem(rng: &mut ChaCha8Rng, n: usize, with_eq: bool) -> QpProblem {
        let a = MatN::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let h = &a * a.transpose() + MatN::identity(n, n) * 0.1;
        let f = VecN::from_fn(n, |_, _| rng.gen_range(-3.0..3.0));
        let lower = VecN::from_fn(n, |_, _| if rng.gen_bool(0.8) { rng.gen_range(-1.0..0.0) } else { f64::NEG_INFINITY });
        let upper = VecN::from_fn(n, |_, _| if rng.gen_bool(0.8) { rng.gen_range(0.0..1.0) } else { f64::INFINITY });
        let (a_eq, b_eq) = if with_eq && n > 1 {
            let row = MatN::from_fn(1, n, |_, _| rng.gen_range(-1.0..1.0));
            // Right-hand side from an interior point keeps the instance feasible.
            let interior = VecN::from_fn(n, |i, _| {
                let lo = if lower[i].is_finite() { lower[i] } else { -1.0 };
                let hi = if upper[i].is_finite() { upper[i] } else { 1.0 };
                0.5 * (lo + hi)
            });
            let b = &row * interior;
            (row, b)
        } else {
            (MatN::zeros(0, n), VecN::zeros(0))
        };
        QpProblem { h, f, a_eq, b_eq, lower, upper }
    }

    #[test]
    fn unconstrained_minimizer() {
        let target = VecN::from_vec(vec![1.0, -2.0, 0.5]);
        let p = QpProblem::unconstrained(MatN::identity(3, 3), -target.clone());
        let s = solve_qp(&p).unwrap();
        assert_relative_eq!(s.x, target, epsilon = 1e-14);
        assert_eq!(s.iterations, 0);
    }

    #[test]
    fn single_bound_active() {
        let mut p = QpProblem::unconstrained(MatN::from_element(1, 1, 2.0), VecN::from_element(1, -4.0));
        p.lower[0] = -1.0;
        p.upper[0] = 1.0;
        let s = solve_qp(&p).unwrap();
        assert_eq!(s.x[0], 1.0);
        assert_relative_eq!(s.mu_upper[0], 2.0, epsilon = 1e-12);
        assert!(s.kkt_residual < 1e-12);
    }

    #[test]
    fn scalar_closed_form() {
        // min ½ h u² + f u, unconstrained: u = −f/h.
        let p = QpProblem::unconstrained(MatN::from_element(1, 1, 3.7), VecN::from_element(1, 1.3));
        assert_relative_eq!(solve_qp(&p).unwrap().x[0], -1.3 / 3.7, epsilon = 1e-15);
    }

    #[test]
    fn matches_bruteforce_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for k in 0..100 {
            let n = 1 + k % 6;
            let p = random_problem(&mut rng, n, k % 3 == 0);
            let s = solve_qp(&p).unwrap();
            let oracle = solve_qp_bruteforce(&p).expect("feasible instance");
            assert!((&s.x - &oracle).amax() < 1e-8, "instance {k}: {} vs {}", s.x, oracle);
            assert!(s.kkt_residual < 1e-8 && s.complementarity < 1e-8 && s.primal_residual < 1e-9);
            assert!(s.mu_lower.iter().chain(s.mu_upper.iter()).all(|m| *m >= -1e-12));
        }
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let p = random_problem(&mut rng, 6, true);
        let a = solve_qp(&p).unwrap();
        let b = solve_qp(&p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn infeasible_detected() {
        let mut p = QpProblem::unconstrained(MatN::identity(2, 2), VecN::zeros(2));
        p.a_eq = MatN::from_row_slice(1, 2, &[1.0, 1.0]);
        p.b_eq = VecN::from_element(1, 5.0);
        p.lower = VecN::from_element(2, -1.0);
        p.upper = VecN::from_element(2, 1.0);
        assert!(matches!(solve_qp(&p), Err(QpError::Infeasible { .. })));
    }

    #[test]
    fn rejects_indefinite_hessian() {
        let p = QpProblem::unconstrained(MatN::from_diagonal(&VecN::from_vec(vec![1.0, -1.0])), VecN::zeros(2));
        assert_eq!(solve_qp(&p).unwrap_err(), QpError::NotConvex);
    }
}
