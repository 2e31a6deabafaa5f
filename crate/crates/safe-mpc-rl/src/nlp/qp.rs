//! Dense strictly convex quadratic programming by the dual active-set
//! method of Goldfarb and Idnani.
//!
//! Solves `min 1/2 x'Hx + g'x` subject to mixed linear equality and
//! inequality rows `n_j'x = b_j` / `n_j'x >= b_j`. Starts from the
//! unconstrained minimizer and adds violated constraints one at a time,
//! so no feasible starting point is needed. `H` must be positive
//! definite. Factorizations are recomputed per active-set change; the
//! problems here are small and dense, so simplicity wins over
//! incremental updates.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintKind {
    Equality,
    Inequality,
}

#[derive(Debug, Clone)]
pub struct QpConstraint {
    pub normal: DVector<f64>,
    pub rhs: f64,
    pub kind: ConstraintKind,
}

impl QpConstraint {
    pub fn equality(normal: DVector<f64>, rhs: f64) -> Self {
        Self { normal, rhs, kind: ConstraintKind::Equality }
    }

    pub fn inequality(normal: DVector<f64>, rhs: f64) -> Self {
        Self { normal, rhs, kind: ConstraintKind::Inequality }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// One multiplier per constraint row; nonnegative for inequalities,
    /// sign-free for equalities, zero for inactive rows.
    pub multipliers: DVector<f64>,
    pub value: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QpError {
    NotPositiveDefinite,
    Infeasible,
    /// Active-set iteration limit hit (degenerate cycling).
    Stalled,
    BadShape,
}

impl std::fmt::Display for QpError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            QpError::NotPositiveDefinite => write!(f, "Hessian not positive definite"),
            QpError::Infeasible => write!(f, "constraints are inconsistent"),
            QpError::Stalled => write!(f, "active-set iteration limit reached"),
            QpError::BadShape => write!(f, "inconsistent problem dimensions"),
        }
    }
}

const FEAS_TOL: f64 = 1e-10;
const DUAL_TOL: f64 = 1e-12;

pub fn solve_qp(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    constraints: &[QpConstraint],
) -> Result<QpSolution, QpError> {
    let n = g.len();
    if h.nrows() != n || h.ncols() != n {
        return Err(QpError::BadShape);
    }
    if constraints.iter().any(|c| c.normal.len() != n) {
        return Err(QpError::BadShape);
    }
    let chol = Cholesky::new(h.clone()).ok_or(QpError::NotPositiveDefinite)?;

    let m = constraints.len();
    let mut x = -chol.solve(g);
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let mut flip = vec![false; m];
    let mut skip = vec![false; m];
    let mut iterations = 0usize;
    let max_iterations = 100 + 20 * (n + m);

    loop {
        let pick = next_constraint(constraints, &x, &active, &skip);
        let Some(p) = pick else { break };

        let mut np = constraints[p].normal.clone();
        let mut bp = constraints[p].rhs;
        if constraints[p].kind == ConstraintKind::Equality && np.dot(&x) - bp > 0.0 {
            np = -np;
            bp = -bp;
            flip[p] = true;
        }
        let mut up = 0.0f64;

        loop {
            iterations += 1;
            if iterations > max_iterations {
                return Err(QpError::Stalled);
            }

            let ginv_np = chol.solve(&np);
            let (z, r) = step_directions(&chol, constraints, &active, &flip, &np, &ginv_np)?;

            // Dual blocking step (only inequalities may leave).
            let mut t1 = f64::INFINITY;
            let mut blocking: Option<usize> = None;
            for (idx, &aj) in active.iter().enumerate() {
                if constraints[aj].kind == ConstraintKind::Inequality && r[idx] > DUAL_TOL {
                    let ratio = u[idx] / r[idx];
                    if ratio < t1 {
                        t1 = ratio;
                        blocking = Some(idx);
                    }
                }
            }

            let s_p = np.dot(&x) - bp;
            let ztn = z.dot(&np);
            let t2 = if ztn > 1e-14 * np.norm_squared().max(1e-300) {
                -s_p / ztn
            } else {
                f64::INFINITY
            };

            if !t1.is_finite() && !t2.is_finite() {
                if s_p >= -FEAS_TOL * (1.0 + bp.abs()) {
                    // Redundant, already satisfied: leave it out.
                    skip[p] = true;
                    break;
                }
                return Err(QpError::Infeasible);
            }

            let t = t1.min(t2);
            if t2.is_finite() {
                x.axpy(t, &z, 1.0);
            }
            for idx in 0..active.len() {
                u[idx] -= t * r[idx];
            }
            up += t;

            if t2 <= t1 {
                active.push(p);
                u.push(up);
                break;
            }
            let bidx = blocking.expect("finite t1 implies a blocking constraint");
            active.remove(bidx);
            u.remove(bidx);
        }
    }

    let mut multipliers = DVector::zeros(m);
    for (idx, &aj) in active.iter().enumerate() {
        multipliers[aj] = if flip[aj] { -u[idx] } else { u[idx] };
    }
    let value = 0.5 * x.dot(&(h * &x)) + g.dot(&x);
    Ok(QpSolution { x, multipliers, value, iterations })
}

/// Equalities first in row order, then the most violated inequality.
fn next_constraint(
    constraints: &[QpConstraint],
    x: &DVector<f64>,
    active: &[usize],
    skip: &[bool],
) -> Option<usize> {
    for (j, c) in constraints.iter().enumerate() {
        if c.kind == ConstraintKind::Equality && !skip[j] && !active.contains(&j) {
            return Some(j);
        }
    }
    let mut worst = f64::INFINITY;
    let mut pick = None;
    for (j, c) in constraints.iter().enumerate() {
        if c.kind != ConstraintKind::Inequality || skip[j] || active.contains(&j) {
            continue;
        }
        let s = c.normal.dot(x) - c.rhs;
        if s < -FEAS_TOL * (1.0 + c.rhs.abs()) && s < worst {
            worst = s;
            pick = Some(j);
        }
    }
    pick
}

/// Primal direction `z` (motion of x when the candidate constraint is
/// tightened) and dual direction `r` (motion of the active multipliers).
#[allow(clippy::type_complexity)]
fn step_directions(
    chol: &Cholesky<f64, Dyn>,
    constraints: &[QpConstraint],
    active: &[usize],
    flip: &[bool],
    np: &DVector<f64>,
    ginv_np: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>), QpError> {
    if active.is_empty() {
        return Ok((ginv_np.clone(), DVector::zeros(0)));
    }
    let n = np.len();
    let na = active.len();
    let mut nmat = DMatrix::zeros(n, na);
    for (col, &aj) in active.iter().enumerate() {
        for row in 0..n {
            let v = constraints[aj].normal[row];
            nmat[(row, col)] = if flip[aj] { -v } else { v };
        }
    }
    let gn = chol.solve(&nmat);
    let mmat = nmat.transpose() * &gn;
    let mchol = cholesky_with_jitter(mmat).ok_or(QpError::Stalled)?;
    let rhs = nmat.transpose() * ginv_np;
    let r = mchol.solve(&rhs);
    let z = ginv_np - &gn * &r;
    Ok((z, r))
}

fn cholesky_with_jitter(mut m: DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    let n = m.nrows();
    if let Some(c) = Cholesky::new(m.clone()) {
        return Some(c);
    }
    let scale = (m.trace() / n as f64).abs().max(1e-300);
    let mut jitter = 1e-12 * scale;
    for _ in 0..8 {
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(m.clone()) {
            return Some(c);
        }
        jitter *= 10.0;
    }
    None
}
