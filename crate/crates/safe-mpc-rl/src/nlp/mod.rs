//! Dense nonlinear programming: problem traits, an SQP solver with a
//! dual active-set QP subproblem, parametric value gradients via the
//! Lagrangian, and a grid-search oracle for tiny test problems.

pub mod qp;
pub mod sqp;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub use sqp::{solve, solve_with_trace, SolveStatus, SqpSolver};

/// Smooth NLP in the form
///
/// ```text
///   min f(z)   s.t.  c_E(z) = 0,  c_I(z) >= 0,  lo <= z <= hi
/// ```
pub trait NlpProblem {
    fn num_vars(&self) -> usize;
    fn num_eq(&self) -> usize;
    fn num_ineq(&self) -> usize;

    /// Lower/upper variable bounds; use +-infinity for free coordinates.
    fn bounds(&self) -> (DVector<f64>, DVector<f64>);

    fn objective(&self, z: &DVector<f64>) -> f64;
    fn objective_grad(&self, z: &DVector<f64>) -> DVector<f64>;

    fn eq_constraints(&self, z: &DVector<f64>) -> DVector<f64>;
    fn eq_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64>;

    fn ineq_constraints(&self, z: &DVector<f64>) -> DVector<f64>;
    fn ineq_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64>;

    /// Cold-start point; defaults to the origin clamped into the box.
    fn initial_point(&self) -> DVector<f64> {
        let (lo, hi) = self.bounds();
        DVector::from_fn(self.num_vars(), |i, _| clamp_into(0.0, lo[i], hi[i]))
    }

    /// Optional diagonal seed for the Hessian approximation.
    fn hessian_seed(&self) -> Option<DVector<f64>> {
        None
    }
}

pub(crate) fn clamp_into(v: f64, lo: f64, hi: f64) -> f64 {
    let mut out = v;
    if out < lo {
        out = lo;
    }
    if out > hi {
        out = hi;
    }
    if !out.is_finite() && lo.is_finite() {
        out = lo;
    }
    out
}

/// NLP whose objective and constraints additionally depend on a fixed
/// parameter vector; exposes the directional derivatives needed by the
/// envelope (Lagrangian) gradient of the optimal value.
pub trait ParametricNlp: NlpProblem {
    fn num_params(&self) -> usize;

    /// d f / d theta at fixed z.
    fn objective_param_grad(&self, z: &DVector<f64>) -> DVector<f64>;

    /// lambda' * (d c_I / d theta) at fixed z.
    fn ineq_param_vjp(&self, z: &DVector<f64>, lambda: &DVector<f64>) -> DVector<f64>;

    /// nu' * (d c_E / d theta) at fixed z.
    fn eq_param_vjp(&self, z: &DVector<f64>, nu: &DVector<f64>) -> DVector<f64>;
}

/// KKT residuals of a candidate solution.
#[derive(Debug, Clone, Copy, Default)]
pub struct KktResiduals {
    /// inf-norm of the Lagrangian gradient.
    pub stationarity: f64,
    /// Stationarity scaled by max(1, |grad f|_inf).
    pub stationarity_rel: f64,
    /// inf-norm of constraint violations (equalities, inequalities, bounds).
    pub feasibility: f64,
    /// Scaled complementarity residual.
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max_residual(&self) -> f64 {
        self.stationarity_rel.max(self.feasibility).max(self.complementarity)
    }
}

/// Primal/dual result of one NLP solve.
#[derive(Debug, Clone)]
pub struct NlpSolution {
    pub z: DVector<f64>,
    pub eq_multipliers: DVector<f64>,
    pub ineq_multipliers: DVector<f64>,
    pub bound_multipliers_lo: DVector<f64>,
    pub bound_multipliers_hi: DVector<f64>,
    pub value: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    pub kkt: KktResiduals,
}

impl NlpSolution {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }
}

/// Gradient of the optimal value with respect to the parameter slots.
#[derive(Debug, Clone)]
pub struct ValueGradient {
    pub grad: DVector<f64>,
    /// Set when the active set looks degenerate (weakly active
    /// constraints or a rank-deficient active Jacobian).
    pub low_confidence: bool,
}

/// Envelope-theorem gradient: differentiate the Lagrangian at the fixed
/// primal/dual optimum. Bounds carry no parameter dependence, so only
/// the functional constraints contribute.
pub fn value_gradient(problem: &dyn ParametricNlp, sol: &NlpSolution) -> ValueGradient {
    let z = &sol.z;
    let mut grad = problem.objective_param_grad(z);
    if problem.num_ineq() > 0 {
        grad -= problem.ineq_param_vjp(z, &sol.ineq_multipliers);
    }
    if problem.num_eq() > 0 {
        grad -= problem.eq_param_vjp(z, &sol.eq_multipliers);
    }
    ValueGradient { grad, low_confidence: active_set_degenerate(problem, sol) }
}

fn active_set_degenerate(problem: &dyn ParametricNlp, sol: &NlpSolution) -> bool {
    let z = &sol.z;
    let act_tol = 1e-6;
    let ci = problem.ineq_constraints(z);
    let lambda_max = sol.ineq_multipliers.iter().fold(0.0f64, |m, &l| m.max(l.abs()));
    // Weak activity: a constraint on its boundary with a vanishing multiplier.
    for i in 0..ci.len() {
        let scale = 1.0 + ci[i].abs();
        if ci[i] <= act_tol * scale && sol.ineq_multipliers[i] <= 1e-7 * lambda_max.max(1.0) {
            return true;
        }
    }
    // LICQ: rank of the active Jacobian.
    let (lo, hi) = problem.bounds();
    let je = problem.eq_jacobian(z);
    let ji = problem.ineq_jacobian(z);
    let mut rows: Vec<DVector<f64>> = Vec::new();
    for r in 0..je.nrows() {
        rows.push(je.row(r).transpose());
    }
    for i in 0..ci.len() {
        if ci[i] <= act_tol * (1.0 + ci[i].abs()) {
            rows.push(ji.row(i).transpose());
        }
    }
    let n = problem.num_vars();
    for i in 0..n {
        let lo_active = lo[i].is_finite() && z[i] - lo[i] <= act_tol * (1.0 + lo[i].abs());
        let hi_active = hi[i].is_finite() && hi[i] - z[i] <= act_tol * (1.0 + hi[i].abs());
        if lo_active || hi_active {
            let mut e = DVector::zeros(n);
            e[i] = 1.0;
            rows.push(e);
        }
    }
    if rows.is_empty() {
        return false;
    }
    if rows.len() > n {
        return true;
    }
    let mat = DMatrix::from_fn(rows.len(), n, |r, c| rows[r][c]);
    let svd = mat.svd(false, false);
    let smax = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let smin = svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
    smax > 0.0 && smin < 1e-8 * smax
}

/// Result of the grid-search oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BruteForceResult {
    Value(f64),
    /// No grid point satisfied the constraints.
    Infeasible,
}

/// Exhaustive grid minimum over the (boxed) feasible set. Test oracle
/// for problems with at most 3 decision variables; upper-bounds the
/// true optimum within grid resolution.
pub fn brute_force_value(
    problem: &dyn NlpProblem,
    points_per_dim: usize,
    eq_tol: f64,
) -> Result<BruteForceResult> {
    let n = problem.num_vars();
    if n > 3 {
        return Err(Error::Config(format!("brute-force oracle limited to 3 variables, got {n}")));
    }
    if points_per_dim < 2 {
        return Err(Error::Config("need at least 2 grid points per dimension".into()));
    }
    let (lo, hi) = problem.bounds();
    for i in 0..n {
        if !lo[i].is_finite() || !hi[i].is_finite() {
            return Err(Error::Config("brute-force oracle needs finite bounds".into()));
        }
    }
    let mut best: Option<f64> = None;
    let mut idx = vec![0usize; n];
    let mut z = DVector::zeros(n);
    loop {
        for i in 0..n {
            let frac = idx[i] as f64 / (points_per_dim - 1) as f64;
            z[i] = lo[i] + frac * (hi[i] - lo[i]);
        }
        let feasible = {
            let ce = problem.eq_constraints(&z);
            let ci = problem.ineq_constraints(&z);
            ce.iter().all(|v| v.abs() <= eq_tol) && ci.iter().all(|v| *v >= -1e-9)
        };
        if feasible {
            let f = problem.objective(&z);
            best = Some(best.map_or(f, |b: f64| b.min(f)));
        }
        // Advance the multi-index.
        let mut dim = 0;
        loop {
            if dim == n {
                return Ok(best.map_or(BruteForceResult::Infeasible, BruteForceResult::Value));
            }
            idx[dim] += 1;
            if idx[dim] < points_per_dim {
                break;
            }
            idx[dim] = 0;
            dim += 1;
        }
    }
}

/// Boxed-closure problem, mainly for tests and small demos.
pub struct ClosureProblem {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub objective: Box<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>,
    pub gradient: Box<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>,
    pub eq: Vec<ClosureConstraint>,
    pub ineq: Vec<ClosureConstraint>,
}

pub struct ClosureConstraint {
    pub value: Box<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>,
    pub gradient: Box<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>,
}

impl NlpProblem for ClosureProblem {
    fn num_vars(&self) -> usize {
        self.lower.len()
    }

    fn num_eq(&self) -> usize {
        self.eq.len()
    }

    fn num_ineq(&self) -> usize {
        self.ineq.len()
    }

    fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        (self.lower.clone(), self.upper.clone())
    }

    fn objective(&self, z: &DVector<f64>) -> f64 {
        (self.objective)(z)
    }

    fn objective_grad(&self, z: &DVector<f64>) -> DVector<f64> {
        (self.gradient)(z)
    }

    fn eq_constraints(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.eq.len(), |i, _| (self.eq[i].value)(z))
    }

    fn eq_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        jacobian_from(&self.eq, z, self.num_vars())
    }

    fn ineq_constraints(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.ineq.len(), |i, _| (self.ineq[i].value)(z))
    }

    fn ineq_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        jacobian_from(&self.ineq, z, self.num_vars())
    }
}

fn jacobian_from(cons: &[ClosureConstraint], z: &DVector<f64>, n: usize) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(cons.len(), n);
    for (i, c) in cons.iter().enumerate() {
        let g = (c.gradient)(z);
        jac.set_row(i, &g.transpose());
    }
    jac
}
