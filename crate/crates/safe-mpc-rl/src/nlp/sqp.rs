//! Sequential quadratic programming with a damped BFGS Hessian
//! approximation, an L1 merit line search and the dual active-set QP
//! of [`super::qp`] as subproblem solver.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use super::qp::{self, QpConstraint, QpError};
use super::{clamp_into, KktResiduals, NlpProblem, NlpSolution};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    /// The QP subproblem failed (inconsistent linearization or
    /// degenerate cycling) and the elastic relaxation failed too.
    SubproblemFailure,
    NanInCallback,
    InconsistentBounds,
    LineSearchStall,
}

impl SolveStatus {
    pub fn is_failure(&self) -> bool {
        !matches!(self, SolveStatus::Converged)
    }
}

/// Solver knobs; the defaults suit the small dense problems built here.
#[derive(Debug, Clone)]
pub struct SqpSolver {
    /// Tolerance on scaled stationarity and complementarity.
    pub kkt_tol: f64,
    /// Absolute tolerance on constraint violation.
    pub feas_tol: f64,
    pub max_iter: usize,
    /// Smallest curvature kept on the Hessian diagonal.
    pub reg_floor: f64,
    /// Callers consult this to decide whether to pass warm starts.
    pub warm_start: bool,
}

impl Default for SqpSolver {
    fn default() -> Self {
        Self { kkt_tol: 1e-6, feas_tol: 1e-6, max_iter: 200, reg_floor: 1e-8, warm_start: true }
    }
}

struct Eval {
    f: f64,
    grad: DVector<f64>,
    ce: DVector<f64>,
    je: DMatrix<f64>,
    ci: DVector<f64>,
    ji: DMatrix<f64>,
}

impl Eval {
    fn at(problem: &dyn NlpProblem, z: &DVector<f64>) -> Option<Self> {
        let f = problem.objective(z);
        let grad = problem.objective_grad(z);
        let ce = problem.eq_constraints(z);
        let je = problem.eq_jacobian(z);
        let ci = problem.ineq_constraints(z);
        let ji = problem.ineq_jacobian(z);
        let finite = f.is_finite()
            && grad.iter().all(|v| v.is_finite())
            && ce.iter().all(|v| v.is_finite())
            && je.iter().all(|v| v.is_finite())
            && ci.iter().all(|v| v.is_finite())
            && ji.iter().all(|v| v.is_finite());
        finite.then_some(Self { f, grad, ce, je, ci, ji })
    }

    fn violation_l1(&self) -> f64 {
        self.ce.iter().map(|v| v.abs()).sum::<f64>()
            + self.ci.iter().map(|v| (-v).max(0.0)).sum::<f64>()
    }

    fn violation_inf(&self) -> f64 {
        let e = self.ce.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let i = self.ci.iter().fold(0.0f64, |m, v| m.max((-v).max(0.0)));
        e.max(i)
    }
}

/// Multiplier estimates for the three constraint classes.
#[derive(Clone)]
struct Multipliers {
    nu: DVector<f64>,
    lambda: DVector<f64>,
    mu_lo: DVector<f64>,
    mu_hi: DVector<f64>,
}

impl Multipliers {
    fn zeros(ne: usize, ni: usize, n: usize) -> Self {
        Self {
            nu: DVector::zeros(ne),
            lambda: DVector::zeros(ni),
            mu_lo: DVector::zeros(n),
            mu_hi: DVector::zeros(n),
        }
    }

    fn max_abs(&self) -> f64 {
        let m1 = self.nu.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let m2 = self.lambda.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let m3 = self.mu_lo.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let m4 = self.mu_hi.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        m1.max(m2).max(m3).max(m4)
    }
}

pub fn solve(problem: &dyn NlpProblem, cfg: &SqpSolver, warm: Option<&DVector<f64>>) -> NlpSolution {
    solve_with_trace(problem, cfg, warm, None)
}

/// Like [`solve`], optionally streaming one newline-delimited record of
/// KKT residuals per iteration into `trace`.
pub fn solve_with_trace(
    problem: &dyn NlpProblem,
    cfg: &SqpSolver,
    warm: Option<&DVector<f64>>,
    mut trace: Option<&mut dyn Write>,
) -> NlpSolution {
    let n = problem.num_vars();
    let ne = problem.num_eq();
    let ni = problem.num_ineq();
    let (lo, hi) = problem.bounds();

    let fail = |z: DVector<f64>, value: f64, status: SolveStatus, iters: usize| NlpSolution {
        z,
        eq_multipliers: DVector::zeros(ne),
        ineq_multipliers: DVector::zeros(ni),
        bound_multipliers_lo: DVector::zeros(n),
        bound_multipliers_hi: DVector::zeros(n),
        value,
        status,
        iterations: iters,
        kkt: KktResiduals {
            stationarity: f64::INFINITY,
            stationarity_rel: f64::INFINITY,
            feasibility: f64::INFINITY,
            complementarity: f64::INFINITY,
        },
    };

    if (0..n).any(|i| lo[i] > hi[i]) {
        return fail(DVector::zeros(n), f64::NAN, SolveStatus::InconsistentBounds, 0);
    }

    let mut z = match warm {
        Some(w) => DVector::from_fn(n, |i, _| clamp_into(w[i], lo[i], hi[i])),
        None => {
            let p = problem.initial_point();
            DVector::from_fn(n, |i, _| clamp_into(p[i], lo[i], hi[i]))
        }
    };

    let seed = problem.hessian_seed();
    let make_b = |seed: &Option<DVector<f64>>| -> DMatrix<f64> {
        match seed {
            Some(d) => DMatrix::from_diagonal(&d.map(|v| v.max(cfg.reg_floor))),
            None => DMatrix::identity(n, n),
        }
    };
    let mut b = make_b(&seed);
    let mut scaled_b = seed.is_some();

    let mut cur = match Eval::at(problem, &z) {
        Some(e) => e,
        None => return fail(z, f64::NAN, SolveStatus::NanInCallback, 0),
    };

    let mut mults = Multipliers::zeros(ne, ni, n);
    let mut mu_merit = 1.0f64;
    let mut stall_count = 0usize;
    let mut best_feasible: Option<(f64, DVector<f64>)> = None;

    for iter in 0..cfg.max_iter {
        if cur.violation_inf() <= cfg.feas_tol {
            match &mut best_feasible {
                Some((bf, bz)) if cur.f < *bf => {
                    *bf = cur.f;
                    bz.copy_from(&z);
                }
                None => best_feasible = Some((cur.f, z.clone())),
                _ => {}
            }
        }

        // QP subproblem on the linearized constraints.
        let rows = build_qp_rows(&cur, &lo, &hi, &z);
        let qp_res = qp::solve_qp(&b, &cur.grad, &rows);
        let (d, qp_mults) = match qp_res {
            Ok(sol) => {
                let d = sol.x;
                let m = split_multipliers(&sol.multipliers, ne, ni, &lo, &hi);
                (d, m)
            }
            Err(QpError::Infeasible) | Err(QpError::Stalled) => {
                match solve_elastic(&b, &cur, &lo, &hi, &z, mu_merit) {
                    Some((d, m)) => (d, m),
                    None => {
                        return finish(
                            problem, cfg, z, cur, mults, best_feasible,
                            SolveStatus::SubproblemFailure, iter, &lo, &hi,
                        )
                    }
                }
            }
            Err(_) => {
                return finish(
                    problem, cfg, z, cur, mults, best_feasible,
                    SolveStatus::SubproblemFailure, iter, &lo, &hi,
                )
            }
        };
        mults = qp_mults;

        // Convergence test with the fresh multiplier estimates.
        let kkt = residuals(&cur, &lo, &hi, &z, &mults);
        if let Some(w) = trace.as_deref_mut() {
            let _ = writeln!(
                w,
                "{{\"iter\":{},\"f\":{:.17e},\"stat\":{:.3e},\"feas\":{:.3e},\"comp\":{:.3e},\"step\":{:.3e}}}",
                iter,
                cur.f,
                kkt.stationarity_rel,
                kkt.feasibility,
                kkt.complementarity,
                d.amax(),
            );
        }
        if kkt.stationarity_rel <= cfg.kkt_tol
            && kkt.feasibility <= cfg.feas_tol
            && kkt.complementarity <= cfg.kkt_tol.max(1e-8)
        {
            return finish(
                problem, cfg, z, cur, mults, best_feasible, SolveStatus::Converged, iter, &lo, &hi,
            );
        }

        // L1 merit line search along d.
        mu_merit = mu_merit.max(1.5 * mults.max_abs() + 1.0);
        let viol0 = cur.violation_l1();
        let merit0 = cur.f + mu_merit * viol0;
        let descent = cur.grad.dot(&d) - mu_merit * viol0;
        let descent = descent.min(-1e-16);

        let mut alpha = 1.0f64;
        let mut accepted: Option<(DVector<f64>, Eval)> = None;
        for _ in 0..60 {
            let zt = DVector::from_fn(n, |i, _| clamp_into(z[i] + alpha * d[i], lo[i], hi[i]));
            if let Some(et) = Eval::at(problem, &zt) {
                let merit_t = et.f + mu_merit * et.violation_l1();
                if merit_t <= merit0 + 1e-4 * alpha * descent {
                    accepted = Some((zt, et));
                    break;
                }
            }
            alpha *= 0.5;
            if alpha < 1e-13 {
                break;
            }
        }

        let Some((z_new, eval_new)) = accepted else {
            stall_count += 1;
            if stall_count == 1 {
                // Poor curvature model is the usual culprit; start over.
                b = make_b(&seed);
                scaled_b = seed.is_some();
                continue;
            }
            return finish(
                problem, cfg, z, cur, mults, best_feasible,
                SolveStatus::LineSearchStall, iter, &lo, &hi,
            );
        };
        stall_count = 0;

        // Damped BFGS on the Lagrangian gradient.
        let gl_old = lagrangian_grad(&cur, &mults);
        let gl_new = lagrangian_grad(&eval_new, &mults);
        let s = &z_new - &z;
        let y = gl_new - gl_old;
        let s_norm2 = s.norm_squared();
        if s_norm2 > 1e-24 {
            let sy = s.dot(&y);
            if !scaled_b && sy > 1e-12 * s_norm2 {
                let factor = (y.norm_squared() / sy).clamp(1e-6, 1e8);
                b = DMatrix::identity(n, n) * factor;
                scaled_b = true;
            }
            let bs = &b * &s;
            let sbs = s.dot(&bs).max(1e-300);
            let (y_eff, sy_eff) = if sy < 0.2 * sbs {
                let theta = 0.8 * sbs / (sbs - sy);
                let y_mixed = theta * &y + (1.0 - theta) * &bs;
                let sy_m = s.dot(&y_mixed);
                (y_mixed, sy_m)
            } else {
                (y, sy)
            };
            if sy_eff > 1e-12 * s_norm2.sqrt() * y_eff.norm().max(1e-300) {
                b += &y_eff * y_eff.transpose() / sy_eff - &bs * bs.transpose() / sbs;
                // Keep symmetry against numeric drift.
                b = (&b + b.transpose()) * 0.5;
                if b.iter().any(|v| !v.is_finite()) {
                    b = make_b(&seed);
                    scaled_b = seed.is_some();
                }
            }
        }

        z = z_new;
        cur = eval_new;
    }

    finish(
        problem, cfg, z, cur, mults, best_feasible, SolveStatus::MaxIterations,
        cfg.max_iter, &lo, &hi,
    )
}

#[allow(clippy::too_many_arguments)]
fn finish(
    problem: &dyn NlpProblem,
    cfg: &SqpSolver,
    z: DVector<f64>,
    cur: Eval,
    mults: Multipliers,
    best_feasible: Option<(f64, DVector<f64>)>,
    status: SolveStatus,
    iterations: usize,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
) -> NlpSolution {
    // On failure fall back to the best feasible iterate seen, if any.
    let (z, cur) = if status.is_failure() {
        match best_feasible {
            Some((_, bz)) if bz != z => match Eval::at(problem, &bz) {
                Some(be) => (bz, be),
                None => (z, cur),
            },
            _ => (z, cur),
        }
    } else {
        (z, cur)
    };

    // Least-squares multiplier refinement on the numerically active set.
    let refined = refine_multipliers(&cur, lo, hi, &z, cfg);
    let kkt_qp = residuals(&cur, lo, hi, &z, &mults);
    let (mults, kkt) = match refined {
        Some(rm) => {
            let kkt_r = residuals(&cur, lo, hi, &z, &rm);
            if kkt_r.stationarity <= kkt_qp.stationarity {
                (rm, kkt_r)
            } else {
                (mults, kkt_qp)
            }
        }
        None => (mults, kkt_qp),
    };

    NlpSolution {
        z,
        eq_multipliers: mults.nu,
        ineq_multipliers: mults.lambda,
        bound_multipliers_lo: mults.mu_lo,
        bound_multipliers_hi: mults.mu_hi,
        value: cur.f,
        status,
        iterations,
        kkt,
    }
}

fn build_qp_rows(
    cur: &Eval,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    z: &DVector<f64>,
) -> Vec<QpConstraint> {
    let n = z.len();
    let mut rows = Vec::with_capacity(cur.ce.len() + cur.ci.len() + 2 * n);
    for r in 0..cur.ce.len() {
        rows.push(QpConstraint::equality(cur.je.row(r).transpose(), -cur.ce[r]));
    }
    for r in 0..cur.ci.len() {
        rows.push(QpConstraint::inequality(cur.ji.row(r).transpose(), -cur.ci[r]));
    }
    for i in 0..n {
        if lo[i].is_finite() {
            let mut e = DVector::zeros(n);
            e[i] = 1.0;
            rows.push(QpConstraint::inequality(e, lo[i] - z[i]));
        }
        if hi[i].is_finite() {
            let mut e = DVector::zeros(n);
            e[i] = -1.0;
            rows.push(QpConstraint::inequality(e, z[i] - hi[i]));
        }
    }
    rows
}

/// Split the flat QP multiplier vector back into constraint classes.
/// Row order must match [`build_qp_rows`].
fn split_multipliers(
    flat: &DVector<f64>,
    ne: usize,
    ni: usize,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
) -> Multipliers {
    let n = lo.len();
    let mut m = Multipliers::zeros(ne, ni, n);
    let mut idx = 0;
    for r in 0..ne {
        m.nu[r] = flat[idx];
        idx += 1;
    }
    for r in 0..ni {
        m.lambda[r] = flat[idx];
        idx += 1;
    }
    for i in 0..n {
        if lo[i].is_finite() {
            m.mu_lo[i] = flat[idx];
            idx += 1;
        }
        if hi[i].is_finite() {
            m.mu_hi[i] = flat[idx];
            idx += 1;
        }
    }
    m
}

/// Elastic relaxation: inequality rows get a nonnegative slack with a
/// steep linear penalty so the subproblem is always feasible.
fn solve_elastic(
    b: &DMatrix<f64>,
    cur: &Eval,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    z: &DVector<f64>,
    mu_merit: f64,
) -> Option<(DVector<f64>, Multipliers)> {
    let n = z.len();
    let ne = cur.ce.len();
    let ni = cur.ci.len();
    let next = n + ni;
    let rho_lin = 1e3 * (1.0 + cur.grad.amax() + mu_merit);
    let rho_quad = (b.trace() / n as f64).abs().max(1.0);

    let mut h = DMatrix::zeros(next, next);
    h.view_mut((0, 0), (n, n)).copy_from(b);
    for i in 0..ni {
        h[(n + i, n + i)] = rho_quad;
    }
    let mut g = DVector::zeros(next);
    g.rows_mut(0, n).copy_from(&cur.grad);
    for i in 0..ni {
        g[n + i] = rho_lin;
    }

    let mut rows = Vec::new();
    for r in 0..ne {
        let mut normal = DVector::zeros(next);
        normal.rows_mut(0, n).copy_from(&cur.je.row(r).transpose());
        rows.push(QpConstraint::equality(normal, -cur.ce[r]));
    }
    for r in 0..ni {
        let mut normal = DVector::zeros(next);
        normal.rows_mut(0, n).copy_from(&cur.ji.row(r).transpose());
        normal[n + r] = 1.0;
        rows.push(QpConstraint::inequality(normal, -cur.ci[r]));
    }
    for i in 0..n {
        if lo[i].is_finite() {
            let mut e = DVector::zeros(next);
            e[i] = 1.0;
            rows.push(QpConstraint::inequality(e, lo[i] - z[i]));
        }
        if hi[i].is_finite() {
            let mut e = DVector::zeros(next);
            e[i] = -1.0;
            rows.push(QpConstraint::inequality(e, z[i] - hi[i]));
        }
    }
    for r in 0..ni {
        let mut e = DVector::zeros(next);
        e[n + r] = 1.0;
        rows.push(QpConstraint::inequality(e, 0.0));
    }

    let sol = qp::solve_qp(&h, &g, &rows).ok()?;
    let d = sol.x.rows(0, n).into_owned();
    let mut m = Multipliers::zeros(ne, ni, n);
    let mut idx = 0;
    for r in 0..ne {
        m.nu[r] = sol.multipliers[idx];
        idx += 1;
    }
    for r in 0..ni {
        m.lambda[r] = sol.multipliers[idx];
        idx += 1;
    }
    for i in 0..n {
        if lo[i].is_finite() {
            m.mu_lo[i] = sol.multipliers[idx];
            idx += 1;
        }
        if hi[i].is_finite() {
            m.mu_hi[i] = sol.multipliers[idx];
            idx += 1;
        }
    }
    Some((d, m))
}

fn lagrangian_grad(e: &Eval, m: &Multipliers) -> DVector<f64> {
    let mut g = e.grad.clone();
    if e.ce.len() > 0 {
        g -= e.je.transpose() * &m.nu;
    }
    if e.ci.len() > 0 {
        g -= e.ji.transpose() * &m.lambda;
    }
    g
}

fn residuals(
    e: &Eval,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    z: &DVector<f64>,
    m: &Multipliers,
) -> KktResiduals {
    let n = z.len();
    let mut stat_vec = lagrangian_grad(e, m);
    for i in 0..n {
        stat_vec[i] -= m.mu_lo[i];
        stat_vec[i] += m.mu_hi[i];
    }
    let stationarity = stat_vec.amax();
    let gscale = e.grad.amax().max(1.0);

    let mut feas = e.violation_inf();
    for i in 0..n {
        if lo[i].is_finite() {
            feas = feas.max(lo[i] - z[i]);
        }
        if hi[i].is_finite() {
            feas = feas.max(z[i] - hi[i]);
        }
    }

    let mut comp = 0.0f64;
    for i in 0..e.ci.len() {
        comp = comp.max((m.lambda[i] * e.ci[i]).abs() / m.lambda[i].abs().max(1.0));
    }
    for i in 0..n {
        if lo[i].is_finite() {
            comp = comp.max((m.mu_lo[i] * (z[i] - lo[i])).abs() / m.mu_lo[i].abs().max(1.0));
        }
        if hi[i].is_finite() {
            comp = comp.max((m.mu_hi[i] * (hi[i] - z[i])).abs() / m.mu_hi[i].abs().max(1.0));
        }
    }

    KktResiduals {
        stationarity,
        stationarity_rel: stationarity / gscale,
        feasibility: feas,
        complementarity: comp,
    }
}

/// Least-squares multipliers over the numerically active constraints;
/// often tightens the stationarity residual by an order of magnitude,
/// which matters for the envelope gradients built on top.
fn refine_multipliers(
    e: &Eval,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    z: &DVector<f64>,
    cfg: &SqpSolver,
) -> Option<Multipliers> {
    let n = z.len();
    let ne = e.ce.len();
    let act_tol = (10.0 * cfg.feas_tol).max(1e-5);

    let mut cols: Vec<DVector<f64>> = Vec::new();
    let mut tags: Vec<(u8, usize)> = Vec::new(); // (class, index)
    for r in 0..ne {
        cols.push(e.je.row(r).transpose());
        tags.push((0, r));
    }
    for r in 0..e.ci.len() {
        if e.ci[r] <= act_tol * (1.0 + e.ci[r].abs()) {
            cols.push(e.ji.row(r).transpose());
            tags.push((1, r));
        }
    }
    for i in 0..n {
        if lo[i].is_finite() && z[i] - lo[i] <= act_tol * (1.0 + lo[i].abs()) {
            let mut c = DVector::zeros(n);
            c[i] = 1.0;
            cols.push(c);
            tags.push((2, i));
        } else if hi[i].is_finite() && hi[i] - z[i] <= act_tol * (1.0 + hi[i].abs()) {
            let mut c = DVector::zeros(n);
            c[i] = -1.0;
            cols.push(c);
            tags.push((3, i));
        }
    }
    if cols.is_empty() {
        return Some(Multipliers::zeros(ne, e.ci.len(), n));
    }

    let a = DMatrix::from_fn(n, cols.len(), |r, c| cols[c][r]);
    let svd = a.svd(true, true);
    let sol = svd.solve(&e.grad, 1e-12).ok()?;

    let mut m = Multipliers::zeros(ne, e.ci.len(), n);
    for (k, &(class, idx)) in tags.iter().enumerate() {
        let v = sol[k];
        match class {
            0 => m.nu[idx] = v,
            1 => m.lambda[idx] = v.max(0.0),
            2 => m.mu_lo[idx] = v.max(0.0),
            _ => m.mu_hi[idx] = v.max(0.0),
        }
    }
    Some(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nlp::{brute_force_value, BruteForceResult, ClosureConstraint, ClosureProblem};
    use approx::assert_relative_eq;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    fn quadratic_1d(target: f64, lo: f64, hi: f64) -> ClosureProblem {
        ClosureProblem {
            lower: dv(&[lo]),
            upper: dv(&[hi]),
            objective: Box::new(move |z| (z[0] - target).powi(2)),
            gradient: Box::new(move |z| dv(&[2.0 * (z[0] - target)])),
            eq: vec![],
            ineq: vec![],
        }
    }

    #[test]
    fn bound_active_quadratic() {
        // min (u-1)^2 on [-1, 1]: optimum at the upper bound with value 0.
        let p = quadratic_1d(1.0, -1.0, 1.0);
        let sol = solve(&p, &SqpSolver::default(), None);
        assert!(sol.converged(), "status {:?}", sol.status);
        assert_relative_eq!(sol.z[0], 1.0, epsilon = 1e-8);
        assert_relative_eq!(sol.value, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn inequality_with_multiplier_two() {
        // min (u-2)^2 s.t. u <= 1: optimum u = 1, value 1, multiplier 2.
        let p = ClosureProblem {
            lower: dv(&[f64::NEG_INFINITY]),
            upper: dv(&[f64::INFINITY]),
            objective: Box::new(|z| (z[0] - 2.0).powi(2)),
            gradient: Box::new(|z| dv(&[2.0 * (z[0] - 2.0)])),
            eq: vec![],
            ineq: vec![ClosureConstraint {
                value: Box::new(|z| 1.0 - z[0]),
                gradient: Box::new(|_| dv(&[-1.0])),
            }],
        };
        let sol = solve(&p, &SqpSolver::default(), None);
        assert!(sol.converged());
        assert_relative_eq!(sol.z[0], 1.0, epsilon = 1e-7);
        assert_relative_eq!(sol.value, 1.0, epsilon = 1e-7);
        assert_relative_eq!(sol.ineq_multipliers[0], 2.0, epsilon = 1e-6);
        assert!(sol.kkt.max_residual() <= 1e-6);
    }

    #[test]
    fn rosenbrock_with_bounds() {
        let p = ClosureProblem {
            lower: dv(&[-2.0, -2.0]),
            upper: dv(&[2.0, 2.0]),
            objective: Box::new(|z| (1.0 - z[0]).powi(2) + 100.0 * (z[1] - z[0] * z[0]).powi(2)),
            gradient: Box::new(|z| {
                dv(&[
                    -2.0 * (1.0 - z[0]) - 400.0 * z[0] * (z[1] - z[0] * z[0]),
                    200.0 * (z[1] - z[0] * z[0]),
                ])
            }),
            eq: vec![],
            ineq: vec![],
        };
        let sol = solve(&p, &SqpSolver::default(), None);
        assert!(sol.converged(), "status {:?} kkt {:?}", sol.status, sol.kkt);
        assert_relative_eq!(sol.z[0], 1.0, epsilon = 1e-5);
        assert_relative_eq!(sol.z[1], 1.0, epsilon = 1e-5);
    }

    #[test]
    fn nonlinear_equality() {
        // min x + y s.t. x^2 + y^2 = 1: optimum at (-1/sqrt2, -1/sqrt2).
        let p = ClosureProblem {
            lower: dv(&[-2.0, -2.0]),
            upper: dv(&[2.0, 2.0]),
            objective: Box::new(|z| z[0] + z[1]),
            gradient: Box::new(|_| dv(&[1.0, 1.0])),
            eq: vec![ClosureConstraint {
                value: Box::new(|z| z[0] * z[0] + z[1] * z[1] - 1.0),
                gradient: Box::new(|z| dv(&[2.0 * z[0], 2.0 * z[1]])),
            }],
            ineq: vec![],
        };
        let sol = solve(&p, &SqpSolver::default(), Some(&dv(&[0.5, -0.8])));
        assert!(sol.converged(), "status {:?} kkt {:?}", sol.status, sol.kkt);
        let r = 1.0 / 2.0f64.sqrt();
        assert_relative_eq!(sol.z[0], -r, epsilon = 1e-6);
        assert_relative_eq!(sol.z[1], -r, epsilon = 1e-6);
    }

    #[test]
    fn nan_callback_is_reported() {
        let p = ClosureProblem {
            lower: dv(&[-1.0]),
            upper: dv(&[1.0]),
            objective: Box::new(|_| f64::NAN),
            gradient: Box::new(|_| dv(&[f64::NAN])),
            eq: vec![],
            ineq: vec![],
        };
        let sol = solve(&p, &SqpSolver::default(), None);
        assert_eq!(sol.status, SolveStatus::NanInCallback);
    }

    #[test]
    fn inconsistent_bounds_reported() {
        let p = quadratic_1d(0.0, 1.0, -1.0);
        let sol = solve(&p, &SqpSolver::default(), None);
        assert_eq!(sol.status, SolveStatus::InconsistentBounds);
    }

    #[test]
    fn matches_brute_force_on_1d_quadratic() {
        let p = quadratic_1d(0.3, -1.0, 1.0);
        let sol = solve(&p, &SqpSolver::default(), None);
        let grid = 101;
        let step = 2.0 / (grid - 1) as f64;
        match brute_force_value(&p, grid, 1e-9).unwrap() {
            BruteForceResult::Value(v) => {
                assert!(sol.value <= v + step * step + 1e-12);
            }
            BruteForceResult::Infeasible => panic!("grid should be feasible"),
        }
    }

    #[test]
    fn brute_force_infeasible_grid() {
        // Inequality x >= 2 cannot hold inside the box [-1, 1].
        let p = ClosureProblem {
            lower: dv(&[-1.0]),
            upper: dv(&[1.0]),
            objective: Box::new(|z| z[0]),
            gradient: Box::new(|_| dv(&[1.0])),
            eq: vec![],
            ineq: vec![ClosureConstraint {
                value: Box::new(|z| z[0] - 2.0),
                gradient: Box::new(|_| dv(&[1.0])),
            }],
        };
        assert_eq!(brute_force_value(&p, 11, 1e-9).unwrap(), BruteForceResult::Infeasible);
    }

    #[test]
    fn brute_force_linear_on_box_hits_vertex() {
        let p = ClosureProblem {
            lower: dv(&[-1.0, -2.0]),
            upper: dv(&[3.0, 5.0]),
            objective: Box::new(|z| 2.0 * z[0] - z[1]),
            gradient: Box::new(|_| dv(&[2.0, -1.0])),
            eq: vec![],
            ineq: vec![],
        };
        match brute_force_value(&p, 21, 1e-9).unwrap() {
            BruteForceResult::Value(v) => assert_relative_eq!(v, 2.0 * -1.0 - 5.0),
            _ => panic!(),
        }
    }

    #[test]
    fn brute_force_rejects_high_dimension() {
        let p = ClosureProblem {
            lower: dv(&[0.0; 4]),
            upper: dv(&[1.0; 4]),
            objective: Box::new(|_| 0.0),
            gradient: Box::new(|_| dv(&[0.0; 4])),
            eq: vec![],
            ineq: vec![],
        };
        assert!(brute_force_value(&p, 5, 1e-9).is_err());
    }

    #[test]
    fn warm_and_cold_agree_on_convex_instance() {
        let p = ClosureProblem {
            lower: dv(&[-5.0, -5.0]),
            upper: dv(&[5.0, 5.0]),
            objective: Box::new(|z| (z[0] - 1.0).powi(2) + 2.0 * (z[1] + 0.5).powi(2)),
            gradient: Box::new(|z| dv(&[2.0 * (z[0] - 1.0), 4.0 * (z[1] + 0.5)])),
            eq: vec![],
            ineq: vec![ClosureConstraint {
                value: Box::new(|z| z[0] + z[1]),
                gradient: Box::new(|_| dv(&[1.0, 1.0])),
            }],
        };
        let cold = solve(&p, &SqpSolver::default(), None);
        let warm = solve(&p, &SqpSolver::default(), Some(&dv(&[4.0, -3.0])));
        assert!(cold.converged() && warm.converged());
        assert!((cold.value - warm.value).abs() <= 1e-6);
    }

    #[test]
    fn deterministic_iterates() {
        let p = ClosureProblem {
            lower: dv(&[-2.0, -2.0]),
            upper: dv(&[2.0, 2.0]),
            objective: Box::new(|z| (1.0 - z[0]).powi(2) + 100.0 * (z[1] - z[0] * z[0]).powi(2)),
            gradient: Box::new(|z| {
                dv(&[
                    -2.0 * (1.0 - z[0]) - 400.0 * z[0] * (z[1] - z[0] * z[0]),
                    200.0 * (z[1] - z[0] * z[0]),
                ])
            }),
            eq: vec![],
            ineq: vec![],
        };
        let mut t1 = Vec::new();
        let mut t2 = Vec::new();
        let s1 = solve_with_trace(&p, &SqpSolver::default(), None, Some(&mut t1));
        let s2 = solve_with_trace(&p, &SqpSolver::default(), None, Some(&mut t2));
        assert_eq!(t1, t2, "iteration traces must be byte-identical");
        assert_eq!(s1.z, s2.z);
    }
}
