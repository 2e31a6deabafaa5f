//! Barrier functions, discrete CBF constraint residuals and the
//! optimal-decay parameter blocks.

use nalgebra::{DMatrix, Vector2};
use serde::{Deserialize, Serialize};

use crate::env::{Obstacle, StateVec};
use crate::error::{Error, Result};

/// Strict lower bound used to close the open constraint `omega > 0`.
pub const OMEGA_EPS: f64 = 1e-6;

/// Signed squared-distance barrier of a circular obstacle:
/// positive outside, zero on the boundary, negative inside.
#[derive(Debug, Clone, Copy)]
pub struct BarrierFn {
    pub obstacle: Obstacle,
}

impl BarrierFn {
    pub fn new(obstacle: Obstacle) -> Self {
        Self { obstacle }
    }

    /// `h(s, t) = (px - cx(t))^2 + (py - cy(t))^2 - r^2`.
    pub fn eval(&self, s: &StateVec, t: usize) -> f64 {
        let (cx, cy) = self.obstacle.center_at(t);
        let dx = s.px - cx;
        let dy = s.py - cy;
        dx * dx + dy * dy - self.obstacle.radius * self.obstacle.radius
    }

    /// Gradient of `h` with respect to (px, py): `2 (p - c(t))`.
    pub fn grad_position(&self, s: &StateVec, t: usize) -> Vector2<f64> {
        let (cx, cy) = self.obstacle.center_at(t);
        Vector2::new(2.0 * (s.px - cx), 2.0 * (s.py - cy))
    }
}

/// Discrete CBF constraint residual
/// `h(x_{k+1}, t+1) - (1 - decay) * h(x_k, t) + slack`;
/// the constraint is satisfied iff the residual is nonnegative.
///
/// `t` is the absolute step index at which `x_k` lives, so moving
/// obstacles are evaluated against their forecast centers.
pub fn cbf_residual(
    b: &BarrierFn,
    x_k: &StateVec,
    x_k1: &StateVec,
    decay: f64,
    slack: f64,
    t: usize,
) -> f64 {
    debug_assert!(slack >= 0.0);
    b.eval(x_k1, t + 1) - (1.0 - decay) * b.eval(x_k, t) + slack
}

/// Learnable reference decays and penalty weights of the
/// optimal-decay CBF, one pair per (prediction step, obstacle).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayParamsLod {
    /// N x O reference decay rates.
    pub omega_bar: DMatrix<f64>,
    /// N x O nonnegative penalty weights.
    pub p_omega: DMatrix<f64>,
}

impl DecayParamsLod {
    pub fn constant(horizon: usize, num_obstacles: usize, omega_bar: f64, p_omega: f64) -> Self {
        Self {
            omega_bar: DMatrix::from_element(horizon, num_obstacles, omega_bar),
            p_omega: DMatrix::from_element(horizon, num_obstacles, p_omega),
        }
    }

    pub fn horizon(&self) -> usize {
        self.omega_bar.nrows()
    }

    pub fn num_obstacles(&self) -> usize {
        self.omega_bar.ncols()
    }
}

/// Decay decision variables of the optimal-decay CBF, `omega in (0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayVarsLod {
    pub omega: DMatrix<f64>,
}

/// Penalty `sum_k sum_i P_{k,i} (omega_{k,i} - omega_bar_{k,i})^2`.
pub fn decay_penalty(params: &DecayParamsLod, vars: &DecayVarsLod) -> Result<f64> {
    if params.omega_bar.shape() != vars.omega.shape() {
        return Err(Error::DimensionMismatch(format!(
            "decay params {:?} vs vars {:?}",
            params.omega_bar.shape(),
            vars.omega.shape()
        )));
    }
    let mut total = 0.0;
    for k in 0..params.omega_bar.nrows() {
        for i in 0..params.omega_bar.ncols() {
            let d = vars.omega[(k, i)] - params.omega_bar[(k, i)];
            total += params.p_omega[(k, i)] * d * d;
        }
    }
    Ok(total)
}
