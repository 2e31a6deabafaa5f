//! The three MPC value-function formulations (optimal-decay, feedforward
//! and recurrent decay rates) instantiated as dense NLPs, plus policy
//! extraction with warm-start bookkeeping.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, Matrix4x2, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::barrier::{DecayParamsLod, OMEGA_EPS};
use crate::env::{ActionVec, StateVec, World};
use crate::error::{Error, Result};
use crate::neural::{
    mlp_forward_cached, mlp_vjp, ForwardCache, MlpParams, ParamGrads, RnnHiddenState, RnnParams,
    RnnStep,
};
use crate::nlp::{self, NlpProblem, NlpSolution, ParametricNlp, SqpSolver};

/// Which class-K parametrization the controller carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Lod,
    Nn,
    Rnn,
}

/// Static description of one MPC formulation.
#[derive(Debug, Clone)]
pub struct MpcConfig {
    pub horizon: usize,
    pub variant: Variant,
    /// Slack (and soft state-box) penalty weight.
    pub w_mpc: f64,
    pub q_diag: [f64; 4],
    pub r_diag: [f64; 2],
    /// Discount applied inside the MPC objective; 1 recovers the
    /// undiscounted formulation used in the experiments.
    pub zeta_mpc: f64,
    pub state_bound: f64,
    pub action_bound: f64,
}

impl MpcConfig {
    pub fn new(horizon: usize, variant: Variant) -> Self {
        Self {
            horizon,
            variant,
            w_mpc: 1e4,
            q_diag: [10.0; 4],
            r_diag: [1.0; 2],
            zeta_mpc: 1.0,
            state_bound: 5.0,
            action_bound: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if self.w_mpc <= 0.0 {
            return Err(Error::Config("w_mpc must be positive".into()));
        }
        Ok(())
    }
}

/// Variant-specific learnable block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ThetaBlock {
    Lod(DecayParamsLod),
    Nn(MlpParams),
    Rnn(RnnParams),
}

/// All learnable parameters: the diagonal terminal weight plus the
/// variant block, with per-entry box bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaVector {
    pub f_diag: [f64; 4],
    pub block: ThetaBlock,
    /// Lower bound keeping the terminal weight positive definite.
    pub f_floor: f64,
    /// Box for the reference decays (optimal-decay variant).
    pub omega_bar_bounds: (f64, f64),
}

impl ThetaVector {
    pub fn lod(f_init: [f64; 4], params: DecayParamsLod) -> Self {
        Self {
            f_diag: f_init,
            block: ThetaBlock::Lod(params),
            f_floor: 1e-3,
            omega_bar_bounds: (OMEGA_EPS, 1000.0),
        }
    }

    pub fn nn(f_init: [f64; 4], params: MlpParams) -> Self {
        Self {
            f_diag: f_init,
            block: ThetaBlock::Nn(params),
            f_floor: 1e-3,
            omega_bar_bounds: (OMEGA_EPS, 1000.0),
        }
    }

    pub fn rnn(f_init: [f64; 4], params: RnnParams) -> Self {
        Self {
            f_diag: f_init,
            block: ThetaBlock::Rnn(params),
            f_floor: 1e-3,
            omega_bar_bounds: (OMEGA_EPS, 1000.0),
        }
    }

    pub fn variant(&self) -> Variant {
        match self.block {
            ThetaBlock::Lod(_) => Variant::Lod,
            ThetaBlock::Nn(_) => Variant::Nn,
            ThetaBlock::Rnn(_) => Variant::Rnn,
        }
    }

    pub fn dim(&self) -> usize {
        4 + match &self.block {
            ThetaBlock::Lod(p) => 2 * p.omega_bar.len(),
            ThetaBlock::Nn(p) => p.num_params(),
            ThetaBlock::Rnn(p) => p.num_params(),
        }
    }

    /// Canonical flat layout: terminal diagonal first, then the block.
    pub fn flatten(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.dim());
        out.extend_from_slice(&self.f_diag);
        match &self.block {
            ThetaBlock::Lod(p) => {
                for k in 0..p.omega_bar.nrows() {
                    for i in 0..p.omega_bar.ncols() {
                        out.push(p.omega_bar[(k, i)]);
                    }
                }
                for k in 0..p.p_omega.nrows() {
                    for i in 0..p.p_omega.ncols() {
                        out.push(p.p_omega[(k, i)]);
                    }
                }
            }
            ThetaBlock::Nn(p) => p.flatten_into(&mut out),
            ThetaBlock::Rnn(p) => p.flatten_into(&mut out),
        }
        DVector::from_vec(out)
    }

    pub fn assign_from_flat(&mut self, flat: &DVector<f64>) {
        debug_assert_eq!(flat.len(), self.dim());
        for j in 0..4 {
            self.f_diag[j] = flat[j];
        }
        let rest = flat.as_slice();
        match &mut self.block {
            ThetaBlock::Lod(p) => {
                let mut idx = 4;
                for k in 0..p.omega_bar.nrows() {
                    for i in 0..p.omega_bar.ncols() {
                        p.omega_bar[(k, i)] = rest[idx];
                        idx += 1;
                    }
                }
                for k in 0..p.p_omega.nrows() {
                    for i in 0..p.p_omega.ncols() {
                        p.p_omega[(k, i)] = rest[idx];
                        idx += 1;
                    }
                }
            }
            ThetaBlock::Nn(p) => {
                p.assign_from_flat(&rest[4..]);
            }
            ThetaBlock::Rnn(p) => {
                p.assign_from_flat(&rest[4..]);
            }
        }
    }

    /// Per-entry box used by the projected parameter update.
    pub fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let n = self.dim();
        let mut lo = DVector::from_element(n, f64::NEG_INFINITY);
        let mut hi = DVector::from_element(n, f64::INFINITY);
        for j in 0..4 {
            lo[j] = self.f_floor;
        }
        if let ThetaBlock::Lod(p) = &self.block {
            let m = p.omega_bar.len();
            for idx in 0..m {
                lo[4 + idx] = self.omega_bar_bounds.0;
                hi[4 + idx] = self.omega_bar_bounds.1;
            }
            for idx in 0..m {
                lo[4 + m + idx] = 0.0;
            }
        }
        (lo, hi)
    }

    pub fn check_consistent(&self, horizon: usize, num_obstacles: usize) -> Result<()> {
        match &self.block {
            ThetaBlock::Lod(p) => {
                if p.horizon() != horizon || p.num_obstacles() != num_obstacles {
                    return Err(Error::DimensionMismatch(format!(
                        "optimal-decay block is {}x{}, problem needs {}x{}",
                        p.horizon(),
                        p.num_obstacles(),
                        horizon,
                        num_obstacles
                    )));
                }
            }
            ThetaBlock::Nn(p) => {
                p.check_shapes()?;
                let want = 4 + 2 * num_obstacles;
                if p.input_dim() != want || p.output_dim() != num_obstacles {
                    return Err(Error::DimensionMismatch(format!(
                        "network is {}->{}, problem needs {}->{}",
                        p.input_dim(),
                        p.output_dim(),
                        want,
                        num_obstacles
                    )));
                }
            }
            ThetaBlock::Rnn(p) => {
                p.check_shapes()?;
                let want = 4 + 2 * num_obstacles;
                if p.mlp.input_dim() != want || p.mlp.output_dim() != num_obstacles {
                    return Err(Error::DimensionMismatch(format!(
                        "network is {}->{}, problem needs {}->{}",
                        p.mlp.input_dim(),
                        p.mlp.output_dim(),
                        want,
                        num_obstacles
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Controller-side state that persists across solves: nothing for the
/// scalar variants, the hidden-state carry for the recurrent one.
#[derive(Debug, Clone)]
pub enum VariantState {
    None,
    Rnn(RnnHiddenState),
}

impl VariantState {
    fn rnn_state(&self) -> Option<&RnnHiddenState> {
        match self {
            VariantState::Rnn(h) => Some(h),
            VariantState::None => None,
        }
    }
}

/// One MPC instance, fixed at a state and time, exposed as a dense NLP.
///
/// Decision layout: inputs `u_0..u_{N-1}`, then predicted states
/// `x_1..x_N` (the initial state is substituted), then slacks (N x O,
/// row-major), then for the optimal-decay variant the decay variables
/// (N x O). The state box is softened by a one-sided quadratic penalty
/// with weight `w_mpc` rather than extra slack variables, keeping the
/// decision blocks as listed.
pub struct MpcProblem {
    cfg: MpcConfig,
    theta: ThetaVector,
    a_mat: Matrix4<f64>,
    b_mat: Matrix4x2<f64>,
    q: Matrix4<f64>,
    r: Matrix2<f64>,
    s0: Vector4<f64>,
    num_obs: usize,
    /// Obstacle centers forecast over the horizon: `centers[k][i]` at t0+k.
    centers: Vec<Vec<(f64, f64)>>,
    radius2: Vec<f64>,
    moving: Vec<bool>,
    fixed_action: Option<Vector2<f64>>,
    xi: Option<Vector2<f64>>,
    rnn_init: Option<RnnHiddenState>,
    zpow: Vec<f64>,
    eq_jac: DMatrix<f64>,
}

impl MpcProblem {
    fn build(
        cfg: &MpcConfig,
        theta: &ThetaVector,
        world: &World,
        s: &StateVec,
        t: usize,
        vstate: &VariantState,
        fixed_action: Option<ActionVec>,
        xi: Option<ActionVec>,
    ) -> Result<MpcProblem> {
        cfg.validate()?;
        if !s.is_finite() {
            return Err(Error::NonFinite("initial state"));
        }
        let num_obs = world.num_obstacles();
        theta.check_consistent(cfg.horizon, num_obs)?;
        if theta.variant() != cfg.variant {
            return Err(Error::Config("theta block does not match configured variant".into()));
        }
        let rnn_init = match (cfg.variant, vstate.rnn_state()) {
            (Variant::Rnn, Some(h)) => {
                if let ThetaBlock::Rnn(p) = &theta.block {
                    if h.layers.len() != p.mlp.num_hidden()
                        || h.layers
                            .iter()
                            .zip(p.mlp.hidden_widths())
                            .any(|(q, w)| q.len() != w)
                    {
                        return Err(Error::DimensionMismatch("rnn hidden state".into()));
                    }
                }
                Some(h.clone())
            }
            (Variant::Rnn, None) => return Err(Error::MissingRnnState),
            _ => None,
        };
        if let Some(a) = fixed_action {
            if !a.is_finite() {
                return Err(Error::NonFinite("pinned action"));
            }
            if a.max_norm() > cfg.action_bound + 1e-12 {
                return Err(Error::ActionOutOfBounds(a.ax, a.ay, cfg.action_bound));
            }
        }
        if let Some(x) = xi {
            if !x.is_finite() {
                return Err(Error::NonFinite("exploration perturbation"));
            }
        }

        let n = cfg.horizon;
        let mut centers = Vec::with_capacity(n + 1);
        for k in 0..=n {
            centers.push(world.obstacles.iter().map(|o| o.center_at(t + k)).collect());
        }
        let radius2 = world.obstacles.iter().map(|o| o.radius * o.radius).collect();
        let moving = world.obstacles.iter().map(|o| o.is_moving()).collect();
        let mut zpow = Vec::with_capacity(n + 1);
        let mut acc = 1.0;
        for _ in 0..=n {
            zpow.push(acc);
            acc *= cfg.zeta_mpc;
        }

        let mut problem = MpcProblem {
            cfg: cfg.clone(),
            theta: theta.clone(),
            a_mat: *world.plant.a_matrix(),
            b_mat: *world.plant.b_matrix(),
            q: Matrix4::from_diagonal(&Vector4::from(cfg.q_diag)),
            r: Matrix2::from_diagonal(&Vector2::from(cfg.r_diag)),
            s0: s.as_vector(),
            num_obs,
            centers,
            radius2,
            moving,
            fixed_action: fixed_action.map(|a| a.as_vector()),
            xi: xi.map(|x| x.as_vector()),
            rnn_init,
            zpow,
            eq_jac: DMatrix::zeros(0, 0),
        };
        problem.eq_jac = problem.build_eq_jacobian();
        Ok(problem)
    }

    pub fn config(&self) -> &MpcConfig {
        &self.cfg
    }

    pub fn theta(&self) -> &ThetaVector {
        &self.theta
    }

    fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    fn is_lod(&self) -> bool {
        matches!(self.cfg.variant, Variant::Lod)
    }

    // Decision-vector layout.
    fn u_idx(&self, k: usize) -> usize {
        2 * k
    }

    fn x_idx(&self, k: usize) -> usize {
        debug_assert!((1..=self.horizon()).contains(&k));
        2 * self.horizon() + 4 * (k - 1)
    }

    fn sigma_idx(&self, k: usize, i: usize) -> usize {
        6 * self.horizon() + k * self.num_obs + i
    }

    fn omega_idx(&self, k: usize, i: usize) -> usize {
        debug_assert!(self.is_lod());
        6 * self.horizon() + self.horizon() * self.num_obs + k * self.num_obs + i
    }

    fn state_at(&self, z: &DVector<f64>, k: usize) -> Vector4<f64> {
        if k == 0 {
            self.s0
        } else {
            let off = self.x_idx(k);
            Vector4::new(z[off], z[off + 1], z[off + 2], z[off + 3])
        }
    }

    fn input_at(&self, z: &DVector<f64>, k: usize) -> Vector2<f64> {
        let off = self.u_idx(k);
        Vector2::new(z[off], z[off + 1])
    }

    fn h_val(&self, x: &Vector4<f64>, k: usize, i: usize) -> f64 {
        let (cx, cy) = self.centers[k][i];
        let dx = x[0] - cx;
        let dy = x[1] - cy;
        dx * dx + dy * dy - self.radius2[i]
    }

    /// Gradient of the barrier w.r.t. the full state (velocity entries zero).
    fn h_grad(&self, x: &Vector4<f64>, k: usize, i: usize) -> Vector4<f64> {
        let (cx, cy) = self.centers[k][i];
        Vector4::new(2.0 * (x[0] - cx), 2.0 * (x[1] - cy), 0.0, 0.0)
    }

    fn context(&self, x: &Vector4<f64>, k: usize, i: usize) -> f64 {
        if self.moving[i] {
            x[0] - self.centers[k][i].0
        } else {
            0.0
        }
    }

    fn net_input(&self, x: &Vector4<f64>, k: usize) -> DVector<f64> {
        let o = self.num_obs;
        let mut v = DVector::zeros(4 + 2 * o);
        for j in 0..4 {
            v[j] = x[j];
        }
        for i in 0..o {
            v[4 + i] = self.h_val(x, k, i);
            v[4 + o + i] = self.context(x, k, i);
        }
        v
    }

    /// d(net input at step k)/d(x_k), a (4+2O) x 4 matrix.
    fn net_input_state_jac(&self, x: &Vector4<f64>, k: usize) -> DMatrix<f64> {
        let o = self.num_obs;
        let mut jac = DMatrix::zeros(4 + 2 * o, 4);
        for j in 0..4 {
            jac[(j, j)] = 1.0;
        }
        for i in 0..o {
            let g = self.h_grad(x, k, i);
            for j in 0..4 {
                jac[(4 + i, j)] = g[j];
            }
            if self.moving[i] {
                jac[(4 + o + i, 0)] = 1.0;
            }
        }
        jac
    }

    /// Forward information shared by objective/constraint evaluations.
    fn unroll(&self, z: &DVector<f64>) -> Horizon {
        let n = self.horizon();
        let o = self.num_obs;
        let states: Vec<Vector4<f64>> = (0..=n).map(|k| self.state_at(z, k)).collect();
        let mut decays = DMatrix::zeros(n, o);
        let mut mlp_caches = Vec::new();
        let mut rnn_steps = Vec::new();
        match &self.theta.block {
            ThetaBlock::Lod(_) => {
                for k in 0..n {
                    for i in 0..o {
                        decays[(k, i)] = z[self.omega_idx(k, i)];
                    }
                }
            }
            ThetaBlock::Nn(p) => {
                for (k, x) in states.iter().enumerate().take(n) {
                    let cache = mlp_forward_cached(p, &self.net_input(x, k));
                    for i in 0..o {
                        decays[(k, i)] = cache.output[i];
                    }
                    mlp_caches.push(cache);
                }
            }
            ThetaBlock::Rnn(p) => {
                let mut q = self.rnn_init.clone().expect("validated at build");
                for (k, x) in states.iter().enumerate().take(n) {
                    let step = RnnStep::forward(p, &self.net_input(x, k), &q);
                    q = step.q_new();
                    for i in 0..o {
                        decays[(k, i)] = step.output()[i];
                    }
                    rnn_steps.push(step);
                }
            }
        }
        Horizon { states, decays, mlp_caches, rnn_steps }
    }

    fn hinge_terms(&self, x: &Vector4<f64>) -> f64 {
        let b = self.cfg.state_bound;
        let mut acc = 0.0;
        for j in 0..4 {
            let over = (x[j] - b).max(0.0);
            let under = (-b - x[j]).max(0.0);
            acc += over * over + under * under;
        }
        acc
    }

    fn hinge_grad(&self, x: &Vector4<f64>) -> Vector4<f64> {
        let b = self.cfg.state_bound;
        Vector4::from_fn(|j, _| {
            2.0 * (x[j] - b).max(0.0) - 2.0 * (-b - x[j]).max(0.0)
        })
    }

    fn build_eq_jacobian(&self) -> DMatrix<f64> {
        let n = self.horizon();
        let rows = 4 * n + if self.fixed_action.is_some() { 2 } else { 0 };
        let mut jac = DMatrix::zeros(rows, self.num_vars());
        for k in 0..n {
            let row = 4 * k;
            let xo = self.x_idx(k + 1);
            for j in 0..4 {
                jac[(row + j, xo + j)] = 1.0;
            }
            if k >= 1 {
                let xprev = self.x_idx(k);
                for rj in 0..4 {
                    for cj in 0..4 {
                        jac[(row + rj, xprev + cj)] = -self.a_mat[(rj, cj)];
                    }
                }
            }
            let uo = self.u_idx(k);
            for rj in 0..4 {
                for cj in 0..2 {
                    jac[(row + rj, uo + cj)] = -self.b_mat[(rj, cj)];
                }
            }
        }
        if self.fixed_action.is_some() {
            let row = 4 * n;
            jac[(row, self.u_idx(0))] = 1.0;
            jac[(row + 1, self.u_idx(0) + 1)] = 1.0;
        }
        jac
    }

    /// Spec-described cold start: zero inputs, states rolled out under
    /// zero input, slacks lifted to the violation magnitude, decay
    /// variables at the clipped reference.
    pub fn cold_start(&self) -> DVector<f64> {
        let n = self.horizon();
        let mut z = DVector::zeros(self.num_vars());
        if let Some(a) = self.fixed_action {
            z[self.u_idx(0)] = a[0];
            z[self.u_idx(0) + 1] = a[1];
        }
        let mut x = self.s0;
        for k in 1..=n {
            let u = self.input_at(&z, k - 1);
            x = self.a_mat * x + self.b_mat * u;
            let off = self.x_idx(k);
            for j in 0..4 {
                z[off + j] = x[j];
            }
        }
        if let ThetaBlock::Lod(p) = &self.theta.block {
            for k in 0..n {
                for i in 0..self.num_obs {
                    z[self.omega_idx(k, i)] =
                        p.omega_bar[(k, i)].clamp(OMEGA_EPS, 1.0);
                }
            }
        }
        let resid = self.ineq_constraints(&z);
        for k in 0..n {
            for i in 0..self.num_obs {
                let r = resid[k * self.num_obs + i];
                if r < 0.0 {
                    z[self.sigma_idx(k, i)] = -r;
                }
            }
        }
        z
    }

    /// Receding-horizon shift of a previous solution, used to warm-start
    /// the next solve one step later.
    pub fn shift_warm(&self, prev: &DVector<f64>) -> DVector<f64> {
        let n = self.horizon();
        let o = self.num_obs;
        if prev.len() != self.num_vars() {
            return self.cold_start();
        }
        let mut z = prev.clone();
        for k in 0..n.saturating_sub(1) {
            let (src, dst) = (self.u_idx(k + 1), self.u_idx(k));
            z[dst] = prev[src];
            z[dst + 1] = prev[src + 1];
            for i in 0..o {
                z[self.sigma_idx(k, i)] = prev[self.sigma_idx(k + 1, i)];
            }
            if self.is_lod() {
                for i in 0..o {
                    z[self.omega_idx(k, i)] = prev[self.omega_idx(k + 1, i)];
                }
            }
        }
        if let Some(a) = self.fixed_action {
            z[self.u_idx(0)] = a[0];
            z[self.u_idx(0) + 1] = a[1];
        }
        // Re-roll the states from the shifted inputs.
        let mut x = self.s0;
        for k in 1..=n {
            let u = self.input_at(&z, k - 1);
            x = self.a_mat * x + self.b_mat * u;
            let off = self.x_idx(k);
            for j in 0..4 {
                z[off + j] = x[j];
            }
        }
        // Lift slacks onto the violated constraints.
        for k in 0..n {
            for i in 0..o {
                z[self.sigma_idx(k, i)] = 0.0;
            }
        }
        let resid = self.ineq_constraints(&z);
        for k in 0..n {
            for i in 0..o {
                let r = resid[k * o + i];
                if r < 0.0 {
                    z[self.sigma_idx(k, i)] = -r;
                }
            }
        }
        z
    }

    /// Hidden-state carry produced at the first prediction step; it only
    /// depends on the (fixed) initial state, so it is available without
    /// solving.
    pub fn rnn_carry(&self) -> Option<RnnHiddenState> {
        match (&self.theta.block, &self.rnn_init) {
            (ThetaBlock::Rnn(p), Some(q)) => {
                let step = RnnStep::forward(p, &self.net_input(&self.s0, 0), q);
                Some(step.q_new())
            }
            _ => None,
        }
    }
}

struct Horizon {
    states: Vec<Vector4<f64>>,
    decays: DMatrix<f64>,
    mlp_caches: Vec<ForwardCache>,
    rnn_steps: Vec<RnnStep>,
}

impl NlpProblem for MpcProblem {
    fn num_vars(&self) -> usize {
        let base = 6 * self.horizon() + self.horizon() * self.num_obs;
        if self.is_lod() {
            base + self.horizon() * self.num_obs
        } else {
            base
        }
    }

    fn num_eq(&self) -> usize {
        4 * self.horizon() + if self.fixed_action.is_some() { 2 } else { 0 }
    }

    fn num_ineq(&self) -> usize {
        self.horizon() * self.num_obs
    }

    fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let n = self.num_vars();
        let mut lo = DVector::from_element(n, f64::NEG_INFINITY);
        let mut hi = DVector::from_element(n, f64::INFINITY);
        for k in 0..self.horizon() {
            let off = self.u_idx(k);
            lo[off] = -self.cfg.action_bound;
            lo[off + 1] = -self.cfg.action_bound;
            hi[off] = self.cfg.action_bound;
            hi[off + 1] = self.cfg.action_bound;
        }
        for k in 0..self.horizon() {
            for i in 0..self.num_obs {
                lo[self.sigma_idx(k, i)] = 0.0;
            }
        }
        if self.is_lod() {
            for k in 0..self.horizon() {
                for i in 0..self.num_obs {
                    lo[self.omega_idx(k, i)] = OMEGA_EPS;
                    hi[self.omega_idx(k, i)] = 1.0;
                }
            }
        }
        (lo, hi)
    }

    fn objective(&self, z: &DVector<f64>) -> f64 {
        let n = self.horizon();
        let hz = self.unroll(z);
        let mut total = 0.0;
        for k in 0..n {
            let x = &hz.states[k];
            let u = self.input_at(z, k);
            total += self.zpow[k]
                * ((x.transpose() * self.q * x)[0] + (u.transpose() * self.r * u)[0]);
        }
        let xn = &hz.states[n];
        let f_mat = Vector4::from(self.theta.f_diag);
        total += self.zpow[n] * (0..4).map(|j| f_mat[j] * xn[j] * xn[j]).sum::<f64>();
        for k in 0..n {
            for i in 0..self.num_obs {
                total += self.zpow[k] * self.cfg.w_mpc * z[self.sigma_idx(k, i)];
            }
        }
        for k in 1..=n {
            total += self.zpow[k] * self.cfg.w_mpc * self.hinge_terms(&hz.states[k]);
        }
        if let ThetaBlock::Lod(p) = &self.theta.block {
            for k in 0..n {
                for i in 0..self.num_obs {
                    let d = z[self.omega_idx(k, i)] - p.omega_bar[(k, i)];
                    total += p.p_omega[(k, i)] * d * d;
                }
            }
        }
        if let Some(xi) = self.xi {
            let u0 = self.input_at(z, 0);
            total += xi.dot(&u0);
        }
        total
    }

    fn objective_grad(&self, z: &DVector<f64>) -> DVector<f64> {
        let n = self.horizon();
        let hz = self.unroll(z);
        let mut g = DVector::zeros(self.num_vars());
        for k in 0..n {
            let u = self.input_at(z, k);
            let gu = 2.0 * self.zpow[k] * self.r * u;
            let off = self.u_idx(k);
            g[off] += gu[0];
            g[off + 1] += gu[1];
        }
        for k in 1..n {
            let x = &hz.states[k];
            let gx = 2.0 * self.zpow[k] * self.q * x
                + self.zpow[k] * self.cfg.w_mpc * self.hinge_grad(x);
            let off = self.x_idx(k);
            for j in 0..4 {
                g[off + j] += gx[j];
            }
        }
        let xn = &hz.states[n];
        let off = self.x_idx(n);
        let hinge_n = self.hinge_grad(xn);
        for j in 0..4 {
            g[off + j] += 2.0 * self.zpow[n] * self.theta.f_diag[j] * xn[j]
                + self.zpow[n] * self.cfg.w_mpc * hinge_n[j];
        }
        for k in 0..n {
            for i in 0..self.num_obs {
                g[self.sigma_idx(k, i)] += self.zpow[k] * self.cfg.w_mpc;
            }
        }
        if let ThetaBlock::Lod(p) = &self.theta.block {
            for k in 0..n {
                for i in 0..self.num_obs {
                    let idx = self.omega_idx(k, i);
                    g[idx] += 2.0 * p.p_omega[(k, i)] * (z[idx] - p.omega_bar[(k, i)]);
                }
            }
        }
        if let Some(xi) = self.xi {
            g[self.u_idx(0)] += xi[0];
            g[self.u_idx(0) + 1] += xi[1];
        }
        g
    }

    fn eq_constraints(&self, z: &DVector<f64>) -> DVector<f64> {
        let n = self.horizon();
        let mut out = DVector::zeros(self.num_eq());
        let mut x_prev = self.s0;
        for k in 0..n {
            let u = self.input_at(z, k);
            let x_next = self.state_at(z, k + 1);
            let resid = x_next - self.a_mat * x_prev - self.b_mat * u;
            for j in 0..4 {
                out[4 * k + j] = resid[j];
            }
            x_prev = x_next;
        }
        if let Some(a) = self.fixed_action {
            let u0 = self.input_at(z, 0);
            out[4 * n] = u0[0] - a[0];
            out[4 * n + 1] = u0[1] - a[1];
        }
        out
    }

    fn eq_jacobian(&self, _z: &DVector<f64>) -> DMatrix<f64> {
        self.eq_jac.clone()
    }

    fn ineq_constraints(&self, z: &DVector<f64>) -> DVector<f64> {
        let n = self.horizon();
        let o = self.num_obs;
        let hz = self.unroll(z);
        let mut out = DVector::zeros(n * o);
        for k in 0..n {
            for i in 0..o {
                let h_next = self.h_val(&hz.states[k + 1], k + 1, i);
                let h_cur = self.h_val(&hz.states[k], k, i);
                let decay = hz.decays[(k, i)];
                out[k * o + i] =
                    h_next - (1.0 - decay) * h_cur + z[self.sigma_idx(k, i)];
            }
        }
        out
    }

    fn ineq_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let n = self.horizon();
        let o = self.num_obs;
        let hz = self.unroll(z);
        let mut jac = DMatrix::zeros(n * o, self.num_vars());

        // Decay-rate sensitivities to the predicted states.
        // For the feedforward net, gamma_{k,i} depends on x_k only; for
        // the recurrent net it depends on x_1..x_k through the hidden
        // chain, handled by forward-mode accumulation below.
        let mut decay_state_jac: Vec<DMatrix<f64>> = Vec::new();
        match &self.theta.block {
            ThetaBlock::Lod(_) => {}
            ThetaBlock::Nn(p) => {
                for k in 0..n {
                    let mut dj = DMatrix::zeros(o, 4 * n);
                    if k >= 1 {
                        let cache = &hz.mlp_caches[k];
                        let in_jac = crate::neural::mlp_input_jacobian(p, &cache.input);
                        let dz_dx = self.net_input_state_jac(&hz.states[k], k);
                        let local = in_jac * dz_dx; // o x 4
                        let col = 4 * (k - 1);
                        dj.view_mut((0, col), (o, 4)).copy_from(&local);
                    }
                    decay_state_jac.push(dj);
                }
            }
            ThetaBlock::Rnn(p) => {
                // Forward-mode: carry d(hidden)/dX per layer.
                let m = p.mlp.num_hidden();
                let widths = p.mlp.hidden_widths();
                let mut dq: Vec<DMatrix<f64>> =
                    widths.iter().map(|&w| DMatrix::zeros(w, 4 * n)).collect();
                for k in 0..n {
                    let step = &hz.rnn_steps[k];
                    // d(input_k)/dX: nonzero only in the x_k columns.
                    let mut din = DMatrix::zeros(4 + 2 * o, 4 * n);
                    if k >= 1 {
                        let local = self.net_input_state_jac(&hz.states[k], k);
                        din.view_mut((0, 4 * (k - 1)), (4 + 2 * o, 4)).copy_from(&local);
                    }
                    let mut prev: DMatrix<f64> = din;
                    let mut new_dq = Vec::with_capacity(m);
                    for j in 0..m {
                        let mut dpre = &p.mlp.weights[j] * &prev + &p.recurrent[j] * &dq[j];
                        for r in 0..dpre.nrows() {
                            let der = p.mlp.activation.derivative(step.cache.preacts[j][r]);
                            for c in 0..dpre.ncols() {
                                dpre[(r, c)] *= der;
                            }
                        }
                        prev = dpre.clone();
                        new_dq.push(dpre);
                    }
                    let mut dout = &p.mlp.weights[m] * &prev;
                    for r in 0..o {
                        let y = step.output()[r];
                        let der = y * (1.0 - y);
                        for c in 0..dout.ncols() {
                            dout[(r, c)] *= der;
                        }
                    }
                    decay_state_jac.push(dout);
                    dq = new_dq;
                }
            }
        }

        for k in 0..n {
            for i in 0..o {
                let row = k * o + i;
                let decay = hz.decays[(k, i)];
                let h_cur = self.h_val(&hz.states[k], k, i);
                // d/d x_{k+1}
                let gn = self.h_grad(&hz.states[k + 1], k + 1, i);
                let off = self.x_idx(k + 1);
                for j in 0..4 {
                    jac[(row, off + j)] += gn[j];
                }
                // d/d x_k (direct barrier term)
                if k >= 1 {
                    let gc = self.h_grad(&hz.states[k], k, i);
                    let off = self.x_idx(k);
                    for j in 0..4 {
                        jac[(row, off + j)] += -(1.0 - decay) * gc[j];
                    }
                }
                // d/d X through the decay rate
                if !decay_state_jac.is_empty() {
                    let dj = &decay_state_jac[k];
                    let xbase = self.x_idx(1);
                    for c in 0..4 * n {
                        let v = h_cur * dj[(i, c)];
                        if v != 0.0 {
                            jac[(row, xbase + c)] += v;
                        }
                    }
                }
                // slack
                jac[(row, self.sigma_idx(k, i))] = 1.0;
                // decay decision variable
                if self.is_lod() {
                    jac[(row, self.omega_idx(k, i))] = h_cur;
                }
            }
        }
        jac
    }

    fn initial_point(&self) -> DVector<f64> {
        self.cold_start()
    }

    fn hessian_seed(&self) -> Option<DVector<f64>> {
        let n = self.horizon();
        let mut d = DVector::from_element(self.num_vars(), 1.0);
        for k in 0..n {
            let off = self.u_idx(k);
            d[off] = 2.0 * self.zpow[k] * self.r[(0, 0)];
            d[off + 1] = 2.0 * self.zpow[k] * self.r[(1, 1)];
        }
        for k in 1..n {
            let off = self.x_idx(k);
            for j in 0..4 {
                d[off + j] = 2.0 * self.zpow[k] * self.q[(j, j)];
            }
        }
        let off = self.x_idx(n);
        for j in 0..4 {
            d[off + j] = 2.0 * self.zpow[n] * self.theta.f_diag[j].max(1e-3);
        }
        if let ThetaBlock::Lod(p) = &self.theta.block {
            for k in 0..n {
                for i in 0..self.num_obs {
                    d[self.omega_idx(k, i)] = (2.0 * p.p_omega[(k, i)]).max(1.0);
                }
            }
        }
        Some(d)
    }
}

impl ParametricNlp for MpcProblem {
    fn num_params(&self) -> usize {
        self.theta.dim()
    }

    fn objective_param_grad(&self, z: &DVector<f64>) -> DVector<f64> {
        let n = self.horizon();
        let mut g = DVector::zeros(self.num_params());
        let xn = self.state_at(z, n);
        for j in 0..4 {
            g[j] = self.zpow[n] * xn[j] * xn[j];
        }
        if let ThetaBlock::Lod(p) = &self.theta.block {
            let m = p.omega_bar.len();
            let o = self.num_obs;
            for k in 0..n {
                for i in 0..o {
                    let flat = k * o + i;
                    let d = z[self.omega_idx(k, i)] - p.omega_bar[(k, i)];
                    g[4 + flat] = -2.0 * p.p_omega[(k, i)] * d;
                    g[4 + m + flat] = d * d;
                }
            }
        }
        g
    }

    fn ineq_param_vjp(&self, z: &DVector<f64>, lambda: &DVector<f64>) -> DVector<f64> {
        let n = self.horizon();
        let o = self.num_obs;
        let mut out = DVector::zeros(self.num_params());
        match &self.theta.block {
            ThetaBlock::Lod(_) => out,
            ThetaBlock::Nn(p) => {
                let hz = self.unroll(z);
                let mut grads = ParamGrads::zeros_like_mlp(p);
                for k in 0..n {
                    let mut cot = DVector::zeros(o);
                    let mut any = false;
                    for i in 0..o {
                        let w = lambda[k * o + i] * self.h_val(&hz.states[k], k, i);
                        cot[i] = w;
                        any |= w != 0.0;
                    }
                    if any {
                        mlp_vjp(p, &hz.mlp_caches[k], &cot, &mut grads);
                    }
                }
                let mut flat = Vec::with_capacity(p.num_params());
                grads.flatten_into(&mut flat);
                for (idx, v) in flat.into_iter().enumerate() {
                    out[4 + idx] = v;
                }
                out
            }
            ThetaBlock::Rnn(p) => {
                let hz = self.unroll(z);
                let mut grads = ParamGrads::zeros_like_rnn(p);
                let mut hidden_cot: Option<RnnHiddenState> = None;
                for k in (0..n).rev() {
                    let mut cot = DVector::zeros(o);
                    for i in 0..o {
                        cot[i] = lambda[k * o + i] * self.h_val(&hz.states[k], k, i);
                    }
                    let (_, qprev_cot) =
                        hz.rnn_steps[k].vjp(p, &cot, hidden_cot.as_ref(), &mut grads);
                    hidden_cot = Some(qprev_cot);
                }
                let mut flat = Vec::with_capacity(p.num_params());
                grads.flatten_into(&mut flat);
                for (idx, v) in flat.into_iter().enumerate() {
                    out[4 + idx] = v;
                }
                out
            }
        }
    }

    fn eq_param_vjp(&self, _z: &DVector<f64>, _nu: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.num_params())
    }
}

/// Builds the value-function problem `V_theta(s)` at state `s`, time `t`.
pub fn build_value_problem(
    cfg: &MpcConfig,
    theta: &ThetaVector,
    world: &World,
    s: &StateVec,
    t: usize,
    vstate: &VariantState,
) -> Result<MpcProblem> {
    MpcProblem::build(cfg, theta, world, s, t, vstate, None, None)
}

/// `Q_theta(s, a)`: the value problem with the first input pinned to `a`.
pub fn build_action_value_problem(
    cfg: &MpcConfig,
    theta: &ThetaVector,
    world: &World,
    s: &StateVec,
    a: &ActionVec,
    t: usize,
    vstate: &VariantState,
) -> Result<MpcProblem> {
    MpcProblem::build(cfg, theta, world, s, t, vstate, Some(*a), None)
}

/// Exploratory problem: the value objective plus the perturbation
/// `xi' u_0`.
pub fn build_exploratory_problem(
    cfg: &MpcConfig,
    theta: &ThetaVector,
    world: &World,
    s: &StateVec,
    xi: &ActionVec,
    t: usize,
    vstate: &VariantState,
) -> Result<MpcProblem> {
    MpcProblem::build(cfg, theta, world, s, t, vstate, None, Some(*xi))
}

/// Result of one policy solve.
#[derive(Debug, Clone)]
pub struct MpcOutcome {
    pub action: ActionVec,
    pub value: f64,
    /// Optimal slack matrix (N x O).
    pub slacks: DMatrix<f64>,
    /// Optimal decay decision variables (optimal-decay variant only).
    pub omega: Option<DMatrix<f64>>,
    /// Realized decay rates along the predicted trajectory (N x O).
    pub decays: DMatrix<f64>,
    pub solution: NlpSolution,
    /// Set when the solver failed and the action is a clipped fallback.
    pub failed: bool,
    /// Hidden-state carry for the recurrent variant.
    pub rnn_carry: Option<RnnHiddenState>,
}

/// Extracts the policy-relevant pieces from a solved problem.
pub fn extract_outcome(problem: &MpcProblem, solution: NlpSolution) -> MpcOutcome {
    let n = problem.horizon();
    let o = problem.num_obs;
    let z = &solution.z;
    let bound = problem.cfg.action_bound;
    let u0 = problem.input_at(z, 0);
    let action = ActionVec::new(u0[0].clamp(-bound, bound), u0[1].clamp(-bound, bound));
    let mut slacks = DMatrix::zeros(n, o);
    for k in 0..n {
        for i in 0..o {
            slacks[(k, i)] = z[problem.sigma_idx(k, i)].max(0.0);
        }
    }
    let omega = problem.is_lod().then(|| {
        DMatrix::from_fn(n, o, |k, i| z[problem.omega_idx(k, i)])
    });
    let decays = problem.unroll(z).decays;
    let failed = solution.status.is_failure();
    let rnn_carry = problem.rnn_carry();
    MpcOutcome {
        action,
        value: solution.value,
        slacks,
        omega,
        decays,
        solution,
        failed,
        rnn_carry,
    }
}

/// Receding-horizon driver for one problem stream: remembers the last
/// primal solution and shifts it as time advances.
#[derive(Debug)]
pub struct MpcController {
    pub cfg: MpcConfig,
    pub solver: SqpSolver,
    warm: Option<(usize, DVector<f64>)>,
}

impl MpcController {
    pub fn new(cfg: MpcConfig, solver: SqpSolver) -> Self {
        Self { cfg, solver, warm: None }
    }

    /// Drops warm-start state (episode boundary).
    pub fn reset(&mut self) {
        self.warm = None;
    }

    /// Seeds the warm start for time `t` directly (e.g. from the
    /// exploratory solution when pinning its action in the Q-problem).
    pub fn seed_warm(&mut self, t: usize, z: DVector<f64>) {
        self.warm = Some((t, z));
    }

    /// Solve the exploratory policy problem (or the plain value problem
    /// when `xi` is absent) at `(s, t)`.
    pub fn solve_policy(
        &mut self,
        world: &World,
        theta: &ThetaVector,
        s: &StateVec,
        t: usize,
        vstate: &VariantState,
        xi: Option<&ActionVec>,
    ) -> Result<MpcOutcome> {
        let problem = match xi {
            Some(x) => build_exploratory_problem(&self.cfg, theta, world, s, x, t, vstate)?,
            None => build_value_problem(&self.cfg, theta, world, s, t, vstate)?,
        };
        let z0 = if self.solver.warm_start {
            match &self.warm {
                Some((wt, wz)) if *wt + 1 == t => Some(problem.shift_warm(wz)),
                Some((wt, wz)) if *wt == t => Some(wz.clone()),
                _ => None,
            }
        } else {
            None
        };
        let solution = nlp::solve(&problem, &self.solver, z0.as_ref());
        self.warm = Some((t, solution.z.clone()));
        Ok(extract_outcome(&problem, solution))
    }

    /// Solve the pinned-action problem `Q_theta(s, a)` at `(s, t)`.
    pub fn solve_action_value(
        &mut self,
        world: &World,
        theta: &ThetaVector,
        s: &StateVec,
        a: &ActionVec,
        t: usize,
        vstate: &VariantState,
    ) -> Result<MpcOutcome> {
        let problem = build_action_value_problem(&self.cfg, theta, world, s, a, t, vstate)?;
        let z0 = if self.solver.warm_start {
            match &self.warm {
                Some((wt, wz)) if *wt + 1 == t => Some(problem.shift_warm(wz)),
                Some((wt, wz)) if *wt == t => {
                    // Same time step: re-pin the action on the stored point.
                    let mut z = wz.clone();
                    z[0] = a.ax;
                    z[1] = a.ay;
                    Some(z)
                }
                _ => None,
            }
        } else {
            None
        };
        let solution = nlp::solve(&problem, &self.solver, z0.as_ref());
        self.warm = Some((t, solution.z.clone()));
        Ok(extract_outcome(&problem, solution))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{DoubleIntegrator, Obstacle};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn world_one_obstacle() -> World {
        World {
            plant: DoubleIntegrator::new(0.2),
            obstacles: vec![Obstacle::fixed(2.0, 2.25, 1.5)],
            state_bound: 5.0,
            action_bound: 1.0,
            start: StateVec::new(-5.0, -5.0, 0.0, 0.0),
        }
    }

    fn lod_theta(n: usize, o: usize, omega_bar: f64, p_omega: f64) -> ThetaVector {
        ThetaVector::lod([100.0; 4], DecayParamsLod::constant(n, o, omega_bar, p_omega))
    }

    fn nn_theta(o: usize, seed: u64) -> ThetaVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes = [4 + 2 * o, 8, 8, o];
        ThetaVector::nn([100.0; 4], MlpParams::init(&sizes, &mut rng, 0.9))
    }

    fn rnn_theta(o: usize, seed: u64) -> ThetaVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes = [4 + 2 * o, 8, 8, o];
        ThetaVector::rnn([100.0; 4], RnnParams::init(&sizes, &mut rng, 0.9))
    }

    fn rnn_zero_state(theta: &ThetaVector) -> VariantState {
        match &theta.block {
            ThetaBlock::Rnn(p) => VariantState::Rnn(RnnHiddenState::zeros(p)),
            _ => VariantState::None,
        }
    }

    #[test]
    fn decision_dimension_counts_blocks() {
        // N=1, one obstacle, optimal-decay: 2 inputs + 4 next-state
        // + 1 slack + 1 omega = 8.
        let world = world_one_obstacle();
        let cfg = MpcConfig::new(1, Variant::Lod);
        let theta = lod_theta(1, 1, 0.9, 0.4);
        let p = build_value_problem(&cfg, &theta, &world, &world.start, 0, &VariantState::None)
            .unwrap();
        assert_eq!(p.num_vars(), 8);
        assert_eq!(p.num_eq(), 4);
        assert_eq!(p.num_ineq(), 1);
    }

    #[test]
    fn far_instance_has_inactive_cbf_and_zero_slack() {
        let world = world_one_obstacle();
        let cfg = MpcConfig::new(1, Variant::Lod);
        let theta = lod_theta(1, 1, 0.9, 0.4);
        let p = build_value_problem(&cfg, &theta, &world, &world.start, 0, &VariantState::None)
            .unwrap();
        let sol = nlp::solve(&p, &SqpSolver::default(), None);
        assert!(sol.converged(), "status {:?} kkt {:?}", sol.status, sol.kkt);
        let out = extract_outcome(&p, sol);
        assert!(out.slacks[(0, 0)] <= 1e-8, "slack {}", out.slacks[(0, 0)]);
        let omega = out.omega.unwrap();
        assert_relative_eq!(omega[(0, 0)], 0.9, epsilon = 1e-6);
        assert!(out.solution.ineq_multipliers[0].abs() <= 1e-8);
    }

    #[test]
    fn policy_far_from_obstacle_matches_one_step_lq() {
        // Near the origin no constraint is active, so the one-step
        // problem is the unconstrained quadratic in u.
        let world = world_one_obstacle();
        let cfg = MpcConfig::new(1, Variant::Lod);
        let theta = lod_theta(1, 1, 0.9, 0.4);
        let s = StateVec::new(0.5, -0.3, 0.0, 0.0);
        let p =
            build_value_problem(&cfg, &theta, &world, &s, 0, &VariantState::None).unwrap();
        let sol = nlp::solve(&p, &SqpSolver::default(), None);
        assert!(sol.converged());
        let out = extract_outcome(&p, sol);

        let a_mat = world.plant.a_matrix();
        let b_mat = world.plant.b_matrix();
        let f_mat = Matrix4::from_diagonal(&Vector4::from(theta.f_diag));
        let r_mat = Matrix2::identity();
        let lhs = r_mat + b_mat.transpose() * f_mat * b_mat;
        let rhs = -(b_mat.transpose() * f_mat * a_mat * s.as_vector());
        let u_star = lhs.try_inverse().unwrap() * rhs;
        assert!(u_star.amax() < 1.0, "test instance must be interior");
        assert_relative_eq!(out.action.ax, u_star[0], epsilon = 1e-6);
        assert_relative_eq!(out.action.ay, u_star[1], epsilon = 1e-6);
    }

    #[test]
    fn bellman_consistency_of_pinned_action() {
        let world = world_one_obstacle();
        for (cfg, theta) in [
            (MpcConfig::new(2, Variant::Lod), lod_theta(2, 1, 0.9, 0.4)),
            (MpcConfig::new(2, Variant::Nn), nn_theta(1, 3)),
        ] {
            let s = StateVec::new(-2.0, -1.0, 0.5, 0.2);
            let vp =
                build_value_problem(&cfg, &theta, &world, &s, 0, &VariantState::None).unwrap();
            let vsol = nlp::solve(&vp, &SqpSolver::default(), None);
            assert!(vsol.converged());
            let vout = extract_outcome(&vp, vsol);
            let qp = build_action_value_problem(
                &cfg, &theta, &world, &s, &vout.action, 0, &VariantState::None,
            )
            .unwrap();
            let qsol = nlp::solve(&qp, &SqpSolver::default(), Some(&vout.solution.z));
            assert!(qsol.converged());
            assert_relative_eq!(qsol.value, vout.value, epsilon = 1e-6, max_relative = 1e-8);
        }
    }

    #[test]
    fn action_value_dominates_value_on_grid() {
        let world = world_one_obstacle();
        let cfg = MpcConfig::new(1, Variant::Lod);
        let theta = lod_theta(1, 1, 0.9, 0.4);
        let s = StateVec::new(-1.0, 0.5, 0.3, -0.4);
        let vp = build_value_problem(&cfg, &theta, &world, &s, 0, &VariantState::None).unwrap();
        let v = nlp::solve(&vp, &SqpSolver::default(), None).value;
        for ax in [-1.0, -0.5, 0.0, 0.5, 1.0] {
            for ay in [-1.0, 0.0, 1.0] {
                let a = ActionVec::new(ax, ay);
                let qp = build_action_value_problem(
                    &cfg, &theta, &world, &s, &a, 0, &VariantState::None,
                )
                .unwrap();
                let q = nlp::solve(&qp, &SqpSolver::default(), None).value;
                assert!(q >= v - 1e-6, "Q({ax},{ay}) = {q} < V = {v}");
            }
        }
    }

    #[test]
    fn pinned_action_outside_box_rejected() {
        let world = world_one_obstacle();
        let cfg = MpcConfig::new(1, Variant::Lod);
        let theta = lod_theta(1, 1, 0.9, 0.4);
        let err = build_action_value_problem(
            &cfg,
            &theta,
            &world,
            &world.start,
            &ActionVec::new(1.5, 0.0),
            0,
            &VariantState::None,
        );
        assert!(matches!(err, Err(Error::ActionOutOfBounds(..))));
    }

    #[test]
    fn missing_rnn_state_rejected() {
        let world = world_one_obstacle();
        let cfg = MpcConfig::new(2, Variant::Rnn);
        let theta = rnn_theta(1, 5);
        let err =
            build_value_problem(&cfg, &theta, &world, &world.start, 0, &VariantState::None);
        assert!(matches!(err, Err(Error::MissingRnnState)));
    }

    #[test]
    fn exploratory_zero_perturbation_is_value_problem() {
        let world = world_one_obstacle();
        let cfg = MpcConfig::new(2, Variant::Lod);
        let theta = lod_theta(2, 1, 0.9, 0.4);
        let s = StateVec::new(-2.0, 1.0, 0.0, 0.0);
        let vp = build_value_problem(&cfg, &theta, &world, &s, 0, &VariantState::None).unwrap();
        let ep = build_exploratory_problem(
            &cfg, &theta, &world, &s, &ActionVec::zeros(), 0, &VariantState::None,
        )
        .unwrap();
        let z = vp.cold_start();
        assert_relative_eq!(vp.objective(&z), ep.objective(&z));
        let v = nlp::solve(&vp, &SqpSolver::default(), None).value;
        let e = nlp::solve(&ep, &SqpSolver::default(), None).value;
        assert_relative_eq!(v, e, epsilon = 1e-9);
    }

    #[test]
    fn exploratory_objective_adds_linear_term_exactly() {
        let world = world_one_obstacle();
        let cfg = MpcConfig::new(2, Variant::Lod);
        let theta = lod_theta(2, 1, 0.9, 0.4);
        let s = StateVec::new(-2.0, 1.0, 0.0, 0.0);
        let xi = ActionVec::new(3.0, -7.0);
        let vp = build_value_problem(&cfg, &theta, &world, &s, 0, &VariantState::None).unwrap();
        let ep =
            build_exploratory_problem(&cfg, &theta, &world, &s, &xi, 0, &VariantState::None)
                .unwrap();
        let mut z = vp.cold_start();
        z[0] = 0.4;
        z[1] = -0.2;
        let diff = ep.objective(&z) - vp.objective(&z);
        assert_relative_eq!(diff, xi.ax * z[0] + xi.ay * z[1], epsilon = 1e-12);
    }

    #[test]
    fn large_perturbation_drives_input_to_bound() {
        let world = world_one_obstacle();
        let cfg = MpcConfig::new(1, Variant::Lod);
        let theta = lod_theta(1, 1, 0.9, 0.4);
        let s = StateVec::new(0.0, 0.0, 0.0, 0.0);
        let xi = ActionVec::new(1e3, 0.0);
        let p = build_exploratory_problem(&cfg, &theta, &world, &s, &xi, 0, &VariantState::None)
            .unwrap();
        let sol = nlp::solve(&p, &SqpSolver::default(), None);
        assert!(sol.converged());
        let out = extract_outcome(&p, sol);
        assert_relative_eq!(out.action.ax, -1.0, epsilon = 1e-7);
    }

    #[test]
    fn nn_zero_params_matches_pinned_half_decay() {
        // sigmoid(0) = 0.5 everywhere, so the zero network reproduces a
        // fixed exponential CBF; an optimal-decay instance with a huge
        // penalty pinned at 0.5 must agree.
        let world = world_one_obstacle();
        let s = StateVec::new(0.2, 1.4, 0.8, 0.4); // near the obstacle
        let nn_cfg = MpcConfig::new(2, Variant::Nn);
        let zero_net = ThetaVector::nn([100.0; 4], MlpParams::zeros(&[6, 8, 1]));
        let np =
            build_value_problem(&nn_cfg, &zero_net, &world, &s, 0, &VariantState::None).unwrap();
        let nv = nlp::solve(&np, &SqpSolver::default(), None);
        assert!(nv.converged());

        let lod_cfg = MpcConfig::new(2, Variant::Lod);
        let pinned = lod_theta(2, 1, 0.5, 1e10);
        let lp =
            build_value_problem(&lod_cfg, &pinned, &world, &s, 0, &VariantState::None).unwrap();
        let lv = nlp::solve(&lp, &SqpSolver::default(), None);
        assert!(lv.converged());
        assert_relative_eq!(nv.value, lv.value, max_relative = 1e-5);
    }

    #[test]
    fn rnn_with_zero_recurrence_matches_nn() {
        let world = world_one_obstacle();
        let s = StateVec::new(0.4, 1.2, 0.6, 0.3);
        let nn = nn_theta(1, 11);
        let rnn = match &nn.block {
            ThetaBlock::Nn(p) => {
                let mut r = RnnParams::zeros(&[6, 8, 8, 1]);
                r.mlp = p.clone();
                for wq in &mut r.recurrent {
                    wq.fill(0.0);
                }
                ThetaVector::rnn(nn.f_diag, r)
            }
            _ => unreachable!(),
        };
        let nn_cfg = MpcConfig::new(3, Variant::Nn);
        let rnn_cfg = MpcConfig::new(3, Variant::Rnn);
        let np = build_value_problem(&nn_cfg, &nn, &world, &s, 0, &VariantState::None).unwrap();
        let rp =
            build_value_problem(&rnn_cfg, &rnn, &world, &s, 0, &rnn_zero_state(&rnn)).unwrap();
        let nv = nlp::solve(&np, &SqpSolver::default(), None);
        let rv = nlp::solve(&rp, &SqpSolver::default(), None);
        assert!(nv.converged() && rv.converged());
        assert!((nv.value - rv.value).abs() <= 1e-8, "{} vs {}", nv.value, rv.value);
    }

    #[test]
    fn lod_penalty_sweep_drives_omega_to_reference() {
        // With the reference at 1 and growing penalty, the solved decay
        // approaches the nominal CBF monotonically.
        let world = world_one_obstacle();
        let s = StateVec::new(0.2, 1.2, 1.0, 0.8); // approaching the obstacle
        let mut last_gap = f64::INFINITY;
        for p_omega in [1.0, 1e2, 1e4] {
            let cfg = MpcConfig::new(1, Variant::Lod);
            let theta = lod_theta(1, 1, 1.0, p_omega);
            let p = build_value_problem(&cfg, &theta, &world, &s, 0, &VariantState::None)
                .unwrap();
            let sol = nlp::solve(&p, &SqpSolver::default(), None);
            assert!(sol.converged());
            let out = extract_outcome(&p, sol);
            let gap = (1.0 - out.omega.unwrap()[(0, 0)]).abs();
            assert!(gap <= last_gap + 1e-12, "gap must shrink: {last_gap} -> {gap}");
            last_gap = gap;
        }
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let world = World {
            plant: DoubleIntegrator::new(0.2),
            obstacles: vec![
                Obstacle::fixed(2.0, 2.25, 1.5),
                Obstacle::moving_horizontal(-1.5, -4.0, 0.0, 0.2, crate::env::MotionDir::Right)
                    .with_radius(0.7),
            ],
            state_bound: 5.0,
            action_bound: 1.0,
            start: StateVec::new(-5.0, -5.0, 0.0, 0.0),
        };
        let s = StateVec::new(-2.0, -1.2, 0.7, 0.9);
        for (cfg, theta) in [
            (MpcConfig::new(3, Variant::Lod), lod_theta(3, 2, 0.9, 0.4)),
            (MpcConfig::new(3, Variant::Nn), nn_theta(2, 21)),
            (MpcConfig::new(3, Variant::Rnn), rnn_theta(2, 22)),
        ] {
            let vstate = rnn_zero_state(&theta);
            let p = build_value_problem(&cfg, &theta, &world, &s, 2, &vstate).unwrap();
            let mut z = p.cold_start();
            // Move off the constraint surface a little.
            for i in 0..z.len() {
                z[i] += 1e-2 * ((i * 7 % 11) as f64 - 5.0) / 10.0;
            }
            let g = p.objective_grad(&z);
            let h = 1e-6;
            for i in (0..z.len()).step_by(3) {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[i] += h;
                zm[i] -= h;
                let fd = (p.objective(&zp) - p.objective(&zm)) / (2.0 * h);
                let denom = fd.abs().max(1.0);
                assert!(
                    (g[i] - fd).abs() / denom < 1e-4,
                    "variant {:?} objective grad[{i}]: {} vs fd {}",
                    cfg.variant,
                    g[i],
                    fd
                );
            }

            let ji = p.ineq_jacobian(&z);
            let ci0 = p.ineq_constraints(&z);
            for i in (0..z.len()).step_by(2) {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[i] += h;
                zm[i] -= h;
                let cp = p.ineq_constraints(&zp);
                let cm = p.ineq_constraints(&zm);
                for r in 0..ci0.len() {
                    let fd = (cp[r] - cm[r]) / (2.0 * h);
                    let denom = fd.abs().max(1.0);
                    assert!(
                        (ji[(r, i)] - fd).abs() / denom < 1e-4,
                        "variant {:?} ineq jac[{r},{i}]: {} vs fd {}",
                        cfg.variant,
                        ji[(r, i)],
                        fd
                    );
                }
            }
        }
    }

    #[test]
    fn boundary_state_with_tiny_decay_keeps_barrier() {
        // On the obstacle boundary with the decay forced tiny, the next
        // predicted state must keep h(x1) >= (1 - omega) h(x0) ~ 0.
        let world = world_one_obstacle();
        let cfg = MpcConfig::new(1, Variant::Lod);
        let theta = lod_theta(1, 1, 1e-6, 1e8);
        // Boundary point left of the obstacle, moving tangentially.
        let s = StateVec::new(0.5, 2.25, 0.0, 0.5);
        let p = build_value_problem(&cfg, &theta, &world, &s, 0, &VariantState::None).unwrap();
        let sol = nlp::solve(&p, &SqpSolver::default(), None);
        assert!(sol.converged());
        let out = extract_outcome(&p, sol);
        let b = BarrierFn::new(world.obstacles[0]);
        let x1 = StateVec::new(
            out.solution.z[p.x_idx(1)],
            out.solution.z[p.x_idx(1) + 1],
            out.solution.z[p.x_idx(1) + 2],
            out.solution.z[p.x_idx(1) + 3],
        );
        let omega = out.omega.as_ref().unwrap()[(0, 0)];
        let resid = b.eval(&x1, 1) - (1.0 - omega) * b.eval(&s, 0) + out.slacks[(0, 0)];
        assert!(resid >= -1e-6, "CBF residual {resid}");
        assert!(out.slacks[(0, 0)] <= 1e-6, "slack should stay zero, got {}", out.slacks[(0, 0)]);
    }

    use crate::barrier::BarrierFn;
}
