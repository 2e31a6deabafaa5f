//! Q-learning outer loop: exploration, TD errors, gradient buffering
//! and the bound-projected Adam update.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::barrier::BarrierFn;
use crate::env::{ActionVec, StageCostWeights, StateVec, World};
use crate::error::Result;
use crate::mpc::{
    build_action_value_problem, MpcConfig, MpcController, ThetaVector, Variant, VariantState,
};
use crate::neural::RnnHiddenState;
use crate::nlp::{self, SqpSolver};

/// One environment step's record.
#[derive(Debug, Clone)]
pub struct Transition {
    pub state: StateVec,
    pub action: ActionVec,
    /// Slack-augmented stage cost.
    pub cost: f64,
    pub next_state: StateVec,
    pub q_value: f64,
    pub v_next: f64,
    pub td_error: f64,
    /// `-td_error * dQ/dtheta`.
    pub grad: DVector<f64>,
}

/// TD error `tau = L + zeta * V(s') - Q(s, a)`.
pub fn td_error(cost: f64, zeta: f64, v_next: f64, q_cur: f64) -> f64 {
    cost + zeta * v_next - q_cur
}

/// Stage cost augmented with the optimal slack usage of the exploratory
/// solve: `L + w_rl * sum sigma`.
pub fn augment_cost(cost: f64, slacks: &DMatrix<f64>, w_rl: f64) -> f64 {
    cost + w_rl * slacks.sum()
}

/// Fixed-capacity gradient buffer; the parameter update fires only when
/// it has filled up.
#[derive(Debug, Clone)]
pub struct GradBuffer {
    capacity: usize,
    grads: Vec<DVector<f64>>,
}

impl GradBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        Self { capacity, grads: Vec::with_capacity(capacity) }
    }

    pub fn push(&mut self, g: DVector<f64>) {
        self.grads.push(g);
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.grads.len() >= self.capacity
    }

    /// Average of everything stored, clearing the buffer.
    pub fn drain_average(&mut self) -> Option<DVector<f64>> {
        if self.grads.is_empty() {
            return None;
        }
        let n = self.grads.len() as f64;
        let mut acc = self.grads[0].clone();
        for g in &self.grads[1..] {
            acc += g;
        }
        self.grads.clear();
        Some(acc / n)
    }
}

/// Adam moment estimates.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: DVector<f64>,
    pub v: DVector<f64>,
    pub step_count: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(dim: usize, learning_rate: f64) -> Self {
        Self {
            m: DVector::zeros(dim),
            v: DVector::zeros(dim),
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Candidate descent step `-lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn candidate_step(&mut self, grad: &DVector<f64>) -> DVector<f64> {
        self.step_count += 1;
        let t = self.step_count as i32;
        self.m = self.beta1 * &self.m + (1.0 - self.beta1) * grad;
        self.v = self.beta2 * &self.v
            + (1.0 - self.beta2) * DVector::from_fn(grad.len(), |i, _| grad[i] * grad[i]);
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        DVector::from_fn(grad.len(), |i, _| {
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            -self.learning_rate * m_hat / (v_hat.sqrt() + self.eps)
        })
    }
}

/// Projection of a candidate step onto the feasible box: the closest
/// admissible step in the Euclidean sense, which for a box separates
/// into per-coordinate clamping.
pub fn project_step_onto_bounds(
    theta: &DVector<f64>,
    step: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
) -> DVector<f64> {
    DVector::from_fn(theta.len(), |i, _| {
        let target = (theta[i] + step[i]).clamp(lo[i], hi[i]);
        target - theta[i]
    })
}

/// AdamQP: averaged-gradient Adam step projected onto the parameter
/// bounds. Consumes the buffer; must be called when it is full.
pub fn buffered_update(
    buffer: &mut GradBuffer,
    adam: &mut AdamState,
    theta: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
) -> DVector<f64> {
    debug_assert!(buffer.is_full());
    let Some(ghat) = buffer.drain_average() else {
        return theta.clone();
    };
    let candidate = adam.candidate_step(&ghat);
    let applied = project_step_onto_bounds(theta, &candidate, lo, hi);
    theta + applied
}

/// Exploration noise: independent per-channel Gaussians whose standard
/// deviations shrink geometrically with the episode index.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub std0: [f64; 2],
    pub decay: f64,
}

impl NoiseSchedule {
    pub fn std_at(&self, episode: usize) -> [f64; 2] {
        let f = self.decay.powi(episode as i32);
        [self.std0[0] * f, self.std0[1] * f]
    }
}

/// Training-loop knobs.
#[derive(Debug, Clone)]
pub struct TrainerConfig {
    pub n_episodes: usize,
    pub steps_per_episode: usize,
    /// TD-target discount.
    pub zeta: f64,
    pub w_rl: f64,
    pub learning_rate: f64,
    /// `None` buffers exactly one episode of transitions.
    pub buffer_capacity: Option<usize>,
    pub noise: NoiseSchedule,
    pub seed: u64,
    /// Abort the episode after this many failed solves.
    pub failure_limit: usize,
    /// Keep a theta snapshot every this many episodes (0 = final only).
    pub snapshot_every: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            n_episodes: 500,
            steps_per_episode: 60,
            zeta: 0.99,
            w_rl: 1e3,
            learning_rate: 1e-3,
            buffer_capacity: None,
            noise: NoiseSchedule { std0: [0.5, 0.5], decay: 0.99 },
            seed: 0,
            failure_limit: 10,
            snapshot_every: 0,
        }
    }
}

/// Per-episode summary.
#[derive(Debug, Clone)]
pub struct EpisodeRecord {
    pub episode: usize,
    /// Unaugmented cumulative stage cost along the explored trajectory.
    pub cum_cost: f64,
    /// Total optimal slack over the episode.
    pub slack_total: f64,
    /// Smallest barrier value visited.
    pub min_h: f64,
    pub solver_failures: usize,
    pub noise_std: [f64; 2],
    pub aborted: bool,
}

#[derive(Debug, Clone)]
pub struct TrainingLog {
    pub episodes: Vec<EpisodeRecord>,
    pub theta_trace: Vec<(usize, ThetaVector)>,
    pub final_theta: ThetaVector,
    pub total_solver_failures: usize,
}

fn min_barrier(world: &World, s: &StateVec, t: usize) -> f64 {
    world
        .obstacles
        .iter()
        .map(|o| BarrierFn::new(*o).eval(s, t))
        .fold(f64::INFINITY, f64::min)
}

fn fresh_variant_state(theta: &ThetaVector) -> VariantState {
    match (&theta.variant(), &theta.block) {
        (Variant::Rnn, crate::mpc::ThetaBlock::Rnn(p)) => {
            VariantState::Rnn(RnnHiddenState::zeros(p))
        }
        _ => VariantState::None,
    }
}

/// Algorithm: per step solve the exploratory policy, roll the plant,
/// solve Q at the behavioral action and V at the successor, form the TD
/// error and buffer `-tau * dQ/dtheta`; when the buffer fills, apply the
/// projected Adam update and decay the exploration noise.
pub fn run_training(
    world: &World,
    mpc_cfg: &MpcConfig,
    solver: &SqpSolver,
    theta0: &ThetaVector,
    cfg: &TrainerConfig,
) -> Result<TrainingLog> {
    mpc_cfg.validate()?;
    theta0.check_consistent(mpc_cfg.horizon, world.num_obstacles())?;
    let weights = StageCostWeights::from_diagonals(mpc_cfg.q_diag, mpc_cfg.r_diag);
    let mut theta = theta0.clone();
    let (lo, hi) = theta.bounds();
    let mut adam = AdamState::new(theta.dim(), cfg.learning_rate);
    let capacity = cfg.buffer_capacity.unwrap_or(cfg.steps_per_episode);
    let mut buffer = GradBuffer::new(capacity);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut log = TrainingLog {
        episodes: Vec::with_capacity(cfg.n_episodes),
        theta_trace: Vec::new(),
        final_theta: theta.clone(),
        total_solver_failures: 0,
    };

    for episode in 0..cfg.n_episodes {
        let mut explore_ctrl = MpcController::new(mpc_cfg.clone(), solver.clone());
        let mut v_ctrl = MpcController::new(mpc_cfg.clone(), solver.clone());
        let mut carry = fresh_variant_state(&theta);
        let mut s = world.start;
        let std = cfg.noise.std_at(episode);
        let mut failures = 0usize;
        let mut cum_cost = 0.0;
        let mut slack_total = 0.0;
        let mut min_h = min_barrier(world, &s, 0);
        let mut aborted = false;

        for t in 0..cfg.steps_per_episode {
            let n1: f64 = StandardNormal.sample(&mut rng);
            let n2: f64 = StandardNormal.sample(&mut rng);
            let xi = ActionVec::new(std[0] * n1, std[1] * n2);

            let explored = match explore_ctrl.solve_policy(world, &theta, &s, t, &carry, Some(&xi))
            {
                Ok(o) => o,
                Err(e) => {
                    log::warn!("episode {episode} step {t}: exploratory solve error: {e}");
                    aborted = true;
                    break;
                }
            };
            let a = explored.action;
            let stage = weights.stage_cost(&s, &a);
            let cost_aug = augment_cost(stage, &explored.slacks, cfg.w_rl);
            cum_cost += stage;
            slack_total += explored.slacks.sum();

            let s_next = world.plant.step(&s, &a)?;

            // Q at the behavioral action, warm-started from the
            // exploratory solution with the first input re-pinned.
            let q_problem =
                build_action_value_problem(mpc_cfg, &theta, world, &s, &a, t, &carry)?;
            let mut q_warm = explored.solution.z.clone();
            q_warm[0] = a.ax;
            q_warm[1] = a.ay;
            let q_solution = nlp::solve(&q_problem, solver, Some(&q_warm));
            let q_failed = q_solution.status.is_failure();
            let q_value = q_solution.value;

            // V at the successor state one step later; the recurrent
            // carry advances to the state produced by this step's solve.
            let next_carry = match &explored.rnn_carry {
                Some(q) => VariantState::Rnn(q.clone()),
                None => VariantState::None,
            };
            v_ctrl.seed_warm(t, explored.solution.z.clone());
            let v_out = match v_ctrl.solve_policy(world, &theta, &s_next, t + 1, &next_carry, None)
            {
                Ok(o) => o,
                Err(e) => {
                    log::warn!("episode {episode} step {t}: value solve error: {e}");
                    aborted = true;
                    break;
                }
            };

            let tau = td_error(cost_aug, cfg.zeta, v_out.value, q_value);
            let step_failed = explored.failed || q_failed || v_out.failed;
            if step_failed {
                failures += 1;
                log.total_solver_failures += 1;
                if failures > cfg.failure_limit {
                    log::warn!("episode {episode}: aborted after {failures} solver failures");
                    aborted = true;
                    break;
                }
            } else {
                let vg = nlp::value_gradient(&q_problem, &q_solution);
                buffer.push(-tau * vg.grad);
            }

            s = s_next;
            carry = next_carry;
            min_h = min_h.min(min_barrier(world, &s, t + 1));
        }

        if buffer.is_full() {
            let flat = theta.flatten();
            let updated = buffered_update(&mut buffer, &mut adam, &flat, &lo, &hi);
            theta.assign_from_flat(&updated);
        }

        log.episodes.push(EpisodeRecord {
            episode,
            cum_cost,
            slack_total,
            min_h,
            solver_failures: failures,
            noise_std: std,
            aborted,
        });
        if cfg.snapshot_every > 0 && episode % cfg.snapshot_every == 0 {
            log.theta_trace.push((episode, theta.clone()));
        }
    }

    log.final_theta = theta;
    Ok(log)
}

/// One row of a deterministic evaluation rollout.
#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub t: usize,
    pub state: StateVec,
    pub action: ActionVec,
    pub barrier_values: Vec<f64>,
    /// First-step decay rates of the solve at this time.
    pub decays: Vec<f64>,
    pub slack_total: f64,
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    /// `steps + 1` rows; the last row carries the terminal state with a
    /// zero action.
    pub records: Vec<EvalRecord>,
    pub cumulative_cost: f64,
    pub min_h: f64,
    pub solver_failures: usize,
}

/// Noise-free rollout of the policy under a fixed parameter vector.
pub fn evaluate_policy(
    world: &World,
    mpc_cfg: &MpcConfig,
    solver: &SqpSolver,
    theta: &ThetaVector,
    steps: usize,
) -> Result<EvalResult> {
    mpc_cfg.validate()?;
    theta.check_consistent(mpc_cfg.horizon, world.num_obstacles())?;
    let weights = StageCostWeights::from_diagonals(mpc_cfg.q_diag, mpc_cfg.r_diag);
    let mut ctrl = MpcController::new(mpc_cfg.clone(), solver.clone());
    let mut carry = fresh_variant_state(theta);
    let mut s = world.start;
    let mut records = Vec::with_capacity(steps + 1);
    let mut cumulative_cost = 0.0;
    let mut failures = 0usize;
    let mut min_h = f64::INFINITY;
    let mut last_decays: Vec<f64> = vec![1.0; world.num_obstacles()];

    for t in 0..steps {
        let h_now: Vec<f64> =
            world.obstacles.iter().map(|o| BarrierFn::new(*o).eval(&s, t)).collect();
        min_h = h_now.iter().fold(min_h, |m, &v| m.min(v));

        let out = ctrl.solve_policy(world, theta, &s, t, &carry, None)?;
        if out.failed {
            failures += 1;
        }
        let decays: Vec<f64> = (0..world.num_obstacles()).map(|i| out.decays[(0, i)]).collect();
        last_decays = decays.clone();
        records.push(EvalRecord {
            t,
            state: s,
            action: out.action,
            barrier_values: h_now,
            decays,
            slack_total: out.slacks.sum(),
        });
        cumulative_cost += weights.stage_cost(&s, &out.action);
        s = world.plant.step(&s, &out.action)?;
        if let Some(q) = &out.rnn_carry {
            carry = VariantState::Rnn(q.clone());
        }
    }

    let h_final: Vec<f64> =
        world.obstacles.iter().map(|o| BarrierFn::new(*o).eval(&s, steps)).collect();
    min_h = h_final.iter().fold(min_h, |m, &v| m.min(v));
    records.push(EvalRecord {
        t: steps,
        state: s,
        action: ActionVec::zeros(),
        barrier_values: h_final,
        decays: last_decays,
        slack_total: 0.0,
    });

    Ok(EvalResult { records, cumulative_cost, min_h, solver_failures: failures })
}
