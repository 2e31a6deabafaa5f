//! Feedforward and Elman-recurrent networks mapping (state, barrier
//! values, context) to per-obstacle decay rates in (0, 1), with exact
//! reverse-mode derivatives for both inputs and parameters.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::StateVec;
use crate::error::{Error, Result};

/// Hidden-layer activation. ReLU is the default; softplus is an
/// optional smoothing of the kink for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum HiddenActivation {
    Relu,
    Softplus { beta: f64 },
}

impl HiddenActivation {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            HiddenActivation::Relu => x.max(0.0),
            HiddenActivation::Softplus { beta } => {
                // ln(1 + e^(beta x)) / beta, stable for large |x|.
                let bx = beta * x;
                if bx > 30.0 {
                    x
                } else if bx < -30.0 {
                    (bx.exp()).ln_1p() / beta
                } else {
                    bx.exp().ln_1p() / beta
                }
            }
        }
    }

    /// Derivative; the ReLU subgradient at 0 is defined as 0.
    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            HiddenActivation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            HiddenActivation::Softplus { beta } => sigmoid(beta * x),
        }
    }
}

/// Logistic sigmoid with the pre-activation clamped so the output is
/// strictly inside (0, 1) even for extreme inputs.
pub fn sigmoid(x: f64) -> f64 {
    let x = x.clamp(-500.0, 500.0);
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Weights and biases of a feedforward network with ReLU hidden layers
/// and a sigmoid output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    /// One matrix per layer, hidden layers first, output layer last.
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    pub activation: HiddenActivation,
}

impl MlpParams {
    /// Zero-initialized network with the given layer sizes
    /// (input, hidden..., output).
    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            weights.push(DMatrix::zeros(w[1], w[0]));
            biases.push(DVector::zeros(w[1]));
        }
        Self { weights, biases, activation: HiddenActivation::Relu }
    }

    /// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)], zero biases,
    /// output bias shifted so the initial decay sits near `initial_decay`.
    pub fn init<R: Rng>(sizes: &[usize], rng: &mut R, initial_decay: f64) -> Self {
        let mut p = Self::zeros(sizes);
        for w in &mut p.weights {
            let a = 1.0 / (w.ncols() as f64).sqrt();
            for v in w.iter_mut() {
                *v = rng.gen_range(-a..=a);
            }
        }
        let out = p.biases.last_mut().unwrap();
        out.fill(logit(initial_decay));
        p
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn num_hidden(&self) -> usize {
        self.weights.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().unwrap().nrows()
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.weights[..self.num_hidden()].iter().map(|w| w.nrows()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn check_shapes(&self) -> Result<()> {
        if self.weights.len() != self.biases.len() || self.weights.is_empty() {
            return Err(Error::DimensionMismatch("mlp layer count".into()));
        }
        for j in 0..self.weights.len() {
            if self.biases[j].len() != self.weights[j].nrows() {
                return Err(Error::DimensionMismatch(format!("mlp bias of layer {j}")));
            }
            if j > 0 && self.weights[j].ncols() != self.weights[j - 1].nrows() {
                return Err(Error::DimensionMismatch(format!("mlp weight chain at layer {j}")));
            }
        }
        Ok(())
    }

    /// Canonical flat layout: per layer W (row-major) then b.
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for j in 0..self.weights.len() {
            let w = &self.weights[j];
            for r in 0..w.nrows() {
                for c in 0..w.ncols() {
                    out.push(w[(r, c)]);
                }
            }
            out.extend(self.biases[j].iter());
        }
    }

    /// Inverse of [`flatten_into`]; returns the number of entries consumed.
    pub fn assign_from_flat(&mut self, flat: &[f64]) -> usize {
        let mut idx = 0;
        for j in 0..self.weights.len() {
            let (nr, nc) = self.weights[j].shape();
            for r in 0..nr {
                for c in 0..nc {
                    self.weights[j][(r, c)] = flat[idx];
                    idx += 1;
                }
            }
            for r in 0..self.biases[j].len() {
                self.biases[j][r] = flat[idx];
                idx += 1;
            }
        }
        idx
    }
}

/// MLP plus square recurrent matrices, one per hidden layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnnParams {
    pub mlp: MlpParams,
    /// `recurrent[j]` feeds the previous hidden state of layer j+1 back in.
    pub recurrent: Vec<DMatrix<f64>>,
}

impl RnnParams {
    pub fn zeros(sizes: &[usize]) -> Self {
        let mlp = MlpParams::zeros(sizes);
        let recurrent = mlp.hidden_widths().iter().map(|&w| DMatrix::zeros(w, w)).collect();
        Self { mlp, recurrent }
    }

    pub fn init<R: Rng>(sizes: &[usize], rng: &mut R, initial_decay: f64) -> Self {
        let mlp = MlpParams::init(sizes, rng, initial_decay);
        let recurrent = mlp
            .hidden_widths()
            .iter()
            .map(|&w| {
                let a = 1.0 / (w as f64).sqrt();
                DMatrix::from_fn(w, w, |_, _| rng.gen_range(-a..=a))
            })
            .collect();
        Self { mlp, recurrent }
    }

    pub fn num_params(&self) -> usize {
        self.mlp.num_params() + self.recurrent.iter().map(|w| w.len()).sum::<usize>()
    }

    pub fn check_shapes(&self) -> Result<()> {
        self.mlp.check_shapes()?;
        if self.recurrent.len() != self.mlp.num_hidden() {
            return Err(Error::DimensionMismatch("rnn recurrent layer count".into()));
        }
        for (j, (wq, width)) in
            self.recurrent.iter().zip(self.mlp.hidden_widths()).enumerate()
        {
            if wq.nrows() != width || wq.ncols() != width {
                return Err(Error::DimensionMismatch(format!("rnn recurrent matrix {j}")));
            }
        }
        Ok(())
    }

    /// Flat layout: MLP blocks first, then the recurrent matrices.
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        self.mlp.flatten_into(out);
        for wq in &self.recurrent {
            for r in 0..wq.nrows() {
                for c in 0..wq.ncols() {
                    out.push(wq[(r, c)]);
                }
            }
        }
    }

    pub fn assign_from_flat(&mut self, flat: &[f64]) -> usize {
        let mut idx = self.mlp.assign_from_flat(flat);
        for wq in &mut self.recurrent {
            let (nr, nc) = wq.shape();
            for r in 0..nr {
                for c in 0..nc {
                    wq[(r, c)] = flat[idx];
                    idx += 1;
                }
            }
        }
        idx
    }
}

/// Per-layer hidden state of the Elman recurrence.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnHiddenState {
    pub layers: Vec<DVector<f64>>,
}

impl RnnHiddenState {
    pub fn zeros(params: &RnnParams) -> Self {
        Self { layers: params.mlp.hidden_widths().iter().map(|&w| DVector::zeros(w)).collect() }
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().all(|q| q.iter().all(|v| *v == 0.0))
    }
}

/// Network input at one prediction step: predicted state, barrier
/// values and one context scalar per obstacle.
#[derive(Debug, Clone)]
pub struct NetInput {
    pub state: StateVec,
    pub barrier_values: DVector<f64>,
    pub context: DVector<f64>,
}

impl NetInput {
    pub fn dim(&self) -> usize {
        4 + self.barrier_values.len() + self.context.len()
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.dim());
        v[0] = self.state.px;
        v[1] = self.state.py;
        v[2] = self.state.vx;
        v[3] = self.state.vy;
        let o = self.barrier_values.len();
        for i in 0..o {
            v[4 + i] = self.barrier_values[i];
        }
        for i in 0..self.context.len() {
            v[4 + o + i] = self.context[i];
        }
        v
    }
}

/// Intermediate values of one forward pass, kept for reverse mode.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input vector fed to the first layer.
    pub input: DVector<f64>,
    /// Pre-activations of every layer (hidden then output).
    pub preacts: Vec<DVector<f64>>,
    /// Post-activation hidden states (length = hidden layers).
    pub hidden: Vec<DVector<f64>>,
    pub output: DVector<f64>,
}

/// Gradients with respect to every network parameter, in the same
/// shapes (and flat order) as the parameter structs.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    pub recurrent: Vec<DMatrix<f64>>,
}

impl ParamGrads {
    pub fn zeros_like_mlp(p: &MlpParams) -> Self {
        Self {
            weights: p.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            biases: p.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
            recurrent: Vec::new(),
        }
    }

    pub fn zeros_like_rnn(p: &RnnParams) -> Self {
        let mut g = Self::zeros_like_mlp(&p.mlp);
        g.recurrent = p.recurrent.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect();
        g
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for j in 0..self.weights.len() {
            let w = &self.weights[j];
            for r in 0..w.nrows() {
                for c in 0..w.ncols() {
                    out.push(w[(r, c)]);
                }
            }
            out.extend(self.biases[j].iter());
        }
        for wq in &self.recurrent {
            for r in 0..wq.nrows() {
                for c in 0..wq.ncols() {
                    out.push(wq[(r, c)]);
                }
            }
        }
    }
}

/// Feedforward pass; the cache holds everything reverse mode needs.
pub fn mlp_forward_cached(p: &MlpParams, input: &DVector<f64>) -> ForwardCache {
    debug_assert_eq!(input.len(), p.input_dim());
    let m = p.num_hidden();
    let mut preacts = Vec::with_capacity(m + 1);
    let mut hidden = Vec::with_capacity(m);
    let mut cur = input.clone();
    for j in 0..m {
        let pre = &p.weights[j] * &cur + &p.biases[j];
        cur = pre.map(|x| p.activation.eval(x));
        preacts.push(pre);
        hidden.push(cur.clone());
    }
    let out_pre = &p.weights[m] * &cur + &p.biases[m];
    let output = out_pre.map(sigmoid);
    preacts.push(out_pre);
    ForwardCache { input: input.clone(), preacts, hidden, output }
}

/// Decay rates of the feedforward network, each strictly in (0, 1).
pub fn mlp_forward(p: &MlpParams, z: &NetInput) -> DVector<f64> {
    mlp_forward_cached(p, &z.to_vector()).output
}

/// Elman pass: layer j mixes the previous step's hidden state of the
/// same layer back in before the activation.
pub fn rnn_forward_cached(
    p: &RnnParams,
    input: &DVector<f64>,
    q_prev: &RnnHiddenState,
) -> ForwardCache {
    debug_assert_eq!(input.len(), p.mlp.input_dim());
    let m = p.mlp.num_hidden();
    debug_assert_eq!(q_prev.layers.len(), m);
    let mut preacts = Vec::with_capacity(m + 1);
    let mut hidden = Vec::with_capacity(m);
    let mut cur = input.clone();
    for j in 0..m {
        let pre = &p.mlp.weights[j] * &cur + &p.mlp.biases[j] + &p.recurrent[j] * &q_prev.layers[j];
        cur = pre.map(|x| p.mlp.activation.eval(x));
        preacts.push(pre);
        hidden.push(cur.clone());
    }
    let out_pre = &p.mlp.weights[m] * &cur + &p.mlp.biases[m];
    let output = out_pre.map(sigmoid);
    preacts.push(out_pre);
    ForwardCache { input: input.clone(), preacts, hidden, output }
}

/// Recurrent forward pass; returns the decay rates and the updated
/// hidden state.
pub fn rnn_forward(
    p: &RnnParams,
    z: &NetInput,
    q_prev: &RnnHiddenState,
) -> (DVector<f64>, RnnHiddenState) {
    let cache = rnn_forward_cached(p, &z.to_vector(), q_prev);
    let q_new = RnnHiddenState { layers: cache.hidden.clone() };
    (cache.output, q_new)
}

/// Reverse sweep of the feedforward network.
///
/// Given a cotangent on the output, accumulates parameter gradients
/// into `grads` and returns the cotangent on the input vector.
pub fn mlp_vjp(
    p: &MlpParams,
    cache: &ForwardCache,
    out_cot: &DVector<f64>,
    grads: &mut ParamGrads,
) -> DVector<f64> {
    let m = p.num_hidden();
    // Sigmoid output layer.
    let out = &cache.output;
    let mut delta = DVector::from_fn(out.len(), |i, _| out_cot[i] * out[i] * (1.0 - out[i]));
    let last_hidden = if m == 0 { &cache.input } else { &cache.hidden[m - 1] };
    grads.weights[m] += &delta * last_hidden.transpose();
    grads.biases[m] += &delta;
    let mut back = p.weights[m].transpose() * &delta;
    for j in (0..m).rev() {
        delta = DVector::from_fn(back.len(), |i, _| {
            back[i] * p.activation.derivative(cache.preacts[j][i])
        });
        let layer_input = if j == 0 { &cache.input } else { &cache.hidden[j - 1] };
        grads.weights[j] += &delta * layer_input.transpose();
        grads.biases[j] += &delta;
        back = p.weights[j].transpose() * &delta;
    }
    back
}

/// One step of the recurrence with its inputs kept together so the
/// backward pass has everything it needs.
#[derive(Debug, Clone)]
pub struct RnnStep {
    pub cache: ForwardCache,
    pub q_prev: RnnHiddenState,
}

impl RnnStep {
    pub fn forward(p: &RnnParams, input: &DVector<f64>, q_prev: &RnnHiddenState) -> Self {
        Self { cache: rnn_forward_cached(p, input, q_prev), q_prev: q_prev.clone() }
    }

    pub fn output(&self) -> &DVector<f64> {
        &self.cache.output
    }

    pub fn q_new(&self) -> RnnHiddenState {
        RnnHiddenState { layers: self.cache.hidden.clone() }
    }

    /// Reverse sweep; see [`rnn_vjp`] for the cotangent conventions.
    pub fn vjp(
        &self,
        p: &RnnParams,
        out_cot: &DVector<f64>,
        hidden_cot: Option<&RnnHiddenState>,
        grads: &mut ParamGrads,
    ) -> (DVector<f64>, RnnHiddenState) {
        let cache = &self.cache;
        let m = p.mlp.num_hidden();
        let out = &cache.output;
        let delta_out = DVector::from_fn(out.len(), |i, _| out_cot[i] * out[i] * (1.0 - out[i]));
        let last_hidden = if m == 0 { &cache.input } else { &cache.hidden[m - 1] };
        grads.weights[m] += &delta_out * last_hidden.transpose();
        grads.biases[m] += &delta_out;

        if m == 0 {
            let input_cot = p.mlp.weights[0].transpose() * &delta_out;
            return (input_cot, RnnHiddenState { layers: Vec::new() });
        }

        let mut dq: Vec<DVector<f64>> =
            cache.hidden.iter().map(|h| DVector::zeros(h.len())).collect();
        dq[m - 1] += p.mlp.weights[m].transpose() * &delta_out;
        if let Some(hc) = hidden_cot {
            for j in 0..m {
                dq[j] += &hc.layers[j];
            }
        }

        let mut input_cot = DVector::zeros(cache.input.len());
        let mut q_prev_cot = vec![DVector::zeros(0); m];
        for j in (0..m).rev() {
            let delta = DVector::from_fn(dq[j].len(), |i, _| {
                dq[j][i] * p.mlp.activation.derivative(cache.preacts[j][i])
            });
            grads.biases[j] += &delta;
            grads.recurrent[j] += &delta * self.q_prev.layers[j].transpose();
            q_prev_cot[j] = p.recurrent[j].transpose() * &delta;
            let layer_input = if j == 0 { &cache.input } else { &cache.hidden[j - 1] };
            grads.weights[j] += &delta * layer_input.transpose();
            if j == 0 {
                input_cot = p.mlp.weights[0].transpose() * &delta;
            } else {
                dq[j - 1] += p.mlp.weights[j].transpose() * &delta;
            }
        }
        (input_cot, RnnHiddenState { layers: q_prev_cot })
    }
}

/// Jacobian of every decay rate with respect to every parameter, rows
/// indexed by output, columns by the canonical flat order.
pub fn mlp_param_jacobian(p: &MlpParams, z: &NetInput) -> DMatrix<f64> {
    let cache = mlp_forward_cached(p, &z.to_vector());
    let n_out = p.output_dim();
    let n_par = p.num_params();
    let mut jac = DMatrix::zeros(n_out, n_par);
    for i in 0..n_out {
        let mut grads = ParamGrads::zeros_like_mlp(p);
        let mut cot = DVector::zeros(n_out);
        cot[i] = 1.0;
        mlp_vjp(p, &cache, &cot, &mut grads);
        let mut flat = Vec::with_capacity(n_par);
        grads.flatten_into(&mut flat);
        for (c, v) in flat.into_iter().enumerate() {
            jac[(i, c)] = v;
        }
    }
    jac
}

/// Same as [`mlp_param_jacobian`] for a single recurrent step; the
/// previous hidden state is held fixed.
pub fn rnn_param_jacobian(p: &RnnParams, z: &NetInput, q_prev: &RnnHiddenState) -> DMatrix<f64> {
    let step = RnnStep::forward(p, &z.to_vector(), q_prev);
    let n_out = p.mlp.output_dim();
    let n_par = p.num_params();
    let mut jac = DMatrix::zeros(n_out, n_par);
    for i in 0..n_out {
        let mut grads = ParamGrads::zeros_like_rnn(p);
        let mut cot = DVector::zeros(n_out);
        cot[i] = 1.0;
        step.vjp(p, &cot, None, &mut grads);
        let mut flat = Vec::with_capacity(n_par);
        grads.flatten_into(&mut flat);
        for (c, v) in flat.into_iter().enumerate() {
            jac[(i, c)] = v;
        }
    }
    jac
}

/// Jacobian of the decay rates with respect to the input vector.
pub fn mlp_input_jacobian(p: &MlpParams, input: &DVector<f64>) -> DMatrix<f64> {
    let cache = mlp_forward_cached(p, input);
    let n_out = p.output_dim();
    let mut jac = DMatrix::zeros(n_out, input.len());
    for i in 0..n_out {
        let mut grads = ParamGrads::zeros_like_mlp(p);
        let mut cot = DVector::zeros(n_out);
        cot[i] = 1.0;
        let input_cot = mlp_vjp(p, &cache, &cot, &mut grads);
        jac.set_row(i, &input_cot.transpose());
    }
    jac
}
