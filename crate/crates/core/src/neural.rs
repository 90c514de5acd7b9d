//! Neural branch: max-pooling, an LSTM encoder, ReLU/sigmoid MLP heads,
//! inverted dropout, AdaGrad, and exact backpropagation through time.
//!
//! A standardized feature row is max-pooled and read as a sequence of
//! `input_size`-wide steps; the LSTM's final hidden state feeds every MLP
//! head, and the heads' outputs are combined by a fixed convex weighting.

use serde::{Deserialize, Serialize};

use crate::data::FeatureMatrix;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const DEFAULT_HIDDEN_SIZE: usize = 70;

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid clamped to the open interval (0, 1).
#[inline]
pub fn sigmoid_open(z: f64) -> f64 {
    sigmoid(z).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// `log(1 + e^z)` without overflow.
#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Windowed maximum. A trailing partial window contributes the maximum of
/// whatever elements remain.
pub fn max_pool_1d(v: &[f64], window: usize, stride: usize) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if window == 0 || stride == 0 || window > v.len() {
        return Err(Error::Config(format!(
            "invalid pooling window {window} / stride {stride} for length {}",
            v.len()
        )));
    }
    Ok((0..v.len())
        .step_by(stride)
        .map(|start| {
            v[start..(start + window).min(v.len())]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect())
}

fn glorot(rng: &mut Rng, n: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| (2.0 * rng::unit(rng) - 1.0) * limit).collect()
}

/// `out += m x` for a row-major `rows x x.len()` matrix.
#[inline]
fn matvec_add(m: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(m.chunks_exact(cols)) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += m^T d`.
#[inline]
fn matvec_t_add(m: &[f64], d: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (di, row) in d.iter().zip(m.chunks_exact(cols)) {
        if *di != 0.0 {
            for (o, a) in out.iter_mut().zip(row) {
                *o += di * a;
            }
        }
    }
}

/// `g += d x^T`.
#[inline]
fn outer_add(g: &mut [f64], d: &[f64], x: &[f64]) {
    let cols = x.len();
    for (di, row) in d.iter().zip(g.chunks_exact_mut(cols)) {
        if *di != 0.0 {
            for (o, a) in row.iter_mut().zip(x) {
                *o += di * a;
            }
        }
    }
}

/// LSTM layer with zero initial state. Gate blocks are stacked in the order
/// input, forget, cell candidate, output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmLayer {
    pub input_size: usize,
    pub hidden_size: usize,
    /// `4H x I`, row-major.
    pub w_input: Vec<f64>,
    /// `4H x H`, row-major.
    pub w_hidden: Vec<f64>,
    pub bias: Vec<f64>,
}

struct LstmCache {
    /// Hidden states h_0..h_T (h_0 = 0).
    h: Vec<Vec<f64>>,
    /// Cell states c_0..c_T.
    c: Vec<Vec<f64>>,
    /// Post-activation gates per step, `4H` each.
    gates: Vec<Vec<f64>>,
}

impl LstmLayer {
    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        Self {
            input_size,
            hidden_size,
            w_input: vec![0.0; 4 * hidden_size * input_size],
            w_hidden: vec![0.0; 4 * hidden_size * hidden_size],
            bias: vec![0.0; 4 * hidden_size],
        }
    }

    pub fn init(input_size: usize, hidden_size: usize, seed: u64) -> Self {
        let mut rng = rng::seeded(seed);
        let h = hidden_size;
        Self {
            input_size,
            hidden_size,
            w_input: glorot(&mut rng, 4 * h * input_size, input_size, h),
            w_hidden: glorot(&mut rng, 4 * h * h, h, h),
            bias: vec![0.0; 4 * h],
        }
    }

    pub fn n_params(&self) -> usize {
        self.w_input.len() + self.w_hidden.len() + self.bias.len()
    }

    pub fn tensors(&self) -> [&Vec<f64>; 3] {
        [&self.w_input, &self.w_hidden, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 3] {
        [&mut self.w_input, &mut self.w_hidden, &mut self.bias]
    }

    fn check_sequence(&self, seq: &[f64]) -> Result<()> {
        if seq.is_empty() || !seq.len().is_multiple_of(self.input_size) {
            return Err(Error::DimensionMismatch {
                expected: self.input_size,
                found: seq.len(),
            });
        }
        Ok(())
    }

    /// Runs the recurrence over a flattened sequence of `input_size` steps.
    fn forward_cached(&self, seq: &[f64]) -> LstmCache {
        let h = self.hidden_size;
        let steps = seq.len() / self.input_size;
        let mut cache = LstmCache {
            h: Vec::with_capacity(steps + 1),
            c: Vec::with_capacity(steps + 1),
            gates: Vec::with_capacity(steps),
        };
        cache.h.push(vec![0.0; h]);
        cache.c.push(vec![0.0; h]);
        for x in seq.chunks_exact(self.input_size) {
            let mut z = self.bias.clone();
            matvec_add(&self.w_input, x, &mut z);
            matvec_add(&self.w_hidden, cache.h.last().unwrap(), &mut z);
            for v in &mut z[..2 * h] {
                *v = sigmoid(*v);
            }
            for v in &mut z[2 * h..3 * h] {
                *v = v.tanh();
            }
            for v in &mut z[3 * h..] {
                *v = sigmoid(*v);
            }
            let c_prev = cache.c.last().unwrap();
            let mut c = vec![0.0; h];
            let mut hs = vec![0.0; h];
            for k in 0..h {
                c[k] = z[h + k] * c_prev[k] + z[k] * z[2 * h + k];
                hs[k] = z[3 * h + k] * c[k].tanh();
            }
            cache.gates.push(z);
            cache.c.push(c);
            cache.h.push(hs);
        }
        cache
    }

    /// Backpropagation through time given `dL/dh_T`; accumulates into `grad`.
    fn backward(&self, seq: &[f64], cache: &LstmCache, dh_last: &[f64], grad: &mut LstmLayer) {
        let h = self.hidden_size;
        let steps = cache.gates.len();
        let mut dh = dh_last.to_vec();
        let mut dc = vec![0.0; h];
        let mut dz = vec![0.0; 4 * h];
        for t in (0..steps).rev() {
            let gates = &cache.gates[t];
            let c = &cache.c[t + 1];
            let c_prev = &cache.c[t];
            for k in 0..h {
                let (i, f, g, o) = (gates[k], gates[h + k], gates[2 * h + k], gates[3 * h + k]);
                let tc = c[k].tanh();
                let d_o = dh[k] * tc;
                dc[k] += dh[k] * o * (1.0 - tc * tc);
                let d_i = dc[k] * g;
                let d_g = dc[k] * i;
                let d_f = dc[k] * c_prev[k];
                dz[k] = d_i * i * (1.0 - i);
                dz[h + k] = d_f * f * (1.0 - f);
                dz[2 * h + k] = d_g * (1.0 - g * g);
                dz[3 * h + k] = d_o * o * (1.0 - o);
                dc[k] *= f;
            }
            let x = &seq[t * self.input_size..(t + 1) * self.input_size];
            outer_add(&mut grad.w_input, &dz, x);
            outer_add(&mut grad.w_hidden, &dz, &cache.h[t]);
            for (b, d) in grad.bias.iter_mut().zip(&dz) {
                *b += d;
            }
            dh.iter_mut().for_each(|v| *v = 0.0);
            matvec_t_add(&self.w_hidden, &dz, &mut dh);
        }
    }
}

/// Final hidden state and every hidden state h_1..h_T.
pub fn lstm_forward(layer: &LstmLayer, sequence: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if sequence.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut flat = Vec::with_capacity(sequence.len() * layer.input_size);
    for step in sequence {
        if step.len() != layer.input_size {
            return Err(Error::DimensionMismatch {
                expected: layer.input_size,
                found: step.len(),
            });
        }
        flat.extend_from_slice(step);
    }
    let mut cache = layer.forward_cached(&flat);
    cache.h.remove(0);
    Ok((cache.h.last().unwrap().clone(), cache.h))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub n_in: usize,
    pub n_out: usize,
    /// `n_out x n_in`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Feed-forward network: two ReLU hidden layers and a single sigmoid output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpNetwork {
    pub layers: Vec<DenseLayer>,
}

impl MlpNetwork {
    fn check_sizes(input: usize, hidden: [usize; 2]) -> Result<()> {
        if input == 0 || hidden.contains(&0) {
            return Err(Error::Config("mlp layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn zeros(input: usize, hidden: [usize; 2]) -> Result<Self> {
        Self::check_sizes(input, hidden)?;
        let sizes = [input, hidden[0], hidden[1], 1];
        Ok(Self {
            layers: sizes
                .windows(2)
                .map(|w| DenseLayer {
                    n_in: w[0],
                    n_out: w[1],
                    weights: vec![0.0; w[0] * w[1]],
                    bias: vec![0.0; w[1]],
                })
                .collect(),
        })
    }

    pub fn init(input: usize, hidden: [usize; 2], seed: u64) -> Result<Self> {
        let mut net = Self::zeros(input, hidden)?;
        let mut rng = rng::seeded(seed);
        for layer in &mut net.layers {
            layer.weights = glorot(&mut rng, layer.weights.len(), layer.n_in, layer.n_out);
        }
        Ok(net)
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        self.layers.iter().flat_map(|l| [&l.weights, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weights, &mut l.bias])
            .collect()
    }

    fn zeroed(&self) -> Self {
        let mut g = self.clone();
        for t in g.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        g
    }

    /// Forward pass returning per-layer inputs, pre-activations, dropout
    /// masks and the output logit.
    fn forward_cached(&self, x: &[f64], masks: &[Vec<f64>]) -> MlpCache {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = layer.bias.clone();
            matvec_add(&layer.weights, &a, &mut z);
            inputs.push(a);
            if k == last {
                pre.push(z);
                break;
            }
            let mut next: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
            if let Some(mask) = masks.get(k) {
                for (v, m) in next.iter_mut().zip(mask) {
                    *v *= m;
                }
            }
            pre.push(z);
            a = next;
        }
        let logit = pre[last][0];
        MlpCache { inputs, pre, logit }
    }

    /// Accumulates parameter gradients for upstream `d_logit`; returns
    /// `dL/dx`.
    fn backward(&self, cache: &MlpCache, masks: &[Vec<f64>], d_logit: f64, grad: &mut MlpNetwork) -> Vec<f64> {
        let mut dz = vec![d_logit];
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let g = &mut grad.layers[k];
            outer_add(&mut g.weights, &dz, &cache.inputs[k]);
            for (b, d) in g.bias.iter_mut().zip(&dz) {
                *b += d;
            }
            let mut da = vec![0.0; layer.n_in];
            matvec_t_add(&layer.weights, &dz, &mut da);
            if k == 0 {
                return da;
            }
            let z_prev = &cache.pre[k - 1];
            let mask = masks.get(k - 1);
            dz = da
                .iter()
                .enumerate()
                .map(|(u, d)| {
                    let m = mask.map_or(1.0, |m| m[u]);
                    if z_prev[u] > 0.0 {
                        d * m
                    } else {
                        0.0
                    }
                })
                .collect();
        }
        unreachable!("network has at least one layer")
    }
}

struct MlpCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    logit: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutSpec {
    pub rate: f64,
    pub seed: u64,
    pub training_mode: bool,
}

impl DropoutSpec {
    pub fn inference() -> Self {
        Self {
            rate: 0.0,
            seed: 0,
            training_mode: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rate) {
            return Err(Error::Config(format!(
                "dropout rate must lie in [0,1), got {}",
                self.rate
            )));
        }
        Ok(())
    }

    fn active(&self) -> bool {
        self.training_mode && self.rate > 0.0
    }

    /// Masks for the hidden layers of `net`, drawn from `seed`.
    fn masks(&self, net: &MlpNetwork, seed: u64) -> Vec<Vec<f64>> {
        if !self.active() {
            return Vec::new();
        }
        let mut rng = rng::seeded(seed);
        net.layers[..net.layers.len() - 1]
            .iter()
            .map(|l| dropout_mask(l.n_out, self.rate, &mut rng))
            .collect()
    }
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, else
/// `1 / (1 - rate)`.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng::unit(rng) < rate { 0.0 } else { keep })
        .collect()
}

/// Network output in (0, 1). Dropout only acts in training mode, with masks
/// drawn from `dropout.seed`.
pub fn mlp_forward(net: &MlpNetwork, x: &[f64], dropout: &DropoutSpec) -> Result<f64> {
    dropout.validate()?;
    if x.len() != net.input_size() {
        return Err(Error::DimensionMismatch {
            expected: net.input_size(),
            found: x.len(),
        });
    }
    let masks = dropout.masks(net, dropout.seed);
    Ok(sigmoid_open(net.forward_cached(x, &masks).logit))
}

/// `sum_i w_i y_i` for convex weights.
pub fn ensemble_combine(outputs: &[f64], weights: &[f64]) -> Result<f64> {
    if outputs.len() != weights.len() || outputs.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: weights.len(),
            found: outputs.len(),
        });
    }
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::WeightSum(sum));
    }
    Ok(outputs.iter().zip(weights).map(|(y, w)| y * w).sum())
}

/// Gradient buffers laid out exactly like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub lstm: LstmLayer,
    pub mlp: MlpNetwork,
    /// Mean binary cross-entropy over the batch.
    pub loss: f64,
}

fn check_batch(layer: &LstmLayer, net: &MlpNetwork, batch: &FeatureMatrix) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if net.input_size() != layer.hidden_size {
        return Err(Error::DimensionMismatch {
            expected: layer.hidden_size,
            found: net.input_size(),
        });
    }
    layer.check_sequence(batch.row(0))
}

/// Per-sample dropout stream.
fn sample_seed(dropout: &DropoutSpec, index: usize) -> u64 {
    rng::derive_seed(dropout.seed, index as u64)
}

/// Exact gradients of the mean binary cross-entropy of `net(lstm(row))`
/// against the batch labels. Each row is one flattened input sequence.
/// Dropout masks are a pure function of `(dropout.seed, row index)`.
pub fn backprop(
    layer: &LstmLayer,
    net: &MlpNetwork,
    batch: &FeatureMatrix,
    dropout: &DropoutSpec,
) -> Result<Gradients> {
    dropout.validate()?;
    check_batch(layer, net, batch)?;
    let n = batch.n_rows() as f64;
    let mut g_lstm = LstmLayer::zeros(layer.input_size, layer.hidden_size);
    let mut g_mlp = net.zeroed();
    let mut loss = 0.0;
    for (idx, (seq, &label)) in batch.rows().zip(batch.labels()).enumerate() {
        let cache = layer.forward_cached(seq);
        let masks = dropout.masks(net, sample_seed(dropout, idx));
        let out = net.forward_cached(cache.h.last().unwrap(), &masks);
        let y = f64::from(label);
        let l = softplus(out.logit) - y * out.logit;
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss(idx));
        }
        loss += l / n;
        let d_logit = (sigmoid(out.logit) - y) / n;
        let dh = net.backward(&out, &masks, d_logit, &mut g_mlp);
        layer.backward(seq, &cache, &dh, &mut g_lstm);
    }
    Ok(Gradients {
        lstm: g_lstm,
        mlp: g_mlp,
        loss,
    })
}

/// Mean binary cross-entropy, forward only.
pub fn batch_loss(layer: &LstmLayer, net: &MlpNetwork, batch: &FeatureMatrix, dropout: &DropoutSpec) -> Result<f64> {
    dropout.validate()?;
    check_batch(layer, net, batch)?;
    let n = batch.n_rows() as f64;
    let mut loss = 0.0;
    for (idx, (seq, &label)) in batch.rows().zip(batch.labels()).enumerate() {
        let cache = layer.forward_cached(seq);
        let masks = dropout.masks(net, sample_seed(dropout, idx));
        let logit = net.forward_cached(cache.h.last().unwrap(), &masks).logit;
        loss += (softplus(logit) - f64::from(label) * logit) / n;
    }
    Ok(loss)
}

/// Per-parameter adaptive step sizes from accumulated squared gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaGradState {
    pub learning_rate: f64,
    pub epsilon: f64,
    pub accumulators: Vec<f64>,
}

impl AdaGradState {
    pub fn new(learning_rate: f64, len: usize) -> Self {
        Self {
            learning_rate,
            epsilon: 1e-8,
            accumulators: vec![0.0; len],
        }
    }
}

/// `acc += g^2; theta -= lr g / (sqrt(acc) + eps)`.
pub fn adagrad_step(state: &mut AdaGradState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.accumulators.len() {
        return Err(Error::DimensionMismatch {
            expected: state.accumulators.len(),
            found: grads.len(),
        });
    }
    for ((p, g), acc) in params.iter_mut().zip(grads).zip(&mut state.accumulators) {
        *acc += g * g;
        *p -= state.learning_rate * g / (acc.sqrt() + state.epsilon);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralConfig {
    pub hidden_size: usize,
    pub mlp_hidden: [usize; 2],
    pub ensemble_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub pool_window: usize,
    pub pool_stride: usize,
}

impl Default for NeuralConfig {
    fn default() -> Self {
        Self {
            hidden_size: DEFAULT_HIDDEN_SIZE,
            mlp_hidden: [12, 8],
            ensemble_size: 3,
            epochs: 50,
            learning_rate: 0.2,
            dropout: 0.35,
            pool_window: 2,
            pool_stride: 2,
        }
    }
}

impl NeuralConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.ensemble_size == 0 {
            return Err(Error::Config("hidden_size and ensemble_size must be positive".into()));
        }
        if self.pool_window == 0 || self.pool_stride == 0 {
            return Err(Error::Config("pooling window and stride must be positive".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        DropoutSpec {
            rate: self.dropout,
            seed: 0,
            training_mode: true,
        }
        .validate()
    }
}

/// Trained neural branch: pooling, shared LSTM and the weighted MLP heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralEncoder {
    pub pool_window: usize,
    pub pool_stride: usize,
    pub lstm: LstmLayer,
    pub heads: Vec<MlpNetwork>,
    pub ensemble_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuralTrainStats {
    pub epochs: usize,
    /// Summed head losses after each epoch's update was computed.
    pub loss_history: Vec<f64>,
}

impl NeuralEncoder {
    /// Pools a standardized feature row into the LSTM input sequence.
    pub fn sequence(&self, features: &[f64]) -> Result<Vec<f64>> {
        max_pool_1d(features, self.pool_window, self.pool_stride)
    }

    /// Final LSTM hidden state for a standardized feature row.
    pub fn encode(&self, features: &[f64]) -> Result<Vec<f64>> {
        let seq = self.sequence(features)?;
        self.lstm.check_sequence(&seq)?;
        Ok(self.lstm.forward_cached(&seq).h.pop().unwrap())
    }

    /// Outputs of each head in inference mode.
    pub fn head_outputs(&self, features: &[f64]) -> Result<Vec<f64>> {
        let h = self.encode(features)?;
        Ok(self
            .heads
            .iter()
            .map(|net| sigmoid_open(net.forward_cached(&h, &[]).logit))
            .collect())
    }

    /// Weighted ensemble output in (0, 1).
    pub fn score(&self, features: &[f64]) -> Result<f64> {
        ensemble_combine(&self.head_outputs(features)?, &self.ensemble_weights)
    }

    /// Full-batch training of the shared LSTM and every head with AdaGrad.
    /// The objective is the sum of the heads' mean cross-entropies.
    pub fn train(train: &FeatureMatrix, cfg: &NeuralConfig, seed: u64) -> Result<(Self, NeuralTrainStats)> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let window = cfg.pool_window.min(train.n_cols());
        let mut seq_values = Vec::new();
        for row in train.rows() {
            seq_values.extend(max_pool_1d(row, window, cfg.pool_stride)?);
        }
        let seq_len = seq_values.len() / train.n_rows();
        let names = (0..seq_len).map(|t| format!("t{t}")).collect();
        let batch = FeatureMatrix::from_flat(seq_values, train.labels().to_vec(), names)?;

        let mut encoder = NeuralEncoder {
            pool_window: window,
            pool_stride: cfg.pool_stride,
            lstm: LstmLayer::init(1, cfg.hidden_size, rng::derive_seed(seed, 1)),
            heads: (0..cfg.ensemble_size)
                .map(|k| MlpNetwork::init(cfg.hidden_size, cfg.mlp_hidden, rng::derive_seed(seed, 100 + k as u64)))
                .collect::<Result<_>>()?,
            ensemble_weights: vec![1.0 / cfg.ensemble_size as f64; cfg.ensemble_size],
        };

        let mut lstm_opt: Vec<AdaGradState> = encoder
            .lstm
            .tensors()
            .iter()
            .map(|t| AdaGradState::new(cfg.learning_rate, t.len()))
            .collect();
        let mut head_opt: Vec<Vec<AdaGradState>> = encoder
            .heads
            .iter()
            .map(|h| {
                h.tensors()
                    .iter()
                    .map(|t| AdaGradState::new(cfg.learning_rate, t.len()))
                    .collect()
            })
            .collect();

        let mut loss_history = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            let dropouts: Vec<DropoutSpec> = (0..encoder.heads.len())
                .map(|k| DropoutSpec {
                    rate: cfg.dropout,
                    seed: rng::derive_seed(rng::derive_seed(seed, 1000 + epoch as u64), k as u64),
                    training_mode: true,
                })
                .collect();
            let grads = encoder.ensemble_gradients(&batch, &dropouts)?;
            loss_history.push(grads.loss);

            for ((state, param), grad) in lstm_opt
                .iter_mut()
                .zip(encoder.lstm.tensors_mut())
                .zip(grads.lstm.tensors())
            {
                adagrad_step(state, param, grad)?;
            }
            for ((states, head), g_head) in head_opt.iter_mut().zip(&mut encoder.heads).zip(&grads.heads) {
                for ((state, param), grad) in states.iter_mut().zip(head.tensors_mut()).zip(g_head.tensors()) {
                    adagrad_step(state, param, grad)?;
                }
            }
        }
        Ok((
            encoder,
            NeuralTrainStats {
                epochs: cfg.epochs,
                loss_history,
            },
        ))
    }

    /// One LSTM pass per sample; the heads' `dL/dh` are summed before BPTT.
    fn ensemble_gradients(&self, batch: &FeatureMatrix, dropouts: &[DropoutSpec]) -> Result<EnsembleGradients> {
        let n = batch.n_rows() as f64;
        let mut g_lstm = LstmLayer::zeros(self.lstm.input_size, self.lstm.hidden_size);
        let mut g_heads: Vec<MlpNetwork> = self.heads.iter().map(MlpNetwork::zeroed).collect();
        let mut loss = 0.0;
        let mut dh_total = vec![0.0; self.lstm.hidden_size];
        for (idx, (seq, &label)) in batch.rows().zip(batch.labels()).enumerate() {
            let cache = self.lstm.forward_cached(seq);
            let h_last = cache.h.last().unwrap();
            let y = f64::from(label);
            dh_total.iter_mut().for_each(|v| *v = 0.0);
            for ((net, g_net), dropout) in self.heads.iter().zip(&mut g_heads).zip(dropouts) {
                let masks = dropout.masks(net, sample_seed(dropout, idx));
                let out = net.forward_cached(h_last, &masks);
                let l = softplus(out.logit) - y * out.logit;
                if !l.is_finite() {
                    return Err(Error::NonFiniteLoss(idx));
                }
                loss += l / n;
                let dh = net.backward(&out, &masks, (sigmoid(out.logit) - y) / n, g_net);
                for (t, d) in dh_total.iter_mut().zip(dh) {
                    *t += d;
                }
            }
            self.lstm.backward(seq, &cache, &dh_total, &mut g_lstm);
        }
        Ok(EnsembleGradients {
            lstm: g_lstm,
            heads: g_heads,
            loss,
        })
    }
}

struct EnsembleGradients {
    lstm: LstmLayer,
    heads: Vec<MlpNetwork>,
    loss: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_examples() {
        let v = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0];
        assert_eq!(max_pool_1d(&v, 2, 2).unwrap(), [3.0, 4.0, 9.0, 6.0]);
        assert_eq!(max_pool_1d(&v, 8, 1).unwrap()[0], 9.0);
        assert_eq!(max_pool_1d(&[2.0; 5], 2, 2).unwrap(), [2.0; 3]);
        assert_eq!(max_pool_1d(&[1.0, 7.0, 3.0], 2, 2).unwrap(), [7.0, 3.0]);
        assert!(max_pool_1d(&[], 1, 1).is_err());
        assert!(max_pool_1d(&[1.0], 2, 1).is_err());
    }

    #[test]
    fn zero_lstm_stays_zero() {
        let layer = LstmLayer::zeros(1, DEFAULT_HIDDEN_SIZE);
        let seq: Vec<Vec<f64>> = [0.3, -2.0, 5.0].iter().map(|&v| vec![v]).collect();
        let (last, all) = lstm_forward(&layer, &seq).unwrap();
        assert_eq!(last.len(), 70);
        assert!(all.iter().flatten().all(|&h| h == 0.0));

        let cache = layer.forward_cached(&[1.5]);
        let g = &cache.gates[0];
        let h = DEFAULT_HIDDEN_SIZE;
        assert!(g[..2 * h].iter().chain(&g[3 * h..]).all(|&v| v == 0.5));
        assert!(g[2 * h..3 * h].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_rejects_bad_width() {
        let layer = LstmLayer::zeros(2, 3);
        assert!(lstm_forward(&layer, &[vec![1.0]]).is_err());
        assert!(lstm_forward(&layer, &[]).is_err());
    }

    #[test]
    fn hidden_states_bounded() {
        let mut layer = LstmLayer::init(1, 8, 3);
        layer.w_input.iter_mut().for_each(|w| *w *= 50.0);
        let seq: Vec<Vec<f64>> = (0..6).map(|t| vec![t as f64 * 3.0 - 7.0]).collect();
        let (_, all) = lstm_forward(&layer, &seq).unwrap();
        assert!(all.iter().flatten().all(|h| h.abs() <= 1.0));
    }

    #[test]
    fn zero_mlp_outputs_half() {
        let net = MlpNetwork::zeros(4, [3, 2]).unwrap();
        assert_eq!(
            mlp_forward(&net, &[1.0, 2.0, 3.0, 4.0], &DropoutSpec::inference()).unwrap(),
            0.5
        );
    }

    #[test]
    fn mlp_output_open_interval() {
        let mut net = MlpNetwork::init(3, [4, 4], 9).unwrap();
        net.layers[2].bias[0] = 1e4;
        let y = mlp_forward(&net, &[1.0, 1.0, 1.0], &DropoutSpec::inference()).unwrap();
        assert!(y > 0.0 && y < 1.0);
        net.layers[2].bias[0] = -1e4;
        let y = mlp_forward(&net, &[1.0, 1.0, 1.0], &DropoutSpec::inference()).unwrap();
        assert!(y > 0.0 && y < 1.0);
        assert!(mlp_forward(&net, &[1.0], &DropoutSpec::inference()).is_err());
    }

    #[test]
    fn zero_rate_dropout_is_identity() {
        let net = MlpNetwork::init(5, [6, 4], 2).unwrap();
        let x = [0.1, -0.4, 2.0, 0.0, 1.1];
        let train = DropoutSpec {
            rate: 0.0,
            seed: 77,
            training_mode: true,
        };
        assert_eq!(
            mlp_forward(&net, &x, &train).unwrap(),
            mlp_forward(&net, &x, &DropoutSpec::inference()).unwrap()
        );
    }

    #[test]
    fn dropout_preserves_expectation() {
        let v = [0.5, 1.0, 2.0, 3.0];
        let mut rng = rng::seeded(5);
        let mut mean = [0.0; 4];
        let trials = 100_000;
        for _ in 0..trials {
            let mask = dropout_mask(4, 0.35, &mut rng);
            for k in 0..4 {
                mean[k] += v[k] * mask[k] / trials as f64;
            }
        }
        for k in 0..4 {
            assert!((mean[k] - v[k]).abs() <= 0.02 * v[k], "{k}: {}", mean[k]);
        }
    }

    #[test]
    fn ensemble_examples() {
        assert!((ensemble_combine(&[0.8, 0.6], &[0.5, 0.5]).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(ensemble_combine(&[0.42], &[1.0]).unwrap(), 0.42);
        let c = ensemble_combine(&[0.3; 3], &[0.2, 0.5, 0.3]).unwrap();
        assert!((c - 0.3).abs() < 1e-15);
        assert!(matches!(
            ensemble_combine(&[0.3, 0.2], &[0.5, 0.6]),
            Err(Error::WeightSum(_))
        ));
        assert!(ensemble_combine(&[0.3], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn adagrad_examples() {
        let mut state = AdaGradState::new(0.2, 1);
        let mut theta = [1.0];
        adagrad_step(&mut state, &mut theta, &[3.0]).unwrap();
        assert!((theta[0] - 0.8).abs() < 1e-7);
        let first = 1.0 - theta[0];
        let before = theta[0];
        adagrad_step(&mut state, &mut theta, &[3.0]).unwrap();
        assert!(before - theta[0] < first);

        let mut state = AdaGradState::new(0.2, 2);
        let mut p = [0.5, -1.0];
        adagrad_step(&mut state, &mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, [0.5, -1.0]);
        assert_eq!(state.accumulators, [0.0, 0.0]);
        assert!(adagrad_step(&mut state, &mut p, &[1.0]).is_err());
    }

    fn small_batch(seed: u64) -> FeatureMatrix {
        let mut rng = rng::seeded(seed);
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..4).map(|_| 4.0 * rng::unit(&mut rng) - 2.0).collect())
            .collect();
        let labels = (0..6).map(|i| (i % 2) as u8).collect();
        FeatureMatrix::new(rows, labels, (0..4).map(|t| format!("t{t}")).collect()).unwrap()
    }

    #[test]
    fn duplicated_batch_keeps_mean_gradient() {
        let layer = LstmLayer::init(1, 5, 1);
        let net = MlpNetwork::init(5, [4, 3], 2).unwrap();
        let batch = small_batch(3);
        let idx: Vec<usize> = (0..batch.n_rows()).chain(0..batch.n_rows()).collect();
        let doubled = batch.select_rows(&idx);
        let g1 = backprop(&layer, &net, &batch, &DropoutSpec::inference()).unwrap();
        let g2 = backprop(&layer, &net, &doubled, &DropoutSpec::inference()).unwrap();
        for (a, b) in g1.lstm.w_hidden.iter().zip(&g2.lstm.w_hidden) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((g1.loss - g2.loss).abs() < 1e-12);
    }

    #[test]
    fn saturated_predictions_have_tiny_gradients() {
        let layer = LstmLayer::init(1, 5, 1);
        let mut net = MlpNetwork::init(5, [4, 3], 2).unwrap();
        // output layer ignores its inputs and predicts 1 with certainty
        net.layers[2].weights.iter_mut().for_each(|w| *w = 0.0);
        net.layers[2].bias[0] = 40.0;
        let batch = small_batch(4);
        let ones =
            FeatureMatrix::from_flat(batch.values().to_vec(), vec![1; 6], batch.column_names().to_vec()).unwrap();
        let g = backprop(&layer, &net, &ones, &DropoutSpec::inference()).unwrap();
        assert!(g.mlp.layers[2].bias[0].abs() < 1e-15);
        assert!(g.loss < 1e-15);
    }

    #[test]
    fn backprop_reports_non_finite_loss() {
        let layer = LstmLayer::init(1, 3, 1);
        let mut net = MlpNetwork::init(3, [2, 2], 2).unwrap();
        net.layers[2].bias[0] = f64::NAN;
        let batch = small_batch(1);
        assert!(matches!(
            backprop(&layer, &net, &batch, &DropoutSpec::inference()),
            Err(Error::NonFiniteLoss(0))
        ));
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let data = crate::data::synth_dataset(80, 8, 0.5, 3.0, 12).unwrap();
        let cfg = NeuralConfig {
            hidden_size: 8,
            epochs: 30,
            ..NeuralConfig::default()
        };
        let (a, stats) = NeuralEncoder::train(&data, &cfg, 3).unwrap();
        let (b, _) = NeuralEncoder::train(&data, &cfg, 3).unwrap();
        assert_eq!(a, b);
        assert!(stats.loss_history.last().unwrap() < &stats.loss_history[0]);
        let s = a.score(data.row(0)).unwrap();
        assert!(s > 0.0 && s < 1.0);
    }
}
