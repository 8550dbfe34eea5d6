//! Two stacked LSTM layers with dropout and a dense head, with exact
//! gradients via backpropagation through time.
//!
//! Per step, for every gate `g` in (input, forget, cell, output):
//!
//! ```text
//! i = σ(W_xi·x + W_hi·h_prev + b_i)
//! f = σ(W_xf·x + W_hf·h_prev + b_f)
//! c̃ = tanh(W_xc·x + W_hc·h_prev + b_c)
//! o = σ(W_xo·x + W_ho·h_prev + b_o)
//! C = f ⊙ C_prev + i ⊙ c̃
//! h = o ⊙ tanh(C)
//! ```
//!
//! Batched kernels carry one row per window; a row's result never depends
//! on the other rows in its batch, so batched and single-window inference
//! agree bitwise.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{
    gemm_ab_acc, gemm_abt_acc, gemm_atb_acc, glorot_init, sigmoid, sigmoid_grad, tanh, tanh_grad, Matrix,
    NumericError, Rng,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Shape(#[from] NumericError),
    #[error("empty batch")]
    EmptyBatch,
    #[error("cache mismatch: {0}")]
    State(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Architecture and training hyperparameters. Defaults follow the reference
/// configuration: 200 units, one dense output, 10 epochs, batch 1000,
/// dropout 0.1, learning rate 0.001.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub units: usize,
    pub dense_units: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub timesteps: usize,
    pub features: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub horizon: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            units: 200,
            dense_units: 1,
            epochs: 10,
            batch_size: 1000,
            timesteps: 24,
            features: 1,
            dropout: 0.1,
            learning_rate: 0.001,
            horizon: 1,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("units", self.units),
            ("dense_units", self.dense_units),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("timesteps", self.timesteps),
            ("features", self.features),
            ("horizon", self.horizon),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(ModelError::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Weights of one gate: input projection, recurrent projection and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct GateWeights {
    /// units × input_dim
    pub w_x: Matrix,
    /// units × units
    pub w_h: Matrix,
    pub b: Vec<f64>,
}

impl GateWeights {
    pub fn zeros(units: usize, input_dim: usize) -> Self {
        Self {
            w_x: Matrix::zeros(units, input_dim),
            w_h: Matrix::zeros(units, units),
            b: vec![0.0; units],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayerWeights {
    pub input: GateWeights,
    pub forget: GateWeights,
    pub cell: GateWeights,
    pub output: GateWeights,
}

pub const GATE_NAMES: [&str; 4] = ["input", "forget", "cell", "output"];

impl LstmLayerWeights {
    pub fn zeros(units: usize, input_dim: usize) -> Self {
        Self {
            input: GateWeights::zeros(units, input_dim),
            forget: GateWeights::zeros(units, input_dim),
            cell: GateWeights::zeros(units, input_dim),
            output: GateWeights::zeros(units, input_dim),
        }
    }

    /// Glorot-uniform weights, zero biases except the forget gate.
    pub fn init(rng: &mut Rng, units: usize, input_dim: usize, forget_bias: f64) -> Self {
        let mut gate = |bias: f64| GateWeights {
            w_x: glorot_init(rng, units, input_dim),
            w_h: glorot_init(rng, units, units),
            b: vec![bias; units],
        };
        let input = gate(0.0);
        let forget = gate(forget_bias);
        let cell = gate(0.0);
        let output = gate(0.0);
        Self {
            input,
            forget,
            cell,
            output,
        }
    }

    pub fn units(&self) -> usize {
        self.input.w_h.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.input.w_x.cols()
    }

    pub fn gates(&self) -> [&GateWeights; 4] {
        [&self.input, &self.forget, &self.cell, &self.output]
    }

    fn gates_mut(&mut self) -> [&mut GateWeights; 4] {
        [&mut self.input, &mut self.forget, &mut self.cell, &mut self.output]
    }

    fn check(&self) -> Result<(), ModelError> {
        let (u, d) = (self.units(), self.input_dim());
        for g in self.gates() {
            if g.w_x.shape() != (u, d) || g.w_h.shape() != (u, u) || g.b.len() != u {
                return Err(NumericError::Shape {
                    op: "lstm layer weights",
                    left: (u, d),
                    right: g.w_x.shape(),
                }
                .into());
            }
        }
        Ok(())
    }
}

/// Named view of one parameter tensor. Biases are column vectors.
#[derive(Debug)]
pub struct TensorView<'a> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [f64],
}

/// All trainable tensors of the network. Used for parameters and for their
/// gradients alike.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights {
    pub layer1: LstmLayerWeights,
    pub layer2: LstmLayerWeights,
    /// dense_units × units
    pub dense_w: Matrix,
    pub dense_b: Vec<f64>,
}

pub type Gradients = NetworkWeights;

impl NetworkWeights {
    pub fn zeros(hyper: &HyperParams) -> Self {
        Self {
            layer1: LstmLayerWeights::zeros(hyper.units, hyper.features),
            layer2: LstmLayerWeights::zeros(hyper.units, hyper.units),
            dense_w: Matrix::zeros(hyper.dense_units, hyper.units),
            dense_b: vec![0.0; hyper.dense_units],
        }
    }

    /// Tensors in canonical order with stable names.
    pub fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut out = Vec::with_capacity(26);
        for (prefix, layer) in [("lstm1", &self.layer1), ("lstm2", &self.layer2)] {
            for (gname, g) in GATE_NAMES.iter().zip(layer.gates()) {
                out.push(TensorView {
                    name: format!("{prefix}.{gname}.w_x"),
                    rows: g.w_x.rows(),
                    cols: g.w_x.cols(),
                    data: g.w_x.data(),
                });
                out.push(TensorView {
                    name: format!("{prefix}.{gname}.w_h"),
                    rows: g.w_h.rows(),
                    cols: g.w_h.cols(),
                    data: g.w_h.data(),
                });
                out.push(TensorView {
                    name: format!("{prefix}.{gname}.b"),
                    rows: g.b.len(),
                    cols: 1,
                    data: &g.b,
                });
            }
        }
        out.push(TensorView {
            name: "dense.w".into(),
            rows: self.dense_w.rows(),
            cols: self.dense_w.cols(),
            data: self.dense_w.data(),
        });
        out.push(TensorView {
            name: "dense.b".into(),
            rows: self.dense_b.len(),
            cols: 1,
            data: &self.dense_b,
        });
        out
    }

    /// Mutable tensors in the same order as [`NetworkWeights::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(26);
        for layer in [&mut self.layer1, &mut self.layer2] {
            for g in layer.gates_mut() {
                out.push(g.w_x.data_mut());
                out.push(g.w_h.data_mut());
                out.push(&mut g.b);
            }
        }
        out.push(self.dense_w.data_mut());
        out.push(&mut self.dense_b);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub weights: NetworkWeights,
    pub hyper: HyperParams,
}

impl ModelParams {
    pub fn zeros(hyper: HyperParams) -> Self {
        Self {
            weights: NetworkWeights::zeros(&hyper),
            hyper,
        }
    }

    /// Glorot-uniform weights, forget-gate bias 1, other biases 0.
    pub fn init(hyper: HyperParams, rng: &mut Rng) -> Self {
        Self::init_with_forget_bias(hyper, rng, 1.0)
    }

    pub fn init_with_forget_bias(hyper: HyperParams, rng: &mut Rng, forget_bias: f64) -> Self {
        let layer1 = LstmLayerWeights::init(rng, hyper.units, hyper.features, forget_bias);
        let layer2 = LstmLayerWeights::init(rng, hyper.units, hyper.units, forget_bias);
        let dense_w = glorot_init(rng, hyper.dense_units, hyper.units);
        Self {
            weights: NetworkWeights {
                layer1,
                layer2,
                dense_w,
                dense_b: vec![0.0; hyper.dense_units],
            },
            hyper,
        }
    }

    pub fn check(&self) -> Result<(), ModelError> {
        let h = &self.hyper;
        let w = &self.weights;
        w.layer1.check()?;
        w.layer2.check()?;
        let ok = w.layer1.units() == h.units
            && w.layer1.input_dim() == h.features
            && w.layer2.units() == h.units
            && w.layer2.input_dim() == h.units
            && w.dense_w.shape() == (h.dense_units, h.units)
            && w.dense_b.len() == h.dense_units;
        if !ok {
            return Err(ModelError::Config("weights do not match hyperparameters".into()));
        }
        Ok(())
    }
}

/// Activations retained from a single cell step.
#[derive(Debug, Clone, PartialEq)]
pub struct CellCache {
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub c_tilde: Vec<f64>,
    pub o: Vec<f64>,
    pub c: Vec<f64>,
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
}

/// One cell step on a single vector.
pub fn cell_forward(
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    weights: &LstmLayerWeights,
) -> Result<(Vec<f64>, Vec<f64>, CellCache), ModelError> {
    weights.check()?;
    let (u, d) = (weights.units(), weights.input_dim());
    if x.len() != d || h_prev.len() != u || c_prev.len() != u {
        return Err(NumericError::Shape {
            op: "cell_forward",
            left: (u, d),
            right: (h_prev.len(), x.len()),
        }
        .into());
    }
    let xm = Matrix::from_vec(1, d, x.to_vec())?;
    let hm = Matrix::from_vec(1, u, h_prev.to_vec())?;
    let cm = Matrix::from_vec(1, u, c_prev.to_vec())?;
    let step = step_forward(weights, &xm, &hm, &cm);
    let h = step.h.data().to_vec();
    let c = step.c.data().to_vec();
    let cache = CellCache {
        i: step.i.into_data(),
        f: step.f.into_data(),
        c_tilde: step.g.into_data(),
        o: step.o.into_data(),
        c: c.clone(),
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        c_prev: c_prev.to_vec(),
    };
    Ok((h, c, cache))
}

/// Batched per-step activations, one row per window.
#[derive(Debug, Clone)]
struct Step {
    i: Matrix,
    f: Matrix,
    g: Matrix,
    o: Matrix,
    c: Matrix,
    h: Matrix,
}

fn step_forward(w: &LstmLayerWeights, x: &Matrix, h_prev: &Matrix, c_prev: &Matrix) -> Step {
    let (b, u) = (x.rows(), w.units());
    let pre = |gate: &GateWeights| {
        let mut z = Matrix::zeros(b, u);
        for r in 0..b {
            z.row_mut(r).copy_from_slice(&gate.b);
        }
        gemm_abt_acc(x, &gate.w_x, &mut z);
        gemm_abt_acc(h_prev, &gate.w_h, &mut z);
        z
    };
    let mut i = pre(&w.input);
    let mut f = pre(&w.forget);
    let mut g = pre(&w.cell);
    let mut o = pre(&w.output);
    i.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
    f.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
    g.data_mut().iter_mut().for_each(|v| *v = tanh(*v));
    o.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
    let mut c = Matrix::zeros(b, u);
    let mut h = Matrix::zeros(b, u);
    for k in 0..b * u {
        let ck = f.data()[k] * c_prev.data()[k] + i.data()[k] * g.data()[k];
        c.data_mut()[k] = ck;
        h.data_mut()[k] = o.data()[k] * tanh(ck);
    }
    Step { i, f, g, o, c, h }
}

/// Retained activations of one layer over a sequence, for BPTT.
#[derive(Debug, Clone)]
pub struct LayerCache {
    inputs: Vec<Matrix>,
    steps: Vec<Step>,
}

impl LayerCache {
    pub fn timesteps(&self) -> usize {
        self.steps.len()
    }

    pub fn batch(&self) -> usize {
        self.inputs.first().map_or(0, Matrix::rows)
    }

    fn h(&self, t: usize) -> &Matrix {
        &self.steps[t].h
    }
}

/// Run a layer over `inputs` (one `batch × input_dim` matrix per step) from
/// zero initial state. Returns every hidden state plus the cache.
pub fn layer_forward_batch(
    weights: &LstmLayerWeights,
    inputs: Vec<Matrix>,
) -> Result<(Vec<Matrix>, LayerCache), ModelError> {
    weights.check()?;
    let first = inputs
        .first()
        .ok_or_else(|| ModelError::Config("empty sequence".into()))?;
    let (b, u) = (first.rows(), weights.units());
    for x in &inputs {
        if x.shape() != (b, weights.input_dim()) {
            return Err(NumericError::Shape {
                op: "layer_forward",
                left: (b, weights.input_dim()),
                right: x.shape(),
            }
            .into());
        }
    }
    let zeros = Matrix::zeros(b, u);
    let mut steps: Vec<Step> = Vec::with_capacity(inputs.len());
    for (t, x) in inputs.iter().enumerate() {
        let (h_prev, c_prev) = match t {
            0 => (&zeros, &zeros),
            _ => (&steps[t - 1].h, &steps[t - 1].c),
        };
        let step = step_forward(weights, x, h_prev, c_prev);
        steps.push(step);
    }
    let outputs = steps.iter().map(|s| s.h.clone()).collect();
    Ok((outputs, LayerCache { inputs, steps }))
}

/// Hidden outputs of a layer over a single sequence.
#[derive(Debug, Clone)]
pub struct LayerOutput {
    /// `timesteps × units` if sequences were requested, else `1 × units`.
    pub hidden: Matrix,
    pub final_c: Vec<f64>,
    pub cache: LayerCache,
}

/// Run a layer over one sequence (`timesteps × input_dim`).
pub fn layer_forward(
    sequence: &Matrix,
    weights: &LstmLayerWeights,
    return_sequences: bool,
) -> Result<LayerOutput, ModelError> {
    if sequence.rows() == 0 {
        return Err(ModelError::Config("empty sequence".into()));
    }
    let inputs = (0..sequence.rows())
        .map(|t| Matrix::from_vec(1, sequence.cols(), sequence.row(t).to_vec()))
        .collect::<Result<Vec<_>, _>>()?;
    let (outputs, cache) = layer_forward_batch(weights, inputs)?;
    let u = weights.units();
    let hidden = if return_sequences {
        let data = outputs.iter().flat_map(|m| m.data().iter().copied()).collect();
        Matrix::from_vec(outputs.len(), u, data)?
    } else {
        outputs.last().expect("non-empty").clone()
    };
    let final_c = cache.steps.last().expect("non-empty").c.data().to_vec();
    Ok(LayerOutput {
        hidden,
        final_c,
        cache,
    })
}

/// Inverted dropout on a vector. Returns the output and the multiplicative
/// mask (0 for dropped units, `1/(1-rate)` for survivors).
pub fn dropout(h: &[f64], rate: f64, rng: &mut Rng, training: bool) -> (Vec<f64>, Vec<f64>) {
    if !training || rate == 0.0 {
        return (h.to_vec(), vec![1.0; h.len()]);
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = h
        .iter()
        .map(|_| if rng.next_f64() < rate { 0.0 } else { keep })
        .collect();
    let out = h.iter().zip(&mask).map(|(v, m)| v * m).collect();
    (out, mask)
}

fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut Rng) -> Matrix {
    let keep = 1.0 / (1.0 - rate);
    let data = (0..rows * cols)
        .map(|_| if rng.next_f64() < rate { 0.0 } else { keep })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("mask shape")
}

fn apply_mask(m: &Matrix, mask: &Matrix) -> Matrix {
    m.hadamard(mask).expect("mask shape")
}

/// Everything the backward pass needs from a forward call.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    layer1: LayerCache,
    mask1: Option<Vec<Matrix>>,
    layer2: LayerCache,
    mask2: Option<Matrix>,
    dense_in: Matrix,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Full network forward over a batch of windows. Each window holds
/// `timesteps × features` values, time-major.
///
/// Dropout masks are drawn from `rng` only in training mode with a non-zero
/// rate: first layer-1 masks for each step, then the layer-2 mask.
pub fn forward(
    params: &ModelParams,
    batch: &[&[f64]],
    training: bool,
    rng: &mut Rng,
) -> Result<(Matrix, ForwardCache), ModelError> {
    let h = &params.hyper;
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let width = h.timesteps * h.features;
    if let Some(bad) = batch.iter().find(|w| w.len() != width) {
        return Err(NumericError::Shape {
            op: "forward",
            left: (h.timesteps, h.features),
            right: (bad.len(), 1),
        }
        .into());
    }
    let b = batch.len();
    let inputs = (0..h.timesteps)
        .map(|t| {
            let mut x = Matrix::zeros(b, h.features);
            for (r, w) in batch.iter().enumerate() {
                x.row_mut(r)
                    .copy_from_slice(&w[t * h.features..(t + 1) * h.features]);
            }
            x
        })
        .collect();

    let w = &params.weights;
    let dropping = training && h.dropout > 0.0;
    let (seq1, layer1) = layer_forward_batch(&w.layer1, inputs)?;
    let (inputs2, mask1) = if dropping {
        let masks: Vec<Matrix> = (0..h.timesteps)
            .map(|_| dropout_mask(b, h.units, h.dropout, rng))
            .collect();
        let dropped = seq1.iter().zip(&masks).map(|(s, m)| apply_mask(s, m)).collect();
        (dropped, Some(masks))
    } else {
        (seq1, None)
    };
    let (seq2, layer2) = layer_forward_batch(&w.layer2, inputs2)?;
    let last = seq2.into_iter().last().expect("non-empty sequence");
    let (dense_in, mask2) = if dropping {
        let m = dropout_mask(b, h.units, h.dropout, rng);
        (apply_mask(&last, &m), Some(m))
    } else {
        (last, None)
    };
    let mut pred = Matrix::zeros(b, h.dense_units);
    for r in 0..b {
        pred.row_mut(r).copy_from_slice(&w.dense_b);
    }
    gemm_abt_acc(&dense_in, &w.dense_w, &mut pred);
    Ok((
        pred,
        ForwardCache {
            batch: b,
            layer1,
            mask1,
            layer2,
            mask2,
            dense_in,
        },
    ))
}

/// Inference-mode predictions (first output unit) for many windows,
/// evaluated in chunks of `batch_size`.
pub fn predict<'a>(
    params: &ModelParams,
    windows: impl IntoIterator<Item = &'a [f64]>,
    batch_size: usize,
) -> Result<Vec<f64>, ModelError> {
    let all: Vec<&[f64]> = windows.into_iter().collect();
    let mut rng = Rng::new(0);
    let mut out = Vec::with_capacity(all.len());
    for chunk in all.chunks(batch_size.max(1)) {
        let (pred, _) = forward(params, chunk, false, &mut rng)?;
        out.extend((0..pred.rows()).map(|r| pred.get(r, 0)));
    }
    Ok(out)
}

/// Mean squared error over all elements and its gradient `2(pred-target)/n`.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>), ModelError> {
    if pred.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    if pred.len() != target.len() {
        return Err(NumericError::Shape {
            op: "mse_loss",
            left: (pred.len(), 1),
            right: (target.len(), 1),
        }
        .into());
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((loss / n, grad))
}

/// BPTT through one layer. `dh_out[t]` is the gradient arriving at the
/// layer output for step `t` (`None` means zero). Returns the weight
/// gradients and, when requested, the gradient w.r.t. each step input.
fn layer_backward(
    w: &LstmLayerWeights,
    cache: &LayerCache,
    dh_out: &[Option<Matrix>],
    need_dx: bool,
) -> (LstmLayerWeights, Vec<Matrix>) {
    let (b, u, d) = (cache.batch(), w.units(), w.input_dim());
    let tsteps = cache.timesteps();
    let mut grads = LstmLayerWeights::zeros(u, d);
    let mut dxs = vec![Matrix::zeros(0, 0); if need_dx { tsteps } else { 0 }];
    let mut dh_next = Matrix::zeros(b, u);
    let mut dc_next = Matrix::zeros(b, u);
    let zeros = Matrix::zeros(b, u);

    let mut dz = [
        Matrix::zeros(b, u),
        Matrix::zeros(b, u),
        Matrix::zeros(b, u),
        Matrix::zeros(b, u),
    ];
    for t in (0..tsteps).rev() {
        let s = &cache.steps[t];
        let (h_prev, c_prev) = if t == 0 {
            (&zeros, &zeros)
        } else {
            (cache.h(t - 1), &cache.steps[t - 1].c)
        };
        for k in 0..b * u {
            let mut dh = dh_next.data()[k];
            if let Some(g) = &dh_out[t] {
                dh += g.data()[k];
            }
            let (i, f, g, o) = (s.i.data()[k], s.f.data()[k], s.g.data()[k], s.o.data()[k]);
            let tc = tanh(s.c.data()[k]);
            let d_o = dh * tc;
            let dc = dh * o * tanh_grad(tc) + dc_next.data()[k];
            let d_f = dc * c_prev.data()[k];
            let d_i = dc * g;
            let d_g = dc * i;
            dc_next.data_mut()[k] = dc * f;
            dz[0].data_mut()[k] = d_i * sigmoid_grad(i);
            dz[1].data_mut()[k] = d_f * sigmoid_grad(f);
            dz[2].data_mut()[k] = d_g * tanh_grad(g);
            dz[3].data_mut()[k] = d_o * sigmoid_grad(o);
        }
        let x = &cache.inputs[t];
        let mut dh_prev = Matrix::zeros(b, u);
        let mut dx = if need_dx { Matrix::zeros(b, d) } else { Matrix::zeros(0, 0) };
        for (gz, (gw, gg)) in dz.iter().zip(w.gates().into_iter().zip(grads.gates_mut())) {
            gemm_atb_acc(gz, x, &mut gg.w_x);
            gemm_atb_acc(gz, h_prev, &mut gg.w_h);
            for r in 0..b {
                for (acc, v) in gg.b.iter_mut().zip(gz.row(r)) {
                    *acc += v;
                }
            }
            if t > 0 {
                gemm_ab_acc(gz, &gw.w_h, &mut dh_prev);
            }
            if need_dx {
                gemm_ab_acc(gz, &gw.w_x, &mut dx);
            }
        }
        dh_next = dh_prev;
        if need_dx {
            dxs[t] = dx;
        }
    }
    (grads, dxs)
}

/// Exact gradients of the loss with respect to every parameter, given the
/// loss gradient `∂L/∂pred` (`batch × dense_units`).
pub fn backward(params: &ModelParams, cache: &ForwardCache, loss_grad: &Matrix) -> Result<Gradients, ModelError> {
    let h = &params.hyper;
    if loss_grad.shape() != (cache.batch, h.dense_units) {
        return Err(ModelError::State(format!(
            "loss gradient {:?} does not match forward batch ({}, {})",
            loss_grad.shape(),
            cache.batch,
            h.dense_units
        )));
    }
    if cache.layer1.timesteps() != h.timesteps
        || cache.layer2.timesteps() != h.timesteps
        || cache.dense_in.cols() != h.units
    {
        return Err(ModelError::State("cache was produced by a different model".into()));
    }
    let w = &params.weights;
    let b = cache.batch;

    let mut dense_w = Matrix::zeros(h.dense_units, h.units);
    gemm_atb_acc(loss_grad, &cache.dense_in, &mut dense_w);
    let mut dense_b = vec![0.0; h.dense_units];
    for r in 0..b {
        for (acc, v) in dense_b.iter_mut().zip(loss_grad.row(r)) {
            *acc += v;
        }
    }
    let mut d_last = Matrix::zeros(b, h.units);
    gemm_ab_acc(loss_grad, &w.dense_w, &mut d_last);
    if let Some(m) = &cache.mask2 {
        d_last = apply_mask(&d_last, m);
    }

    let mut dh2: Vec<Option<Matrix>> = vec![None; h.timesteps];
    dh2[h.timesteps - 1] = Some(d_last);
    let (layer2, dx2) = layer_backward(&w.layer2, &cache.layer2, &dh2, true);

    let dh1: Vec<Option<Matrix>> = match &cache.mask1 {
        Some(masks) => dx2.iter().zip(masks).map(|(d, m)| Some(apply_mask(d, m))).collect(),
        None => dx2.into_iter().map(Some).collect(),
    };
    let (layer1, _) = layer_backward(&w.layer1, &cache.layer1, &dh1, false);

    Ok(NetworkWeights {
        layer1,
        layer2,
        dense_w,
        dense_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_hyper(units: usize, timesteps: usize) -> HyperParams {
        HyperParams {
            units,
            timesteps,
            dropout: 0.0,
            ..HyperParams::default()
        }
    }

    /// Straight-line evaluation of one cell step written independently of
    /// the batched kernel.
    fn reference_cell(x: &[f64], h: &[f64], c: &[f64], w: &LstmLayerWeights) -> (Vec<f64>, Vec<f64>) {
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let affine = |g: &GateWeights, k: usize| {
            let mut z = g.b[k];
            for (j, xj) in x.iter().enumerate() {
                z += g.w_x.get(k, j) * xj;
            }
            for (j, hj) in h.iter().enumerate() {
                z += g.w_h.get(k, j) * hj;
            }
            z
        };
        let mut h_out = Vec::new();
        let mut c_out = Vec::new();
        for k in 0..h.len() {
            let i = sig(affine(&w.input, k));
            let f = sig(affine(&w.forget, k));
            let g = affine(&w.cell, k).tanh();
            let o = sig(affine(&w.output, k));
            let cn = f * c[k] + i * g;
            c_out.push(cn);
            h_out.push(o * cn.tanh());
        }
        (h_out, c_out)
    }

    #[test]
    fn zero_cell() {
        let w = LstmLayerWeights::zeros(3, 2);
        let (h, c, cache) = cell_forward(&[1.0, -2.0], &[0.0; 3], &[0.0; 3], &w).unwrap();
        assert_eq!(h, vec![0.0; 3]);
        assert_eq!(c, vec![0.0; 3]);
        assert_eq!(cache.i, vec![0.5; 3]);
        assert_eq!(cache.f, vec![0.5; 3]);
        assert_eq!(cache.o, vec![0.5; 3]);
        assert_eq!(cache.c_tilde, vec![0.0; 3]);
    }

    #[test]
    fn saturated_gates_carry_state() {
        let mut w = LstmLayerWeights::zeros(2, 1);
        w.input.b = vec![50.0; 2];
        w.forget.b = vec![50.0; 2];
        w.output.b = vec![50.0; 2];
        let c_prev = [0.3, -0.7];
        let (h, c, _) = cell_forward(&[0.4], &[0.1, 0.2], &c_prev, &w).unwrap();
        for k in 0..2 {
            assert!((c[k] - c_prev[k]).abs() < 1e-12);
            assert!((h[k] - c_prev[k].tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn cell_matches_reference() {
        let mut rng = Rng::new(99);
        let w = LstmLayerWeights::init(&mut rng, 3, 2, 0.5);
        let x = [0.3, -1.2];
        let h = [0.1, -0.4, 0.25];
        let c = [0.5, 0.0, -0.3];
        let (h1, c1, _) = cell_forward(&x, &h, &c, &w).unwrap();
        let (h2, c2) = reference_cell(&x, &h, &c, &w);
        for k in 0..3 {
            assert!((h1[k] - h2[k]).abs() < 1e-12);
            assert!((c1[k] - c2[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn cell_shape_error() {
        let w = LstmLayerWeights::zeros(3, 2);
        assert!(matches!(
            cell_forward(&[1.0], &[0.0; 3], &[0.0; 3], &w),
            Err(ModelError::Shape(_))
        ));
    }

    #[test]
    fn single_step_layer_equals_cell() {
        let mut rng = Rng::new(4);
        let w = LstmLayerWeights::init(&mut rng, 4, 2, 1.0);
        let seq = Matrix::from_rows(&[vec![0.2, -0.1]]).unwrap();
        let out = layer_forward(&seq, &w, false).unwrap();
        let (h, c, _) = cell_forward(&[0.2, -0.1], &[0.0; 4], &[0.0; 4], &w).unwrap();
        assert_eq!(out.hidden.data(), h.as_slice());
        assert_eq!(out.final_c, c);
    }

    #[test]
    fn layer_matches_manual_unroll() {
        let mut rng = Rng::new(8);
        let w = LstmLayerWeights::init(&mut rng, 3, 1, 1.0);
        let seq = Matrix::from_rows(&[vec![0.5], vec![-0.25]]).unwrap();
        let out = layer_forward(&seq, &w, true).unwrap();
        let (h1, c1) = reference_cell(&[0.5], &[0.0; 3], &[0.0; 3], &w);
        let (h2, _) = reference_cell(&[-0.25], &h1, &c1, &w);
        for k in 0..3 {
            assert!((out.hidden.get(0, k) - h1[k]).abs() < 1e-12);
            assert!((out.hidden.get(1, k) - h2[k]).abs() < 1e-12);
        }
        let last = layer_forward(&seq, &w, false).unwrap();
        assert_eq!(last.hidden.row(0), out.hidden.row(1));
    }

    #[test]
    fn zero_layer_zero_input() {
        let w = LstmLayerWeights::zeros(3, 1);
        let seq = Matrix::zeros(5, 1);
        let out = layer_forward(&seq, &w, true).unwrap();
        assert!(out.hidden.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dropout_contracts() {
        let mut rng = Rng::new(1);
        let h = vec![0.5, -0.2, 0.9];
        assert_eq!(dropout(&h, 0.0, &mut rng, true).0, h);
        assert_eq!(dropout(&h, 0.1, &mut rng, false).0, h);
        let (out, mask) = dropout(&h, 0.5, &mut rng, true);
        for ((o, m), v) in out.iter().zip(&mask).zip(&h) {
            assert!(*m == 0.0 || *m == 2.0);
            assert_eq!(*o, v * m);
        }
    }

    #[test]
    fn dropout_is_unbiased() {
        let mut rng = Rng::new(2024);
        let h = vec![0.3, -0.8, 1.5];
        let draws = 100_000;
        let mut sums = vec![0.0; 3];
        for _ in 0..draws {
            let (out, _) = dropout(&h, 0.1, &mut rng, true);
            for (s, o) in sums.iter_mut().zip(out) {
                *s += o;
            }
        }
        for (s, v) in sums.iter().zip(&h) {
            let mean = s / draws as f64;
            assert!((mean - v).abs() <= 0.01 * v.abs(), "{mean} vs {v}");
        }
    }

    #[test]
    fn zero_network_predicts_dense_bias() {
        let mut p = ModelParams::zeros(small_hyper(3, 4));
        p.weights.dense_b = vec![0.7];
        let mut rng = Rng::new(0);
        let w1 = [0.1, 0.2, 0.3, 0.4];
        let w2 = [9.0, -3.0, 2.0, 1.0];
        let (pred, _) = forward(&p, &[&w1, &w2], false, &mut rng).unwrap();
        assert_eq!(pred.data(), &[0.7, 0.7]);
    }

    #[test]
    fn inference_is_deterministic() {
        let hyper = HyperParams {
            dropout: 0.1,
            ..small_hyper(5, 3)
        };
        let p = ModelParams::init(hyper, &mut Rng::new(3));
        let w = [0.1, 0.5, -0.2];
        let (a, _) = forward(&p, &[&w], false, &mut Rng::new(1)).unwrap();
        let (b, _) = forward(&p, &[&w], false, &mut Rng::new(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_dropout_training_equals_inference() {
        let p = ModelParams::init(small_hyper(4, 3), &mut Rng::new(3));
        let w = [0.1, 0.5, -0.2];
        let (a, _) = forward(&p, &[&w], true, &mut Rng::new(1)).unwrap();
        let (b, _) = forward(&p, &[&w], false, &mut Rng::new(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_rows_are_independent() {
        let p = ModelParams::init(small_hyper(6, 4), &mut Rng::new(12));
        let a = [0.1, 0.2, 0.3, 0.4];
        let b = [-1.0, 0.0, 1.0, 0.5];
        let (both, _) = forward(&p, &[&a, &b], false, &mut Rng::new(0)).unwrap();
        let (solo, _) = forward(&p, &[&b], false, &mut Rng::new(0)).unwrap();
        assert_eq!(both.get(1, 0).to_bits(), solo.get(0, 0).to_bits());
    }

    #[test]
    fn forward_matches_hand_unrolled_network() {
        let hyper = small_hyper(2, 2);
        let p = ModelParams::init(hyper, &mut Rng::new(21));
        let window = [0.4, -0.6];
        let (pred, _) = forward(&p, &[&window], false, &mut Rng::new(0)).unwrap();
        let w = &p.weights;
        let (a1, c1) = reference_cell(&[0.4], &[0.0; 2], &[0.0; 2], &w.layer1);
        let (a2, _) = reference_cell(&[-0.6], &a1, &c1, &w.layer1);
        let (b1, d1) = reference_cell(&a1, &[0.0; 2], &[0.0; 2], &w.layer2);
        let (b2, _) = reference_cell(&a2, &b1, &d1, &w.layer2);
        let expected = w.dense_b[0] + w.dense_w.get(0, 0) * b2[0] + w.dense_w.get(0, 1) * b2[1];
        assert!((pred.get(0, 0) - expected).abs() < 1e-12);
    }

    #[test]
    fn forward_rejects_wrong_window() {
        let p = ModelParams::zeros(small_hyper(2, 3));
        let bad = [1.0, 2.0];
        assert!(matches!(
            forward(&p, &[&bad], false, &mut Rng::new(0)),
            Err(ModelError::Shape(_))
        ));
        assert!(matches!(
            forward(&p, &[], false, &mut Rng::new(0)),
            Err(ModelError::EmptyBatch)
        ));
    }

    #[test]
    fn mse_examples() {
        let (l, g) = mse_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!((l, g), (0.0, vec![0.0, 0.0]));
        let (l, g) = mse_loss(&[3.0], &[1.0]).unwrap();
        assert_eq!((l, g), (4.0, vec![4.0]));
        assert!(matches!(mse_loss(&[], &[]), Err(ModelError::EmptyBatch)));
    }

    #[test]
    fn mse_gradient_matches_central_difference() {
        let pred = [0.3, -1.2, 2.5];
        let target = [0.1, 0.4, 2.0];
        let (_, g) = mse_loss(&pred, &target).unwrap();
        let eps = 1e-6;
        for k in 0..3 {
            let mut p = pred;
            p[k] += eps;
            let up = mse_loss(&p, &target).unwrap().0;
            p[k] -= 2.0 * eps;
            let down = mse_loss(&p, &target).unwrap().0;
            assert!(((up - down) / (2.0 * eps) - g[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_loss_grad_gives_zero_gradients() {
        let p = ModelParams::init(small_hyper(3, 3), &mut Rng::new(1));
        let w = [0.2, 0.1, -0.3];
        let (_, cache) = forward(&p, &[&w], true, &mut Rng::new(1)).unwrap();
        let g = backward(&p, &cache, &Matrix::zeros(1, 1)).unwrap();
        assert!(g.tensors().iter().all(|t| t.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn backward_rejects_mismatched_cache() {
        let p = ModelParams::init(small_hyper(3, 3), &mut Rng::new(1));
        let w = [0.2, 0.1, -0.3];
        let (_, cache) = forward(&p, &[&w], false, &mut Rng::new(1)).unwrap();
        assert!(matches!(
            backward(&p, &cache, &Matrix::zeros(2, 1)),
            Err(ModelError::State(_))
        ));
        let other = ModelParams::init(small_hyper(4, 3), &mut Rng::new(1));
        assert!(matches!(
            backward(&other, &cache, &Matrix::zeros(1, 1)),
            Err(ModelError::State(_))
        ));
    }

    /// One unit, one step, one feature: every gradient by hand.
    #[test]
    fn one_unit_one_step_closed_form() {
        let hyper = HyperParams {
            units: 1,
            timesteps: 1,
            dropout: 0.0,
            ..HyperParams::default()
        };
        let p = ModelParams::init(hyper, &mut Rng::new(77));
        let x = 0.8;
        let target = 0.3;
        let (pred, cache) = forward(&p, &[&[x]], false, &mut Rng::new(0)).unwrap();
        let (_, lg) = mse_loss(pred.data(), &[target]).unwrap();
        let g = backward(&p, &cache, &Matrix::from_vec(1, 1, lg.clone()).unwrap()).unwrap();

        let w = &p.weights;
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        // layer 1 from zero state
        let l1 = &w.layer1;
        let i1 = sig(l1.input.w_x.get(0, 0) * x + l1.input.b[0]);
        let g1 = (l1.cell.w_x.get(0, 0) * x + l1.cell.b[0]).tanh();
        let o1 = sig(l1.output.w_x.get(0, 0) * x + l1.output.b[0]);
        let c1 = i1 * g1;
        let h1 = o1 * c1.tanh();
        // layer 2 from zero state
        let l2 = &w.layer2;
        let i2 = sig(l2.input.w_x.get(0, 0) * h1 + l2.input.b[0]);
        let g2 = (l2.cell.w_x.get(0, 0) * h1 + l2.cell.b[0]).tanh();
        let o2 = sig(l2.output.w_x.get(0, 0) * h1 + l2.output.b[0]);
        let c2 = i2 * g2;
        let h2 = o2 * c2.tanh();
        let y = w.dense_w.get(0, 0) * h2 + w.dense_b[0];
        assert!((y - pred.get(0, 0)).abs() < 1e-14);

        let dy = 2.0 * (y - target);
        assert!((g.dense_b[0] - dy).abs() < 1e-14);
        assert!((g.dense_w.get(0, 0) - dy * h2).abs() < 1e-14);
        let dh2 = dy * w.dense_w.get(0, 0);
        let dzo2 = dh2 * c2.tanh() * o2 * (1.0 - o2);
        let dc2 = dh2 * o2 * (1.0 - c2.tanh().powi(2));
        let dzi2 = dc2 * g2 * i2 * (1.0 - i2);
        let dzg2 = dc2 * i2 * (1.0 - g2 * g2);
        // C_prev = 0 so the forget gate receives no gradient
        assert_eq!(g.layer2.forget.b[0], 0.0);
        assert!((g.layer2.output.b[0] - dzo2).abs() < 1e-14);
        assert!((g.layer2.input.b[0] - dzi2).abs() < 1e-14);
        assert!((g.layer2.cell.b[0] - dzg2).abs() < 1e-14);
        assert!((g.layer2.cell.w_x.get(0, 0) - dzg2 * h1).abs() < 1e-14);
        // h_prev = 0 so recurrent weights receive no gradient
        assert_eq!(g.layer2.input.w_h.get(0, 0), 0.0);

        let dh1 = dzi2 * l2.input.w_x.get(0, 0) + dzg2 * l2.cell.w_x.get(0, 0) + dzo2 * l2.output.w_x.get(0, 0);
        let dzo1 = dh1 * c1.tanh() * o1 * (1.0 - o1);
        let dc1 = dh1 * o1 * (1.0 - c1.tanh().powi(2));
        let dzi1 = dc1 * g1 * i1 * (1.0 - i1);
        let dzg1 = dc1 * i1 * (1.0 - g1 * g1);
        assert!((g.layer1.output.w_x.get(0, 0) - dzo1 * x).abs() < 1e-14);
        assert!((g.layer1.input.w_x.get(0, 0) - dzi1 * x).abs() < 1e-14);
        assert!((g.layer1.cell.b[0] - dzg1).abs() < 1e-14);
    }

    #[test]
    fn tensor_views_cover_all_parameters() {
        let hyper = small_hyper(4, 3);
        let p = ModelParams::init(hyper, &mut Rng::new(1));
        let views = p.weights.tensors();
        assert_eq!(views.len(), 26);
        let expected = 4 * (4 * 1 + 4 * 4 + 4) + 4 * (4 * 4 + 4 * 4 + 4) + 4 + 1;
        assert_eq!(p.weights.param_count(), expected);
        let mut w = p.weights.clone();
        assert_eq!(w.tensors_mut().len(), 26);
        assert_eq!(views[0].name, "lstm1.input.w_x");
        assert_eq!(views[25].name, "dense.b");
        assert_eq!(p.weights.layer1.forget.b, vec![1.0; 4]);
        assert_eq!(p.weights.layer1.input.b, vec![0.0; 4]);
    }

    #[test]
    fn hyper_validation() {
        assert!(HyperParams::default().validate().is_ok());
        let bad = HyperParams {
            dropout: 1.0,
            ..HyperParams::default()
        };
        assert!(bad.validate().is_err());
        let bad = HyperParams {
            units: 0,
            ..HyperParams::default()
        };
        assert!(bad.validate().is_err());
    }
}
