//! The differentiable encoder: embedding lookup, forward/backward LSTM
//! passes, stacked convolution + max-pooling blocks, concatenation, and a
//! time-distributed projection to two emission scores per position.
//! Backward passes are written by hand per layer.
//!
//! Data layout: sequences are 2-D tensors with one row per feature and one
//! column per position, so `x` is `d x n`, the BiLSTM output `h` is
//! `2l x n`, the CNN output is `f x n`, and emissions are `2 x n`.
#![allow(clippy::needless_range_loop)]

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crf::{CrfParameters, NUM_LABELS};
use crate::tensor::{dropout_mask, glorot_uniform_init, Rng, Tensor};
use crate::Real;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("embedding index {index} out of range for vocabulary of {vocab_size}")]
    EmbeddingIndexOutOfRange { index: usize, vocab_size: usize },
    #[error("invalid config: {reason}")]
    InvalidConfig { reason: String },
    #[error("expected {expected} parameter tensors, got {actual}")]
    WrongTensorCount { expected: usize, actual: usize },
    #[error("parameter {name} has shape {actual:?}, expected {expected:?}")]
    WrongTensorShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputHead {
    Crf,
    Softmax,
}

impl std::str::FromStr for OutputHead {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "crf" => Ok(OutputHead::Crf),
            "softmax" => Ok(OutputHead::Softmax),
            other => Err(format!("unknown output head {other:?}")),
        }
    }
}

/// Every hyperparameter of the model and its training loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub lstm_dim: usize,
    pub conv_blocks: usize,
    pub conv_filters: usize,
    pub conv_width: usize,
    pub pool_size: usize,
    pub dropout_rate: Real,
    pub output_head: OutputHead,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub clip_threshold: Real,
}

impl ModelConfig {
    /// The full-size configuration: d=300, l=300, two conv blocks of 200
    /// width-3 filters, CRF head, batch 64, 120 epochs, patience 10,
    /// 25% input dropout, clip norm 1.0.
    pub fn base() -> Self {
        ModelConfig {
            embedding_dim: 300,
            lstm_dim: 300,
            conv_blocks: 2,
            conv_filters: 200,
            conv_width: 3,
            pool_size: 2,
            dropout_rate: 0.25,
            output_head: OutputHead::Crf,
            batch_size: 64,
            max_epochs: 120,
            patience: 10,
            clip_threshold: 1.0,
        }
    }

    /// Base with one conv block, 40 filters, l=50, d=100.
    pub fn small() -> Self {
        ModelConfig {
            embedding_dim: 100,
            lstm_dim: 50,
            conv_blocks: 1,
            conv_filters: 40,
            ..Self::base()
        }
    }

    /// Base with the CRF head replaced by a softmax.
    pub fn base_softmax() -> Self {
        ModelConfig {
            output_head: OutputHead::Softmax,
            ..Self::base()
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let check = |ok: bool, reason: &str| {
            if ok {
                Ok(())
            } else {
                Err(NetworkError::InvalidConfig {
                    reason: reason.to_string(),
                })
            }
        };
        check(self.embedding_dim >= 1, "embedding_dim must be >= 1")?;
        check(self.lstm_dim >= 1, "lstm_dim must be >= 1")?;
        check(self.conv_blocks >= 1, "conv_blocks must be >= 1")?;
        check(self.conv_filters >= 1, "conv_filters must be >= 1")?;
        check(self.conv_width >= 1, "conv_width must be >= 1")?;
        check(self.pool_size >= 1, "pool_size must be >= 1")?;
        check(
            (0.0..1.0).contains(&self.dropout_rate),
            "dropout_rate must lie in [0, 1)",
        )?;
        check(self.batch_size >= 1, "batch_size must be >= 1")?;
        check(self.max_epochs >= 1, "max_epochs must be >= 1")?;
        check(self.patience >= 1, "patience must be >= 1")?;
        check(self.clip_threshold > 0.0, "clip_threshold must be > 0")?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConfigPreset {
    Base,
    Small,
    BaseSoftmax,
}

impl ConfigPreset {
    pub fn config(self) -> ModelConfig {
        match self {
            ConfigPreset::Base => ModelConfig::base(),
            ConfigPreset::Small => ModelConfig::small(),
            ConfigPreset::BaseSoftmax => ModelConfig::base_softmax(),
        }
    }
}

impl std::str::FromStr for ConfigPreset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "base" => Ok(ConfigPreset::Base),
            "small" => Ok(ConfigPreset::Small),
            "base-softmax" => Ok(ConfigPreset::BaseSoftmax),
            other => Err(format!("unknown preset {other:?}")),
        }
    }
}

/// One LSTM direction's weights. Gate rows are ordered input (`0..l`),
/// forget (`l..2l`), candidate (`2l..3l`), output (`3l..4l`).
#[derive(Debug, Clone, PartialEq)]
pub struct LstmWeights {
    /// `4l x d_in`
    pub input: Tensor,
    /// `4l x l`
    pub recurrent: Tensor,
    /// `4l`
    pub bias: Tensor,
}

/// One convolution + max-pooling block's filter bank and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    /// `f x in_channels x w`
    pub filters: Tensor,
    /// `f`
    pub bias: Tensor,
}

/// Every trainable array of the model. The CRF parameters belong to the
/// output head but are stored and serialized together with the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    /// `V x d`, one embedding row per vocabulary index.
    pub embeddings: Tensor,
    pub lstm_fwd: LstmWeights,
    pub lstm_bwd: LstmWeights,
    pub conv: Vec<ConvBlock>,
    /// `(2l + f) x 2`
    pub proj_weight: Tensor,
    /// `2`
    pub proj_bias: Tensor,
    pub crf: CrfParameters,
}

fn conv_in_channels(config: &ModelConfig, block: usize) -> usize {
    if block == 0 {
        config.embedding_dim
    } else {
        config.conv_filters
    }
}

impl ModelParameters {
    /// Glorot-uniform weights, zero biases with the LSTM forget-gate bias
    /// at 1.0, zero CRF scores. Draw order is fixed so a seed fully
    /// determines the parameters.
    pub fn init(config: &ModelConfig, vocab_size: usize, rng: &mut Rng) -> Self {
        let d = config.embedding_dim;
        let l = config.lstm_dim;
        let f = config.conv_filters;
        let w = config.conv_width;
        let lstm = |d_in: usize, rng: &mut Rng| LstmWeights {
            input: glorot_uniform_init(d_in, l, &[4 * l, d_in], rng),
            recurrent: glorot_uniform_init(l, l, &[4 * l, l], rng),
            bias: Tensor::zeros(&[4 * l]),
        };
        let embeddings = glorot_uniform_init(vocab_size, d, &[vocab_size, d], rng);
        let mut lstm_fwd = lstm(d, rng);
        let mut lstm_bwd = lstm(d, rng);
        for weights in [&mut lstm_fwd, &mut lstm_bwd] {
            for v in &mut weights.bias.data_mut()[l..2 * l] {
                *v = 1.0;
            }
        }
        let conv = (0..config.conv_blocks)
            .map(|k| {
                let ch = conv_in_channels(config, k);
                ConvBlock {
                    filters: glorot_uniform_init(ch * w, f, &[f, ch, w], rng),
                    bias: Tensor::zeros(&[f]),
                }
            })
            .collect();
        let proj_weight = glorot_uniform_init(2 * l + f, NUM_LABELS, &[2 * l + f, NUM_LABELS], rng);
        ModelParameters {
            embeddings,
            lstm_fwd,
            lstm_bwd,
            conv,
            proj_weight,
            proj_bias: Tensor::zeros(&[NUM_LABELS]),
            crf: CrfParameters::zeros(),
        }
    }

    /// Zero-valued parameters with the same shapes; gradient container.
    pub fn zeros_like(&self) -> Self {
        let zero = |t: &Tensor| Tensor::zeros(t.shape());
        ModelParameters {
            embeddings: zero(&self.embeddings),
            lstm_fwd: LstmWeights {
                input: zero(&self.lstm_fwd.input),
                recurrent: zero(&self.lstm_fwd.recurrent),
                bias: zero(&self.lstm_fwd.bias),
            },
            lstm_bwd: LstmWeights {
                input: zero(&self.lstm_bwd.input),
                recurrent: zero(&self.lstm_bwd.recurrent),
                bias: zero(&self.lstm_bwd.bias),
            },
            conv: self
                .conv
                .iter()
                .map(|b| ConvBlock {
                    filters: zero(&b.filters),
                    bias: zero(&b.bias),
                })
                .collect(),
            proj_weight: zero(&self.proj_weight),
            proj_bias: zero(&self.proj_bias),
            crf: CrfParameters {
                transition: zero(&self.crf.transition),
                start: zero(&self.crf.start),
            },
        }
    }

    /// Names of the parameter tensors in the fixed serialization order.
    pub fn tensor_names(conv_blocks: usize) -> Vec<String> {
        let mut names = vec![
            "embeddings".to_string(),
            "lstm_fwd.input".to_string(),
            "lstm_fwd.recurrent".to_string(),
            "lstm_fwd.bias".to_string(),
            "lstm_bwd.input".to_string(),
            "lstm_bwd.recurrent".to_string(),
            "lstm_bwd.bias".to_string(),
        ];
        for k in 0..conv_blocks {
            names.push(format!("conv.{k}.filters"));
            names.push(format!("conv.{k}.bias"));
        }
        names.push("projection.weight".to_string());
        names.push("projection.bias".to_string());
        names.push("crf.transition".to_string());
        names.push("crf.start".to_string());
        names
    }

    /// Expected tensor shapes in the fixed serialization order.
    pub fn expected_shapes(config: &ModelConfig, vocab_size: usize) -> Vec<(String, Vec<usize>)> {
        let d = config.embedding_dim;
        let l = config.lstm_dim;
        let f = config.conv_filters;
        let w = config.conv_width;
        let mut shapes = vec![
            vec![vocab_size, d],
            vec![4 * l, d],
            vec![4 * l, l],
            vec![4 * l],
            vec![4 * l, d],
            vec![4 * l, l],
            vec![4 * l],
        ];
        for k in 0..config.conv_blocks {
            shapes.push(vec![f, conv_in_channels(config, k), w]);
            shapes.push(vec![f]);
        }
        shapes.push(vec![2 * l + f, NUM_LABELS]);
        shapes.push(vec![NUM_LABELS]);
        shapes.push(vec![NUM_LABELS, NUM_LABELS]);
        shapes.push(vec![NUM_LABELS]);
        Self::tensor_names(config.conv_blocks)
            .into_iter()
            .zip(shapes)
            .collect()
    }

    /// All parameter tensors in the fixed order used by the optimizer,
    /// gradient clipping, and checkpoint serialization.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut ts = vec![
            &self.embeddings,
            &self.lstm_fwd.input,
            &self.lstm_fwd.recurrent,
            &self.lstm_fwd.bias,
            &self.lstm_bwd.input,
            &self.lstm_bwd.recurrent,
            &self.lstm_bwd.bias,
        ];
        for block in &self.conv {
            ts.push(&block.filters);
            ts.push(&block.bias);
        }
        ts.push(&self.proj_weight);
        ts.push(&self.proj_bias);
        ts.push(&self.crf.transition);
        ts.push(&self.crf.start);
        ts
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut ts = vec![
            &mut self.embeddings,
            &mut self.lstm_fwd.input,
            &mut self.lstm_fwd.recurrent,
            &mut self.lstm_fwd.bias,
            &mut self.lstm_bwd.input,
            &mut self.lstm_bwd.recurrent,
            &mut self.lstm_bwd.bias,
        ];
        for block in &mut self.conv {
            ts.push(&mut block.filters);
            ts.push(&mut block.bias);
        }
        ts.push(&mut self.proj_weight);
        ts.push(&mut self.proj_bias);
        ts.push(&mut self.crf.transition);
        ts.push(&mut self.crf.start);
        ts
    }

    /// Rebuilds parameters from tensors in the fixed order, validating
    /// shapes against the config.
    pub fn from_tensors(
        config: &ModelConfig,
        vocab_size: usize,
        tensors: Vec<Tensor>,
    ) -> Result<Self, NetworkError> {
        let expected = Self::expected_shapes(config, vocab_size);
        if tensors.len() != expected.len() {
            return Err(NetworkError::WrongTensorCount {
                expected: expected.len(),
                actual: tensors.len(),
            });
        }
        for ((name, shape), tensor) in expected.iter().zip(&tensors) {
            if tensor.shape() != shape.as_slice() {
                return Err(NetworkError::WrongTensorShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    actual: tensor.shape().to_vec(),
                });
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("count checked above");
        let embeddings = next();
        let lstm_fwd = LstmWeights {
            input: next(),
            recurrent: next(),
            bias: next(),
        };
        let lstm_bwd = LstmWeights {
            input: next(),
            recurrent: next(),
            bias: next(),
        };
        let conv = (0..config.conv_blocks)
            .map(|_| ConvBlock {
                filters: next(),
                bias: next(),
            })
            .collect();
        let proj_weight = next();
        let proj_bias = next();
        let crf = CrfParameters {
            transition: next(),
            start: next(),
        };
        Ok(ModelParameters {
            embeddings,
            lstm_fwd,
            lstm_bwd,
            conv,
            proj_weight,
            proj_bias,
            crf,
        })
    }

    /// `self += other * scale` across all tensors.
    pub fn add_scaled(&mut self, other: &Self, scale: Real) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_scaled(b, scale);
        }
    }
}

/// Exact count of trainable scalars for a config and vocabulary size.
/// The softmax head has no CRF parameters.
pub fn count_parameters(config: &ModelConfig, vocab_size: usize) -> usize {
    let d = config.embedding_dim;
    let l = config.lstm_dim;
    let f = config.conv_filters;
    let w = config.conv_width;
    let lstm = 4 * l * d + 4 * l * l + 4 * l;
    let conv: usize = (0..config.conv_blocks)
        .map(|k| f * conv_in_channels(config, k) * w + f)
        .sum();
    let projection = (2 * l + f) * NUM_LABELS + NUM_LABELS;
    let crf = match config.output_head {
        OutputHead::Crf => NUM_LABELS * NUM_LABELS + NUM_LABELS,
        OutputHead::Softmax => 0,
    };
    vocab_size * d + 2 * lstm + conv + projection + crf
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[inline]
fn sigmoid(x: Real) -> Real {
    1.0 / (1.0 + (-x).exp())
}

/// out += m @ v for a 2-D `m` and contiguous `v`.
fn matvec_acc(m: &Tensor, v: &[Real], out: &mut [Real]) {
    let cols = m.cols();
    debug_assert_eq!(v.len(), cols);
    for (r, slot) in out.iter_mut().enumerate() {
        let row = &m.data()[r * cols..(r + 1) * cols];
        let mut s = 0.0;
        for (a, b) in row.iter().zip(v) {
            s += a * b;
        }
        *slot += s;
    }
}

/// out += m^T @ v.
fn matvec_t_acc(m: &Tensor, v: &[Real], out: &mut [Real]) {
    let cols = m.cols();
    debug_assert_eq!(out.len(), cols);
    for (r, &vr) in v.iter().enumerate() {
        let row = &m.data()[r * cols..(r + 1) * cols];
        for (slot, &a) in out.iter_mut().zip(row) {
            *slot += a * vr;
        }
    }
}

/// g += a (x) b, the outer product of column vector `a` and row vector `b`.
fn outer_acc(g: &mut Tensor, a: &[Real], b: &[Real]) {
    let cols = g.cols();
    debug_assert_eq!(b.len(), cols);
    for (r, &ar) in a.iter().enumerate() {
        let row = &mut g.data_mut()[r * cols..(r + 1) * cols];
        for (slot, &bc) in row.iter_mut().zip(b) {
            *slot += ar * bc;
        }
    }
}

/// Maps indices to embedding columns: column `i` of the result is the
/// embedding row of `indices[i]`.
pub fn embed(indices: &[usize], params: &ModelParameters) -> Result<Tensor, NetworkError> {
    let vocab_size = params.embeddings.rows();
    let d = params.embeddings.cols();
    let n = indices.len();
    let mut x = Tensor::zeros(&[d, n]);
    for (i, &idx) in indices.iter().enumerate() {
        if idx >= vocab_size {
            return Err(NetworkError::EmbeddingIndexOutOfRange {
                index: idx,
                vocab_size,
            });
        }
        let row = params.embeddings.row(idx);
        for (r, &v) in row.iter().enumerate() {
            *x.at2_mut(r, i) = v;
        }
    }
    Ok(x)
}

/// One LSTM cell step: returns `(h, c)`.
pub fn lstm_cell(
    x: &[Real],
    h_prev: &[Real],
    c_prev: &[Real],
    weights: &LstmWeights,
) -> (Vec<Real>, Vec<Real>) {
    let step = lstm_step(weights, x, h_prev, c_prev);
    (step.h, step.c)
}

struct LstmStep {
    x: Vec<Real>,
    h_prev: Vec<Real>,
    c_prev: Vec<Real>,
    gate_i: Vec<Real>,
    gate_f: Vec<Real>,
    gate_g: Vec<Real>,
    gate_o: Vec<Real>,
    tanh_c: Vec<Real>,
    c: Vec<Real>,
    h: Vec<Real>,
}

fn lstm_step(weights: &LstmWeights, x: &[Real], h_prev: &[Real], c_prev: &[Real]) -> LstmStep {
    let l = h_prev.len();
    let mut z = weights.bias.data().to_vec();
    matvec_acc(&weights.input, x, &mut z);
    matvec_acc(&weights.recurrent, h_prev, &mut z);
    let gate_i: Vec<Real> = z[..l].iter().map(|&v| sigmoid(v)).collect();
    let gate_f: Vec<Real> = z[l..2 * l].iter().map(|&v| sigmoid(v)).collect();
    let gate_g: Vec<Real> = z[2 * l..3 * l].iter().map(|&v| v.tanh()).collect();
    let gate_o: Vec<Real> = z[3 * l..].iter().map(|&v| sigmoid(v)).collect();
    let c: Vec<Real> = (0..l)
        .map(|k| gate_f[k] * c_prev[k] + gate_i[k] * gate_g[k])
        .collect();
    let tanh_c: Vec<Real> = c.iter().map(|v| v.tanh()).collect();
    let h: Vec<Real> = (0..l).map(|k| gate_o[k] * tanh_c[k]).collect();
    LstmStep {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        c_prev: c_prev.to_vec(),
        gate_i,
        gate_f,
        gate_g,
        gate_o,
        tanh_c,
        c,
        h,
    }
}

struct LstmCache {
    /// Steps in processing order (forward direction: position 0 first;
    /// backward direction: position true_len-1 first).
    steps: Vec<LstmStep>,
}

/// Runs one direction over `positions`, reading columns of `x`.
fn run_lstm_direction(
    weights: &LstmWeights,
    x: &Tensor,
    positions: impl Iterator<Item = usize>,
    l: usize,
) -> LstmCache {
    let d = x.rows();
    let mut h = vec![0.0; l];
    let mut c = vec![0.0; l];
    let mut steps = Vec::new();
    let mut x_t = vec![0.0; d];
    for pos in positions {
        for r in 0..d {
            x_t[r] = x.at2(r, pos);
        }
        let step = lstm_step(weights, &x_t, &h, &c);
        h = step.h.clone();
        c = step.c.clone();
        steps.push(step);
    }
    LstmCache { steps }
}

/// BiLSTM output: column `i` is the forward hidden state at `i` stacked on
/// the backward hidden state at `i`; columns at or past `true_len` are zero.
pub fn bilstm(x: &Tensor, true_len: usize, fwd: &LstmWeights, bwd: &LstmWeights) -> Tensor {
    let l = fwd.recurrent.cols();
    let n = x.cols();
    let fwd_cache = run_lstm_direction(fwd, x, 0..true_len, l);
    let bwd_cache = run_lstm_direction(bwd, x, (0..true_len).rev(), l);
    assemble_h(&fwd_cache, &bwd_cache, true_len, n, l)
}

fn assemble_h(fwd: &LstmCache, bwd: &LstmCache, true_len: usize, n: usize, l: usize) -> Tensor {
    let mut h = Tensor::zeros(&[2 * l, n]);
    for (t, step) in fwd.steps.iter().enumerate() {
        for k in 0..l {
            *h.at2_mut(k, t) = step.h[k];
        }
    }
    for (t, step) in bwd.steps.iter().enumerate() {
        let pos = true_len - 1 - t;
        for k in 0..l {
            *h.at2_mut(l + k, pos) = step.h[k];
        }
    }
    h
}

struct ConvCache {
    input: Tensor,
    preact: Tensor,
    /// Source column of the pooled maximum for each `(filter, position)`,
    /// flattened row-major; earliest column wins ties.
    pool_src: Vec<u32>,
}

fn conv_block_forward(input: &Tensor, block: &ConvBlock, pool_size: usize) -> (Tensor, ConvCache) {
    let ch = input.rows();
    let n = input.cols();
    let f = block.bias.numel();
    let w = block.filters.shape()[2];
    debug_assert_eq!(block.filters.shape(), &[f, ch, w]);

    // convolution over windows ending at each position; the input is
    // left-padded with w-1 zero columns
    let mut preact = Tensor::zeros(&[f, n]);
    for j in 0..f {
        let out_row = {
            let base = j * n;
            base..base + n
        };
        for c in 0..ch {
            let filt = &block.filters.data()[(j * ch + c) * w..(j * ch + c) * w + w];
            let in_row = input.row(c);
            let out = &mut preact.data_mut()[out_row.clone()];
            for (k, &fk) in filt.iter().enumerate() {
                // input column i - w + 1 + k pairs with output column i
                let shift = w - 1 - k;
                for i in shift..n {
                    out[i] += fk * in_row[i - shift];
                }
            }
        }
        let b = block.bias.data()[j];
        for v in &mut preact.data_mut()[j * n..(j + 1) * n] {
            *v += b;
        }
    }
    let relu_data: Vec<Real> = preact.data().iter().map(|&v| v.max(0.0)).collect();
    let relu = Tensor::from_vec(&[f, n], relu_data).expect("finite relu");

    // max pooling with stride 1 over the window [i - pool_size + 1, i]
    let mut out = Tensor::zeros(&[f, n]);
    let mut pool_src = vec![0u32; f * n];
    for j in 0..f {
        let row = relu.row(j);
        for i in 0..n {
            let lo = i.saturating_sub(pool_size - 1);
            let mut best = lo;
            for p in lo + 1..=i {
                if row[p] > row[best] {
                    best = p;
                }
            }
            *out.at2_mut(j, i) = row[best];
            pool_src[j * n + i] = best as u32;
        }
    }
    let cache = ConvCache {
        input: input.clone(),
        preact,
        pool_src,
    };
    (out, cache)
}

/// One convolution + max-pooling block (ReLU activation), dimensionality
/// preserving: `channels x n` in, `f x n` out.
pub fn conv_block(input: &Tensor, block: &ConvBlock, pool_size: usize) -> Tensor {
    conv_block_forward(input, block, pool_size).0
}

fn conv_block_backward(
    cache: &ConvCache,
    block: &ConvBlock,
    d_out: &Tensor,
    grad: &mut ConvBlock,
) -> Tensor {
    let ch = cache.input.rows();
    let n = cache.input.cols();
    let f = block.bias.numel();
    let w = block.filters.shape()[2];

    // route pooled gradients back to the argmax columns
    let mut d_relu = Tensor::zeros(&[f, n]);
    for j in 0..f {
        for i in 0..n {
            let g = d_out.at2(j, i);
            if g != 0.0 {
                let src = cache.pool_src[j * n + i] as usize;
                *d_relu.at2_mut(j, src) += g;
            }
        }
    }
    // ReLU gate: gradient flows only where the pre-activation was positive
    let mut d_pre = d_relu;
    for (dp, &pa) in d_pre.data_mut().iter_mut().zip(cache.preact.data()) {
        if pa <= 0.0 {
            *dp = 0.0;
        }
    }

    let mut d_input = Tensor::zeros(&[ch, n]);
    for j in 0..f {
        let dp_row = d_pre.row(j).to_vec();
        grad.bias.data_mut()[j] += dp_row.iter().sum::<Real>();
        for c in 0..ch {
            let in_row = cache.input.row(c);
            let filt = &block.filters.data()[(j * ch + c) * w..(j * ch + c) * w + w];
            let gfilt = &mut grad.filters.data_mut()[(j * ch + c) * w..(j * ch + c) * w + w];
            for k in 0..w {
                let shift = w - 1 - k;
                let mut acc = 0.0;
                for i in shift..n {
                    acc += dp_row[i] * in_row[i - shift];
                }
                gfilt[k] += acc;
                let fk = filt[k];
                let d_in_row = d_input.row_mut(c);
                for i in shift..n {
                    d_in_row[i - shift] += fk * dp_row[i];
                }
            }
        }
    }
    d_input
}

/// Everything the backward pass needs from one forward evaluation.
pub struct ForwardTrace {
    indices: Vec<usize>,
    true_len: usize,
    n: usize,
    dropout_mask: Option<Tensor>,
    lstm_fwd: LstmCache,
    lstm_bwd: LstmCache,
    h: Tensor,
    conv: Vec<ConvCache>,
    cnn: Tensor,
    pub emissions: Tensor,
}

impl ForwardTrace {
    pub fn true_len(&self) -> usize {
        self.true_len
    }
}

/// Full forward pass. The BiLSTM consumes the (dropout-masked, in train
/// mode) embedded input over positions `0..true_len`; the CNN consumes the
/// raw embeddings over all columns; emissions are the projection of the
/// concatenated `(2l + f) x n` features.
pub fn forward(
    indices: &[usize],
    true_len: usize,
    params: &ModelParameters,
    config: &ModelConfig,
    mode: Mode,
    rng: &mut Rng,
) -> Result<ForwardTrace, NetworkError> {
    assert!(true_len >= 1 && true_len <= indices.len());
    let n = indices.len();
    let d = config.embedding_dim;
    let l = config.lstm_dim;
    let f = config.conv_filters;

    let x = embed(indices, params)?;

    let (x_lstm, mask) = match mode {
        Mode::Train if config.dropout_rate > 0.0 => {
            let mask = dropout_mask(&[d, n], config.dropout_rate, rng)?;
            let mut masked = x.clone();
            for (v, &m) in masked.data_mut().iter_mut().zip(mask.data()) {
                *v *= m;
            }
            (masked, Some(mask))
        }
        _ => (x.clone(), None),
    };

    let lstm_fwd = run_lstm_direction(&params.lstm_fwd, &x_lstm, 0..true_len, l);
    let lstm_bwd = run_lstm_direction(&params.lstm_bwd, &x_lstm, (0..true_len).rev(), l);
    let h = assemble_h(&lstm_fwd, &lstm_bwd, true_len, n, l);

    let mut conv_caches = Vec::with_capacity(config.conv_blocks);
    let mut cnn = x.clone();
    for block in &params.conv {
        let (out, cache) = conv_block_forward(&cnn, block, config.pool_size);
        conv_caches.push(cache);
        cnn = out;
    }

    // time-distributed projection of o = [h ++ cnn] down to 2 x n
    let mut emissions = Tensor::zeros(&[NUM_LABELS, n]);
    {
        let (row0, row1) = emissions.data_mut().split_at_mut(n);
        row0.fill(params.proj_bias.data()[0]);
        row1.fill(params.proj_bias.data()[1]);
        for j in 0..2 * l + f {
            let src = if j < 2 * l { h.row(j) } else { cnn.row(j - 2 * l) };
            let w0 = params.proj_weight.at2(j, 0);
            let w1 = params.proj_weight.at2(j, 1);
            for i in 0..n {
                row0[i] += src[i] * w0;
                row1[i] += src[i] * w1;
            }
        }
    }

    Ok(ForwardTrace {
        indices: indices.to_vec(),
        true_len,
        n,
        dropout_mask: mask,
        lstm_fwd,
        lstm_bwd,
        h,
        conv: conv_caches,
        cnn,
        emissions,
    })
}

/// Emission scores only; see [`forward`].
pub fn encode(
    indices: &[usize],
    true_len: usize,
    params: &ModelParameters,
    config: &ModelConfig,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Tensor, NetworkError> {
    forward(indices, true_len, params, config, mode, rng).map(|t| t.emissions)
}

/// BPTT over one direction. `d_h_ext[t]` is the external gradient on the
/// hidden state of processing step `t`. Returns the gradient w.r.t. each
/// step's input column.
fn lstm_backward(
    cache: &LstmCache,
    weights: &LstmWeights,
    d_h_ext: &[Vec<Real>],
    grad: &mut LstmWeights,
) -> Vec<Vec<Real>> {
    let steps = &cache.steps;
    let t_total = steps.len();
    if t_total == 0 {
        return Vec::new();
    }
    let l = steps[0].h.len();
    let d_in = steps[0].x.len();
    let mut d_h_next = vec![0.0; l];
    let mut d_c_next = vec![0.0; l];
    let mut d_x = vec![vec![0.0; d_in]; t_total];
    let mut d_z = vec![0.0; 4 * l];
    for t in (0..t_total).rev() {
        let s = &steps[t];
        for k in 0..l {
            let dh = d_h_ext[t][k] + d_h_next[k];
            let dc = dh * s.gate_o[k] * (1.0 - s.tanh_c[k] * s.tanh_c[k]) + d_c_next[k];
            d_z[k] = dc * s.gate_g[k] * s.gate_i[k] * (1.0 - s.gate_i[k]);
            d_z[l + k] = dc * s.c_prev[k] * s.gate_f[k] * (1.0 - s.gate_f[k]);
            d_z[2 * l + k] = dc * s.gate_i[k] * (1.0 - s.gate_g[k] * s.gate_g[k]);
            d_z[3 * l + k] = dh * s.tanh_c[k] * s.gate_o[k] * (1.0 - s.gate_o[k]);
            d_c_next[k] = dc * s.gate_f[k];
        }
        for (b, &dz) in grad.bias.data_mut().iter_mut().zip(&d_z) {
            *b += dz;
        }
        outer_acc(&mut grad.input, &d_z, &s.x);
        outer_acc(&mut grad.recurrent, &d_z, &s.h_prev);
        d_h_next.fill(0.0);
        matvec_t_acc(&weights.recurrent, &d_z, &mut d_h_next);
        matvec_t_acc(&weights.input, &d_z, &mut d_x[t]);
    }
    d_x
}

/// Full backward pass: given the gradient of the loss w.r.t. the emissions
/// (zero at positions `>= true_len`), returns gradients for every
/// parameter. CRF parameter gradients are left at zero; the output head
/// owns those.
pub fn backward(
    trace: &ForwardTrace,
    d_emissions: &Tensor,
    params: &ModelParameters,
    config: &ModelConfig,
) -> ModelParameters {
    let n = trace.n;
    let true_len = trace.true_len;
    let l = config.lstm_dim;
    let f = config.conv_filters;
    let mut grads = params.zeros_like();

    // projection backward; columns >= true_len carry no loss gradient
    let mut d_h = Tensor::zeros(&[2 * l, n]);
    let mut d_cnn = Tensor::zeros(&[f, n]);
    {
        let d_e0 = &d_emissions.data()[..n];
        let d_e1 = &d_emissions.data()[n..];
        let db = grads.proj_bias.data_mut();
        for i in 0..true_len {
            db[0] += d_e0[i];
            db[1] += d_e1[i];
        }
        for j in 0..2 * l + f {
            let src = if j < 2 * l {
                trace.h.row(j)
            } else {
                trace.cnn.row(j - 2 * l)
            };
            let w0 = params.proj_weight.at2(j, 0);
            let w1 = params.proj_weight.at2(j, 1);
            let mut gw0 = 0.0;
            let mut gw1 = 0.0;
            let dst = if j < 2 * l {
                d_h.row_mut(j)
            } else {
                d_cnn.row_mut(j - 2 * l)
            };
            for i in 0..true_len {
                gw0 += src[i] * d_e0[i];
                gw1 += src[i] * d_e1[i];
                dst[i] = w0 * d_e0[i] + w1 * d_e1[i];
            }
            *grads.proj_weight.at2_mut(j, 0) += gw0;
            *grads.proj_weight.at2_mut(j, 1) += gw1;
        }
    }

    // CNN chain, last block first
    let mut d_block_out = d_cnn;
    for k in (0..config.conv_blocks).rev() {
        d_block_out =
            conv_block_backward(&trace.conv[k], &params.conv[k], &d_block_out, &mut grads.conv[k]);
    }
    let d_x_cnn = d_block_out; // d x n

    // BiLSTM: map position gradients to processing order per direction
    let d_h_fwd: Vec<Vec<Real>> = (0..true_len)
        .map(|pos| (0..l).map(|k| d_h.at2(k, pos)).collect())
        .collect();
    let d_h_bwd: Vec<Vec<Real>> = (0..true_len)
        .rev()
        .map(|pos| (0..l).map(|k| d_h.at2(l + k, pos)).collect())
        .collect();
    let d_x_fwd = lstm_backward(&trace.lstm_fwd, &params.lstm_fwd, &d_h_fwd, &mut grads.lstm_fwd);
    let d_x_bwd = lstm_backward(&trace.lstm_bwd, &params.lstm_bwd, &d_h_bwd, &mut grads.lstm_bwd);

    // combine input gradients: CNN path uses raw x, LSTM path goes through
    // the dropout mask
    let d = config.embedding_dim;
    let mut d_x = d_x_cnn;
    for (t, dx_t) in d_x_fwd.iter().enumerate() {
        let pos = t;
        for r in 0..d {
            let m = trace.dropout_mask.as_ref().map_or(1.0, |m| m.at2(r, pos));
            *d_x.at2_mut(r, pos) += dx_t[r] * m;
        }
    }
    for (t, dx_t) in d_x_bwd.iter().enumerate() {
        let pos = true_len - 1 - t;
        for r in 0..d {
            let m = trace.dropout_mask.as_ref().map_or(1.0, |m| m.at2(r, pos));
            *d_x.at2_mut(r, pos) += dx_t[r] * m;
        }
    }

    // embedding rows accumulate one column gradient per occurrence
    for (i, &idx) in trace.indices.iter().enumerate().take(true_len) {
        let row = grads.embeddings.row_mut(idx);
        for (r, slot) in row.iter_mut().enumerate() {
            *slot += d_x.at2(r, i);
        }
    }

    grads
}
