//! The encoder: dual-modality embeddings, pre-norm transformer layers with
//! multi-head self-attention, and a classification head producing one
//! categorical distribution per time position.

use crate::data::TokenSequence;
use crate::tensor::{Tape, Tensor, TensorError, TensorId};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config: {0}")]
    BadConfig(String),
    #[error("sequence of {got} tokens exceeds the {max}-position embedding table")]
    SequenceTooLong { got: usize, max: usize },
    #[error("token class {class} out of range for {classes} classes")]
    TokenOutOfRange { class: usize, classes: usize },
    #[error("non-finite activation in layer {layer}")]
    NonFiniteActivation { layer: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub classes: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub window_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            classes: 200,
            hidden: 200,
            heads: 2,
            layers: 2,
            ffn_mult: 4,
            dropout: 0.1,
            window_len: 96,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden == 0 || self.classes == 0 || self.layers == 0 || self.window_len == 0 {
            return Err(ModelError::BadConfig("zero-sized dimension".into()));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(ModelError::BadConfig(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::BadConfig("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln_attn_gamma: Tensor,
    pub ln_attn_beta: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln_ffn_gamma: Tensor,
    pub ln_ffn_beta: Tensor,
}

/// All learnable tensors of the encoder plus the classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub load_embed: Tensor,
    pub temp_embed: Tensor,
    pub pos_embed: Tensor,
    pub layers: Vec<LayerParams>,
    pub w_cls: Tensor,
    pub b_cls: Tensor,
}

fn trunc_normal(rng: &mut ChaCha8Rng, shape: Vec<usize>, sigma: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            data.push(z * sigma);
        }
    }
    Tensor::new(shape, data).expect("shape/data consistent by construction")
}

impl ModelParams {
    /// Truncated normal σ=0.02 for weights and embeddings, zeros for biases
    /// and layer-norm shifts, ones for layer-norm scales.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.hidden;
        let c = config.classes;
        let f = config.ffn_mult * d;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(config.layers);
        let load_embed = trunc_normal(&mut rng, vec![c, d], 0.02);
        let temp_embed = trunc_normal(&mut rng, vec![c, d], 0.02);
        let pos_embed = trunc_normal(&mut rng, vec![config.window_len, d], 0.02);
        for _ in 0..config.layers {
            layers.push(LayerParams {
                wq: trunc_normal(&mut rng, vec![d, d], 0.02),
                wk: trunc_normal(&mut rng, vec![d, d], 0.02),
                wv: trunc_normal(&mut rng, vec![d, d], 0.02),
                wo: trunc_normal(&mut rng, vec![d, d], 0.02),
                ln_attn_gamma: Tensor::new(vec![d], vec![1.0; d]).unwrap(),
                ln_attn_beta: Tensor::zeros(vec![d]),
                w1: trunc_normal(&mut rng, vec![d, f], 0.02),
                b1: Tensor::zeros(vec![f]),
                w2: trunc_normal(&mut rng, vec![f, d], 0.02),
                b2: Tensor::zeros(vec![d]),
                ln_ffn_gamma: Tensor::new(vec![d], vec![1.0; d]).unwrap(),
                ln_ffn_beta: Tensor::zeros(vec![d]),
            });
        }
        let w_cls = trunc_normal(&mut rng, vec![d, c], 0.02);
        let b_cls = Tensor::zeros(vec![c]);
        Ok(Self {
            load_embed,
            temp_embed,
            pos_embed,
            layers,
            w_cls,
            b_cls,
        })
    }

    /// Fixed traversal order shared by the optimizer, checkpoints, and
    /// gradient extraction.
    pub fn flatten(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("load_embed".to_string(), &self.load_embed),
            ("temp_embed".to_string(), &self.temp_embed),
            ("pos_embed".to_string(), &self.pos_embed),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("ln_attn_gamma", &l.ln_attn_gamma),
                ("ln_attn_beta", &l.ln_attn_beta),
                ("w1", &l.w1),
                ("b1", &l.b1),
                ("w2", &l.w2),
                ("b2", &l.b2),
                ("ln_ffn_gamma", &l.ln_ffn_gamma),
                ("ln_ffn_beta", &l.ln_ffn_beta),
            ] {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        out.push(("w_cls".to_string(), &self.w_cls));
        out.push(("b_cls".to_string(), &self.b_cls));
        out
    }

    pub fn flatten_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("load_embed".to_string(), &mut self.load_embed),
            ("temp_embed".to_string(), &mut self.temp_embed),
            ("pos_embed".to_string(), &mut self.pos_embed),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (name, t) in [
                ("wq", &mut l.wq),
                ("wk", &mut l.wk),
                ("wv", &mut l.wv),
                ("wo", &mut l.wo),
                ("ln_attn_gamma", &mut l.ln_attn_gamma),
                ("ln_attn_beta", &mut l.ln_attn_beta),
                ("w1", &mut l.w1),
                ("b1", &mut l.b1),
                ("w2", &mut l.w2),
                ("b2", &mut l.b2),
                ("ln_ffn_gamma", &mut l.ln_ffn_gamma),
                ("ln_ffn_beta", &mut l.ln_ffn_beta),
            ] {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        out.push(("w_cls".to_string(), &mut self.w_cls));
        out.push(("b_cls".to_string(), &mut self.b_cls));
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.flatten().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Tape ids of every parameter tensor, in `flatten` order.
pub struct ParamIds {
    pub load_embed: TensorId,
    pub temp_embed: TensorId,
    pub pos_embed: TensorId,
    pub layers: Vec<LayerIds>,
    pub w_cls: TensorId,
    pub b_cls: TensorId,
}

pub struct LayerIds {
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
    pub wo: TensorId,
    pub ln_attn_gamma: TensorId,
    pub ln_attn_beta: TensorId,
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
    pub ln_ffn_gamma: TensorId,
    pub ln_ffn_beta: TensorId,
}

impl ParamIds {
    pub fn register(tape: &mut Tape, params: &ModelParams) -> Self {
        Self {
            load_embed: tape.leaf(&params.load_embed),
            temp_embed: tape.leaf(&params.temp_embed),
            pos_embed: tape.leaf(&params.pos_embed),
            layers: params
                .layers
                .iter()
                .map(|l| LayerIds {
                    wq: tape.leaf(&l.wq),
                    wk: tape.leaf(&l.wk),
                    wv: tape.leaf(&l.wv),
                    wo: tape.leaf(&l.wo),
                    ln_attn_gamma: tape.leaf(&l.ln_attn_gamma),
                    ln_attn_beta: tape.leaf(&l.ln_attn_beta),
                    w1: tape.leaf(&l.w1),
                    b1: tape.leaf(&l.b1),
                    w2: tape.leaf(&l.w2),
                    b2: tape.leaf(&l.b2),
                    ln_ffn_gamma: tape.leaf(&l.ln_ffn_gamma),
                    ln_ffn_beta: tape.leaf(&l.ln_ffn_beta),
                })
                .collect(),
            w_cls: tape.leaf(&params.w_cls),
            b_cls: tape.leaf(&params.b_cls),
        }
    }

    pub fn flat(&self) -> Vec<TensorId> {
        let mut out = vec![self.load_embed, self.temp_embed, self.pos_embed];
        for l in &self.layers {
            out.extend([
                l.wq,
                l.wk,
                l.wv,
                l.wo,
                l.ln_attn_gamma,
                l.ln_attn_beta,
                l.w1,
                l.b1,
                l.w2,
                l.b2,
                l.ln_ffn_gamma,
                l.ln_ffn_beta,
            ]);
        }
        out.push(self.w_cls);
        out.push(self.b_cls);
        out
    }
}

/// One categorical distribution over the classes per time position.
#[derive(Debug, Clone)]
pub struct DistributionMatrix {
    probs: Vec<f64>,
    n: usize,
    c: usize,
}

impl DistributionMatrix {
    pub fn new(probs: Vec<f64>, n: usize, c: usize) -> Result<Self, ModelError> {
        if probs.len() != n * c {
            return Err(ModelError::BadConfig(format!(
                "{} probabilities for {n}x{c}",
                probs.len()
            )));
        }
        for row in 0..n {
            let sum: f64 = probs[row * c..(row + 1) * c].iter().sum();
            if (sum - 1.0).abs() > 1e-6 || probs[row * c..(row + 1) * c].iter().any(|&p| p < 0.0) {
                return Err(ModelError::BadConfig(format!(
                    "row {row} is not a distribution (sum {sum})"
                )));
            }
        }
        Ok(Self { probs, n, c })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn classes(&self) -> usize {
        self.c
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.probs[t * self.c..(t + 1) * self.c]
    }

    /// (top-1 class, top-2 class) with ties broken toward the lower index.
    pub fn top2(&self, t: usize) -> (usize, usize) {
        let row = self.row(t);
        let mut best = 0;
        for (j, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = j;
            }
        }
        let mut second = usize::MAX;
        for (j, &p) in row.iter().enumerate() {
            if j == best {
                continue;
            }
            if second == usize::MAX || p > row[second] {
                second = j;
            }
        }
        (best, second)
    }
}

/// Per-position argmax of D (Eq. 11 style top-1 decoding).
pub fn decode_top1(d: &DistributionMatrix) -> Vec<usize> {
    (0..d.len()).map(|t| d.top2(t).0).collect()
}

pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

fn maybe_dropout(
    tape: &mut Tape,
    x: TensorId,
    rate: f64,
    mode: &mut Mode,
) -> Result<TensorId, TensorError> {
    match mode {
        Mode::Train(rng) if rate > 0.0 => {
            let n = tape.data(x).len();
            let scale = 1.0 / (1.0 - rate);
            let keep: Vec<f64> = (0..n)
                .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale })
                .collect();
            tape.dropout(x, keep)
        }
        _ => Ok(x),
    }
}

/// out[t] = load_embed[load_class(t)] + temp_embed[temp_class(t)] + pos_embed[t]
pub fn embed_inputs(
    tape: &mut Tape,
    ids: &ParamIds,
    tokens: &TokenSequence,
    config: &ModelConfig,
) -> Result<TensorId, ModelError> {
    let n = tokens.load_classes.len();
    if n > config.window_len {
        return Err(ModelError::SequenceTooLong {
            got: n,
            max: config.window_len,
        });
    }
    for &c in tokens.load_classes.iter().chain(&tokens.temp_classes) {
        if c >= config.classes {
            return Err(ModelError::TokenOutOfRange {
                class: c,
                classes: config.classes,
            });
        }
    }
    let le = tape.gather_rows(ids.load_embed, &tokens.load_classes)?;
    let te = tape.gather_rows(ids.temp_embed, &tokens.temp_classes)?;
    let pos_idx: Vec<usize> = (0..n).collect();
    let pe = tape.gather_rows(ids.pos_embed, &pos_idx)?;
    let lt = tape.add(le, te)?;
    Ok(tape.add(lt, pe)?)
}

/// Single-query scaled dot-product attention: softmax(q·kᵢ/√dₕ)-weighted sum
/// of the values.
pub fn attention(q: &Tensor, keys: &Tensor, vals: &Tensor) -> Result<Tensor, ModelError> {
    let mut tape = Tape::new();
    let qi = tape.leaf(q);
    let ki = tape.leaf(keys);
    let vi = tape.leaf(vals);
    if keys.shape()[0] != vals.shape()[0] {
        return Err(ModelError::Tensor(TensorError::ShapeMismatch {
            op: "attention",
            lhs: keys.shape().to_vec(),
            rhs: vals.shape().to_vec(),
        }));
    }
    let dh = keys.shape()[1] as f64;
    let scores = tape.matmul_nt(qi, ki)?;
    let scaled = tape.scale(scores, 1.0 / dh.sqrt());
    let alpha = tape.softmax(scaled);
    let out = tape.matmul(alpha, vi)?;
    Ok(tape.value(out))
}

/// Builds the full encoder on the tape and returns the logits id.
/// Dropout fires only in train mode.
pub fn forward_logits(
    tape: &mut Tape,
    ids: &ParamIds,
    tokens: &TokenSequence,
    config: &ModelConfig,
    mode: &mut Mode,
) -> Result<TensorId, ModelError> {
    let mut x = embed_inputs(tape, ids, tokens, config)?;
    x = maybe_dropout(tape, x, config.dropout, mode)?;
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    for (li, layer) in ids.layers.iter().enumerate() {
        // pre-norm attention block
        let normed = tape.layer_norm(x, layer.ln_attn_gamma, layer.ln_attn_beta, 1e-5)?;
        let q = tape.matmul(normed, layer.wq)?;
        let k = tape.matmul(normed, layer.wk)?;
        let v = tape.matmul(normed, layer.wv)?;
        let mut heads = Vec::with_capacity(config.heads);
        for h in 0..config.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scaled = tape.scale(scores, scale);
            let alpha = tape.softmax(scaled);
            heads.push(tape.matmul(alpha, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        let proj = tape.matmul(cat, layer.wo)?;
        let proj = maybe_dropout(tape, proj, config.dropout, mode)?;
        x = tape.add(x, proj)?;

        // pre-norm feed-forward block
        let normed2 = tape.layer_norm(x, layer.ln_ffn_gamma, layer.ln_ffn_beta, 1e-5)?;
        let h1 = tape.matmul(normed2, layer.w1)?;
        let h1 = tape.add_row_bias(h1, layer.b1)?;
        let act = tape.gelu(h1);
        let h2 = tape.matmul(act, layer.w2)?;
        let h2 = tape.add_row_bias(h2, layer.b2)?;
        let h2 = maybe_dropout(tape, h2, config.dropout, mode)?;
        x = tape.add(x, h2)?;

        tape.check_finite(x, "layer output")
            .map_err(|_| ModelError::NonFiniteActivation { layer: li })?;
    }

    let logits = tape.matmul(x, ids.w_cls)?;
    let logits = tape.add_row_bias(logits, ids.b_cls)?;
    tape.check_finite(logits, "logits")
        .map_err(|_| ModelError::NonFiniteActivation {
            layer: config.layers,
        })?;
    Ok(logits)
}

/// Eval-mode forward pass: tokens in, distribution matrix out.
pub fn forward(
    tokens: &TokenSequence,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<DistributionMatrix, ModelError> {
    let mut tape = Tape::new();
    let ids = ParamIds::register(&mut tape, params);
    let logits = forward_logits(&mut tape, &ids, tokens, config, &mut Mode::Eval)?;
    let probs = tape.softmax(logits);
    DistributionMatrix::new(
        tape.data(probs).to_vec(),
        tokens.load_classes.len(),
        config.classes,
    )
}
