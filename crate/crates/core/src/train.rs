//! Weighted global/local cross-entropy training: Adam updates with gradient
//! clipping, the epoch loop with per-epoch re-masking, and checkpoint
//! persistence.

use crate::data::{apply_mask, quantize, DataError, MaskSpec, MaskedWindow, WindowSlice};
use crate::model::{
    decode_top1, forward, forward_logits, DistributionMatrix, Mode, ModelConfig, ModelError,
    ModelParams, ParamIds,
};
use crate::tensor::{Tape, TensorError, PROB_FLOOR};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    BadConfig(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty training set")]
    EmptyTrainSet,
    #[error("non-finite loss at step {step}: {loss}")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("labels/mask of {got} entries for {expected} positions")]
    LengthMismatch { expected: usize, got: usize },
    #[error("mask entries must be 0 or 1, found {0}")]
    BadMask(u8),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// weight of the masked-only loss term
    pub lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// global gradient-norm ceiling
    pub clip_norm: f64,
    /// extra mid-epoch evaluations every this many steps; 0 = per epoch only
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            lambda: 0.8,
            batch_size: 16,
            epochs: 100,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 1.0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(TrainError::BadConfig(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        if self.learning_rate <= 0.0 {
            return Err(TrainError::BadConfig("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be > 0".into()));
        }
        Ok(())
    }
}

/// (1−λ)·CE over all positions + λ·CE over masked positions. Zero masked
/// positions leave the local term at 0 with a warning on stderr.
pub fn compute_loss(
    d: &DistributionMatrix,
    truth_classes: &[usize],
    mask: &[u8],
    lambda: f64,
) -> Result<f64, TrainError> {
    let n = d.len();
    if truth_classes.len() != n || mask.len() != n {
        return Err(TrainError::LengthMismatch {
            expected: n,
            got: truth_classes.len().min(mask.len()),
        });
    }
    if let Some(&m) = mask.iter().find(|&&m| m > 1) {
        return Err(TrainError::BadMask(m));
    }
    let mut global = 0.0;
    let mut local = 0.0;
    let mut k = 0usize;
    for t in 0..n {
        let nll = -d.row(t)[truth_classes[t]].max(PROB_FLOOR).ln();
        global += nll;
        if mask[t] == 0 {
            local += nll;
            k += 1;
        }
    }
    global /= n as f64;
    if k == 0 {
        if lambda > 0.0 {
            eprintln!("warning: no masked positions; local loss term is 0");
        }
        return Ok((1.0 - lambda) * global);
    }
    Ok((1.0 - lambda) * global + lambda * local / k as f64)
}

fn truth_classes(window: &MaskedWindow, classes: usize) -> Result<Vec<usize>, DataError> {
    window.load.iter().map(|&v| quantize(v, classes)).collect()
}

/// Owns the parameters, Adam moments, and the dropout RNG.
pub struct Trainer {
    pub params: ModelParams,
    pub model_config: ModelConfig,
    pub config: TrainConfig,
    pub step: usize,
    moment1: Vec<Vec<f64>>,
    moment2: Vec<Vec<f64>>,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(
        params: ModelParams,
        model_config: ModelConfig,
        config: TrainConfig,
    ) -> Result<Self, TrainError> {
        model_config.validate()?;
        config.validate()?;
        let moment1: Vec<Vec<f64>> = params
            .flatten()
            .iter()
            .map(|(_, t)| vec![0.0; t.len()])
            .collect();
        let moment2 = moment1.clone();
        let rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0xA24BAED4963EE407).wrapping_add(1));
        Ok(Self {
            params,
            model_config,
            config,
            step: 0,
            moment1,
            moment2,
            rng,
        })
    }

    /// One optimizer update on a batch: forward, weighted fused
    /// cross-entropy, backward, global-norm clip, Adam.
    pub fn train_step(&mut self, batch: &[MaskedWindow]) -> Result<f64, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let c = self.model_config.classes;
        let lambda = self.config.lambda;
        let b = batch.len() as f64;
        let mut grads: Vec<Vec<f64>> = self.moment1.iter().map(|m| vec![0.0; m.len()]).collect();
        let mut total_loss = 0.0;

        for window in batch {
            let tokens = crate::data::TokenSequence::from_window(window, c)?;
            let labels = truth_classes(window, c)?;
            let n = labels.len();
            let k = window.mask.iter().filter(|&&m| m == 0).count();
            if k == 0 && lambda > 0.0 {
                eprintln!("warning: training window has no masked positions");
            }
            // fused-CE row weights reproducing (1−λ)·mean(all) + λ·mean(masked)
            let weights: Vec<f64> = window
                .mask
                .iter()
                .map(|&m| {
                    let local = if m == 0 && k > 0 { lambda / k as f64 } else { 0.0 };
                    ((1.0 - lambda) / n as f64 + local) / b
                })
                .collect();

            let mut tape = Tape::new();
            let ids = ParamIds::register(&mut tape, &self.params);
            let logits = forward_logits(
                &mut tape,
                &ids,
                &tokens,
                &self.model_config,
                &mut Mode::Train(&mut self.rng),
            )?;
            let loss = tape.cross_entropy_logits(logits, &labels, &weights)?;
            total_loss += tape.data(loss)[0];
            tape.backward(loss);
            for (acc, id) in grads.iter_mut().zip(ids.flat()) {
                for (a, g) in acc.iter_mut().zip(tape.grad(id)) {
                    *a += g;
                }
            }
        }

        if !total_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step: self.step,
                loss: total_loss,
            });
        }

        let norm: f64 = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let clip = self.config.clip_norm;
        if norm > clip {
            let s = clip / norm;
            for g in &mut grads {
                for v in g.iter_mut() {
                    *v *= s;
                }
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);
        let lr = self.config.learning_rate;
        let eps = self.config.epsilon;
        for ((tensor_entry, m1), (m2, g)) in self
            .params
            .flatten_mut()
            .into_iter()
            .zip(&mut self.moment1)
            .zip(self.moment2.iter_mut().zip(&grads))
        {
            let (_, tensor) = tensor_entry;
            let data = tensor.data_mut();
            for i in 0..data.len() {
                m1[i] = b1 * m1[i] + (1.0 - b1) * g[i];
                m2[i] = b2 * m2[i] + (1.0 - b2) * g[i] * g[i];
                data[i] -= lr * (m1[i] / bias1) / ((m2[i] / bias2).sqrt() + eps);
            }
        }
        Ok(total_loss)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_mpe: f64,
}

/// Test-set loss and MPE of the dequantized top-1 restoration over the
/// masked positions.
pub fn evaluate(
    params: &ModelParams,
    config: &ModelConfig,
    train_config: &TrainConfig,
    test: &[MaskedWindow],
) -> Result<(f64, f64), TrainError> {
    let mut loss_sum = 0.0;
    let mut ape_sum = 0.0;
    let mut ape_count = 0usize;
    for window in test {
        let tokens = crate::data::TokenSequence::from_window(window, config.classes)?;
        let labels = truth_classes(window, config.classes)?;
        let d = forward(&tokens, params, config)?;
        loss_sum += compute_loss(&d, &labels, &window.mask, train_config.lambda)?;
        let top1 = decode_top1(&d);
        for (t, &m) in window.mask.iter().enumerate() {
            if m == 0 {
                let restored = crate::data::dequantize(top1[t], config.classes)?;
                ape_sum += (restored - window.load[t]).abs() / window.load[t];
                ape_count += 1;
            }
        }
    }
    let n = test.len().max(1) as f64;
    let mpe = if ape_count == 0 { 0.0 } else { ape_sum / ape_count as f64 };
    Ok((loss_sum / n, mpe))
}

/// Epoch loop: seeded shuffle and fresh mask placement each epoch, Adam
/// updates per batch, evaluation per epoch (plus every `eval_every` steps).
pub fn fit(
    train: &[WindowSlice],
    test: &[WindowSlice],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    mask_spec: &MaskSpec,
) -> Result<(ModelParams, Vec<HistoryRecord>), TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let params = ModelParams::init(model_config, train_config.seed)?;
    let mut trainer = Trainer::new(params, *model_config, *train_config)?;
    let mut history = Vec::new();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(train_config.seed.wrapping_add(0x5851F42D4C957F2D));

    // the test set keeps one fixed mask placement throughout
    let test_masked: Vec<MaskedWindow> = test
        .iter()
        .map(|w| apply_mask(w, mask_spec))
        .collect::<Result<_, _>>()?;

    for epoch in 0..train_config.epochs {
        let mut idx: Vec<usize> = (0..train.len()).collect();
        idx.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in idx.chunks(train_config.batch_size) {
            let batch: Vec<MaskedWindow> = chunk
                .iter()
                .map(|&i| {
                    let spec = MaskSpec {
                        seed: mask_spec
                            .seed
                            .wrapping_add(1 + epoch as u64)
                            .wrapping_mul(0x9E3779B97F4A7C15)
                            .wrapping_add(i as u64),
                        ..mask_spec.clone()
                    };
                    apply_mask(&train[i], &spec)
                })
                .collect::<Result<_, _>>()?;
            epoch_loss += trainer.train_step(&batch)?;
            batches += 1;
            if train_config.eval_every > 0 && trainer.step % train_config.eval_every == 0 {
                let (test_loss, test_mpe) =
                    evaluate(&trainer.params, model_config, train_config, &test_masked)?;
                history.push(HistoryRecord {
                    epoch,
                    step: trainer.step,
                    train_loss: epoch_loss / batches as f64,
                    test_loss,
                    test_mpe,
                });
            }
        }
        let (test_loss, test_mpe) =
            evaluate(&trainer.params, model_config, train_config, &test_masked)?;
        history.push(HistoryRecord {
            epoch,
            step: trainer.step,
            train_loss: epoch_loss / batches as f64,
            test_loss,
            test_mpe,
        });
    }
    Ok((trainer.params, history))
}

pub fn write_history(path: &Path, history: &[HistoryRecord]) -> Result<(), TrainError> {
    let mut out = String::from("epoch,step,train_loss,test_loss,test_mpe\n");
    for h in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            h.epoch, h.step, h.train_loss, h.test_loss, h.test_mpe
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"BPIN";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    model_config: ModelConfig,
    train_config: TrainConfig,
    step: usize,
    rng_digest: String,
    tensors: Vec<TensorEntry>,
}

fn rng_digest(seed: u64, step: usize) -> String {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((step as u64).to_le_bytes());
    format!("{:x}", h.finalize())
}

/// Layout: `BPIN`, u32 LE version, u64 LE manifest length, JSON manifest,
/// then every tensor as little-endian f32 in manifest order.
pub fn save_checkpoint(
    params: &ModelParams,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    step: usize,
    path: &Path,
) -> Result<(), TrainError> {
    let flat = params.flatten();
    let mut tensors = Vec::with_capacity(flat.len());
    let mut offset = 0u64;
    for (name, t) in &flat {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset,
        });
        offset += (t.len() * 4) as u64;
    }
    let manifest = Manifest {
        model_config: *model_config,
        train_config: *train_config,
        step,
        rng_digest: rng_digest(train_config.seed, step),
        tensors,
    };
    let json = serde_json::to_vec(&manifest)
        .map_err(|e| TrainError::Checkpoint(format!("manifest encode: {e}")))?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(CHECKPOINT_MAGIC)?;
    f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    f.write_all(&(json.len() as u64).to_le_bytes())?;
    f.write_all(&json)?;
    for (_, t) in &flat {
        let mut buf = Vec::with_capacity(t.len() * 4);
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        f.write_all(&buf)?;
    }
    Ok(())
}

pub fn load_checkpoint(
    path: &Path,
) -> Result<(ModelParams, ModelConfig, TrainConfig, usize), TrainError> {
    let mut f = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(TrainError::Checkpoint("missing BPIN magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::Checkpoint(format!(
            "unknown version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + mlen {
        return Err(TrainError::Checkpoint("truncated manifest".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + mlen])
        .map_err(|e| TrainError::Checkpoint(format!("manifest decode: {e}")))?;
    let payload = &bytes[16 + mlen..];

    // byte ranges must tile the payload exactly
    let mut expected = 0u64;
    for t in &manifest.tensors {
        if t.dtype != "f32" {
            return Err(TrainError::Checkpoint(format!("unknown dtype {}", t.dtype)));
        }
        if t.offset != expected {
            return Err(TrainError::Checkpoint(format!(
                "tensor {} at offset {}, expected {expected}",
                t.name, t.offset
            )));
        }
        expected += (t.shape.iter().product::<usize>() * 4) as u64;
    }
    if expected as usize != payload.len() {
        return Err(TrainError::Checkpoint(format!(
            "payload of {} bytes, manifest describes {expected}",
            payload.len()
        )));
    }

    let mut params = ModelParams::init(&manifest.model_config, 0)?;
    let flat = params.flatten_mut();
    if flat.len() != manifest.tensors.len() {
        return Err(TrainError::Checkpoint(format!(
            "manifest lists {} tensors, model has {}",
            manifest.tensors.len(),
            flat.len()
        )));
    }
    for ((name, tensor), entry) in flat.into_iter().zip(&manifest.tensors) {
        if name != entry.name || tensor.shape() != entry.shape.as_slice() {
            return Err(TrainError::Checkpoint(format!(
                "tensor mismatch: expected {name} {:?}, manifest has {} {:?}",
                tensor.shape(),
                entry.name,
                entry.shape
            )));
        }
        let start = entry.offset as usize;
        let data = tensor.data_mut();
        for (i, v) in data.iter_mut().enumerate() {
            let b = &payload[start + i * 4..start + i * 4 + 4];
            *v = f32::from_le_bytes(b.try_into().unwrap()) as f64;
        }
    }
    Ok((
        params,
        manifest.model_config,
        manifest.train_config,
        manifest.step,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TokenSequence;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            classes: 8,
            hidden: 8,
            heads: 2,
            layers: 1,
            ffn_mult: 2,
            dropout: 0.0,
            window_len: 8,
        }
    }

    fn uniform_d(n: usize, c: usize) -> DistributionMatrix {
        DistributionMatrix::new(vec![1.0 / c as f64; n * c], n, c).unwrap()
    }

    fn tiny_window(n: usize, masked: &[usize], seed: u64) -> MaskedWindow {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let load: Vec<f64> = (0..n).map(|_| rng.gen_range(0.15..0.95)).collect();
        let temp: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.95)).collect();
        let mut mask = vec![1u8; n];
        for &i in masked {
            mask[i] = 0;
        }
        let masked_load: Vec<f64> = load
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m as f64)
            .collect();
        MaskedWindow {
            load,
            temp,
            mask,
            masked_load,
            left_margin_load: vec![],
            right_margin_load: vec![],
            left_margin_temp: vec![],
            right_margin_temp: vec![],
        }
    }

    #[test]
    fn loss_examples() {
        // perfect one-hot predictions: zero for any lambda
        let mut probs = vec![0.0; 3 * 4];
        for (t, &lab) in [1usize, 3, 0].iter().enumerate() {
            probs[t * 4 + lab] = 1.0;
        }
        let d = DistributionMatrix::new(probs, 3, 4).unwrap();
        for lambda in [0.0, 0.5, 0.8, 1.0] {
            let l = compute_loss(&d, &[1, 3, 0], &[1, 0, 1], lambda).unwrap();
            assert!(l.abs() < 1e-9, "lambda {lambda}: {l}");
        }

        // uniform over 4 classes, one of two positions masked, lambda 0.8:
        // both terms are ln 4
        let u = uniform_d(2, 4);
        let l = compute_loss(&u, &[0, 1], &[1, 0], 0.8).unwrap();
        assert!((l - 4.0f64.ln()).abs() < 1e-12);

        // lambda = 0 reduces to the global term
        let l0 = compute_loss(&u, &[0, 1], &[1, 0], 0.0).unwrap();
        assert!((l0 - 4.0f64.ln()).abs() < 1e-12);

        // no masked positions: local term contributes nothing
        let lk0 = compute_loss(&u, &[0, 1], &[1, 1], 0.8).unwrap();
        assert!((lk0 - 0.2 * 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_is_linear_in_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut probs = vec![0.0; 4 * 5];
        for row in 0..4 {
            let raw: Vec<f64> = (0..5).map(|_| rng.gen_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            for j in 0..5 {
                probs[row * 5 + j] = raw[j] / s;
            }
        }
        let d = DistributionMatrix::new(probs, 4, 5).unwrap();
        let labels = [2usize, 0, 4, 1];
        let mask = [1u8, 0, 0, 1];
        let l0 = compute_loss(&d, &labels, &mask, 0.0).unwrap();
        let l1 = compute_loss(&d, &labels, &mask, 1.0).unwrap();
        for lambda in [0.1, 0.35, 0.6, 0.95] {
            let l = compute_loss(&d, &labels, &mask, lambda).unwrap();
            let interp = (1.0 - lambda) * l0 + lambda * l1;
            assert!((l - interp).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_rejects_bad_mask() {
        let u = uniform_d(2, 4);
        assert!(matches!(
            compute_loss(&u, &[0, 1], &[1, 2], 0.5),
            Err(TrainError::BadMask(2))
        ));
    }

    #[test]
    fn fused_training_weights_match_contract_loss() {
        // the fused per-row-weighted CE used in train_step must equal
        // compute_loss on the softmax probabilities
        let cfg = tiny_config();
        let params = ModelParams::init(&cfg, 4).unwrap();
        let window = tiny_window(8, &[3, 4], 7);
        let tokens = TokenSequence::from_window(&window, cfg.classes).unwrap();
        let labels = truth_classes(&window, cfg.classes).unwrap();
        let lambda = 0.8;
        let k = 2.0;
        let weights: Vec<f64> = window
            .mask
            .iter()
            .map(|&m| (1.0 - lambda) / 8.0 + if m == 0 { lambda / k } else { 0.0 })
            .collect();

        let mut tape = Tape::new();
        let ids = ParamIds::register(&mut tape, &params);
        let logits = forward_logits(&mut tape, &ids, &tokens, &cfg, &mut Mode::Eval).unwrap();
        let fused = tape.cross_entropy_logits(logits, &labels, &weights).unwrap();
        let fused_val = tape.data(fused)[0];

        let d = forward(&tokens, &params, &cfg).unwrap();
        let contract = compute_loss(&d, &labels, &window.mask, lambda).unwrap();
        assert!((fused_val - contract).abs() < 1e-12, "{fused_val} vs {contract}");
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let cfg = tiny_config();
        let params = ModelParams::init(&cfg, 11).unwrap();
        let window = tiny_window(8, &[2, 3, 4], 13);
        let tokens = TokenSequence::from_window(&window, cfg.classes).unwrap();
        let labels = truth_classes(&window, cfg.classes).unwrap();
        let weights: Vec<f64> = window
            .mask
            .iter()
            .map(|&m| 0.2 / 8.0 + if m == 0 { 0.8 / 3.0 } else { 0.0 })
            .collect();

        let loss_of = |p: &ModelParams| {
            let mut tape = Tape::new();
            let ids = ParamIds::register(&mut tape, p);
            let logits = forward_logits(&mut tape, &ids, &tokens, &cfg, &mut Mode::Eval).unwrap();
            let l = tape.cross_entropy_logits(logits, &labels, &weights).unwrap();
            tape.data(l)[0]
        };

        let mut tape = Tape::new();
        let ids = ParamIds::register(&mut tape, &params);
        let logits = forward_logits(&mut tape, &ids, &tokens, &cfg, &mut Mode::Eval).unwrap();
        let loss = tape.cross_entropy_logits(logits, &labels, &weights).unwrap();
        tape.backward(loss);

        // fourth-order five-point stencil: truncation O(h⁴) and roundoff both
        // land well under the 1e-4 bound even for near-zero gradients
        let h = 1e-3;
        let flat_ids = ids.flat();
        let names: Vec<String> = params.flatten().iter().map(|(n, _)| n.clone()).collect();
        let mut worst: f64 = 0.0;
        for (pi, id) in flat_ids.iter().enumerate() {
            let len = params.flatten()[pi].1.len();
            // probe a handful of coordinates per tensor
            let probes: Vec<usize> = (0..len).step_by((len / 4).max(1)).take(5).collect();
            for &i in &probes {
                let at = |delta: f64| {
                    let mut p = params.clone();
                    p.flatten_mut()[pi].1.data_mut()[i] += delta;
                    loss_of(&p)
                };
                let fd =
                    (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
                let an = tape.grad(*id)[i];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
                assert!(
                    rel <= 1e-4,
                    "{}[{i}]: analytic {an}, fd {fd}, rel {rel}",
                    names[pi]
                );
                worst = worst.max(rel);
            }
        }
        assert!(worst <= 1e-4);
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let cfg = tiny_config();
        let params = ModelParams::init(&cfg, 1).unwrap();
        let tc = TrainConfig {
            learning_rate: 1e-30, // validate() forbids exactly 0
            epochs: 1,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(params.clone(), cfg, tc).unwrap();
        let loss = trainer
            .train_step(&[tiny_window(8, &[3], 1), tiny_window(8, &[4], 2)])
            .unwrap();
        assert!(loss.is_finite());
        for ((_, a), (_, b)) in params.flatten().iter().zip(trainer.params.flatten()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-25);
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny_config();
        let tc = TrainConfig {
            batch_size: 2,
            ..TrainConfig::default()
        };
        let batch = [tiny_window(8, &[3, 4], 5), tiny_window(8, &[2], 6)];
        let run = || {
            let params = ModelParams::init(&cfg, 9).unwrap();
            let mut t = Trainer::new(params, cfg, tc).unwrap();
            (0..5).map(|_| t.train_step(&batch).unwrap()).collect::<Vec<f64>>()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "loss trajectories diverged between identical runs");
    }

    #[test]
    fn short_overfit_run_reduces_masked_loss() {
        let cfg = tiny_config();
        let tc = TrainConfig {
            learning_rate: 3e-3,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let window = tiny_window(8, &[3, 4], 17);
        let params = ModelParams::init(&cfg, 21).unwrap();
        let mut trainer = Trainer::new(params, cfg, tc).unwrap();
        let first = trainer.train_step(std::slice::from_ref(&window)).unwrap();
        for _ in 0..299 {
            trainer.train_step(std::slice::from_ref(&window)).unwrap();
        }
        let last = trainer.train_step(std::slice::from_ref(&window)).unwrap();
        assert!(last < first * 0.2, "loss {first} -> {last}");
    }

    fn slice_from(window: &MaskedWindow) -> WindowSlice {
        WindowSlice {
            load: window.load.clone(),
            temp: window.temp.clone(),
            left_margin_load: vec![],
            right_margin_load: vec![],
            left_margin_temp: vec![],
            right_margin_temp: vec![],
            start_index: 0,
        }
    }

    #[test]
    fn fit_zero_epochs_returns_initial_params() {
        let cfg = tiny_config();
        let tc = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let spec = MaskSpec {
            segment_len: 2,
            ..MaskSpec::default()
        };
        let train: Vec<WindowSlice> = (0..3).map(|s| slice_from(&tiny_window(8, &[], s))).collect();
        let (params, history) = fit(&train, &[], &cfg, &tc, &spec).unwrap();
        assert!(history.is_empty());
        assert_eq!(params, ModelParams::init(&cfg, tc.seed).unwrap());
        assert!(matches!(
            fit(&[], &[], &cfg, &tc, &spec),
            Err(TrainError::EmptyTrainSet)
        ));
    }

    #[test]
    fn fit_produces_history_rows() {
        let cfg = tiny_config();
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let spec = MaskSpec {
            segment_len: 2,
            ..MaskSpec::default()
        };
        let train: Vec<WindowSlice> = (0..4).map(|s| slice_from(&tiny_window(8, &[], s))).collect();
        let test: Vec<WindowSlice> = (10..12).map(|s| slice_from(&tiny_window(8, &[], s))).collect();
        let (_, history) = fit(&train, &test, &cfg, &tc, &spec).unwrap();
        assert_eq!(history.len(), 2);
        for (e, h) in history.iter().enumerate() {
            assert_eq!(h.epoch, e);
            assert!(h.train_loss.is_finite() && h.test_loss.is_finite());
            assert!(h.test_mpe >= 0.0);
        }

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        write_history(&path, &history).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("epoch,step,train_loss,test_loss,test_mpe"));
        assert_eq!(lines.count(), 2);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise_at_f32() {
        let cfg = tiny_config();
        let tc = TrainConfig::default();
        let params = ModelParams::init(&cfg, 33).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bpin");
        save_checkpoint(&params, &cfg, &tc, 42, &path).unwrap();
        let (loaded, lcfg, ltc, step) = load_checkpoint(&path).unwrap();
        assert_eq!(lcfg, cfg);
        assert_eq!(ltc, tc);
        assert_eq!(step, 42);
        // every scalar equals the f32 cast of the original
        for ((_, a), (_, b)) in params.flatten().iter().zip(loaded.flatten()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
        // forward outputs are bitwise identical across two loads
        let (loaded2, ..) = load_checkpoint(&path).unwrap();
        let window = tiny_window(8, &[3], 3);
        let tokens = TokenSequence::from_window(&window, cfg.classes).unwrap();
        let d1 = forward(&tokens, &loaded, &cfg).unwrap();
        let d2 = forward(&tokens, &loaded2, &cfg).unwrap();
        for t in 0..8 {
            assert_eq!(d1.row(t), d2.row(t));
        }
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let cfg = tiny_config();
        let tc = TrainConfig::default();
        let params = ModelParams::init(&cfg, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bpin");
        save_checkpoint(&params, &cfg, &tc, 0, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        // truncated payload
        let cut = dir.path().join("cut.bpin");
        std::fs::write(&cut, &bytes[..bytes.len() - 7]).unwrap();
        assert!(load_checkpoint(&cut).is_err());

        // unknown version
        let mut wrong = bytes.clone();
        wrong[4] = 9;
        let wv = dir.path().join("wv.bpin");
        std::fs::write(&wv, &wrong).unwrap();
        let err = load_checkpoint(&wv).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");

        // manifest tensor count mismatch: drop the last tensor entry
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut manifest: Manifest = serde_json::from_slice(&bytes[16..16 + mlen]).unwrap();
        manifest.tensors.pop();
        let json = serde_json::to_vec(&manifest).unwrap();
        let mut rebuilt = bytes[..8].to_vec();
        rebuilt.extend_from_slice(&(json.len() as u64).to_le_bytes());
        rebuilt.extend_from_slice(&json);
        rebuilt.extend_from_slice(&bytes[16 + mlen..]);
        let cm = dir.path().join("cm.bpin");
        std::fs::write(&cm, &rebuilt).unwrap();
        assert!(load_checkpoint(&cm).is_err());

        // bad magic
        let mut nomagic = bytes;
        nomagic[0] = b'X';
        let nm = dir.path().join("nm.bpin");
        std::fs::write(&nm, &nomagic).unwrap();
        let err = load_checkpoint(&nm).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
    }
}
