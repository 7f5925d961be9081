//! Optimizer, training and evaluation loops, and checkpoint files.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor};
use crate::error::{contract, Error, Result};
use crate::listops::ListOpsSample;
use crate::model::{Model, ModelConfig, Variant};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update. Missing gradients count as zero.
pub fn adam_step(store: &mut ParamStore, grads: &[Option<Tensor>], state: &mut AdamState) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(contract(format!(
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            store.len()
        )));
    }
    for (id, g) in store.ids().zip(grads) {
        if let Some(g) = g {
            let p = store.get(id);
            if g.shape() != p.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for (i, id) in store.ids().enumerate().collect::<Vec<_>>() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = store.get_mut(id).data_mut();
        let g = grads[i].as_ref().map(Tensor::data);
        for j in 0..p.len() {
            let gj = g.map_or(0.0, |g| g[j]);
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub mean_loss: f64,
    pub accuracy: f64,
    /// Loss of every batch in order.
    pub batch_losses: Vec<f64>,
}

/// Loss value, correct-prediction count and parameter gradients of one batch.
pub fn batch_gradients(
    model: &Model,
    batch: &[&ListOpsSample],
    rng: &mut ChaCha8Rng,
) -> Result<(f64, usize, Vec<Option<Tensor>>)> {
    let tape = Tape::with_params(&model.store);
    let out = model.forward(&tape, batch, true, rng)?;
    let loss = out.loss.item();
    let correct = out
        .predictions
        .iter()
        .zip(batch)
        .filter(|(p, s)| **p == s.label as usize)
        .count();
    let grads = tape.backward(out.loss)?.into_param_grads();
    Ok((loss, correct, grads))
}

/// One pass over `data` in a seeded shuffled order.
pub fn train_epoch(
    model: &mut Model,
    adam: &mut AdamState,
    data: &[ListOpsSample],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EpochMetrics> {
    if data.is_empty() {
        return Err(contract("training on an empty dataset"));
    }
    if batch_size == 0 {
        return Err(contract("batch size must be positive"));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut batch_losses = Vec::new();
    let mut weighted = 0.0;
    let mut correct = 0;
    for chunk in order.chunks(batch_size) {
        let batch: Vec<&ListOpsSample> = chunk.iter().map(|&i| &data[i]).collect();
        let (loss, c, grads) = batch_gradients(model, &batch, rng)?;
        adam_step(&mut model.store, &grads, adam)?;
        batch_losses.push(loss);
        weighted += loss * chunk.len() as f64;
        correct += c;
    }
    Ok(EpochMetrics {
        mean_loss: weighted / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
        batch_losses,
    })
}

/// Accuracy with noise and dropout off.
pub fn evaluate(model: &Model, data: &[ListOpsSample], batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let mut correct = 0;
    for chunk in data.chunks(batch_size.max(1)) {
        let batch: Vec<&ListOpsSample> = chunk.iter().collect();
        let tape = Tape::with_params(&model.store);
        let out = model.forward(&tape, &batch, false, &mut unused)?;
        correct += out
            .predictions
            .iter()
            .zip(chunk)
            .filter(|(p, s)| **p == s.label as usize)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Stop after this many epochs without a new best validation accuracy.
    pub patience: Option<usize>,
    /// Stop once validation accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    /// Wall-clock budget checked between epochs.
    pub time_budget_secs: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            patience: None,
            target_accuracy: None,
            time_budget_secs: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: EpochMetrics,
    pub val_accuracy: Option<f64>,
    pub elapsed_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_val_accuracy: Option<f64>,
}

impl TrainReport {
    pub fn loss_curve(&self) -> Vec<f64> {
        self.epochs.iter().flat_map(|e| e.train.batch_losses.iter().copied()).collect()
    }
}

/// Trains for up to `cfg.epochs` epochs, evaluating on `val` after each.
pub fn fit(
    model: &mut Model,
    train: &[ListOpsSample],
    val: &[ListOpsSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&model.store, cfg.lr);
    let start = Instant::now();
    let mut report = TrainReport {
        epochs: Vec::new(),
        best_val_accuracy: None,
    };
    let mut since_best = 0;
    for epoch in 1..=cfg.epochs {
        let train_metrics = train_epoch(model, &mut adam, train, cfg.batch_size, &mut rng)?;
        let val_accuracy = if val.is_empty() {
            None
        } else {
            Some(evaluate(model, val, cfg.batch_size)?)
        };
        let rec = EpochRecord {
            epoch,
            train: train_metrics,
            val_accuracy,
            elapsed_secs: start.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        report.epochs.push(rec);
        if let Some(acc) = val_accuracy {
            if report.best_val_accuracy.map_or(true, |b| acc > b) {
                report.best_val_accuracy = Some(acc);
                since_best = 0;
            } else {
                since_best += 1;
            }
            if cfg.target_accuracy.is_some_and(|t| acc >= t) {
                break;
            }
        }
        if cfg.patience.is_some_and(|p| since_best >= p) {
            break;
        }
        if cfg.time_budget_secs.is_some_and(|b| start.elapsed().as_secs_f64() >= b) {
            break;
        }
    }
    Ok(report)
}

const MAGIC: &[u8; 8] = b"EBTCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in scalars.
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    variant: Variant,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

pub fn checkpoint_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut offset = 0;
    for id in model.store.ids() {
        let t = model.store.get(id);
        tensors.push(TensorEntry {
            name: model.store.name(id).to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel();
    }
    let header = Header {
        variant: model.cfg.variant,
        config: model.cfg.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::CheckpointHeader(e.to_string()))?;
    let mut out = Vec::with_capacity(24 + json.len() + 8 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.store.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let bytes = checkpoint_bytes(model)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::CheckpointHeader("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if hlen > body.len() {
        return Err(Error::CheckpointHeader(format!("header length {hlen} exceeds file")));
    }
    let header: Header =
        serde_json::from_slice(&body[..hlen]).map_err(|e| Error::CheckpointHeader(e.to_string()))?;
    if header.variant != header.config.variant {
        return Err(Error::VariantMismatch {
            expected: header.config.variant.tag().into(),
            found: header.variant.tag().into(),
        });
    }
    let payload = &body[hlen..];
    if payload.len() % 8 != 0 {
        return Err(Error::CheckpointHeader("payload is not a whole number of scalars".into()));
    }
    let scalars: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut model = Model::new(header.config.clone(), 0)?;
    for id in model.store.ids().collect::<Vec<_>>() {
        let name = model.store.name(id).to_string();
        let entry = header
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::MissingTensor(name.clone()))?;
        let expected = model.store.get(id).shape().to_vec();
        if entry.shape != expected {
            return Err(Error::TensorShape {
                name,
                expected,
                found: entry.shape.clone(),
            });
        }
        let n: usize = expected.iter().product();
        let data = scalars
            .get(entry.offset..entry.offset + n)
            .ok_or_else(|| Error::CheckpointHeader(format!("tensor {name:?} runs past the payload")))?;
        model.store.set(id, Tensor::new(expected, data.to_vec())?);
    }
    if let Some(extra) = header.tensors.iter().find(|e| model.store.find(&e.name).is_none()) {
        return Err(Error::ExtraTensor(extra.name.clone()));
    }
    Ok(model)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

/// Loads a checkpoint and checks that it holds the expected variant.
pub fn load_checkpoint_for(path: impl AsRef<Path>, variant: Variant) -> Result<Model> {
    let model = load_checkpoint(path)?;
    if model.cfg.variant != variant {
        return Err(Error::VariantMismatch {
            expected: variant.tag().into(),
            found: model.cfg.variant.tag().into(),
        });
    }
    Ok(model)
}
