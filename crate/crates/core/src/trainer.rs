//! Deterministic mini-batch training.
//!
//! Epochs below `warmup_epochs` train with the sum-of-hinges loss, later
//! epochs with the configured loss. The learning rate is multiplied by
//! `lr_decay_factor` once, from epoch index `lr_decay_epoch` on. All
//! randomness (shuffling, per-epoch text choice) flows from the config
//! seed, and a checkpoint captures everything needed to resume a run
//! bit-for-bit: parameters, optimizer moments, epoch counter, generator
//! state and metric history.
//!
//! Checkpoint files are a text header followed by raw little-endian
//! 64-bit parameter blocks: a `CMRCKPT v<n>` magic line, one JSON header
//! line (config, epoch, generator state, optimizer step and
//! hyperparameters, metric history), a `BLOB <bytes>` line, then the
//! data: every parameter tensor in the fixed visit order, followed by
//! the optimizer's first and second moments per tensor in the same
//! order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::encoder::{
    encode_motion, encode_text, encoder_backward_into, init_params, EncoderConfig,
    EncoderParams, ParamGrads,
};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate_split, r_sum, EvalMode};
use crate::loss::{compute_loss, BatchEmbeddings, LossConfig, LossKind};
use crate::rng::Rng;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

const STREAM_PARAM_INIT: u64 = 11;
const STREAM_TRAIN: u64 = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub alpha: f64,
    pub delta_hetero: f64,
    pub delta_homo: f64,
    /// Epochs trained with the sum-of-hinges loss before switching.
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epoch index from which the decayed rate applies.
    pub lr_decay_epoch: usize,
    pub lr_decay_factor: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub encoder: EncoderConfig,
}

impl TrainConfig {
    /// Desk-scale training defaults for the given encoder shape. A 600
    /// sample corpus over 40 epochs yields few optimizer steps, so the
    /// batch size and learning rate are sized for that budget.
    pub fn defaults_for(encoder: EncoderConfig) -> Self {
        TrainConfig {
            loss: LossKind::DropTriple,
            alpha: 0.2,
            delta_hetero: 0.7,
            delta_homo: 0.9,
            warmup_epochs: 5,
            total_epochs: 40,
            batch_size: 16,
            learning_rate: 4e-3,
            lr_decay_epoch: 30,
            lr_decay_factor: 0.1,
            weight_decay: 0.01,
            seed: 42,
            encoder,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            delta_hetero: self.delta_hetero,
            delta_homo: self.delta_homo,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.loss_config().validate()?;
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::InvalidConfig(format!(
                "warmup_epochs {} exceeds total_epochs {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "batch_size must be >= 2 (a batch needs a negative), got {}",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.lr_decay_factor > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lr_decay_factor must be > 0, got {}",
                self.lr_decay_factor
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_decay_epoch {
            self.learning_rate * self.lr_decay_factor
        } else {
            self.learning_rate
        }
    }

    fn kind_at(&self, epoch: usize) -> LossKind {
        if epoch < self.warmup_epochs {
            LossKind::Sh
        } else {
            self.loss
        }
    }
}

/// First/second moment accumulators for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub tensors: Vec<TensorMoments>,
}

impl OptimizerState {
    pub fn new(params: &EncoderParams) -> Self {
        OptimizerState {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            tensors: params
                .tensors()
                .iter()
                .map(|(_, t)| TensorMoments {
                    m: vec![0.0; t.len()],
                    v: vec![0.0; t.len()],
                })
                .collect(),
        }
    }
}

/// One decoupled-weight-decay adaptive step:
/// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`, bias-corrected, then
/// `theta <- theta - lr (m_hat / (sqrt(v_hat) + eps) + wd theta)`.
pub fn adamw_step(
    params: &mut EncoderParams,
    grads: &ParamGrads,
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    let grad_tensors = grads.tensors();
    if grad_tensors.len() != state.tensors.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} gradient tensors vs {} optimizer slots",
            grad_tensors.len(),
            state.tensors.len()
        )));
    }
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    for ((name, theta), ((_, g), moments)) in params
        .tensors_mut()
        .into_iter()
        .zip(grad_tensors.into_iter().zip(state.tensors.iter_mut()))
    {
        if theta.len() != g.len() || theta.len() != moments.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor {name}: param {} / grad {} / moments {}",
                theta.len(),
                g.len(),
                moments.m.len()
            )));
        }
        for k in 0..theta.len() {
            moments.m[k] = state.beta1 * moments.m[k] + (1.0 - state.beta1) * g[k];
            moments.v[k] = state.beta2 * moments.v[k] + (1.0 - state.beta2) * g[k] * g[k];
            let m_hat = moments.m[k] / bc1;
            let v_hat = moments.v[k] / bc2;
            theta[k] -= lr * (m_hat / (v_hat.sqrt() + state.epsilon) + weight_decay * theta[k]);
        }
    }
    Ok(())
}

/// Shuffles the split and pairs each sample with one of its texts for
/// this epoch, chosen uniformly. Chunks of `batch_size`; a trailing
/// chunk smaller than 2 is dropped.
pub fn make_batches(
    split: &[usize],
    corpus: &Corpus,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Vec<Vec<(usize, usize)>>> {
    if split.is_empty() {
        return Err(Error::EmptySplit);
    }
    let mut order = split.to_vec();
    rng.shuffle(&mut order);
    let pairs: Vec<(usize, usize)> = order
        .into_iter()
        .map(|id| {
            let n_texts = corpus.samples[id].texts.len();
            (id, rng.below(n_texts))
        })
        .collect();
    let mut batches: Vec<Vec<(usize, usize)>> = pairs
        .chunks(batch_size)
        .map(|c| c.to_vec())
        .collect();
    if batches.last().is_some_and(|b| b.len() < 2) {
        batches.pop();
    }
    Ok(batches)
}

/// Per-epoch log row; the columns of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_kind: LossKind,
    pub lr: f64,
    pub mean_loss: f64,
    pub batches: usize,
    pub dropped_m: usize,
    pub dropped_t: usize,
    pub empty_negset_anchors: usize,
    /// Batches whose accumulated gradient norm exceeded 1e3.
    pub grad_norm_alerts: usize,
    /// R-sum on the test split under exact-pair relevance; 0 when the
    /// corpus has no test split.
    pub val_rsum: f64,
}

pub fn write_metrics_csv(history: &[EpochMetrics], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        w,
        "epoch,loss_kind,lr,mean_loss,batches,dropped_m,dropped_t,empty_negset_anchors,grad_norm_alerts,val_rsum"
    )?;
    for row in history {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            row.epoch,
            row.loss_kind,
            row.lr,
            row.mean_loss,
            row.batches,
            row.dropped_m,
            row.dropped_t,
            row.empty_negset_anchors,
            row.grad_norm_alerts,
            row.val_rsum
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Complete training state; what a checkpoint file stores.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: EncoderParams,
    pub optimizer: OptimizerState,
    pub epoch: usize,
    pub rng_state: u64,
    pub history: Vec<EpochMetrics>,
}

impl Checkpoint {
    /// Fresh state at epoch 0 with seed-derived parameters.
    pub fn init(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = init_params(
            &config.encoder,
            Rng::derive(config.seed, STREAM_PARAM_INIT).state(),
        )?;
        let optimizer = OptimizerState::new(&params);
        let rng_state = Rng::derive(config.seed, STREAM_TRAIN).state();
        Ok(Checkpoint {
            config,
            params,
            optimizer,
            epoch: 0,
            rng_state,
            history: Vec::new(),
        })
    }
}

/// Optional per-epoch callbacks for snapshot export and periodic
/// checkpointing.
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Called with the epoch index, current parameters and the epoch's
    /// first batch, before any update of that epoch.
    #[allow(clippy::type_complexity)]
    pub on_epoch_start: Option<&'a mut dyn FnMut(usize, &EncoderParams, &[(usize, usize)]) -> Result<()>>,
    /// Called after each completed epoch.
    #[allow(clippy::type_complexity)]
    pub on_epoch_end: Option<&'a mut dyn FnMut(&Checkpoint) -> Result<()>>,
}

fn check_corpus_dims(config: &TrainConfig, corpus: &Corpus) -> Result<()> {
    if corpus.manifest.config.feature_dim != config.encoder.pose_dim {
        return Err(Error::DimensionMismatch {
            context: "corpus pose feature width vs encoder pose_dim",
            expected: config.encoder.pose_dim,
            got: corpus.manifest.config.feature_dim,
        });
    }
    if corpus.manifest.vocab_size != config.encoder.vocab_size {
        return Err(Error::DimensionMismatch {
            context: "corpus vocab size vs encoder vocab_size",
            expected: config.encoder.vocab_size,
            got: corpus.manifest.vocab_size,
        });
    }
    Ok(())
}

/// Advances the state to `target_epoch`. Resuming a loaded checkpoint
/// with the same corpus reproduces the uninterrupted run bit-for-bit.
pub fn train_until(
    state: &mut Checkpoint,
    corpus: &Corpus,
    target_epoch: usize,
    hooks: &mut TrainHooks<'_>,
) -> Result<()> {
    check_corpus_dims(&state.config, corpus)?;
    if target_epoch > state.config.total_epochs {
        return Err(Error::InvalidConfig(format!(
            "target epoch {target_epoch} exceeds total_epochs {}",
            state.config.total_epochs
        )));
    }
    let loss_cfg = state.config.loss_config();
    let mut rng = Rng::from_state(state.rng_state);

    for epoch in state.epoch..target_epoch {
        let lr = state.config.lr_at(epoch);
        let kind = state.config.kind_at(epoch);
        let batches = make_batches(
            &corpus.manifest.train_ids,
            corpus,
            state.config.batch_size,
            &mut rng,
        )?;
        if let Some(cb) = hooks.on_epoch_start.as_mut() {
            if let Some(first) = batches.first() {
                cb(epoch, &state.params, first)?;
            }
        }

        let mut loss_sum = 0.0;
        let mut dropped_m = 0;
        let mut dropped_t = 0;
        let mut empty_anchors = 0;
        let mut alerts = 0;
        for batch in &batches {
            let mut motion_emb = Vec::with_capacity(batch.len());
            let mut text_emb = Vec::with_capacity(batch.len());
            let mut motion_caches = Vec::with_capacity(batch.len());
            let mut text_caches = Vec::with_capacity(batch.len());
            for &(sid, tid) in batch {
                let sample = &corpus.samples[sid];
                let (em, cm) = encode_motion(&state.params, &sample.motion)?;
                let (et, ct) = encode_text(&state.params, &sample.texts[tid])?;
                motion_emb.push(em);
                text_emb.push(et);
                motion_caches.push(cm);
                text_caches.push(ct);
            }
            let embeddings = BatchEmbeddings::from_embeddings(&motion_emb, &text_emb)?;
            let result = compute_loss(kind, &embeddings, &loss_cfg)?;

            let mut grads = ParamGrads::zeros(&state.config.encoder);
            for i in 0..batch.len() {
                encoder_backward_into(
                    &state.params,
                    &motion_caches[i],
                    result.grad_m.row(i),
                    &mut grads,
                )?;
                encoder_backward_into(
                    &state.params,
                    &text_caches[i],
                    result.grad_t.row(i),
                    &mut grads,
                )?;
            }
            if grads.global_norm() > 1e3 {
                alerts += 1;
            }
            adamw_step(
                &mut state.params,
                &grads,
                &mut state.optimizer,
                lr,
                state.config.weight_decay,
            )?;

            loss_sum += result.value;
            dropped_m += result.diagnostics.dropped_count_m;
            dropped_t += result.diagnostics.dropped_count_t;
            empty_anchors += result.diagnostics.empty_negset_anchors;
        }

        let mean_loss = if batches.is_empty() {
            0.0
        } else {
            loss_sum / batches.len() as f64
        };
        let val_rsum = if corpus.manifest.test_ids.is_empty() {
            0.0
        } else {
            let test = corpus.test_samples();
            let (motion_report, text_report) =
                evaluate_split(&state.params, &test, EvalMode::ExactPair)?;
            r_sum(&motion_report, &text_report)?
        };

        state.history.push(EpochMetrics {
            epoch,
            loss_kind: kind,
            lr,
            mean_loss,
            batches: batches.len(),
            dropped_m,
            dropped_t,
            empty_negset_anchors: empty_anchors,
            grad_norm_alerts: alerts,
            val_rsum,
        });
        state.epoch = epoch + 1;
        state.rng_state = rng.state();
        if let Some(cb) = hooks.on_epoch_end.as_mut() {
            cb(state)?;
        }
    }
    Ok(())
}

/// Runs a full training from scratch and returns the final state (its
/// `history` is the metrics log).
pub fn train(config: TrainConfig, corpus: &Corpus) -> Result<Checkpoint> {
    let mut state = Checkpoint::init(config)?;
    let target = state.config.total_epochs;
    train_until(&mut state, corpus, target, &mut TrainHooks::default())?;
    Ok(state)
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    config: TrainConfig,
    epoch: usize,
    rng_state: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u64,
    history: Vec<EpochMetrics>,
}

pub fn save_checkpoint(state: &Checkpoint, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: state.config.clone(),
        epoch: state.epoch,
        rng_state: state.rng_state,
        beta1: state.optimizer.beta1,
        beta2: state.optimizer.beta2,
        epsilon: state.optimizer.epsilon,
        step: state.optimizer.step,
        history: state.history.clone(),
    };
    let mut blob: Vec<u8> = Vec::new();
    for (_, t) in state.params.tensors() {
        for v in t {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    for moments in &state.optimizer.tensors {
        for v in &moments.m {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        for v in &moments.v {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }

    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "CMRCKPT v{CHECKPOINT_FORMAT_VERSION}")?;
    writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    writeln!(w, "BLOB {}", blob.len())?;
    w.write_all(&blob)?;
    w.flush()?;
    Ok(())
}

fn split_line(buf: &[u8], start: usize, what: &str) -> Result<(String, usize)> {
    let rel = buf[start..]
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::CorruptRecord {
            index: 0,
            reason: format!("missing {what} line"),
        })?;
    let line = String::from_utf8(buf[start..start + rel].to_vec()).map_err(|_| {
        Error::CorruptRecord {
            index: 0,
            reason: format!("{what} line is not utf-8"),
        }
    })?;
    Ok((line, start + rel + 1))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;

    let (magic, pos) = split_line(&buf, 0, "magic")?;
    let version: u32 = magic
        .strip_prefix("CMRCKPT v")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::CorruptRecord {
            index: 0,
            reason: format!("bad magic line {magic:?}"),
        })?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::FormatVersionMismatch {
            expected: CHECKPOINT_FORMAT_VERSION,
            found: version,
        });
    }
    let (header_line, pos) = split_line(&buf, pos, "header")?;
    let header: CheckpointHeader =
        serde_json::from_str(&header_line).map_err(|e| Error::CorruptRecord {
            index: 1,
            reason: format!("header does not parse: {e}"),
        })?;
    if header.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::FormatVersionMismatch {
            expected: CHECKPOINT_FORMAT_VERSION,
            found: header.format_version,
        });
    }
    let (blob_line, pos) = split_line(&buf, pos, "blob marker")?;
    let nbytes: usize = blob_line
        .strip_prefix("BLOB ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::CorruptRecord {
            index: 2,
            reason: format!("bad blob marker {blob_line:?}"),
        })?;
    let blob = &buf[pos..];
    if blob.len() != nbytes {
        return Err(Error::CorruptRecord {
            index: 3,
            reason: format!("blob has {} bytes, header says {nbytes}", blob.len()),
        });
    }

    let mut params = EncoderParams::zeros(&header.config.encoder);
    let mut optimizer = OptimizerState::new(&params);
    optimizer.beta1 = header.beta1;
    optimizer.beta2 = header.beta2;
    optimizer.epsilon = header.epsilon;
    optimizer.step = header.step;

    let mut cursor = 0usize;
    let mut take = |dst: &mut [f64]| -> Result<()> {
        for slot in dst.iter_mut() {
            let end = cursor + 8;
            if end > blob.len() {
                return Err(Error::CorruptRecord {
                    index: 3,
                    reason: "blob ends inside a tensor".into(),
                });
            }
            let mut bytes = [0u8; 8];
            bytes.copy_from_slice(&blob[cursor..end]);
            *slot = f64::from_le_bytes(bytes);
            cursor = end;
        }
        Ok(())
    };
    for (_, t) in params.tensors_mut() {
        take(t)?;
    }
    for moments in optimizer.tensors.iter_mut() {
        take(&mut moments.m)?;
        take(&mut moments.v)?;
    }
    if cursor != blob.len() {
        return Err(Error::CorruptRecord {
            index: 3,
            reason: format!("{} unused trailing bytes", blob.len() - cursor),
        });
    }

    Ok(Checkpoint {
        config: header.config,
        params,
        optimizer,
        epoch: header.epoch,
        rng_state: header.rng_state,
        history: header.history,
    })
}
