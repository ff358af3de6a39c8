//! Weighted cross-entropy, L2, Adam with step decay, the training loop and
//! checkpoint files.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ClassWeights, PunctClass, NUM_CLASSES};
use crate::nn::{self, Batch, ForwardTrace, Mode, ModelConfig, ModelParams, NnError, Real};
use crate::rng::{derive_seed, derive_seed_str, SplitMix64};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const LOG_FLOOR: f64 = 1e-12;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"PUNKT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("total class weight of the batch is zero")]
    ZeroWeight,
    #[error("example {index}: {features} feature rows but {labels} labels")]
    LabelMismatch { index: usize, features: usize, labels: usize },
    #[error("example {index}: feature width {got}, model expects {expected}")]
    Width { index: usize, expected: usize, got: usize },
    #[error("invalid train config: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("byte {offset}: not a checkpoint (bad magic)")]
    BadMagic { offset: usize },
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("byte {offset}: file truncated")]
    Truncated { offset: usize },
    #[error("byte {offset}: checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { offset: usize, stored: u32, computed: u32 },
    #[error("byte {offset}: bad metadata: {message}")]
    Metadata { offset: usize, message: String },
    #[error("byte {offset}: tensor {name}: {message}")]
    Tensor { offset: usize, name: String, message: String },
    #[error("checkpoint lacks tensor {0}")]
    Missing(String),
}

/// Fields missing from a serialized config take the small-scale defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_every: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub l2_scale: f64,
    pub seed: u64,
    /// Steps between validation passes.
    pub eval_every: u64,
}

impl TrainConfig {
    /// Full-scale schedule: 30k steps of batch 512.
    pub fn full() -> Self {
        Self { total_steps: 30_000, batch_size: 512, ..Self::desk() }
    }

    /// Small-scale schedule: 2k steps of batch 32.
    pub fn desk() -> Self {
        Self {
            lr0: 5e-4,
            decay_factor: 0.5,
            decay_every: 5000,
            total_steps: 2000,
            batch_size: 32,
            l2_scale: 1e-5,
            seed: 0,
            eval_every: 200,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = self.lr0 > 0.0
            && self.decay_factor > 0.0
            && self.decay_every > 0
            && self.total_steps > 0
            && self.batch_size > 0
            && self.l2_scale >= 0.0
            && self.eval_every > 0;
        if ok {
            Ok(())
        } else {
            Err(TrainError::Config("rates, counts and sizes must be positive".into()))
        }
    }

    /// `lr0 * decay_factor ^ floor(step / decay_every)`.
    pub fn lr_at(&self, step: u64) -> f64 {
        self.lr0 * self.decay_factor.powi((step / self.decay_every) as i32)
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Class-weighted mean negative log-likelihood over rows with a label.
/// `None` labels mark padding.
pub fn weighted_ce<F: Real>(probs: &Array2<F>, labels: &[Option<PunctClass>], weights: &ClassWeights) -> Result<f64, TrainError> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (row, label) in probs.outer_iter().zip(labels) {
        if let Some(y) = label {
            let w = weights.get(*y);
            let p = row[y.index()].to_f64().unwrap_or(0.0).max(LOG_FLOOR);
            num += -w * p.ln();
            den += w;
        }
    }
    if den <= 0.0 {
        return Err(TrainError::ZeroWeight);
    }
    Ok(num / den)
}

/// Loss together with its gradient with respect to the softmax logits,
/// `w_y / W * (p - onehot(y))` per labelled row.
pub fn weighted_ce_grad<F: Real>(
    probs: &Array2<F>,
    labels: &[Option<PunctClass>],
    weights: &ClassWeights,
) -> Result<(f64, Array2<F>), TrainError> {
    let loss = weighted_ce(probs, labels, weights)?;
    let den: f64 = labels.iter().flatten().map(|y| weights.get(*y)).sum();
    let mut grad = Array2::zeros(probs.dim());
    for ((mut g, p), label) in grad.outer_iter_mut().zip(probs.outer_iter()).zip(labels) {
        if let Some(y) = label {
            let scale = F::from(weights.get(*y) / den).unwrap();
            g.assign(&p);
            g[y.index()] = g[y.index()] - F::one();
            g.mapv_inplace(|v| v * scale);
        }
    }
    Ok((loss, grad))
}

/// `scale * sum(w^2)` over weight matrices.
pub fn l2_penalty<F: Real>(params: &ModelParams<F>, cfg: &ModelConfig, scale: f64) -> f64 {
    let sum: f64 = params
        .tensors(cfg)
        .iter()
        .filter(|t| t.decayed)
        .flat_map(|t| t.data.iter())
        .map(|v| {
            let v = v.to_f64().unwrap();
            v * v
        })
        .sum();
    scale * sum
}

pub fn total_loss<F: Real>(ce: f64, params: &ModelParams<F>, cfg: &ModelConfig, scale: f64) -> f64 {
    ce + l2_penalty(params, cfg, scale)
}

/// Adds `2 * scale * w` to the weight-matrix gradients.
pub fn add_l2_grad<F: Real>(grads: &mut ModelParams<F>, params: &ModelParams<F>, cfg: &ModelConfig, scale: f64) {
    let k = F::from(2.0 * scale).unwrap();
    for (g, p) in grads.tensors_mut(cfg).into_iter().zip(params.tensors(cfg)) {
        if p.decayed {
            for (g, &w) in g.data.iter_mut().zip(p.data) {
                *g = *g + k * w;
            }
        }
    }
}

/// One bias-corrected Adam update of a flat tensor; `t` counts updates
/// from 1.
pub fn adam_update<F: Real>(param: &mut [F], grad: &[F], m: &mut [F], v: &mut [F], t: u64, lr: f64) {
    let b1 = F::from(ADAM_BETA1).unwrap();
    let b2 = F::from(ADAM_BETA2).unwrap();
    let c1 = F::from(1.0 - ADAM_BETA1.powi(t as i32)).unwrap();
    let c2 = F::from(1.0 - ADAM_BETA2.powi(t as i32)).unwrap();
    let lr = F::from(lr).unwrap();
    let eps = F::from(ADAM_EPS).unwrap();
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = b1 * *m + (F::one() - b1) * g;
        *v = b2 * *v + (F::one() - b2) * g * g;
        let mh = *m / c1;
        let vh = *v / c2;
        *p = *p - lr * mh / (vh.sqrt() + eps);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    /// Updates applied so far.
    pub step: u64,
    pub m: ModelParams<f32>,
    pub v: ModelParams<f32>,
}

impl AdamState {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self { step: 0, m: ModelParams::zeros(cfg), v: ModelParams::zeros(cfg) }
    }

    pub fn apply(&mut self, params: &mut ModelParams<f32>, grads: &ModelParams<f32>, cfg: &ModelConfig, lr: f64) {
        self.step += 1;
        let tensors = params.tensors_mut(cfg).into_iter().zip(grads.tensors(cfg));
        let moments = self.m.tensors_mut(cfg).into_iter().zip(self.v.tensors_mut(cfg));
        for ((p, g), (m, v)) in tensors.zip(moments) {
            if p.trainable {
                adam_update(p.data, g.data, m.data, v.data, self.step, lr);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    /// `[tokens, feature_dim]`.
    pub features: Array2<f32>,
    pub labels: Vec<PunctClass>,
}

fn check_examples(examples: &[Example], cfg: &ModelConfig) -> Result<(), TrainError> {
    for (index, ex) in examples.iter().enumerate() {
        if ex.features.nrows() != ex.labels.len() {
            return Err(TrainError::LabelMismatch { index, features: ex.features.nrows(), labels: ex.labels.len() });
        }
        if ex.features.ncols() != cfg.input_dim {
            return Err(TrainError::Width { index, expected: cfg.input_dim, got: ex.features.ncols() });
        }
    }
    Ok(())
}

/// Example indices of the batch at `step`: consecutive slices of a stream of
/// epoch permutations, each permutation seeded by `(seed, epoch)`.
pub fn batch_indices(seed: u64, step: u64, n: usize, batch_size: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch_size);
    let mut perm: Option<(u64, Vec<usize>)> = None;
    let start = step * batch_size as u64;
    for pos in start..start + batch_size as u64 {
        let epoch = pos / n as u64;
        if perm.as_ref().map(|p| p.0) != Some(epoch) {
            let mut order: Vec<usize> = (0..n).collect();
            SplitMix64::new(derive_seed(derive_seed_str(seed, "epoch"), epoch)).shuffle(&mut order);
            perm = Some((epoch, order));
        }
        out.push(perm.as_ref().unwrap().1[(pos % n as u64) as usize]);
    }
    out
}

fn make_batch<F: Real>(examples: &[&Example]) -> (Batch<F>, Vec<Option<PunctClass>>) {
    let views: Vec<_> = examples.iter().map(|e| e.features.view()).collect();
    let batch = Batch::from_sequences(&views);
    let mut labels = vec![None; batch.rows()];
    for (b, ex) in examples.iter().enumerate() {
        for (t, &l) in ex.labels.iter().enumerate() {
            labels[b * batch.max_len + t] = Some(l);
        }
    }
    (batch, labels)
}

/// Zoneout stream for a training step.
fn zoneout_rng(seed: u64, step: u64) -> SplitMix64 {
    SplitMix64::new(derive_seed(derive_seed_str(seed, "zoneout"), step))
}

/// Eval-mode argmax labels for each example.
pub fn predict(params: &ModelParams<f32>, cfg: &ModelConfig, examples: &[Example], batch_size: usize) -> Result<Vec<Vec<PunctClass>>, TrainError> {
    check_examples(examples, cfg)?;
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let (batch, _) = make_batch::<f32>(&refs);
        let probs = nn::forward(params, cfg, &batch, Mode::Eval, None)?.probs;
        for (b, ex) in chunk.iter().enumerate() {
            let labels = (0..ex.labels.len())
                .map(|t| {
                    let row = probs.row(b * batch.max_len + t);
                    let best = (0..NUM_CLASSES).fold(0, |a, c| if row[c] > row[a] { c } else { a });
                    PunctClass::from_index(best).expect("class index")
                })
                .collect();
            out.push(labels);
        }
    }
    Ok(out)
}

/// Eval-mode weighted cross-entropy over a whole corpus.
pub fn evaluate_loss(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    weights: &ClassWeights,
    examples: &[Example],
    batch_size: usize,
) -> Result<f64, TrainError> {
    check_examples(examples, cfg)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let (batch, labels) = make_batch::<f32>(&refs);
        let probs = nn::forward(params, cfg, &batch, Mode::Eval, None)?.probs;
        let w: f64 = labels.iter().flatten().map(|y| weights.get(*y)).sum();
        if w > 0.0 {
            num += weighted_ce(&probs, &labels, weights)? * w;
            den += w;
        }
    }
    if den <= 0.0 {
        return Err(TrainError::ZeroWeight);
    }
    Ok(num / den)
}

/// Everything needed to resume or serve a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub class_weights: ClassWeights,
    pub params: ModelParams<f32>,
    pub adam: Option<AdamState>,
    /// Optimizer steps attempted, including rejected ones.
    pub step: u64,
    pub rejected_steps: u64,
    pub best_val_loss: Option<f64>,
}

impl Checkpoint {
    /// Seed of the next step's zoneout stream.
    pub fn rng_state(&self) -> u64 {
        derive_seed(derive_seed_str(self.train.seed, "zoneout"), self.step)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub lr: f64,
    /// Mean training loss since the previous record.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub rejected_steps: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    Applied { loss: f64 },
    Rejected,
}

pub struct Trainer<'a> {
    state: Checkpoint,
    best: Option<ModelParams<f32>>,
    train_set: &'a [Example],
    val_set: &'a [Example],
    history: Vec<MetricRecord>,
    pending_loss: (f64, u64),
}

pub struct TrainOutcome {
    /// State after the last step.
    pub last: Checkpoint,
    /// Parameters with the lowest validation loss (the last ones when
    /// there is no validation set).
    pub best: Checkpoint,
    pub history: Vec<MetricRecord>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: ModelConfig,
        train: TrainConfig,
        class_weights: ClassWeights,
        train_set: &'a [Example],
        val_set: &'a [Example],
    ) -> Result<Self, TrainError> {
        let params = ModelParams::init(&model, derive_seed_str(train.seed, "init"))?;
        let adam = Some(AdamState::new(&model));
        let state = Checkpoint { model, train, class_weights, params, adam, step: 0, rejected_steps: 0, best_val_loss: None };
        Self::resume(state, train_set, val_set)
    }

    pub fn resume(mut state: Checkpoint, train_set: &'a [Example], val_set: &'a [Example]) -> Result<Self, TrainError> {
        state.model.validate()?;
        state.train.validate()?;
        if train_set.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        check_examples(train_set, &state.model)?;
        check_examples(val_set, &state.model)?;
        if state.adam.is_none() {
            state.adam = Some(AdamState::new(&state.model));
        }
        Ok(Self { state, best: None, train_set, val_set, history: Vec::new(), pending_loss: (0.0, 0) })
    }

    pub fn state(&self) -> &Checkpoint {
        &self.state
    }

    pub fn history(&self) -> &[MetricRecord] {
        &self.history
    }

    /// Runs one optimizer step on the scheduled batch.
    pub fn step(&mut self) -> Result<StepOutcome, TrainError> {
        let st = &mut self.state;
        let idx = batch_indices(st.train.seed, st.step, self.train_set.len(), st.train.batch_size);
        log::debug!("step {} batch {:?}", st.step, idx);
        let refs: Vec<&Example> = idx.iter().map(|&i| &self.train_set[i]).collect();
        let (batch, labels) = make_batch::<f32>(&refs);
        let mut rng = zoneout_rng(st.train.seed, st.step);
        let lr = st.train.lr_at(st.step);
        st.step += 1;
        let trace: ForwardTrace<f32> = match nn::forward(&st.params, &st.model, &batch, Mode::Train, Some(&mut rng)) {
            Ok(t) => t,
            Err(NnError::NonFinite { layer }) => {
                log::warn!("step {}: non-finite activations after {layer}; step rejected", st.step - 1);
                st.rejected_steps += 1;
                return Ok(StepOutcome::Rejected);
            }
            Err(e) => return Err(e.into()),
        };
        let (ce, dlogits) = weighted_ce_grad(&trace.probs, &labels, &st.class_weights)?;
        let mut grads = nn::backward_logits(&st.params, &st.model, &trace, dlogits)?;
        add_l2_grad(&mut grads, &st.params, &st.model, st.train.l2_scale);
        let loss = total_loss(ce, &st.params, &st.model, st.train.l2_scale);
        if !loss.is_finite() || !grads.is_finite(&st.model) {
            log::warn!("step {}: non-finite gradient; step rejected", st.step - 1);
            st.rejected_steps += 1;
            return Ok(StepOutcome::Rejected);
        }
        st.adam.as_mut().expect("optimizer state").apply(&mut st.params, &grads, &st.model, lr);
        trace.update_running_stats(&mut st.params);
        self.pending_loss.0 += loss;
        self.pending_loss.1 += 1;
        Ok(StepOutcome::Applied { loss })
    }

    /// Validates, records metrics and keeps the best parameters.
    pub fn checkpoint_metrics(&mut self) -> Result<MetricRecord, TrainError> {
        let st = &mut self.state;
        let val_loss = if self.val_set.is_empty() {
            None
        } else {
            Some(evaluate_loss(&st.params, &st.model, &st.class_weights, self.val_set, st.train.batch_size.max(64))?)
        };
        if let Some(v) = val_loss {
            if st.best_val_loss.is_none_or(|b| v < b) {
                st.best_val_loss = Some(v);
                self.best = Some(st.params.clone());
            }
        }
        let (sum, n) = std::mem::take(&mut self.pending_loss);
        let record = MetricRecord {
            step: st.step,
            lr: st.train.lr_at(st.step.saturating_sub(1)),
            train_loss: if n > 0 { sum / n as f64 } else { f64::NAN },
            val_loss,
            rejected_steps: st.rejected_steps,
        };
        log::info!("step {} train {:.4} val {:?}", record.step, record.train_loss, record.val_loss);
        self.history.push(record.clone());
        Ok(record)
    }

    /// Steps until `total_steps` (or `until`, if smaller) is reached.
    pub fn run(&mut self, until: Option<u64>) -> Result<(), TrainError> {
        let end = until.map_or(self.state.train.total_steps, |u| u.min(self.state.train.total_steps));
        while self.state.step < end {
            self.step()?;
            if self.state.step % self.state.train.eval_every == 0 || self.state.step == self.state.train.total_steps {
                self.checkpoint_metrics()?;
            }
        }
        Ok(())
    }

    pub fn finish(self) -> TrainOutcome {
        let mut best = self.state.clone();
        if let Some(p) = self.best {
            best.params = p;
        }
        TrainOutcome { last: self.state, best, history: self.history }
    }
}

pub fn train_loop(
    train_set: &[Example],
    val_set: &[Example],
    train: &TrainConfig,
    model: &ModelConfig,
    class_weights: ClassWeights,
) -> Result<TrainOutcome, TrainError> {
    let mut trainer = Trainer::new(model.clone(), train.clone(), class_weights, train_set, val_set)?;
    trainer.run(None)?;
    Ok(trainer.finish())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    model: ModelConfig,
    train: TrainConfig,
    class_order: Vec<String>,
    class_weights: [f64; NUM_CLASSES],
    step: u64,
    rejected_steps: u64,
    best_val_loss: Option<f64>,
    adam_step: Option<u64>,
    rng_state: u64,
    tensor_count: usize,
}

fn class_order() -> Vec<String> {
    PunctClass::ALL.iter().map(|c| c.name().to_string()).collect()
}

fn push_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let cfg = &ckpt.model;
    let mut tensors: Vec<(String, Vec<usize>, &[f32])> =
        ckpt.params.tensors(cfg).into_iter().map(|t| (t.name.to_string(), t.shape, t.data)).collect();
    if let Some(adam) = &ckpt.adam {
        for (prefix, moments) in [("adam.m.", &adam.m), ("adam.v.", &adam.v)] {
            for t in moments.tensors(cfg).into_iter().filter(|t| t.trainable) {
                tensors.push((format!("{prefix}{}", t.name), t.shape, t.data));
            }
        }
    }
    let meta = CheckpointMeta {
        model: cfg.clone(),
        train: ckpt.train.clone(),
        class_order: class_order(),
        class_weights: ckpt.class_weights.weights,
        step: ckpt.step,
        rejected_steps: ckpt.rejected_steps,
        best_val_loss: ckpt.best_val_loss,
        adam_step: ckpt.adam.as_ref().map(|a| a.step),
        rng_state: ckpt.rng_state(),
        tensor_count: tensors.len(),
    };
    let json = serde_json::to_vec(&meta).expect("metadata serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (name, shape, data) in &tensors {
        push_tensor(&mut out, name, shape, data);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated { offset: self.buf.len() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

type RawTensor = (usize, Vec<usize>, Vec<f32>);

fn fill(target: &mut ModelParams<f32>, cfg: &ModelConfig, raw: &mut HashMap<String, RawTensor>, prefix: &str, trainable_only: bool) -> Result<(), CheckpointError> {
    for t in target.tensors_mut(cfg) {
        if trainable_only && !t.trainable {
            continue;
        }
        let name = format!("{prefix}{}", t.name);
        let (offset, shape, data) = raw.remove(&name).ok_or_else(|| CheckpointError::Missing(name.clone()))?;
        if shape != t.shape {
            return Err(CheckpointError::Tensor { offset, name, message: format!("shape {shape:?}, expected {:?}", t.shape) });
        }
        t.data.copy_from_slice(&data);
    }
    Ok(())
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(6)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic { offset: 0 });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    if buf.len() < r.pos + 8 + 4 {
        return Err(CheckpointError::Truncated { offset: buf.len() });
    }
    let body_end = buf.len() - 4;
    let stored = u32::from_le_bytes(buf[body_end..].try_into().unwrap());
    let computed = crc32fast::hash(&buf[..body_end]);
    if stored != computed {
        return Err(CheckpointError::Checksum { offset: body_end, stored, computed });
    }
    let mut r = Reader { buf: &buf[..body_end], pos: r.pos };
    let meta_len = r.u64()? as usize;
    let meta_at = r.pos;
    if meta_len > body_end - meta_at {
        return Err(CheckpointError::Truncated { offset: body_end });
    }
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| CheckpointError::Metadata { offset: meta_at, message: e.to_string() })?;
    let bad_meta = |message: String| CheckpointError::Metadata { offset: meta_at, message };
    if meta.class_order != class_order() {
        return Err(bad_meta(format!("class order {:?}", meta.class_order)));
    }
    meta.model.validate().map_err(|e| bad_meta(e.to_string()))?;

    let mut raw: HashMap<String, RawTensor> = HashMap::new();
    for _ in 0..meta.tensor_count {
        let offset = r.pos;
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| CheckpointError::Tensor { offset, name: "?".into(), message: "name is not UTF-8".into() })?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let count: usize = shape.iter().product();
        let bytes = r.take(count.checked_mul(4).ok_or(CheckpointError::Truncated { offset })?)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if raw.insert(name.clone(), (offset, shape, data)).is_some() {
            return Err(CheckpointError::Tensor { offset, name, message: "duplicate".into() });
        }
    }
    if r.pos != body_end {
        return Err(CheckpointError::Metadata { offset: r.pos, message: "trailing bytes after the last tensor".into() });
    }

    let cfg = &meta.model;
    let mut params = ModelParams::zeros(cfg);
    fill(&mut params, cfg, &mut raw, "", false)?;
    let adam = match meta.adam_step {
        Some(step) => {
            let mut a = AdamState::new(cfg);
            a.step = step;
            fill(&mut a.m, cfg, &mut raw, "adam.m.", true)?;
            fill(&mut a.v, cfg, &mut raw, "adam.v.", true)?;
            Some(a)
        }
        None => None,
    };
    if let Some((name, (offset, _, _))) = raw.into_iter().next() {
        return Err(CheckpointError::Tensor { offset, name, message: "unexpected tensor".into() });
    }
    Ok(Checkpoint {
        model: meta.model,
        train: meta.train,
        class_weights: ClassWeights { weights: meta.class_weights },
        params,
        adam,
        step: meta.step,
        rejected_steps: meta.rejected_steps,
        best_val_loss: meta.best_val_loss,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    fs::write(path, encode_checkpoint(ckpt))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    decode_checkpoint(&fs::read(path)?)
}

/// Result of comparing analytic gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

/// Relative error with an absolute floor so that gradients that are zero
/// up to rounding compare as equal.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Checks every trainable scalar of a small float64 model (input 16,
/// projection 8, hidden 4, two sequences of 6 and 4 steps, zoneout and L2
/// active) against central finite differences with step `eps`.
pub fn gradient_check(seed: u64, eps: f64) -> Result<GradCheckReport, TrainError> {
    let cfg = ModelConfig { input_dim: 16, proj_dim: 8, qrnn_hidden: 4, kernel_width: 3, zoneout_p: 0.1, n_classes: NUM_CLASSES, mel_channels: None };
    gradient_check_with(&cfg, seed, eps)
}

pub fn gradient_check_with(cfg: &ModelConfig, seed: u64, eps: f64) -> Result<GradCheckReport, TrainError> {
    let mut rng = SplitMix64::new(seed);
    let params = ModelParams::<f64>::init(cfg, rng.next_u64())?;
    let lengths = [6usize, 4];
    let examples: Vec<Example> = lengths
        .iter()
        .enumerate()
        .map(|(i, &t)| Example {
            id: format!("g{i}"),
            features: Array2::from_shape_simple_fn((t, cfg.input_dim), || rng.uniform(-1.0, 1.0) as f32),
            labels: (0..t).map(|_| PunctClass::from_index(rng.below(NUM_CLASSES as u64) as usize).unwrap()).collect(),
        })
        .collect();
    let refs: Vec<&Example> = examples.iter().collect();
    let (batch, labels) = make_batch::<f64>(&refs);
    let weights = ClassWeights { weights: [2.0, 3.0, 5.0, 1.5, 0.5] };
    let l2 = 1e-2;
    let zseed = rng.next_u64();
    let loss = |p: &ModelParams<f64>| -> Result<f64, TrainError> {
        let trace = nn::forward(p, cfg, &batch, Mode::Train, Some(&mut SplitMix64::new(zseed)))?;
        Ok(total_loss(weighted_ce(&trace.probs, &labels, &weights)?, p, cfg, l2))
    };
    let trace = nn::forward(&params, cfg, &batch, Mode::Train, Some(&mut SplitMix64::new(zseed)))?;
    let (_, dlogits) = weighted_ce_grad(&trace.probs, &labels, &weights)?;
    let mut grads = nn::backward_logits(&params, cfg, &trace, dlogits)?;
    add_l2_grad(&mut grads, &params, cfg, l2);

    let analytic: Vec<(&'static str, Vec<f64>, bool)> =
        grads.tensors(cfg).into_iter().map(|t| (t.name, t.data.to_vec(), t.trainable)).collect();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: String::new(), checked: 0 };
    let mut probe = params.clone();
    for (ti, (name, grad, trainable)) in analytic.iter().enumerate() {
        if !trainable {
            continue;
        }
        for (i, &a) in grad.iter().enumerate() {
            let orig = params.tensors(cfg)[ti].data[i];
            probe.tensors_mut(cfg)[ti].data[i] = orig + eps;
            let up = loss(&probe)?;
            probe.tensors_mut(cfg)[ti].data[i] = orig - eps;
            let down = loss(&probe)?;
            probe.tensors_mut(cfg)[ti].data[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = format!("{name}[{i}]: analytic {a:e}, numeric {numeric:e}");
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(rows: &[[f64; 5]]) -> Array2<f64> {
        Array2::from_shape_fn((rows.len(), 5), |(i, j)| rows[i][j])
    }

    #[test]
    fn uniform_weights_give_mean_ce() {
        let p = probs(&[[0.5, 0.2, 0.1, 0.1, 0.1], [0.1, 0.1, 0.1, 0.1, 0.6]]);
        let labels = [Some(PunctClass::Period), Some(PunctClass::None)];
        let loss = weighted_ce(&p, &labels, &ClassWeights::uniform()).unwrap();
        assert!((loss - (-(0.5f64.ln()) - 0.6f64.ln()) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_predictions_have_zero_loss() {
        let p = probs(&[[1.0, 0.0, 0.0, 0.0, 0.0]]);
        assert_eq!(weighted_ce(&p, &[Some(PunctClass::Period)], &ClassWeights::uniform()).unwrap(), 0.0);
        let wrong = weighted_ce(&p, &[Some(PunctClass::Comma)], &ClassWeights::uniform()).unwrap();
        assert!((wrong - -(1e-12f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn weighted_mean_matches_term_sum() {
        let p = probs(&[[0.7, 0.1, 0.1, 0.05, 0.05], [0.2, 0.3, 0.1, 0.1, 0.3]]);
        let w = ClassWeights { weights: [2.0, 1.0, 1.0, 1.0, 1.0] };
        let labels = [Some(PunctClass::Period), Some(PunctClass::QuestionMark)];
        let mut num = 0.0;
        num += 2.0 * -(0.7f64.ln());
        num += 1.0 * -(0.3f64.ln());
        let expect = num / 3.0;
        assert!((weighted_ce(&p, &labels, &w).unwrap() - expect).abs() < 1e-15);
        // Scaling all weights leaves the weighted mean unchanged.
        let w3 = ClassWeights { weights: w.weights.map(|x| x * 3.5) };
        assert!((weighted_ce(&p, &labels, &w3).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn zero_weight_is_an_error() {
        let p = probs(&[[0.2; 5]]);
        let w = ClassWeights { weights: [0.0; 5] };
        assert!(matches!(weighted_ce(&p, &[Some(PunctClass::Comma)], &w), Err(TrainError::ZeroWeight)));
        assert!(matches!(weighted_ce(&p, &[None], &ClassWeights::uniform()), Err(TrainError::ZeroWeight)));
    }

    fn one_weight_cfg() -> ModelConfig {
        ModelConfig { input_dim: 2, proj_dim: 1, qrnn_hidden: 1, kernel_width: 1, zoneout_p: 0.0, n_classes: 5, mel_channels: None }
    }

    #[test]
    fn l2_penalty_arithmetic() {
        let cfg = one_weight_cfg();
        let mut params = ModelParams::<f64>::zeros(&cfg);
        params.proj.weight[[0, 0]] = 3.0;
        params.proj.bias[0] = 100.0;
        params.proj_bn.gamma[0] = 100.0;
        assert!((l2_penalty(&params, &cfg, 1e-5) - 9e-5).abs() < 1e-18);
        assert_eq!(total_loss(0.25, &params, &cfg, 0.0), 0.25);
    }

    #[test]
    fn l2_gradient_matches_finite_difference() {
        let cfg = one_weight_cfg();
        let mut params = ModelParams::<f64>::init(&cfg, 11).unwrap();
        params.head.weight[[1, 3]] = -0.75;
        let scale = 0.3;
        let mut g = ModelParams::zeros(&cfg);
        add_l2_grad(&mut g, &params, &cfg, scale);
        assert_eq!(g.head.weight[[1, 3]], 2.0 * scale * -0.75);
        assert_eq!(g.head.bias.iter().copied().sum::<f64>(), 0.0);
        let eps = 1e-5;
        let mut p = params.clone();
        p.head.weight[[1, 3]] += eps;
        let up = l2_penalty(&p, &cfg, scale);
        p.head.weight[[1, 3]] -= 2.0 * eps;
        let down = l2_penalty(&p, &cfg, scale);
        assert!(((up - down) / (2.0 * eps) - g.head.weight[[1, 3]]).abs() < 1e-9);
    }

    #[test]
    fn lr_schedule_steps() {
        let tc = TrainConfig::full();
        assert_eq!(tc.lr_at(0), 5e-4);
        assert_eq!(tc.lr_at(4999), 5e-4);
        assert_eq!(tc.lr_at(5000), 2.5e-4);
        assert_eq!(tc.lr_at(9999), 2.5e-4);
        assert_eq!(tc.lr_at(10000), 1.25e-4);
    }

    #[test]
    fn adam_three_steps_by_hand() {
        // Recurrence written out step by step for one scalar.
        let grads = [0.5, -0.2, 0.1];
        let lr = 0.01;
        let (mut p, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut expect = Vec::new();
        let mut e = (1.0f64, 0.0f64, 0.0f64);
        for (t, g) in grads.iter().enumerate() {
            let t = t as i32 + 1;
            e.1 = 0.9 * e.1 + 0.1 * g;
            e.2 = 0.999 * e.2 + 0.001 * g * g;
            let mh = e.1 / (1.0 - 0.9f64.powi(t));
            let vh = e.2 / (1.0 - 0.999f64.powi(t));
            e.0 -= lr * mh / (vh.sqrt() + 1e-8);
            expect.push(e.0);
        }
        // First step moves by lr * sign(g) up to eps.
        assert!((expect[0] - (1.0 - 0.01 * 0.5 / (0.5 + 1e-8))).abs() < 1e-12);
        for (t, g) in grads.iter().enumerate() {
            let (mut ps, mut ms, mut vs) = ([p], [m], [v]);
            adam_update(&mut ps, &[*g], &mut ms, &mut vs, t as u64 + 1, lr);
            (p, m, v) = (ps[0], ms[0], vs[0]);
            assert!((p - expect[t]).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = [0.3f64, -1.0];
        let mut m = [0.0; 2];
        let mut v = [0.0; 2];
        for t in 1..5 {
            adam_update(&mut p, &[0.0, 0.0], &mut m, &mut v, t, 0.1);
        }
        assert_eq!(p, [0.3, -1.0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let report = gradient_check(7, 1e-4).unwrap();
        assert!(report.checked > 400);
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn batch_schedule_is_deterministic_permutation() {
        let a: Vec<Vec<usize>> = (0..5).map(|s| batch_indices(3, s, 10, 4)).collect();
        let b: Vec<Vec<usize>> = (0..5).map(|s| batch_indices(3, s, 10, 4)).collect();
        assert_eq!(a, b);
        let flat: Vec<usize> = a.concat();
        let mut first: Vec<usize> = flat[..10].to_vec();
        first.sort();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        let mut second: Vec<usize> = flat[10..20].to_vec();
        second.sort();
        assert_eq!(second, (0..10).collect::<Vec<_>>());
        assert_ne!(flat[..10], flat[10..20]);
    }

    fn toy_corpus(n: usize, dim: usize, seed: u64) -> Vec<Example> {
        let mut rng = SplitMix64::new(seed);
        (0..n)
            .map(|i| {
                let t = 3 + rng.below(6) as usize;
                let labels: Vec<PunctClass> = (0..t).map(|_| PunctClass::from_index(rng.below(5) as usize).unwrap()).collect();
                let features = Array2::from_shape_fn((t, dim), |(r, c)| {
                    let hot = if c == labels[r].index() { 1.0 } else { 0.0 };
                    hot + 0.1 * ((r * 7 + c * 3 + i) % 5) as f32
                });
                Example { id: format!("toy-{i}"), features, labels }
            })
            .collect()
    }

    fn toy_cfg() -> ModelConfig {
        ModelConfig { input_dim: 8, proj_dim: 8, qrnn_hidden: 4, kernel_width: 2, zoneout_p: 0.1, n_classes: 5, mel_channels: None }
    }

    fn toy_train() -> TrainConfig {
        TrainConfig { lr0: 1e-2, total_steps: 200, batch_size: 4, eval_every: 50, seed: 5, ..TrainConfig::desk() }
    }

    #[test]
    fn loss_decreases_on_learnable_corpus() {
        let data = toy_corpus(20, 8, 1);
        let mut tr = Trainer::new(toy_cfg(), toy_train(), ClassWeights::uniform(), &data, &[]).unwrap();
        let mut losses = Vec::new();
        for _ in 0..100 {
            if let StepOutcome::Applied { loss } = tr.step().unwrap() {
                losses.push(loss);
            }
        }
        assert_eq!(losses.len(), 100);
        let ma = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let windows: Vec<f64> = losses.chunks(20).map(ma).collect();
        assert!(windows.windows(2).all(|w| w[1] < w[0]), "{windows:?}");
    }

    #[test]
    fn padding_leaves_loss_unchanged() {
        let data = toy_corpus(3, 8, 2);
        let cfg = toy_cfg();
        let params = ModelParams::<f64>::init(&cfg, 3).unwrap();
        let weights = ClassWeights { weights: [1.0, 2.0, 3.0, 0.5, 0.25] };
        let views: Vec<_> = data.iter().map(|e| e.features.view()).collect();
        let longest = views.iter().map(|v| v.nrows()).max().unwrap();
        let mut losses = Vec::new();
        for pad in [0, 5] {
            let batch = Batch::<f64>::padded(&views, longest + pad);
            let mut labels = vec![None; batch.rows()];
            for (b, ex) in data.iter().enumerate() {
                for (t, &l) in ex.labels.iter().enumerate() {
                    labels[b * batch.max_len + t] = Some(l);
                }
            }
            let trace = nn::forward(&params, &cfg, &batch, Mode::Train, Some(&mut SplitMix64::new(9))).unwrap();
            let per_sample: Vec<f64> = (0..data.len())
                .map(|b| {
                    let l: Vec<_> = labels.iter().enumerate().map(|(r, l)| if r / batch.max_len == b { *l } else { None }).collect();
                    weighted_ce(&trace.probs, &l, &weights).unwrap()
                })
                .collect();
            let (_, dl) = weighted_ce_grad(&trace.probs, &labels, &weights).unwrap();
            let g = nn::backward_logits(&params, &cfg, &trace, dl).unwrap();
            losses.push((per_sample, g));
        }
        for (a, b) in losses[0].0.iter().zip(&losses[1].0) {
            assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in losses[0].1.tensors(&cfg).iter().zip(losses[1].1.tensors(&cfg)) {
            for (x, y) in a.data.iter().zip(b.data) {
                assert!((x - y).abs() < 1e-9, "{}", a.name);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let data = toy_corpus(10, 8, 3);
        let mut tr = Trainer::new(toy_cfg(), toy_train(), ClassWeights { weights: [1.0, 2.5, 3.0, 0.7, 0.2] }, &data, &data).unwrap();
        tr.run(Some(60)).unwrap();
        let ckpt = tr.state().clone();
        let bytes = encode_checkpoint(&ckpt);
        assert_eq!(&bytes[..6], b"PUNKT1");
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(encode_checkpoint(&back), bytes);

        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 0x10;
        assert!(matches!(decode_checkpoint(&flipped), Err(CheckpointError::Checksum { .. })));

        let mut versioned = bytes.clone();
        versioned[6] = 9;
        assert!(matches!(decode_checkpoint(&versioned), Err(CheckpointError::Version { found: 9, .. })));

        assert!(matches!(decode_checkpoint(&bytes[..20]), Err(CheckpointError::Checksum { .. } | CheckpointError::Truncated { .. })));
        assert!(matches!(decode_checkpoint(b"NOTCKPT1234"), Err(CheckpointError::BadMagic { offset: 0 })));
    }

    #[test]
    fn resume_is_bit_exact() {
        let data = toy_corpus(12, 8, 4);
        let val = toy_corpus(4, 8, 5);
        let weights = ClassWeights { weights: [1.0, 2.0, 2.0, 1.0, 0.5] };
        let tc = TrainConfig { total_steps: 200, ..toy_train() };
        let mut straight = Trainer::new(toy_cfg(), tc.clone(), weights, &data, &val).unwrap();
        straight.run(None).unwrap();

        let mut first = Trainer::new(toy_cfg(), tc, weights, &data, &val).unwrap();
        first.run(Some(100)).unwrap();
        let saved = decode_checkpoint(&encode_checkpoint(first.state())).unwrap();
        let mut second = Trainer::resume(saved, &data, &val).unwrap();
        second.run(None).unwrap();
        assert_eq!(second.state(), straight.state());
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(
            Trainer::new(toy_cfg(), toy_train(), ClassWeights::uniform(), &[], &[]),
            Err(TrainError::EmptyCorpus)
        ));
    }
}
