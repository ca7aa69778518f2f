//! Mini-batch training with Adam, learning-rate decay per epoch, and
//! accuracy / confusion evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embeddings::{EmbeddingTable, PAD_ID};
use crate::error::{Error, Result};
use crate::matcher::{argmax, Example, Model, ModelConfig, NUM_CLASSES};
use crate::numerics::{ParameterStore, Tensor, LOG_CLAMP};
use crate::snli::Label;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Multiplicative learning-rate decay applied once per epoch.
    pub decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub shuffle: bool,
    /// Global gradient-norm threshold; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            decay: 0.95,
            batch_size: 30,
            epochs: 1,
            seed: 0,
            shuffle: true,
            clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("decay must be in (0, 1], got {}", self.decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must be in [0, 1)".into()));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip threshold must be positive, got {c}")));
            }
        }
        Ok(())
    }

    /// Learning rate used throughout epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.decay.powi(epoch as i32)
    }
}

/// `-ln(max(p[label], 1e-12))`.
pub fn cross_entropy(probs: &Tensor, label: usize) -> Result<f64> {
    if label >= probs.len() {
        return Err(Error::Index(format!("label {label} out of range for {} classes", probs.len())));
    }
    Ok(-probs.get(label).max(LOG_CLAMP).ln())
}

/// First and second moment estimates, one buffer per stored parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(store: &ParameterStore, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            m: store.zero_grads(),
            v: store.zero_grads(),
            t: 0,
            beta1,
            beta2,
            epsilon,
        }
    }

    pub fn from_config(store: &ParameterStore, config: &TrainConfig) -> Self {
        Self::new(store, config.beta1, config.beta2, config.adam_epsilon)
    }
}

/// One bias-corrected Adam update from the store's accumulated gradients,
/// which are zeroed afterwards. Nothing is written if any new value would
/// be non-finite.
pub fn adam_step(store: &mut ParameterStore, state: &mut AdamState, lr: f64) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Dimension("Adam state does not match the parameter store".into()));
    }
    let t = state.t + 1;
    let bc1 = 1.0 - state.beta1.powi(t as i32);
    let bc2 = 1.0 - state.beta2.powi(t as i32);
    let ids: Vec<_> = store.ids().collect();

    let mut staged = Vec::with_capacity(ids.len());
    for &id in &ids {
        let k = id.index();
        let grad = store.grad(id).data();
        let value = store.value(id).data();
        let mut m = state.m[k].clone();
        let mut v = state.v[k].clone();
        let mut next = Vec::with_capacity(value.len());
        for i in 0..value.len() {
            let g = grad[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            next.push(value[i] - lr * m_hat / (v_hat.sqrt() + state.epsilon));
        }
        if next.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("Adam update of {}", store.name(id))));
        }
        staged.push((m, v, next));
    }
    for (&id, (m, v, next)) in ids.iter().zip(staged) {
        let k = id.index();
        state.m[k] = m;
        state.v[k] = v;
        store.value_mut(id).data_mut().copy_from_slice(&next);
    }
    state.t = t;
    store.clear_grads();
    Ok(())
}

/// Padded id matrices for one mini-batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub premise: Vec<Vec<usize>>,
    pub hypothesis: Vec<Vec<usize>>,
    pub premise_lens: Vec<usize>,
    pub hypothesis_lens: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_examples(examples: &[&Example]) -> Self {
        let m = examples.iter().map(|e| e.premise_len).max().unwrap_or(0);
        let n = examples.iter().map(|e| e.hypothesis_len).max().unwrap_or(0);
        let pad = |ids: &[usize], len: usize, width: usize| {
            let mut row = ids[..len].to_vec();
            row.resize(width, PAD_ID);
            row
        };
        Self {
            premise: examples.iter().map(|e| pad(&e.premise, e.premise_len, m)).collect(),
            hypothesis: examples.iter().map(|e| pad(&e.hypothesis, e.hypothesis_len, n)).collect(),
            premise_lens: examples.iter().map(|e| e.premise_len).collect(),
            hypothesis_lens: examples.iter().map(|e| e.hypothesis_len).collect(),
            labels: examples.iter().map(|e| e.label.index()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn examples(&self) -> Result<Vec<Example>> {
        (0..self.len())
            .map(|b| {
                Ok(Example {
                    premise: self.premise[b].clone(),
                    premise_len: self.premise_lens[b],
                    hypothesis: self.hypothesis[b].clone(),
                    hypothesis_len: self.hypothesis_lens[b],
                    label: Label::from_index(self.labels[b])?,
                })
            })
            .collect()
    }
}

/// Splits `corpus` into batches of at most `batch_size`, shuffled by a
/// ChaCha8 stream seeded with `seed` when `shuffle` is set.
pub fn make_batches(corpus: &[Example], batch_size: usize, seed: u64, shuffle: bool) -> Result<Vec<Batch>> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("cannot batch an empty corpus".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<&Example> = corpus.iter().collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order.chunks(batch_size).map(Batch::from_examples).collect())
}

/// Per-example forward/backward in parallel; per-example gradients are
/// reduced in batch order, so the result does not depend on thread count.
pub fn batch_gradients(model: &Model, table: &EmbeddingTable, examples: &[Example]) -> Result<BatchResult> {
    let results: Vec<Result<(f64, Vec<Vec<f64>>, Tensor)>> = examples
        .par_iter()
        .map(|ex| model.loss_and_grads(table, ex))
        .collect();
    let mut grads = model.store.zero_grads();
    let mut loss_sum = 0.0;
    let mut correct = 0;
    for (ex, r) in examples.iter().zip(results) {
        let (loss, g, probs) = r?;
        loss_sum += loss;
        if argmax(probs.data()) == ex.label.index() {
            correct += 1;
        }
        for (acc, gi) in grads.iter_mut().zip(&g) {
            for (a, b) in acc.iter_mut().zip(gi) {
                *a += b;
            }
        }
    }
    Ok(BatchResult {
        grads,
        loss_sum,
        correct,
        count: examples.len(),
    })
}

pub struct BatchResult {
    /// Summed (not averaged) gradients, store order.
    pub grads: Vec<Vec<f64>>,
    pub loss_sum: f64,
    pub correct: usize,
    pub count: usize,
}

fn clip_grads(grads: &mut [Vec<f64>], threshold: f64) {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > threshold {
        let s = threshold / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
}

/// Averages the batch gradient into the store and applies one Adam step.
/// Returns the batch's mean loss and correct count (before the update).
pub fn train_step(
    model: &mut Model,
    state: &mut AdamState,
    table: &EmbeddingTable,
    examples: &[Example],
    lr: f64,
    clip: Option<f64>,
) -> Result<(f64, usize)> {
    let mut r = batch_gradients(model, table, examples)?;
    let scale = 1.0 / r.count as f64;
    r.grads.iter_mut().flatten().for_each(|g| *g *= scale);
    if let Some(t) = clip {
        clip_grads(&mut r.grads, t);
    }
    model.store.clear_grads();
    model.store.accumulate(&r.grads, 1.0)?;
    adam_step(&mut model.store, state, lr)?;
    Ok((r.loss_sum * scale, r.correct))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub dev_acc: Option<f64>,
}

/// Header record for a training log: every hyperparameter in effect.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub variant: String,
    pub d: usize,
    pub l: usize,
    pub d_out: usize,
    pub shared_encoder: bool,
    pub parameters: usize,
    pub init: String,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl LogHeader {
    pub fn new(model: &ModelConfig, parameters: usize, train: &TrainConfig) -> Self {
        Self {
            variant: model.variant.to_string(),
            d: model.hidden,
            l: model.embed_dim,
            d_out: model.state_dim(),
            shared_encoder: model.shared_encoder,
            parameters,
            init: INIT_SCHEME.to_string(),
            train: train.clone(),
        }
    }
}

pub const INIT_SCHEME: &str = "glorot_uniform_weights_zero_biases_chacha8";

pub struct TrainOutcome {
    /// Parameters from the epoch with the best dev accuracy (the last epoch
    /// when no dev data is given).
    pub best: ParameterStore,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Trains `model` in place for `config.epochs` epochs. `on_epoch` sees each
/// log record as soon as the epoch finishes.
pub fn train<F>(
    model: &mut Model,
    table: &EmbeddingTable,
    train_set: &[Example],
    dev_set: &[Example],
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochLog) -> Result<()>,
{
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyInput("training corpus is empty".into()));
    }
    let mut state = AdamState::from_config(&model.store, config);
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ParameterStore)> = None;

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let batches = make_batches(train_set, config.batch_size, config.seed.wrapping_add(epoch as u64), config.shuffle)?;
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for (b, batch) in batches.iter().enumerate() {
            let examples = batch.examples()?;
            let (loss, c) = train_step(model, &mut state, table, &examples, lr, config.clip).map_err(|e| Error::Training {
                epoch,
                batch: b,
                source: Box::new(e),
            })?;
            loss_sum += loss * examples.len() as f64;
            correct += c;
        }
        let dev_acc = if dev_set.is_empty() {
            None
        } else {
            Some(evaluate(model, table, dev_set)?.accuracy())
        };
        let record = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            dev_acc,
        };
        on_epoch(&record)?;
        let score = dev_acc.unwrap_or(f64::INFINITY);
        let better = match &best {
            None => true,
            Some((s, _, _)) => dev_acc.is_none() || score > *s,
        };
        if better {
            best = Some((score, epoch, model.store.clone()));
        }
        log.push(record);
    }
    let (best, best_epoch) = match best {
        Some((_, e, s)) => (s, e),
        None => (model.store.clone(), 0),
    };
    Ok(TrainOutcome { best, best_epoch, log })
}

/// `counts[pred][gold]`, indexed by [`Label::index`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl Confusion {
    pub fn add(&mut self, predicted: Label, gold: Label) {
        self.counts[predicted.index()][gold.index()] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }

    /// Trace over total; 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.correct() as f64 / total as f64
        }
    }

    pub fn get(&self, predicted: Label, gold: Label) -> u64 {
        self.counts[predicted.index()][gold.index()]
    }

    /// Table with rows = prediction, columns = gold, both in N, E, C order.
    pub fn render(&self) -> String {
        const ORDER: [Label; 3] = [Label::Neutral, Label::Entailment, Label::Contradiction];
        let mut s = String::from("pred\\gold");
        for g in ORDER {
            s.push_str(&format!("\t{}", g.code()));
        }
        s.push('\n');
        for p in ORDER {
            s.push(p.code());
            for g in ORDER {
                s.push_str(&format!("\t{}", self.get(p, g)));
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub confusion: Confusion,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        self.confusion.accuracy()
    }
}

pub fn evaluate(model: &Model, table: &EmbeddingTable, corpus: &[Example]) -> Result<Evaluation> {
    let preds: Vec<Result<Label>> = corpus.par_iter().map(|ex| model.predict(table, ex)).collect();
    let mut confusion = Confusion::default();
    for (ex, p) in corpus.iter().zip(preds) {
        confusion.add(p?, ex.label);
    }
    Ok(Evaluation { confusion })
}
