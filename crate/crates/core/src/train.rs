//! Minibatch AdamW on the pairwise cross-entropy.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{InputDims, Mode, ModelSpec, RewardModel, SegmentBatch};
use crate::optim::{AdamWConfig, OptimizerState};
use crate::params::Bound;
use crate::preference::{evaluate_accuracy, Evaluation, PreferenceRecord};
use crate::tape::Tape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Total gradient steps.
    pub steps: usize,
    pub warmup_steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Fraction of records held out for validation.
    pub eval_fraction: f64,
    /// Steps between metric records.
    pub eval_interval: usize,
    /// Return the parameters with the lowest validation loss instead of the
    /// final ones.
    pub select_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            steps: 10_000,
            warmup_steps: 500,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            seed: 0,
            eval_fraction: 0.1,
            eval_interval: 500,
            select_best: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps == 0 || self.eval_interval == 0 {
            return Err(Error::Config("batch size, steps and eval interval must be positive".into()));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(Error::Config(format!(
                "eval fraction {} not in (0, 1)",
                self.eval_fraction
            )));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("learning rate must be positive, weight decay nonnegative".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup_steps,
            total_steps: self.steps,
            ..AdamWConfig::default()
        }
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    /// Mean minibatch loss since the previous record.
    pub loss: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: RewardModel,
    pub history: Vec<MetricRecord>,
    /// Indices of the records used for training and validation.
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

/// Seeded split. The validation part has `floor(n · fraction)` records.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    idx.shuffle(&mut rng);
    let n_val = (n as f64 * fraction).floor() as usize;
    let val = idx.split_off(n - n_val);
    (idx, val)
}

pub fn dataset_dims(records: &[PreferenceRecord]) -> Result<InputDims> {
    let first = records
        .first()
        .ok_or_else(|| Error::Dataset("empty preference dataset".into()))?;
    let (h, sd, ad) = (
        first.query.first.len(),
        first.query.first.state_dim(),
        first.query.first.action_dim(),
    );
    for r in records {
        r.validate()?;
        for s in [&r.query.first, &r.query.second] {
            if s.len() != h || s.state_dim() != sd || s.action_dim() != ad {
                return Err(Error::Dataset(format!(
                    "query {} does not match segment shape ({h}, {sd}, {ad})",
                    r.query.id
                )));
            }
        }
    }
    Ok(InputDims {
        state_dim: sd,
        action_dim: ad,
    })
}

/// Mean loss of one minibatch and its gradients by parameter name.
pub fn batch_gradients(
    model: &RewardModel,
    batch: &[&PreferenceRecord],
    mode: Mode<'_>,
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let b = batch.len();
    let mut segs = Vec::with_capacity(2 * b);
    segs.extend(batch.iter().map(|r| &r.query.first));
    segs.extend(batch.iter().map(|r| &r.query.second));
    let labels: Vec<f64> = batch.iter().map(|r| r.label).collect();
    let packed = SegmentBatch::new(&segs)?;
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, &model.params, true);
    let out = model.forward(&mut tape, &bound, &packed, mode)?;
    let pairs = tape.reshape(out.scores, vec![2, b])?;
    let l0 = tape.gather_rows(pairs, &[0])?;
    let l0 = tape.reshape(l0, vec![b])?;
    let l1 = tape.gather_rows(pairs, &[1])?;
    let l1 = tape.reshape(l1, vec![b])?;
    let loss = tape.pair_cross_entropy(l0, l1, &labels)?;
    let loss_value = tape.value(loss).data()[0];
    if !loss_value.is_finite() {
        return Ok((loss_value, BTreeMap::new()));
    }
    let mut grads = tape.backward(loss)?;
    let mut named = BTreeMap::new();
    for (name, &v) in bound.iter() {
        let g = grads
            .take(v)
            .unwrap_or_else(|| vec![0.0; tape.value(v).numel()]);
        named.insert(name.clone(), g);
    }
    Ok((loss_value, named))
}

/// Trains a fresh model of `spec` on `records`.
pub fn train(records: &[PreferenceRecord], spec: ModelSpec, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let dims = dataset_dims(records)?;
    let model = RewardModel::new(spec, dims, config.seed)?;
    train_from(model, records, config)
}

/// Continues training `model`; the optimizer starts fresh.
pub fn train_from(
    mut model: RewardModel,
    records: &[PreferenceRecord],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    dataset_dims(records)?;
    let (train_idx, val_idx) = split_indices(records.len(), config.eval_fraction, config.seed);
    if train_idx.is_empty() {
        return Err(Error::Dataset("no records left for training".into()));
    }
    let val: Vec<PreferenceRecord> = val_idx.iter().map(|&i| records[i].clone()).collect();

    let mut batch_rng = ChaCha8Rng::seed_from_u64(config.seed);
    batch_rng.set_stream(2);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(3);
    let mut opt = OptimizerState::new(config.optimizer());

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut history = Vec::new();
    let mut running = (0.0, 0usize);
    let mut best: Option<(f64, RewardModel)> = None;

    for step in 1..=config.steps {
        let mut picked = Vec::with_capacity(config.batch_size);
        while picked.len() < config.batch_size.min(train_idx.len()) {
            if cursor == order.len() {
                order = train_idx.clone();
                order.shuffle(&mut batch_rng);
                cursor = 0;
            }
            picked.push(&records[order[cursor]]);
            cursor += 1;
        }
        let (loss, grads) = batch_gradients(&model, &picked, Mode::Train(&mut dropout_rng))?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                last_good: Box::new(model),
            });
        }
        opt.step(&mut model.params, &grads)?;
        running.0 += loss;
        running.1 += 1;

        if step % config.eval_interval == 0 || step == config.steps {
            let eval = if val.is_empty() {
                None
            } else {
                Some(evaluate_accuracy(&model, &val)?)
            };
            history.push(MetricRecord {
                step,
                loss: running.0 / running.1 as f64,
                val_loss: eval.map(|e| e.loss),
                val_accuracy: eval.and_then(|e: Evaluation| e.accuracy),
            });
            running = (0.0, 0);
            if let (true, Some(e)) = (config.select_best, eval) {
                if best.as_ref().is_none_or(|(l, _)| e.loss < *l) {
                    best = Some((e.loss, model.clone()));
                }
            }
        }
    }
    let model = match best {
        Some((_, m)) => m,
        None => model,
    };
    Ok(TrainOutcome {
        model,
        history,
        train_indices: train_idx,
        val_indices: val_idx,
    })
}
