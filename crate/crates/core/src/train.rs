//! Mini-batch training of the neural rankers.
//!
//! Lists are bucketed by length so every batch stacks equal-length lists
//! into one `[B·n × d]` block without padding. Batches are reshuffled each
//! epoch from a seeded generator; training is single-threaded and fully
//! deterministic for a given seed.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::InteractionList;
use crate::error::{Error, Result};
use crate::features::{ContextFeatures, ProductFeatures};
use crate::losses::{combined_loss_on_tape, LossConfig};
use crate::metrics::{evaluate_scorer, EvalConfig};
use crate::rankers::NeuralRanker;
use crate::tensor::{AdamConfig, AdamState, Mode, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Maximum lists per batch.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 1000,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("training.batch_size", "must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("training.learning_rate", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean batch loss; absent for the pre-training entry.
    pub train_loss: Option<f64>,
    pub val_ndcg_c: Option<f64>,
}

/// Groups list indices by length and cuts each group into batches of at
/// most `batch_size`, shuffling within groups and across batches.
pub fn bucket_batches(lengths: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &n) in lengths.iter().enumerate() {
        buckets.entry(n).or_default().push(i);
    }
    let mut batches = Vec::new();
    for (_, mut idx) in buckets {
        idx.shuffle(rng);
        batches.extend(idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

fn validation_ndcg(model: &NeuralRanker, val: Option<&[InteractionList]>, cutoff: usize) -> Result<Option<f64>> {
    match val {
        Some(lists) if !lists.is_empty() => {
            Ok(evaluate_scorer("validation", model, lists, &EvalConfig { cutoff })?.ndcg_c)
        }
        _ => Ok(None),
    }
}

/// Trains `model` in place and returns one log entry per epoch, preceded by
/// an entry for the untrained model. A non-finite loss or parameter aborts
/// with [`Error::Divergence`].
pub fn train_neural(
    model: &mut NeuralRanker,
    train: &[InteractionList],
    val: Option<&[InteractionList]>,
    loss: &LossConfig,
    config: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    loss.validate()?;
    if train.is_empty() && config.epochs > 0 {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let cutoff = crate::metrics::DEFAULT_CUTOFF;
    let mut logs = vec![EpochLog {
        epoch: 0,
        train_loss: None,
        val_ndcg_c: validation_ndcg(model, val, cutoff)?,
    }];
    let mut adam = AdamState::new(AdamConfig::with_learning_rate(config.learning_rate), &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let lengths: Vec<usize> = train.iter().map(InteractionList::len).collect();

    for epoch in 1..=config.epochs {
        let batches = bucket_batches(&lengths, config.batch_size, &mut rng);
        let mut total = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let contexts: Vec<&ContextFeatures> = batch.iter().map(|&i| &train[i].context).collect();
            let lists: Vec<&[ProductFeatures]> = batch.iter().map(|&i| train[i].products.as_slice()).collect();
            let n = lists[0].len();
            let y_c: Vec<f64> = batch.iter().flat_map(|&i| train[i].y_c.to_f64()).collect();
            let y_o: Vec<f64> = batch.iter().flat_map(|&i| train[i].y_o.to_f64()).collect();

            let (value, grads) = {
                let mut tape = Tape::new(&model.params);
                let s = model.score_batch(&mut tape, &contexts, &lists, Mode::Train, &mut rng)?;
                let l = combined_loss_on_tape(&mut tape, s, y_c, y_o, n, loss);
                let value = tape.value(l).data()[0];
                if !value.is_finite() {
                    return Err(Error::Divergence(format!(
                        "loss became {value} at epoch {epoch}, batch {b} (list length {n}); \
                         lower training.learning_rate or the model size"
                    )));
                }
                (value, tape.backward(l).param_grads(&model.params))
            };
            adam.step(&mut model.params, &grads);
            if !model.params.is_finite() {
                return Err(Error::Divergence(format!(
                    "parameters became non-finite at epoch {epoch}, batch {b}"
                )));
            }
            total += value;
        }
        let train_loss = total / batches.len().max(1) as f64;
        let val_ndcg_c = validation_ndcg(model, val, cutoff)?;
        log::info!(
            "epoch {epoch}/{}: train loss {train_loss:.6}, validation NDCG_c@{cutoff} {}",
            config.epochs,
            val_ndcg_c.map_or("n/a".to_string(), |v| format!("{v:.4}"))
        );
        logs.push(EpochLog {
            epoch,
            train_loss: Some(train_loss),
            val_ndcg_c,
        });
    }
    Ok(logs)
}
