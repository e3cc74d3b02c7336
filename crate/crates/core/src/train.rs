//! Deterministic single-threaded Adam trainer for embedding networks.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{forward_backward, GraphSpec, Label};
use crate::seed::{derive_seed, rng_from_seed};
use crate::tensor::{ParamStore, Tensor};

/// Hyperparameters for one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

/// One labeled training sample; inputs are shared so several nets can train
/// on the same audio without copying it.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub input: Arc<Tensor>,
    pub class: usize,
}

/// How an epoch's sample order is built.
#[derive(Debug, Clone, Copy)]
pub enum BatchScheme {
    /// Plain shuffled pass over every sample.
    Shuffle,
    /// Class-balanced resampling: each epoch draws `per_class` samples from
    /// every class (with replacement for classes that are smaller), so large
    /// classes cannot drown out rare ones.
    Stratified { per_class: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Training curve; the curve of a run is part of its provenance record.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

struct Adam {
    m: ParamStore,
    v: ParamStore,
    t: u64,
    lr: f64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(params: &ParamStore, lr: f64) -> Self {
        Adam { m: params.zeros_like(), v: params.zeros_like(), t: 0, lr }
    }

    fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (name, g) in grads.iter() {
            let m = self.m.get_mut(name)?.values_mut();
            for (mv, gv) in m.iter_mut().zip(g.values()) {
                *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
            }
            let v = self.v.get_mut(name)?.values_mut();
            for (vv, gv) in v.iter_mut().zip(g.values()) {
                *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
            }
            let m = self.m.get(name)?.values().to_vec();
            let v = self.v.get(name)?.values().to_vec();
            let p = params.get_mut(name)?.values_mut();
            for ((pv, mv), vv) in p.iter_mut().zip(m).zip(v) {
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

fn epoch_order(
    items: &[TrainItem],
    scheme: BatchScheme,
    rng: &mut rand_chacha::ChaCha8Rng,
    num_classes: usize,
) -> Vec<usize> {
    match scheme {
        BatchScheme::Shuffle => {
            let mut order: Vec<usize> = (0..items.len()).collect();
            order.shuffle(rng);
            order
        }
        BatchScheme::Stratified { per_class } => {
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
            for (i, item) in items.iter().enumerate() {
                by_class[item.class].push(i);
            }
            let mut order = Vec::with_capacity(per_class * num_classes);
            for members in by_class.iter().filter(|m| !m.is_empty()) {
                if members.len() >= per_class {
                    let mut pool = members.clone();
                    pool.shuffle(rng);
                    order.extend_from_slice(&pool[..per_class]);
                } else {
                    for _ in 0..per_class {
                        order.push(members[rng.gen_range(0..members.len())]);
                    }
                }
            }
            order.shuffle(rng);
            order
        }
    }
}

/// Runs Adam over the training graph, updating `params` in place.
///
/// Gradients are averaged within each batch in sample order, so a run is a
/// pure function of (graph, initial params, items, config).
pub fn train(
    graph: &GraphSpec,
    params: &mut ParamStore,
    items: &[TrainItem],
    num_classes: usize,
    config: &TrainConfig,
    scheme: BatchScheme,
) -> Result<TrainReport> {
    if items.is_empty() {
        return Err(Error::precondition("no training samples"));
    }
    if config.batch == 0 {
        return Err(Error::precondition("batch size must be positive"));
    }
    let mut adam = Adam::new(params, config.lr);
    let mut report = TrainReport::default();
    for epoch in 0..config.epochs {
        let mut rng = rng_from_seed(derive_seed(config.seed, &["epoch", &epoch.to_string()]));
        let order = epoch_order(items, scheme, &mut rng, num_classes);
        let mut epoch_loss = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for (batch_idx, batch) in order.chunks(config.batch).enumerate() {
            let mut grads = params.zeros_like();
            let mut batch_loss = 0.0;
            for &i in batch {
                let item = &items[i];
                let (loss, _, g, cache) =
                    forward_backward(graph, params, &item.input, Label::Class(item.class))?;
                if !loss.is_finite() {
                    return Err(Error::numeric(
                        "train",
                        format!("non-finite loss at epoch {epoch}, batch {batch_idx}"),
                    ));
                }
                batch_loss += loss;
                let logits = cache.loss_input().values();
                let pred = argmax(logits);
                if pred == item.class {
                    correct += 1;
                }
                for (name, gt) in g.iter() {
                    let acc = grads.get_mut(name)?.values_mut();
                    for (a, b) in acc.iter_mut().zip(gt.values()) {
                        *a += b / batch.len() as f64;
                    }
                }
            }
            adam.step(params, &grads)?;
            epoch_loss += batch_loss;
            seen += batch.len();
        }
        let stats = EpochStats {
            epoch,
            loss: epoch_loss / seen as f64,
            accuracy: correct as f64 / seen as f64,
        };
        log::info!(
            "epoch {:>3}: loss {:.4}, train acc {:.3}",
            stats.epoch,
            stats.loss,
            stats.accuracy
        );
        report.epochs.push(stats);
    }
    Ok(report)
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
