//! Mini-batch SGD loop shared by every experiment.

use std::collections::BTreeSet;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffgraph::{forward_logits, sgd_update, NetworkSpec, OptimizerState, ParameterSet, SgdConfig, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: SgdConfig,
}

fn default_batch() -> usize {
    128
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub learning_rate: f64,
}

/// Run `cfg.epochs` shuffled passes over `n` examples.
///
/// `step` receives the batch indices and current parameters and returns the
/// loss and gradients. The learning rate follows a cosine schedule over all
/// steps. A non-finite loss or numeric failure aborts with
/// [`Error::Diverged`] carrying the last finite parameters.
pub fn fit<F>(
    params: &mut ParameterSet<f32>,
    n: usize,
    cfg: &TrainConfig,
    seed: u64,
    frozen: &BTreeSet<String>,
    mut step: F,
) -> Result<Vec<EpochLog>>
where
    F: FnMut(&[usize], &ParameterSet<f32>) -> Result<(f32, ParameterSet<f32>)>,
{
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Config("no training examples".into()));
    }
    let per_epoch = n.div_ceil(cfg.batch_size);
    let mut state = OptimizerState::new(params, cfg.optimizer, cfg.epochs * per_epoch)?;
    state.frozen = frozen.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        let lr0 = state.scheduled_lr()?;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let diverged = |last: &ParameterSet<f32>| Error::Diverged {
                epoch,
                step: b,
                last_finite: Box::new(last.clone()),
            };
            let (loss, grads) = match step(idx, params) {
                Ok(r) => r,
                Err(Error::NumericFailure { layer }) => {
                    debug!("numeric failure at {layer}");
                    return Err(diverged(params));
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || !grads.all_finite() {
                return Err(diverged(params));
            }
            let lr = state.scheduled_lr()?;
            let before = params.clone();
            sgd_update(params, &grads, &mut state, lr)?;
            if !params.all_finite() {
                *params = before;
                return Err(diverged(params));
            }
            total += loss as f64 * idx.len() as f64;
        }
        let mean_loss = total / n as f64;
        info!("epoch {epoch}: loss {mean_loss:.4} lr {lr0:.4}");
        logs.push(EpochLog {
            epoch,
            mean_loss,
            learning_rate: lr0,
        });
    }
    Ok(logs)
}

/// Arg-max predictions of `head`, evaluated in chunks.
pub fn predict(
    spec: &NetworkSpec,
    params: &ParameterSet<f32>,
    images: &Tensor<f32>,
    head: &str,
) -> Result<Vec<usize>> {
    const CHUNK: usize = 256;
    let n = images.batch();
    let mut out = Vec::with_capacity(n);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(CHUNK) {
        let logits = forward_logits(spec, params, &images.select(chunk), head)?;
        let k = logits.shape()[1];
        out.extend(logits.data().chunks_exact(k).map(argmax));
    }
    Ok(out)
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}
