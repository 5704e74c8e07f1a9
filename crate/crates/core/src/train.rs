//! Client-side local training and global-model evaluation.

use crate::data::{BackdoorSample, Dataset};
use crate::error::{Error, Result};
use crate::nn::{forward, predict_proba, train_step, AdamState, Architecture, ModelParams, Tensor};
use crate::rng::{derive_seed, rng_from};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// Local optimisation settings for one client round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
}

/// Trains `params` for `cfg.epochs` passes over `indices` of `data` with a
/// fresh Adam state. Each epoch reshuffles from `seed`; the last batch may
/// be short. When `inject` is given, that sample is appended to every batch.
pub fn local_train(
    arch: &Architecture,
    params: &ModelParams,
    data: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
    seed: u64,
    inject: Option<&BackdoorSample>,
) -> Result<ModelParams> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument("local training on an empty shard".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    let mut params = params.clone();
    let mut adam = AdamState::new(&params, cfg.lr);
    let mut order = indices.to_vec();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng_from(seed, &[epoch as u64]));
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (mut x, mut y) = data.batch(chunk);
            if let Some(s) = inject {
                let mut buf = x.into_data();
                buf.extend_from_slice(s.image.data());
                let [c, h, w] = data.sample_shape();
                x = Tensor::new(vec![chunk.len() + 1, c, h, w], buf)?;
                y.push(s.target_label);
            }
            train_step(arch, &mut params, &mut adam, &x, &y, derive_seed(seed, &[epoch as u64, b as u64]))?;
        }
    }
    Ok(params)
}

const EVAL_BATCH: usize = 500;

/// Percentage of test samples whose argmax prediction is correct.
pub fn evaluate_accuracy(arch: &Architecture, params: &ModelParams, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let all: Vec<usize> = (0..test.len()).collect();
    let mut correct = 0usize;
    for chunk in all.chunks(EVAL_BATCH) {
        let (x, y) = test.batch(chunk);
        let pred = forward(arch, params, &x, false, 0)?.argmax_rows();
        correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(100.0 * correct as f64 / test.len() as f64)
}

/// Softmax probability of the target label on the backdoor sample.
pub fn backdoor_confidence(arch: &Architecture, params: &ModelParams, sample: &BackdoorSample) -> Result<f64> {
    let probs = predict_proba(arch, params, &sample.image)?;
    let k = arch.n_classes();
    let n = probs.shape()[0];
    Ok((0..n).map(|i| probs.data()[i * k + sample.target_label] as f64).sum::<f64>() / n as f64)
}
