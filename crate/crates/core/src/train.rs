//! From-scratch trainer for the float CNN: weighted BCE loss, Adam,
//! reduce-LR-on-plateau, early stopping, and a finite-difference gradient
//! check.
//!
//! Batch normalization uses batch statistics during training (with the full
//! backprop-through-statistics formulas) and tracks running statistics for
//! inference-mode evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cnn::{forward, sigmoid, CnnError, FloatModel, CONV_OUT_SIDE, KERNEL, POOL_OUT_SIDE};
use crate::frameio::{to_violation_label, FrameSeq, FRAME_PIXELS, FRAME_SIDE};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const BN_MOMENTUM: f64 = 0.1;
const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    Empty,
    #[error("training set contains a single class")]
    SingleClass,
    #[error("invalid hyperparameter: {0}")]
    BadHyper(String),
    #[error(transparent)]
    Cnn(#[from] CnnError),
}

/// Training schedule and architecture dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    pub lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub stop_patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub seeds: Vec<u64>,
    pub channels: usize,
    pub hidden: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            plateau_factor: 0.3,
            plateau_patience: 5,
            stop_patience: 10,
            max_epochs: 500,
            batch_size: 32,
            val_fraction: 0.2,
            seeds: vec![0, 1, 2, 3, 4],
            channels: 64,
            hidden: 64,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(TrainError::BadHyper("lr must be positive".into()));
        }
        let factor_ok = self.plateau_factor > 0.0 && self.plateau_factor < 1.0;
        if !factor_ok {
            return Err(TrainError::BadHyper(
                "plateau_factor must lie in (0, 1)".into(),
            ));
        }
        if self.plateau_patience < 1 || self.stop_patience < 1 {
            return Err(TrainError::BadHyper("patience must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(TrainError::BadHyper("batch_size must be >= 1".into()));
        }
        let fraction_ok = self.val_fraction > 0.0 && self.val_fraction < 1.0;
        if !fraction_ok {
            return Err(TrainError::BadHyper(
                "val_fraction must lie in (0, 1)".into(),
            ));
        }
        if self.channels < 1 || self.hidden < 1 {
            return Err(TrainError::BadHyper(
                "channels and hidden must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Binary cross-entropy with the probability clamped away from 0 and 1.
pub fn bce_loss(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub reductions: u32,
}

/// Result of one training run: the best-validation model plus its history.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FloatModel,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub init_val_loss: f64,
}

/// Per-parameter-group gradients, same layout as the model.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub conv_w: Vec<f64>,
    pub conv_b: Vec<f64>,
    pub bn_gamma: Vec<f64>,
    pub bn_beta: Vec<f64>,
    pub fc1_w: Vec<f64>,
    pub fc1_b: Vec<f64>,
    pub fc2_w: Vec<f64>,
    pub fc2_b: Vec<f64>,
}

pub const PARAM_GROUPS: [&str; 8] = [
    "conv_w", "conv_b", "bn_gamma", "bn_beta", "fc1_w", "fc1_b", "fc2_w", "fc2_b",
];

impl Gradients {
    fn zeros(model: &FloatModel) -> Self {
        Self {
            conv_w: vec![0.0; model.conv_w.len()],
            conv_b: vec![0.0; model.conv_b.len()],
            bn_gamma: vec![0.0; model.bn.gamma.len()],
            bn_beta: vec![0.0; model.bn.beta.len()],
            fc1_w: vec![0.0; model.fc1_w.len()],
            fc1_b: vec![0.0; model.fc1_b.len()],
            fc2_w: vec![0.0; model.fc2_w.len()],
            fc2_b: vec![0.0; 1],
        }
    }

    pub fn groups(&self) -> [&[f64]; 8] {
        [
            &self.conv_w,
            &self.conv_b,
            &self.bn_gamma,
            &self.bn_beta,
            &self.fc1_w,
            &self.fc1_b,
            &self.fc2_w,
            &self.fc2_b,
        ]
    }
}

fn param_groups_mut(model: &mut FloatModel) -> [&mut Vec<f64>; 8] {
    [
        &mut model.conv_w.data,
        &mut model.conv_b,
        &mut model.bn.gamma,
        &mut model.bn.beta,
        &mut model.fc1_w.data,
        &mut model.fc1_b,
        &mut model.fc2_w.data,
        &mut model.fc2_b,
    ]
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    fn new(model: &FloatModel) -> Self {
        let sizes = Gradients::zeros(model);
        let m: Vec<Vec<f64>> = sizes.groups().iter().map(|g| vec![0.0; g.len()]).collect();
        let v = m.clone();
        Self { m, v, t: 0 }
    }

    fn step(&mut self, model: &mut FloatModel, grads: &Gradients, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let groups = param_groups_mut(model);
        for (gi, (params, grad)) in groups.into_iter().zip(grads.groups()).enumerate() {
            let (m, v) = (&mut self.m[gi], &mut self.v[gi]);
            for (j, p) in params.iter_mut().enumerate() {
                let g = grad[j];
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *p -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// One training batch: standardized inputs with labels and sample weights.
struct Batch<'a> {
    inputs: &'a [[f64; FRAME_PIXELS]],
    labels: &'a [f64],
    weights: &'a [f64],
}

/// Training-mode forward/backward over a batch. Returns the mean weighted
/// BCE loss, the gradients (when requested), and the per-channel batch
/// statistics for the running-average update.
fn batch_pass(
    model: &FloatModel,
    batch: &Batch<'_>,
    want_grads: bool,
) -> (f64, Option<Gradients>, Vec<f64>, Vec<f64>) {
    let b = batch.inputs.len();
    let channels = model.channels;
    let hidden = model.hidden;
    let conv_area = CONV_OUT_SIDE * CONV_OUT_SIDE;
    let flat_len = channels * POOL_OUT_SIDE * POOL_OUT_SIDE;
    let m_per_channel = (b * conv_area) as f64;

    // Convolution (pre-BN) for every sample.
    let mut conv_out = vec![vec![0.0f64; channels * conv_area]; b];
    for (n, input) in batch.inputs.iter().enumerate() {
        let sample = &mut conv_out[n];
        for c in 0..channels {
            let wbase = c * KERNEL * KERNEL;
            for i in 0..CONV_OUT_SIDE {
                for j in 0..CONV_OUT_SIDE {
                    let mut acc = model.conv_b[c];
                    for di in 0..KERNEL {
                        for dj in 0..KERNEL {
                            acc += model.conv_w.data[wbase + di * KERNEL + dj]
                                * input[(i + di) * FRAME_SIDE + (j + dj)];
                        }
                    }
                    sample[c * conv_area + i * CONV_OUT_SIDE + j] = acc;
                }
            }
        }
    }

    // Batch statistics per channel.
    let mut mean = vec![0.0f64; channels];
    let mut var = vec![0.0f64; channels];
    for c in 0..channels {
        let mut sum = 0.0;
        for sample in &conv_out {
            for k in 0..conv_area {
                sum += sample[c * conv_area + k];
            }
        }
        mean[c] = sum / m_per_channel;
        let mut sq = 0.0;
        for sample in &conv_out {
            for k in 0..conv_area {
                let d = sample[c * conv_area + k] - mean[c];
                sq += d * d;
            }
        }
        var[c] = sq / m_per_channel;
    }
    let inv_std: Vec<f64> = (0..channels)
        .map(|c| 1.0 / (var[c] + model.bn.eps).sqrt())
        .collect();

    // Normalize, scale/shift, ReLU; then pool with argmax.
    let mut xhat = vec![vec![0.0f64; channels * conv_area]; b];
    let mut relu_mask = vec![vec![false; channels * conv_area]; b];
    let mut flat = vec![vec![0.0f64; flat_len]; b];
    let mut pool_arg = vec![vec![0usize; flat_len]; b];
    for n in 0..b {
        for c in 0..channels {
            for k in 0..conv_area {
                let idx = c * conv_area + k;
                let xh = (conv_out[n][idx] - mean[c]) * inv_std[c];
                xhat[n][idx] = xh;
                let y = model.bn.gamma[c] * xh + model.bn.beta[c];
                relu_mask[n][idx] = y > 0.0;
            }
            for i in 0..POOL_OUT_SIDE {
                for j in 0..POOL_OUT_SIDE {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_k = 0usize;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let k = (2 * i + di) * CONV_OUT_SIDE + (2 * j + dj);
                            let idx = c * conv_area + k;
                            let y = model.bn.gamma[c] * xhat[n][idx] + model.bn.beta[c];
                            let a = if y > 0.0 { y } else { 0.0 };
                            if a > best {
                                best = a;
                                best_k = k;
                            }
                        }
                    }
                    let out_idx = c * POOL_OUT_SIDE * POOL_OUT_SIDE + i * POOL_OUT_SIDE + j;
                    flat[n][out_idx] = best;
                    pool_arg[n][out_idx] = best_k;
                }
            }
        }
    }

    // Fully connected head.
    let mut a1 = vec![vec![0.0f64; hidden]; b];
    let mut mask1 = vec![vec![false; hidden]; b];
    let mut probs = vec![0.0f64; b];
    let mut loss = 0.0;
    for n in 0..b {
        for h in 0..hidden {
            let row = &model.fc1_w.data[h * flat_len..(h + 1) * flat_len];
            let z: f64 = row.iter().zip(&flat[n]).map(|(w, x)| w * x).sum::<f64>() + model.fc1_b[h];
            mask1[n][h] = z > 0.0;
            a1[n][h] = if z > 0.0 { z } else { 0.0 };
        }
        let z2: f64 = model
            .fc2_w
            .data
            .iter()
            .zip(&a1[n])
            .map(|(w, x)| w * x)
            .sum::<f64>()
            + model.fc2_b[0];
        probs[n] = sigmoid(z2);
        loss += batch.weights[n] * bce_loss(probs[n], batch.labels[n]);
    }
    loss /= b as f64;

    if !want_grads {
        return (loss, None, mean, var);
    }

    let mut grads = Gradients::zeros(model);
    let mut dy = vec![vec![0.0f64; channels * conv_area]; b];
    for n in 0..b {
        let dz2 = batch.weights[n] * (probs[n] - batch.labels[n]) / b as f64;
        grads.fc2_b[0] += dz2;
        let mut dflat = vec![0.0f64; flat_len];
        for h in 0..hidden {
            grads.fc2_w[h] += dz2 * a1[n][h];
            let da1 = dz2 * model.fc2_w.data[h];
            if mask1[n][h] {
                let dz1 = da1;
                grads.fc1_b[h] += dz1;
                let row = &model.fc1_w.data[h * flat_len..(h + 1) * flat_len];
                for k in 0..flat_len {
                    grads.fc1_w[h * flat_len + k] += dz1 * flat[n][k];
                    dflat[k] += dz1 * row[k];
                }
            }
        }
        // Unpool to the argmax positions, then apply the ReLU mask.
        for (out_idx, &src_k) in pool_arg[n].iter().enumerate() {
            let c = out_idx / (POOL_OUT_SIDE * POOL_OUT_SIDE);
            let idx = c * conv_area + src_k;
            if relu_mask[n][idx] {
                dy[n][idx] += dflat[out_idx];
            }
        }
    }

    // Batchnorm backward per channel, through the batch statistics.
    for c in 0..channels {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for n in 0..b {
            for k in 0..conv_area {
                let idx = c * conv_area + k;
                sum_dy += dy[n][idx];
                sum_dy_xhat += dy[n][idx] * xhat[n][idx];
            }
        }
        grads.bn_beta[c] = sum_dy;
        grads.bn_gamma[c] = sum_dy_xhat;
        let scale = model.bn.gamma[c] * inv_std[c];
        for n in 0..b {
            for k in 0..conv_area {
                let idx = c * conv_area + k;
                let dx = scale
                    * (dy[n][idx]
                        - sum_dy / m_per_channel
                        - xhat[n][idx] * sum_dy_xhat / m_per_channel);
                // Convolution backward, accumulated directly.
                let i = k / CONV_OUT_SIDE;
                let j = k % CONV_OUT_SIDE;
                grads.conv_b[c] += dx;
                let wbase = c * KERNEL * KERNEL;
                for di in 0..KERNEL {
                    for dj in 0..KERNEL {
                        grads.conv_w[wbase + di * KERNEL + dj] +=
                            dx * batch.inputs[n][(i + di) * FRAME_SIDE + (j + dj)];
                    }
                }
            }
        }
    }

    (loss, Some(grads), mean, var)
}

/// Mean weighted BCE of the inference-mode model over a labeled set.
fn weighted_loss(
    model: &FloatModel,
    frames: &[&crate::frameio::IRFrame],
    class_weights: (f64, f64),
) -> Result<f64, TrainError> {
    let mut loss = 0.0;
    for frame in frames {
        let label = to_violation_label(frame.person_count);
        let weight = if label {
            class_weights.1
        } else {
            class_weights.0
        };
        let p = forward(model, frame)?.probability;
        loss += weight * bce_loss(p, if label { 1.0 } else { 0.0 });
    }
    Ok(loss / frames.len() as f64)
}

fn input_stats(train_set: &FrameSeq) -> (f64, f64) {
    let n = (train_set.len() * FRAME_PIXELS) as f64;
    let mut sum = 0.0;
    for frame in train_set {
        sum += frame.pixels().iter().sum::<f64>();
    }
    let mu = sum / n;
    let mut sq = 0.0;
    for frame in train_set {
        for &p in frame.pixels() {
            sq += (p - mu) * (p - mu);
        }
    }
    let sigma = (sq / n).sqrt().max(1e-6);
    (mu, sigma)
}

/// Build the initialized (untrained) model for a training set and seed:
/// input statistics from the data, fan-in-uniform weights, identity BN.
pub fn init_model(
    train_set: &FrameSeq,
    hyper: &Hyper,
    seed: u64,
) -> Result<FloatModel, TrainError> {
    hyper.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::Empty);
    }
    let (mu, sigma) = input_stats(train_set);
    Ok(FloatModel::init(
        hyper.channels,
        hyper.hidden,
        mu,
        sigma,
        seed,
    ))
}

/// Train on labeled frames. Deterministic given the seed: a stratified
/// validation fraction is split off, mean weighted BCE is minimized with
/// Adam, the learning rate shrinks by `plateau_factor` after
/// `plateau_patience` non-improving epochs, training stops after
/// `stop_patience` non-improving epochs, and the best-validation-loss
/// parameters are returned.
pub fn train(train_set: &FrameSeq, hyper: &Hyper, seed: u64) -> Result<TrainOutcome, TrainError> {
    hyper.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::Empty);
    }
    let labels: Vec<bool> = train_set
        .iter()
        .map(|f| to_violation_label(f.person_count))
        .collect();
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == labels.len() {
        return Err(TrainError::SingleClass);
    }

    let mut model = init_model(train_set, hyper, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Stratified validation split.
    let mut pos_idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let mut neg_idx: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    pos_idx.shuffle(&mut rng);
    neg_idx.shuffle(&mut rng);
    let val_pos = (hyper.val_fraction * pos_idx.len() as f64).floor() as usize;
    let val_neg = (hyper.val_fraction * neg_idx.len() as f64).floor() as usize;
    let mut val_idx: Vec<usize> = pos_idx[..val_pos]
        .iter()
        .chain(neg_idx[..val_neg].iter())
        .copied()
        .collect();
    let mut train_idx: Vec<usize> = pos_idx[val_pos..]
        .iter()
        .chain(neg_idx[val_neg..].iter())
        .copied()
        .collect();
    val_idx.sort_unstable();
    train_idx.sort_unstable();

    // Inverse-frequency class weights from the training part.
    let train_pos = train_idx.iter().filter(|&&i| labels[i]).count();
    let train_neg = train_idx.len() - train_pos;
    if train_pos == 0 || train_neg == 0 {
        return Err(TrainError::SingleClass);
    }
    let n = train_idx.len() as f64;
    let class_weights = (n / (2.0 * train_neg as f64), n / (2.0 * train_pos as f64));

    let std_inputs: Vec<[f64; FRAME_PIXELS]> =
        train_set.iter().map(|f| model.standardize(f)).collect();
    let sample_label = |i: usize| if labels[i] { 1.0 } else { 0.0 };
    let sample_weight = |i: usize| {
        if labels[i] {
            class_weights.1
        } else {
            class_weights.0
        }
    };

    let val_frames: Vec<&crate::frameio::IRFrame> =
        val_idx.iter().map(|&i| &train_set[i]).collect();
    let eval_val = |m: &FloatModel, fallback: f64| -> Result<f64, TrainError> {
        if val_frames.is_empty() {
            Ok(fallback)
        } else {
            weighted_loss(m, &val_frames, class_weights)
        }
    };

    let init_train_loss = {
        let frames: Vec<&crate::frameio::IRFrame> =
            train_idx.iter().map(|&i| &train_set[i]).collect();
        weighted_loss(&model, &frames, class_weights)?
    };
    let init_val_loss = eval_val(&model, init_train_loss)?;

    let mut best_model = model.clone();
    let mut best_loss = init_val_loss;
    let mut best_epoch = 0usize;
    let mut history = Vec::new();
    let mut bad_epochs = 0usize;
    let mut plateau_wait = 0usize;
    let mut reductions = 0u32;
    let mut adam = Adam::new(&model);

    for epoch in 1..=hyper.max_epochs {
        let lr = hyper.lr * hyper.plateau_factor.powi(reductions as i32);
        train_idx.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for chunk in train_idx.chunks(hyper.batch_size) {
            let inputs: Vec<[f64; FRAME_PIXELS]> = chunk.iter().map(|&i| std_inputs[i]).collect();
            let batch_labels: Vec<f64> = chunk.iter().map(|&i| sample_label(i)).collect();
            let batch_weights: Vec<f64> = chunk.iter().map(|&i| sample_weight(i)).collect();
            let batch = Batch {
                inputs: &inputs,
                labels: &batch_labels,
                weights: &batch_weights,
            };
            let (loss, grads, mean, var) = batch_pass(&model, &batch, true);
            epoch_loss += loss * chunk.len() as f64;

            // Running statistics, unbiased variance.
            let m = (chunk.len() * CONV_OUT_SIDE * CONV_OUT_SIDE) as f64;
            let correction = m / (m - 1.0);
            for c in 0..model.channels {
                model.bn.mean[c] = (1.0 - BN_MOMENTUM) * model.bn.mean[c] + BN_MOMENTUM * mean[c];
                model.bn.var[c] =
                    (1.0 - BN_MOMENTUM) * model.bn.var[c] + BN_MOMENTUM * var[c] * correction;
            }

            adam.step(&mut model, &grads.expect("grads requested"), lr);
        }
        epoch_loss /= train_idx.len() as f64;

        let val_loss = eval_val(&model, epoch_loss)?;
        history.push(EpochStats {
            epoch,
            train_loss: epoch_loss,
            val_loss,
            lr,
            reductions,
        });

        if val_loss < best_loss {
            best_loss = val_loss;
            best_model = model.clone();
            best_epoch = epoch;
            bad_epochs = 0;
            plateau_wait = 0;
        } else {
            bad_epochs += 1;
            plateau_wait += 1;
            if plateau_wait >= hyper.plateau_patience {
                reductions += 1;
                plateau_wait = 0;
            }
            if bad_epochs >= hyper.stop_patience {
                break;
            }
        }
    }

    Ok(TrainOutcome {
        model: best_model,
        history,
        best_epoch,
        init_val_loss,
    })
}

/// Compare analytic gradients of the mean (unweighted) BCE against central
/// finite differences, sampling parameters from every group. Returns the
/// maximum relative error.
pub fn grad_check(model: &FloatModel, frames: &FrameSeq, delta: f64) -> Result<f64, TrainError> {
    if frames.is_empty() {
        return Err(TrainError::Empty);
    }
    if !delta.is_finite() || delta <= 0.0 {
        return Err(TrainError::BadHyper("delta must be positive".into()));
    }
    model.validate()?;
    let inputs: Vec<[f64; FRAME_PIXELS]> = frames.iter().map(|f| model.standardize(f)).collect();
    let labels: Vec<f64> = frames
        .iter()
        .map(|f| {
            if to_violation_label(f.person_count) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let weights = vec![1.0; frames.len()];

    let batch = Batch {
        inputs: &inputs,
        labels: &labels,
        weights: &weights,
    };
    let (_, grads, _, _) = batch_pass(model, &batch, true);
    let grads = grads.expect("grads requested");

    let loss_with = |m: &FloatModel| -> f64 {
        let b = Batch {
            inputs: &inputs,
            labels: &labels,
            weights: &weights,
        };
        batch_pass(m, &b, false).0
    };

    let mut max_rel = 0.0f64;
    for (gi, group) in grads.groups().iter().enumerate() {
        for &idx in sample_indices(group.len()).iter() {
            let analytic = group[idx];
            let mut plus = model.clone();
            param_groups_mut(&mut plus)[gi][idx] += delta;
            let mut minus = model.clone();
            param_groups_mut(&mut minus)[gi][idx] -= delta;
            let numeric = (loss_with(&plus) - loss_with(&minus)) / (2.0 * delta);
            let denom = analytic.abs().max(numeric.abs()).max(1e-4);
            let rel = (analytic - numeric).abs() / denom;
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

fn sample_indices(len: usize) -> Vec<usize> {
    if len == 0 {
        return Vec::new();
    }
    let mut picks = vec![0, len / 3, (2 * len) / 3, len - 1];
    picks.dedup();
    picks.retain(|&i| i < len);
    picks
}
