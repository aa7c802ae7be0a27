//! Online reward model: maps a predicted patch to a target likelihood in
//! [0, 1], trained incrementally from revealed feedback with binary
//! cross-entropy. Fractional outcomes supervise fractionally (soft labels).

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{AtdError, Result};
use crate::nn::{Activation, Init, Mlp};
use crate::seed::{stream_rng, StableHasher};

/// Append-only supervision gathered from executed queries.
#[derive(Debug, Clone, Default)]
pub struct SupervisedStore {
    pairs: Vec<(Array2<f64>, f64)>,
}

impl SupervisedStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, patch: Array2<f64>, label: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&label) {
            return Err(AtdError::InvalidParam(format!(
                "label {label} outside [0, 1]"
            )));
        }
        self.pairs.push((patch, label));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(Array2<f64>, f64)] {
        &self.pairs
    }
}

/// 3x3 local mixing layer (single channel, zero padding) followed by a 2x2
/// average pool; degenerates to a dense map on tiny patches.
#[derive(Debug, Clone)]
struct ConvMix {
    kernel: [f64; 9],
    bias: f64,
}

impl ConvMix {
    fn forward(&self, patch: &Array2<f64>, pre: &mut Array2<f64>) {
        let (h, w) = patch.dim();
        for i in 0..h {
            for j in 0..w {
                let mut acc = self.bias;
                for di in 0..3usize {
                    for dj in 0..3usize {
                        let pi = i as isize + di as isize - 1;
                        let pj = j as isize + dj as isize - 1;
                        if pi >= 0 && pj >= 0 && (pi as usize) < h && (pj as usize) < w {
                            acc += self.kernel[di * 3 + dj] * patch[[pi as usize, pj as usize]];
                        }
                    }
                }
                pre[[i, j]] = acc;
            }
        }
    }
}

fn pooled_dims(h: usize, w: usize) -> (usize, usize) {
    (h.div_ceil(2), w.div_ceil(2))
}

/// Reward network: conv mix -> leaky-ReLU -> 2x2 average pool -> dense stack
/// `pooled -> 4 -> 32 -> 16 -> 8 -> 2` with leaky-ReLU throughout; the two
/// outputs are softmaxed into (target, non-target). The final dense layer is
/// zero-initialized, so an untrained model scores 0.5 everywhere.
#[derive(Debug, Clone)]
pub struct RewardModel {
    conv: ConvMix,
    fc: Mlp,
    pub patch_h: usize,
    pub patch_w: usize,
}

impl RewardModel {
    pub fn new(patch_h: usize, patch_w: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, "reward-init", 0);
        let mut kernel = [0.0; 9];
        for k in &mut kernel {
            *k = rng.gen_range(-0.5..0.5);
        }
        let (ph, pw) = pooled_dims(patch_h, patch_w);
        let fc = Mlp::new(
            &[ph * pw, 4, 32, 16, 8, 2],
            Activation::LeakyRelu,
            Activation::LeakyRelu,
            Init::Xavier,
            Init::Zeros,
            &mut rng,
        );
        Self {
            conv: ConvMix { kernel, bias: 0.0 },
            fc,
            patch_h,
            patch_w,
        }
    }

    pub fn checksum(&self) -> u64 {
        let mut h = StableHasher::new("reward-params");
        h.write_f64_slice(&self.conv.kernel);
        h.write_f64(self.conv.bias);
        h.write_u64(self.fc.checksum());
        h.finish()
    }

    fn check_patch(&self, patch: &Array2<f64>) -> Result<()> {
        if patch.dim() != (self.patch_h, self.patch_w) {
            return Err(AtdError::ShapeMismatch(format!(
                "patch {:?} vs configured {}x{}",
                patch.dim(),
                self.patch_h,
                self.patch_w
            )));
        }
        Ok(())
    }

    /// Forward pass caching the intermediate state needed for backward.
    fn forward_cached(&self, patch: &Array2<f64>) -> RewardCache {
        let (h, w) = (self.patch_h, self.patch_w);
        let mut conv_pre = Array2::zeros((h, w));
        self.conv.forward(patch, &mut conv_pre);
        let act = conv_pre.map(|&v| if v >= 0.0 { v } else { 0.01 * v });
        let (ph, pw) = pooled_dims(h, w);
        let mut pooled = vec![0.0; ph * pw];
        let mut counts = vec![0.0; ph * pw];
        for i in 0..h {
            for j in 0..w {
                let slot = (i / 2) * pw + j / 2;
                pooled[slot] += act[[i, j]];
                counts[slot] += 1.0;
            }
        }
        for (p, c) in pooled.iter_mut().zip(&counts) {
            *p /= c;
        }
        let (logits, fc_cache) = self.fc.forward_train(&pooled, 1);
        RewardCache {
            conv_pre,
            counts,
            fc_cache,
            logits,
        }
    }

    /// P(target) via softmax over the two logits.
    pub fn predict(&self, patch: &Array2<f64>) -> Result<f64> {
        self.check_patch(patch)?;
        let cache = self.forward_cached(patch);
        let z = cache.logits[0] - cache.logits[1];
        Ok(1.0 / (1.0 + (-z).exp()))
    }
}

struct RewardCache {
    conv_pre: Array2<f64>,
    counts: Vec<f64>,
    fc_cache: crate::nn::ForwardCache,
    logits: Vec<f64>,
}

/// Stable binary cross-entropy with logit difference `z`:
/// `L = max(z, 0) - z y + ln(1 + exp(-|z|))`.
fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Mean BCE of the model over the store.
pub fn bce_loss(model: &RewardModel, store: &SupervisedStore) -> Result<f64> {
    if store.is_empty() {
        return Err(AtdError::Empty("supervised store"));
    }
    let mut total = 0.0;
    for (patch, label) in store.pairs() {
        model.check_patch(patch)?;
        let cache = model.forward_cached(patch);
        let z = cache.logits[0] - cache.logits[1];
        total += bce_with_logit(z, *label);
    }
    Ok(total / store.len() as f64)
}

/// Flat gradient of the mean BCE over the store, ordered as
/// `[kernel(9), conv bias, fc params...]`.
pub fn bce_grad(model: &RewardModel, store: &SupervisedStore) -> Result<(f64, Vec<f64>)> {
    if store.is_empty() {
        return Err(AtdError::Empty("supervised store"));
    }
    let mut grad = vec![0.0; model.param_count()];
    let mut total = 0.0;
    let scale = 1.0 / store.len() as f64;
    for (patch, label) in store.pairs() {
        model.check_patch(patch)?;
        total += accumulate_sample_grad(model, patch, *label, scale, &mut grad);
    }
    Ok((total * scale, grad))
}

fn accumulate_sample_grad(
    model: &RewardModel,
    patch: &Array2<f64>,
    label: f64,
    scale: f64,
    grad: &mut [f64],
) -> f64 {
    let cache = model.forward_cached(patch);
    let z = cache.logits[0] - cache.logits[1];
    let loss = bce_with_logit(z, label);
    let p = 1.0 / (1.0 + (-z).exp());
    // dL/dz = p - y; logits receive (+, -) shares.
    let dz = (p - label) * scale;
    let dlogits = [dz, -dz];
    let (fc_grad, dpooled) = model.fc.backward_with_input_grad(&cache.fc_cache, &dlogits);
    for (g, fg) in grad[10..].iter_mut().zip(&fc_grad.0) {
        *g += fg;
    }
    // Unpool and push through the leaky-ReLU and the conv.
    let (h, w) = (model.patch_h, model.patch_w);
    let (_, pw) = pooled_dims(h, w);
    for i in 0..h {
        for j in 0..w {
            let slot = (i / 2) * pw + j / 2;
            let dact = dpooled[slot] / cache.counts[slot];
            let pre = cache.conv_pre[[i, j]];
            let dpre = dact * if pre >= 0.0 { 1.0 } else { 0.01 };
            grad[9] += dpre; // conv bias
            for di in 0..3usize {
                for dj in 0..3usize {
                    let pi = i as isize + di as isize - 1;
                    let pj = j as isize + dj as isize - 1;
                    if pi >= 0 && pj >= 0 && (pi as usize) < h && (pj as usize) < w {
                        grad[di * 3 + dj] += dpre * patch[[pi as usize, pj as usize]];
                    }
                }
            }
        }
    }
    loss
}

impl RewardModel {
    pub fn param_count(&self) -> usize {
        10 + self.fc.param_count()
    }

    pub fn get_param(&self, idx: usize) -> f64 {
        match idx {
            0..=8 => self.conv.kernel[idx],
            9 => self.conv.bias,
            _ => self.fc.get_param(idx - 10),
        }
    }

    pub fn set_param(&mut self, idx: usize, v: f64) {
        match idx {
            0..=8 => self.conv.kernel[idx] = v,
            9 => self.conv.bias = v,
            _ => self.fc.set_param(idx - 10, v),
        }
    }

    fn step(&mut self, grad: &[f64], lr: f64) {
        for (i, g) in grad.iter().enumerate() {
            let v = self.get_param(i);
            self.set_param(i, v - lr * g);
        }
    }
}

/// Trains a copy of the model for `epochs` passes of per-sample SGD over the
/// store (seeded shuffle per pass). Returns the copy and per-epoch mean BCE.
pub fn reward_update(
    model: &RewardModel,
    store: &SupervisedStore,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<(RewardModel, Vec<f64>)> {
    if store.is_empty() {
        return Err(AtdError::Empty("supervised store"));
    }
    let mut updated = model.clone();
    let mut rng = stream_rng(seed, "reward-epoch", 0);
    let mut order: Vec<usize> = (0..store.len()).collect();
    let mut losses = Vec::with_capacity(epochs);
    let mut grad = vec![0.0; model.param_count()];
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &idx in &order {
            let (patch, label) = &store.pairs()[idx];
            grad.iter_mut().for_each(|g| *g = 0.0);
            total += accumulate_sample_grad(&updated, patch, *label, 1.0, &mut grad);
            updated.step(&grad, lr);
        }
        losses.push(total / store.len() as f64);
    }
    Ok((updated, losses))
}
