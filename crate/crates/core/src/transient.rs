//! The h-transform correction network ("transient memory"), its denoising
//! score-matching trainer, and the scheduler deciding when it retrains
//! during a run.
//!
//! The network sees the noisy state, the Tweedie estimate, the observation
//! values and the reveal mask, and predicts a correction added to the frozen
//! model's noise prediction. Its output layer is zero-initialized, so a fresh
//! model is exactly the zero function and the conditional sampler collapses
//! to the unconditional one bit-for-bit.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

use crate::domain::ObservationSet;
use crate::error::{AtdError, Result};
use crate::nn::{Activation, Checkpoint, Init, Mlp, MlpGrad};
use crate::permanent::{ScoreModel, TrainBuffer};
use crate::schedule::NoiseSchedule;
use crate::seed::stream_rng;

/// Correction network `h(x_t, x0_hat, y, mask, t)`.
#[derive(Debug, Clone)]
pub struct HModel {
    pub net: Mlp,
    pub height: usize,
    pub width: usize,
    pub embed_dim: usize,
}

impl HModel {
    /// Builds a zero-output model: the trunk is randomly initialized (so it
    /// can train), the final layer starts at exact zeros.
    pub fn new(height: usize, width: usize, widths: &[usize], embed_dim: usize, seed: u64) -> Self {
        let pixels = height * width;
        let mut dims = Vec::with_capacity(widths.len() + 2);
        dims.push(4 * pixels + embed_dim);
        dims.extend_from_slice(widths);
        dims.push(pixels);
        let mut rng = stream_rng(seed, "h-init", 0);
        let net = Mlp::new(
            &dims,
            Activation::Silu,
            Activation::Identity,
            Init::Xavier,
            Init::Zeros,
            &mut rng,
        );
        Self {
            net,
            height,
            width,
            embed_dim,
        }
    }

    pub fn checksum(&self) -> u64 {
        self.net.checksum()
    }

    fn assemble_row(
        &self,
        x_t: &[f64],
        x0_hat: &[f64],
        obs_values: &[f64],
        obs_mask: &[f64],
        t: usize,
        out: &mut Vec<f64>,
    ) {
        out.extend_from_slice(x_t);
        out.extend_from_slice(x0_hat);
        out.extend_from_slice(obs_values);
        out.extend_from_slice(obs_mask);
        out.extend_from_slice(&crate::nn::time_embedding(t, self.embed_dim));
    }

    /// Flat-row correction used in the sampler hot path. `obs_values` must
    /// already be masked (zeros where unrevealed).
    pub fn correct_row(
        &self,
        x_t: &[f64],
        x0_hat: &[f64],
        obs_values: &[f64],
        obs_mask: &[f64],
        t: usize,
    ) -> Vec<f64> {
        let mut input = Vec::with_capacity(self.net.in_dim());
        self.assemble_row(x_t, x0_hat, obs_values, obs_mask, t, &mut input);
        self.net.forward(&input, 1)
    }

    pub fn save(&self, path: &Path, schedule: &NoiseSchedule) -> Result<()> {
        let mut ckpt = Checkpoint::new("transient", "h-transform", schedule.content_hash());
        ckpt.tensors.push(crate::nn::NamedTensor {
            name: "meta".into(),
            shape: vec![3],
            data: vec![self.height as f64, self.width as f64, self.embed_dim as f64],
        });
        self.net.export_tensors("net", &mut ckpt.tensors);
        ckpt.save(path)
    }

    pub fn load(path: &Path, widths: &[usize]) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.kind != "transient" {
            return Err(AtdError::CheckpointMismatch(format!(
                "expected a transient checkpoint, got {:?}",
                ckpt.kind
            )));
        }
        let meta = ckpt.tensor("meta")?.data.clone();
        let mut model = HModel::new(meta[0] as usize, meta[1] as usize, widths, meta[2] as usize, 0);
        model.net.import_tensors("net", &ckpt)?;
        Ok(model)
    }
}

/// Grid-shaped correction; the combined noise estimate is
/// `eps_hat = predict_eps + h_correct`.
pub fn h_correct(
    h: &HModel,
    x_t: &Array2<f64>,
    x0_hat: &Array2<f64>,
    obs: &ObservationSet,
    t: usize,
) -> Result<Array2<f64>> {
    let dims = (h.height, h.width);
    if x_t.dim() != dims || x0_hat.dim() != dims || obs.values.dim() != dims {
        return Err(AtdError::ShapeMismatch(format!(
            "h-model grid {:?} vs inputs {:?}/{:?}/{:?}",
            dims,
            x_t.dim(),
            x0_hat.dim(),
            obs.values.dim()
        )));
    }
    let xt: Vec<f64> = x_t.iter().copied().collect();
    let x0: Vec<f64> = x0_hat.iter().copied().collect();
    let vals: Vec<f64> = obs.values.iter().copied().collect();
    let mask: Vec<f64> = obs.mask.iter().copied().collect();
    let out = h.correct_row(&xt, &x0, &vals, &mask, t);
    Ok(Array2::from_shape_vec(dims, out).unwrap())
}

/// One denoising score-matching batch: clean draws, uniform step draws and
/// the injected standard-normal noise.
#[derive(Debug, Clone)]
pub struct DsmBatch {
    pub x0: Vec<Vec<f64>>,
    pub t: Vec<usize>,
    pub eps: Vec<Vec<f64>>,
}

impl DsmBatch {
    /// Draws a batch covering the whole buffer (one `(t, eps)` pair per
    /// sample).
    pub fn draw(buffer: &TrainBuffer, schedule: &NoiseSchedule, rng: &mut ChaCha8Rng) -> Result<Self> {
        if buffer.is_empty() {
            return Err(AtdError::Empty("train buffer"));
        }
        let mut x0 = Vec::with_capacity(buffer.len());
        let mut t = Vec::with_capacity(buffer.len());
        let mut eps = Vec::with_capacity(buffer.len());
        for sample in buffer.samples() {
            x0.push(sample.iter().copied().collect());
            t.push(rng.gen_range(0..schedule.steps()));
            eps.push(
                (0..sample.len())
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            );
        }
        Ok(Self { x0, t, eps })
    }

    /// Draws `size` items sampled from the buffer with replacement.
    pub fn draw_sized(
        buffer: &TrainBuffer,
        schedule: &NoiseSchedule,
        size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if buffer.is_empty() {
            return Err(AtdError::Empty("train buffer"));
        }
        let mut x0 = Vec::with_capacity(size);
        let mut t = Vec::with_capacity(size);
        let mut eps = Vec::with_capacity(size);
        for _ in 0..size {
            let sample = &buffer.samples()[rng.gen_range(0..buffer.len())];
            x0.push(sample.iter().copied().collect());
            t.push(rng.gen_range(0..schedule.steps()));
            eps.push(
                (0..sample.len())
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            );
        }
        Ok(Self { x0, t, eps })
    }

    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }
}

fn obs_rows(obs: &ObservationSet) -> (Vec<f64>, Vec<f64>) {
    (
        obs.values.iter().copied().collect(),
        obs.mask.iter().copied().collect(),
    )
}

/// Forward pass of the DSM objective over one batch. Returns the loss and,
/// when `with_grad` is set, the gradient with respect to the h-parameters.
/// Gradients never flow into the frozen score model.
fn dsm_forward(
    h: &HModel,
    s: &ScoreModel,
    batch: &DsmBatch,
    obs: &ObservationSet,
    with_grad: bool,
) -> Result<(f64, Option<MlpGrad>)> {
    if batch.is_empty() {
        return Err(AtdError::Empty("dsm batch"));
    }
    let schedule = &s.schedule;
    let pixels = h.height * h.width;
    let n = batch.len();
    let (obs_vals, obs_mask) = obs_rows(obs);
    let mut input = Vec::with_capacity(n * h.net.in_dim());
    let mut residual_base = Vec::with_capacity(n * pixels);
    for i in 0..n {
        let t = batch.t[i];
        if t >= schedule.steps() {
            return Err(AtdError::StepOutOfRange {
                step: t,
                steps: schedule.steps(),
            });
        }
        let a = schedule.alpha_bar(t);
        let mut ht = Vec::with_capacity(pixels);
        for (x0v, ev) in batch.x0[i].iter().zip(&batch.eps[i]) {
            ht.push(a.sqrt() * x0v + (1.0 - a).sqrt() * ev);
        }
        let eps_theta = s.predict_eps_row(&ht, t);
        let (inv_sa, coeff) = schedule.tweedie_coeffs(t);
        let x0_hat: Vec<f64> = ht
            .iter()
            .zip(&eps_theta)
            .map(|(x, e)| inv_sa * x - coeff * e)
            .collect();
        h.assemble_row(&ht, &x0_hat, &obs_vals, &obs_mask, t, &mut input);
        for (et, ev) in eps_theta.iter().zip(&batch.eps[i]) {
            residual_base.push(et - ev);
        }
    }
    if with_grad {
        let (out, cache) = h.net.forward_train(&input, n);
        let mut loss = 0.0;
        let mut dl = vec![0.0; out.len()];
        for i in 0..out.len() {
            let r = out[i] + residual_base[i];
            loss += r * r;
            dl[i] = 2.0 * r / n as f64;
        }
        Ok((loss / n as f64, Some(h.net.backward(&cache, &dl))))
    } else {
        let out = h.net.forward(&input, n);
        let mut loss = 0.0;
        for i in 0..out.len() {
            let r = out[i] + residual_base[i];
            loss += r * r;
        }
        Ok((loss / n as f64, None))
    }
}

/// Mean over the batch of `||(h + eps_theta) - eps||^2`.
pub fn dsm_loss(h: &HModel, s: &ScoreModel, batch: &DsmBatch, obs: &ObservationSet) -> Result<f64> {
    dsm_forward(h, s, batch, obs, false).map(|(l, _)| l)
}

/// Gradient of [`dsm_loss`] with respect to the h-parameters.
pub fn dsm_loss_grad(
    h: &HModel,
    s: &ScoreModel,
    batch: &DsmBatch,
    obs: &ObservationSet,
) -> Result<(f64, MlpGrad)> {
    dsm_forward(h, s, batch, obs, true).map(|(l, g)| (l, g.unwrap()))
}

/// Knobs for one h-update.
#[derive(Debug, Clone, Copy)]
pub struct HTrainOpts {
    pub epochs: usize,
    pub lr: f64,
    /// Adam first-moment decay.
    pub momentum: f64,
    /// Maximum tolerated held-out loss increase before the update is rolled
    /// back (pessimistic update).
    pub tau_loss: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
    /// Minibatch size per SGD step; 0 trains full-batch.
    pub batch_size: usize,
}

impl Default for HTrainOpts {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-3,
            momentum: 0.9,
            tau_loss: 1e-6,
            clip: 100.0,
            batch_size: 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HTrainReport {
    /// Training-batch loss per epoch (fresh `(t, eps)` draws every epoch).
    pub epoch_losses: Vec<f64>,
    /// Fixed held-out batch loss after each epoch; comparable across epochs.
    pub holdout_losses: Vec<f64>,
    pub held_out_before: f64,
    pub held_out_after: f64,
    pub rolled_back: bool,
}

/// E-step buffer: posterior draws with the exactly-known coordinates of the
/// true posterior imposed. Feedback is noiseless, so the posterior is a
/// point mass at every revealed pixel; clamping the drawn samples there
/// grounds the score-matching target in the observations. The sampler
/// itself never replaces pixels.
pub fn clamp_to_observations(samples: &mut [Array2<f64>], obs: &ObservationSet) {
    for sample in samples {
        for ((i, j), &m) in obs.mask.indexed_iter() {
            if m == 1.0 {
                sample[[i, j]] = obs.values[[i, j]];
            }
        }
    }
}

/// Trains the h-model on posterior samples, returning the updated model.
/// A fixed held-out batch guards the update: if its DSM loss rises by more
/// than `tau_loss`, the previous parameters are kept.
pub fn train_h(
    h: &HModel,
    s: &ScoreModel,
    buffer: &TrainBuffer,
    obs: &ObservationSet,
    opts: &HTrainOpts,
    seed: u64,
) -> Result<(HModel, HTrainReport)> {
    if buffer.is_empty() {
        return Err(AtdError::Empty("posterior buffer"));
    }
    let mut holdout_rng = stream_rng(seed, "h-holdout", 0);
    let holdout = DsmBatch::draw_sized(buffer, &s.schedule, buffer.len().min(8), &mut holdout_rng)?;
    let held_out_before = dsm_loss(h, s, &holdout, obs)?;
    let mut updated = h.clone();
    let mut optimizer = crate::nn::Adam::new(opts.lr, opts.clip);
    optimizer.beta1 = opts.momentum;
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    let mut holdout_losses = Vec::with_capacity(opts.epochs);
    let steps_per_epoch = if opts.batch_size == 0 {
        1
    } else {
        buffer.len().div_ceil(opts.batch_size)
    };
    for epoch in 0..opts.epochs {
        let mut rng = stream_rng(seed, "h-epoch", epoch as u64);
        let mut epoch_total = 0.0;
        for _ in 0..steps_per_epoch {
            let batch = if opts.batch_size == 0 {
                DsmBatch::draw(buffer, &s.schedule, &mut rng)?
            } else {
                DsmBatch::draw_sized(buffer, &s.schedule, opts.batch_size, &mut rng)?
            };
            let (loss, grad) = dsm_loss_grad(&updated, s, &batch, obs)?;
            updated.net.apply_adam(&grad, &mut optimizer);
            epoch_total += loss;
        }
        epoch_losses.push(epoch_total / steps_per_epoch as f64);
        holdout_losses.push(dsm_loss(&updated, s, &holdout, obs)?);
    }
    let held_out_after = holdout_losses.last().copied().unwrap_or(held_out_before);
    // Written so a non-finite held-out loss also rolls back.
    let rolled_back = !(held_out_after <= held_out_before + opts.tau_loss);
    let result = if rolled_back { h.clone() } else { updated };
    Ok((
        result,
        HTrainReport {
            epoch_losses,
            holdout_losses,
            held_out_before,
            held_out_after,
            rolled_back,
        },
    ))
}

/// When the h-model retrains during a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchedulerMode {
    Adaptive,
    Uniform,
}

/// Scheduled retrain steps for one episode.
#[derive(Debug, Clone)]
pub struct UpdateScheduler {
    pub budget: usize,
    pub total_updates: usize,
    pub gamma: f64,
    pub indices: Vec<usize>,
}

impl UpdateScheduler {
    pub fn adaptive(budget: usize, updates: usize, gamma: f64) -> Result<Self> {
        let indices = schedule_updates(budget, updates, gamma)?;
        Ok(Self {
            budget,
            total_updates: updates,
            gamma,
            indices,
        })
    }

    /// Evenly spaced variant with the same update count.
    pub fn uniform(budget: usize, updates: usize) -> Result<Self> {
        validate_schedule(budget, updates, 1.0)?;
        let interval = budget as f64 / updates as f64;
        let raw: Vec<f64> = (1..=updates).map(|k| k as f64 * interval).collect();
        Ok(Self {
            budget,
            total_updates: updates,
            gamma: 0.0,
            indices: emit_indices(&raw, budget),
        })
    }

    pub fn none(budget: usize) -> Self {
        Self {
            budget,
            total_updates: 0,
            gamma: 0.0,
            indices: Vec::new(),
        }
    }

    pub fn contains(&self, step: usize) -> bool {
        self.indices.binary_search(&step).is_ok()
    }
}

fn validate_schedule(budget: usize, updates: usize, gamma: f64) -> Result<()> {
    if updates < 1 {
        return Err(AtdError::InvalidParam("updates must be >= 1".into()));
    }
    if gamma < 1.0 {
        return Err(AtdError::InvalidParam("gamma must be >= 1".into()));
    }
    if budget < updates {
        return Err(AtdError::InvalidParam(format!(
            "budget {budget} smaller than update count {updates}"
        )));
    }
    Ok(())
}

/// Raw decaying intervals `dt_i = (B/U) * (1 - i/(U+1))^gamma` for
/// `i = 0..U`.
pub fn update_intervals(budget: usize, updates: usize, gamma: f64) -> Result<Vec<f64>> {
    validate_schedule(budget, updates, gamma)?;
    let b = budget as f64;
    let u = updates as f64;
    Ok((0..updates)
        .map(|i| (b / u) * (1.0 - i as f64 / (u + 1.0)).powf(gamma))
        .collect())
}

fn emit_indices(cumulative: &[f64], budget: usize) -> Vec<usize> {
    let mut out: Vec<usize> = cumulative
        .iter()
        .map(|&c| (c.round() as usize).min(budget.saturating_sub(1)))
        .collect();
    out.dedup();
    out
}

/// Scheduled update steps: cumulative sums of the decaying intervals,
/// rounded to integer steps, deduplicated, all below the budget (a sum that
/// lands past the final step is clamped to it).
pub fn schedule_updates(budget: usize, updates: usize, gamma: f64) -> Result<Vec<usize>> {
    let intervals = update_intervals(budget, updates, gamma)?;
    let mut acc = 0.0;
    let cumulative: Vec<f64> = intervals
        .iter()
        .map(|dt| {
            acc += dt;
            acc
        })
        .collect();
    Ok(emit_indices(&cumulative, budget))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::GridSpec;
    use crate::permanent::GmmPrior;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn schedule2() -> NoiseSchedule {
        NoiseSchedule::from_betas(vec![0.5, 0.5], 0.0).unwrap()
    }

    fn std_normal_model(h: usize, w: usize, s: NoiseSchedule) -> ScoreModel {
        ScoreModel::analytic(GmmPrior::standard_normal(h, w), s)
    }

    #[test]
    fn fresh_h_model_outputs_exactly_zero() {
        let h = HModel::new(3, 3, &[32, 64], 32, 7);
        let grid = GridSpec::new(3, 3, 1, 1).unwrap();
        let obs = ObservationSet::empty(&grid);
        let x = Array2::from_elem((3, 3), 1.4);
        let x0 = Array2::from_elem((3, 3), -0.2);
        let out = h_correct(&h, &x, &x0, &obs, 0).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
        // All-zero parameters also give the zero function.
        let mut zeroed = h.clone();
        for i in 0..zeroed.net.param_count() {
            zeroed.net.set_param(i, 0.0);
        }
        let out = h_correct(&zeroed, &x, &x0, &obs, 1).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dsm_loss_pencil_arithmetic_scalar_grid() {
        // 1x1 grid, standard-normal prior, beta = (0.5, 0.5), t = 1 so
        // abar = 0.25. x0 = 0.8, eps = 0.2. With a zero h the residual is
        // eps_theta - eps where eps_theta = sqrt(1 - abar) * H_t.
        let s = std_normal_model(1, 1, schedule2());
        let h = HModel::new(1, 1, &[4], 4, 0);
        let grid = GridSpec::new(1, 1, 1, 1).unwrap();
        let obs = ObservationSet::empty(&grid);
        let batch = DsmBatch {
            x0: vec![vec![0.8]],
            t: vec![1],
            eps: vec![vec![0.2]],
        };
        let loss = dsm_loss(&h, &s, &batch, &obs).unwrap();
        let ht = 0.25f64.sqrt() * 0.8 + 0.75f64.sqrt() * 0.2;
        let eps_theta = 0.75f64.sqrt() * ht;
        let expect = (eps_theta - 0.2) * (eps_theta - 0.2);
        assert_relative_eq!(loss, expect, max_relative = 1e-12);
        assert_relative_eq!(loss, 0.0878590, max_relative = 1e-5);
    }

    #[test]
    fn dsm_loss_exact_fit_is_zero() {
        // Choose eps so that eps_theta(H_t) == eps; with h == 0 the loss is 0.
        let sched = schedule2();
        let s = std_normal_model(1, 1, sched);
        let h = HModel::new(1, 1, &[4], 4, 0);
        let grid = GridSpec::new(1, 1, 1, 1).unwrap();
        let obs = ObservationSet::empty(&grid);
        let x0 = 0.6;
        let a: f64 = 0.25;
        let eps = x0 * (1.0 - a).sqrt() / a.sqrt();
        let batch = DsmBatch {
            x0: vec![vec![x0]],
            t: vec![1],
            eps: vec![vec![eps]],
        };
        let loss = dsm_loss(&h, &s, &batch, &obs).unwrap();
        assert!(loss.abs() < 1e-24, "loss {loss}");
    }

    #[test]
    fn dsm_loss_reduces_to_frozen_model_residual_for_zero_h() {
        let sched = NoiseSchedule::linear(30, 1e-4, 0.2, 0.0).unwrap();
        let s = std_normal_model(2, 2, sched.clone());
        let h = HModel::new(2, 2, &[8], 4, 3);
        let grid = GridSpec::new(2, 2, 1, 1).unwrap();
        let obs = ObservationSet::empty(&grid);
        let mut rng = stream_rng(1, "batch", 0);
        let buffer =
            TrainBuffer::from_samples(vec![array![[0.1, 0.9], [0.4, 0.6]]]).unwrap();
        let batch = DsmBatch::draw(&buffer, &sched, &mut rng).unwrap();
        let loss = dsm_loss(&h, &s, &batch, &obs).unwrap();
        // Recompute the frozen model residual directly.
        let t = batch.t[0];
        let a = sched.alpha_bar(t);
        let mut res = 0.0;
        for (x0v, ev) in batch.x0[0].iter().zip(&batch.eps[0]) {
            let htv = a.sqrt() * x0v + (1.0 - a).sqrt() * ev;
            let eps_theta = (1.0 - a).sqrt() * htv;
            res += (eps_theta - ev) * (eps_theta - ev);
        }
        assert_relative_eq!(loss, res, max_relative = 1e-12);
    }

    #[test]
    fn dsm_gradient_matches_central_differences() {
        let sched = NoiseSchedule::linear(8, 1e-3, 0.15, 0.0).unwrap();
        let s = std_normal_model(2, 2, sched.clone());
        let mut h = HModel::new(2, 2, &[6], 4, 5);
        // Give the output layer nonzero values so the check exercises every
        // layer.
        let n = h.net.param_count();
        for i in 0..n {
            if h.net.get_param(i) == 0.0 {
                h.net.set_param(i, 0.01 * ((i % 13) as f64 - 6.0));
            }
        }
        let grid = GridSpec::new(2, 2, 1, 1).unwrap();
        let mut obs = ObservationSet::empty(&grid);
        obs.values[[0, 0]] = 0.8;
        obs.mask[[0, 0]] = 1.0;
        obs.queried.push(0);
        let buffer = TrainBuffer::from_samples(vec![
            array![[0.2, 0.7], [0.5, 0.1]],
            array![[0.9, 0.3], [0.6, 0.8]],
        ])
        .unwrap();
        let mut rng = stream_rng(2, "batch", 1);
        let batch = DsmBatch::draw(&buffer, &sched, &mut rng).unwrap();
        let (_, grad) = dsm_loss_grad(&h, &s, &batch, &obs).unwrap();
        let step = 1e-6;
        let mut checked = 0;
        for idx in 0..n {
            let orig = h.net.get_param(idx);
            h.net.set_param(idx, orig + step);
            let lp = dsm_loss(&h, &s, &batch, &obs).unwrap();
            h.net.set_param(idx, orig - step);
            let lm = dsm_loss(&h, &s, &batch, &obs).unwrap();
            h.net.set_param(idx, orig);
            let numeric = (lp - lm) / (2.0 * step);
            let analytic = grad.0[idx];
            let denom = numeric.abs().max(analytic.abs());
            if denom < 1e-6 {
                continue;
            }
            assert!(
                ((numeric - analytic) / denom).abs() < 1e-3,
                "param {idx}: fd {numeric} vs analytic {analytic}"
            );
            checked += 1;
        }
        assert!(checked > n / 2, "only {checked} of {n} params checkable");
    }

    #[test]
    fn empty_batch_and_buffer_error() {
        let sched = schedule2();
        let s = std_normal_model(1, 1, sched.clone());
        let h = HModel::new(1, 1, &[4], 4, 0);
        let grid = GridSpec::new(1, 1, 1, 1).unwrap();
        let obs = ObservationSet::empty(&grid);
        let batch = DsmBatch {
            x0: vec![],
            t: vec![],
            eps: vec![],
        };
        assert!(dsm_loss(&h, &s, &batch, &obs).is_err());
        let buf = TrainBuffer::new(4);
        assert!(train_h(&h, &s, &buf, &obs, &HTrainOpts::default(), 0).is_err());
    }

    #[test]
    fn train_h_zero_lr_is_identity_and_loss_trend_holds() {
        let sched = NoiseSchedule::linear(10, 1e-3, 0.2, 0.0).unwrap();
        let s = std_normal_model(2, 2, sched.clone());
        let h = HModel::new(2, 2, &[8, 8], 4, 1);
        let grid = GridSpec::new(2, 2, 1, 1).unwrap();
        let mut obs = ObservationSet::empty(&grid);
        obs.values[[1, 1]] = 1.0;
        obs.mask[[1, 1]] = 1.0;
        obs.queried.push(3);
        let mut samples = Vec::new();
        let mut rng = stream_rng(8, "trend-buffer", 0);
        for _ in 0..16 {
            samples.push(Array2::from_shape_fn((2, 2), |_| rng.gen_range(0.0..1.0)));
        }
        let buffer = TrainBuffer::from_samples(samples).unwrap();
        let frozen = HTrainOpts {
            epochs: 4,
            lr: 0.0,
            momentum: 0.0,
            tau_loss: 1e-6,
            clip: 100.0,
            batch_size: 4,
        };
        let (same, _) = train_h(&h, &s, &buffer, &obs, &frozen, 9).unwrap();
        assert_eq!(same.checksum(), h.checksum());

        let opts = HTrainOpts {
            epochs: 40,
            lr: 1e-3,
            momentum: 0.9,
            tau_loss: 1e-6,
            clip: 100.0,
            batch_size: 4,
        };
        let (_, report) = train_h(&h, &s, &buffer, &obs, &opts, 9).unwrap();
        // The held-out batch is fixed, so its loss is comparable across
        // epochs; assert the 5-epoch moving average never rises.
        let avg: Vec<f64> = report
            .holdout_losses
            .windows(5)
            .map(|w| w.iter().sum::<f64>() / 5.0)
            .collect();
        for pair in avg.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-4, "rise {} -> {}", pair[0], pair[1]);
        }
        assert!(report.held_out_after <= report.held_out_before + opts.tau_loss || report.rolled_back);
    }

    #[test]
    fn train_h_never_touches_frozen_model() {
        let sched = NoiseSchedule::linear(10, 1e-3, 0.2, 0.0).unwrap();
        let s = std_normal_model(2, 2, sched.clone());
        let before = s.param_checksum();
        let h = HModel::new(2, 2, &[8], 4, 1);
        let grid = GridSpec::new(2, 2, 1, 1).unwrap();
        let obs = ObservationSet::empty(&grid);
        let buffer = TrainBuffer::from_samples(vec![array![[0.5, 0.5], [0.5, 0.5]]]).unwrap();
        for round in 0..3 {
            let _ = train_h(&h, &s, &buffer, &obs, &HTrainOpts::default(), round).unwrap();
            assert_eq!(s.param_checksum(), before);
        }
    }

    #[test]
    fn scheduler_interval_hand_values() {
        let dts = update_intervals(200, 30, 1.0).unwrap();
        assert_relative_eq!(dts[0], 200.0 / 30.0, max_relative = 1e-15);
        assert_relative_eq!(dts[0], 6.666666666666667, max_relative = 1e-12);
        assert_relative_eq!(dts[29], 200.0 / 30.0 * (2.0 / 31.0), max_relative = 1e-12);
        assert_relative_eq!(dts[29], 0.43010752688172044, max_relative = 1e-12);
        for pair in dts.windows(2) {
            assert!(pair[1] < pair[0]);
        }
        assert!(dts.iter().sum::<f64>() <= 200.0);
    }

    #[test]
    fn scheduler_single_update_emits_one_index() {
        let steps = schedule_updates(100, 1, 1.0).unwrap();
        assert_eq!(steps.len(), 1);
        assert!(steps[0] < 100);
    }

    #[test]
    fn scheduler_emitted_strictly_increasing_below_budget() {
        for &(b, u, g) in &[(200usize, 30usize, 1.0f64), (250, 30, 2.0), (150, 10, 1.5), (64, 64, 1.0)] {
            let steps = schedule_updates(b, u, g).unwrap();
            assert!(!steps.is_empty());
            for pair in steps.windows(2) {
                assert!(pair[1] > pair[0]);
            }
            assert!(*steps.last().unwrap() < b);
        }
    }

    #[test]
    fn scheduler_gamma_skews_updates_later() {
        let low = update_intervals(200, 10, 1.0).unwrap();
        let high = update_intervals(200, 10, 3.0).unwrap();
        assert!(high[0] >= low[0]);
        // Larger gamma shrinks later intervals.
        assert!(high[9] < low[9]);
    }

    #[test]
    fn scheduler_rejects_invalid_params() {
        assert!(schedule_updates(10, 0, 1.0).is_err());
        assert!(schedule_updates(10, 3, 0.5).is_err());
        assert!(schedule_updates(2, 3, 1.0).is_err());
    }

    #[test]
    fn uniform_scheduler_spacing() {
        let s = UpdateScheduler::uniform(100, 5).unwrap();
        assert_eq!(s.indices, vec![20, 40, 60, 80, 99]);
        assert!(s.contains(40));
        assert!(!s.contains(41));
    }
}
