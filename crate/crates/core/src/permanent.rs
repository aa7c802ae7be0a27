//! The frozen prior score model ("permanent memory").
//!
//! Two backends sit behind one interface: an analytic Gaussian-mixture score
//! (exact, the default for formula-level tests) and a tiny trainable
//! denoiser network. Both predict the forward noise `eps_hat` so the sampler
//! and the h-transform trainer never care which one they talk to. The model
//! is immutable during a run; training operations return fresh copies.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use std::path::Path;

use crate::error::{AtdError, Result};
use crate::nn::{Activation, Checkpoint, Init, Mlp};
use crate::schedule::NoiseSchedule;
use crate::seed::{stream_rng, StableHasher};

/// Pool of clean grid samples used for denoiser training.
#[derive(Debug, Clone)]
pub struct TrainBuffer {
    samples: Vec<Array2<f64>>,
    capacity: usize,
}

impl TrainBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            samples: Vec::new(),
            capacity,
        }
    }

    pub fn from_samples(samples: Vec<Array2<f64>>) -> Result<Self> {
        let capacity = samples.len().max(1);
        let mut buf = Self::new(capacity);
        for s in samples {
            buf.push(s)?;
        }
        Ok(buf)
    }

    /// Appends a sample, evicting the oldest once at capacity.
    pub fn push(&mut self, sample: Array2<f64>) -> Result<()> {
        if let Some(first) = self.samples.first() {
            if first.dim() != sample.dim() {
                return Err(AtdError::ShapeMismatch(format!(
                    "buffer holds {:?}, got {:?}",
                    first.dim(),
                    sample.dim()
                )));
            }
        }
        if self.samples.len() == self.capacity {
            self.samples.remove(0);
        }
        self.samples.push(sample);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Array2<f64>] {
        &self.samples
    }
}

/// Isotropic Gaussian mixture over full grids, diffused in closed form.
#[derive(Debug, Clone)]
pub struct GmmPrior {
    means: Vec<Vec<f64>>,
    log_weights: Vec<f64>,
    sigma: f64,
    height: usize,
    width: usize,
}

impl GmmPrior {
    pub fn new(means: Vec<Array2<f64>>, weights: Vec<f64>, sigma: f64) -> Result<Self> {
        if means.is_empty() || means.len() != weights.len() {
            return Err(AtdError::InvalidParam(
                "mixture needs matching means and weights".into(),
            ));
        }
        if sigma <= 0.0 {
            return Err(AtdError::InvalidParam("component sigma must be > 0".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 || weights.iter().any(|&w| w < 0.0) {
            return Err(AtdError::InvalidParam("weights must be non-negative".into()));
        }
        let (h, w) = means[0].dim();
        if means.iter().any(|m| m.dim() != (h, w)) {
            return Err(AtdError::ShapeMismatch("mixture mean shapes differ".into()));
        }
        Ok(Self {
            means: means
                .into_iter()
                .map(|m| m.into_raw_vec_and_offset().0)
                .collect(),
            log_weights: weights.iter().map(|&w| (w / total).ln()).collect(),
            sigma,
            height: h,
            width: w,
        })
    }

    /// Standard normal prior: a single zero-mean unit-variance component.
    pub fn standard_normal(height: usize, width: usize) -> Self {
        Self::new(vec![Array2::zeros((height, width))], vec![1.0], 1.0).unwrap()
    }

    /// Fixed three-blob mixture used as the canonical synthetic prior. The
    /// corpus generator draws from exactly this mixture so distributional
    /// oracles can compare against the analytic backend. Means stay inside
    /// [0.2, 0.7] and the component sigma is small, so clamping draws to
    /// [0, 1] moves well under 1% of the mass.
    pub fn canonical_blobs(height: usize, width: usize) -> Self {
        let centers = [(0.3, 0.3), (0.7, 0.6), (0.4, 0.75)];
        let weights = vec![0.5, 0.3, 0.2];
        let mut means = Vec::new();
        for &(cy, cx) in &centers {
            let mut m = Array2::zeros((height, width));
            let ry = cy * (height as f64 - 1.0);
            let rx = cx * (width as f64 - 1.0);
            let scale = (height.min(width) as f64) / 5.0;
            for ((i, j), v) in m.indexed_iter_mut() {
                let d2 = ((i as f64 - ry).powi(2) + (j as f64 - rx).powi(2)) / (scale * scale);
                *v = 0.2 + 0.5 * (-0.5 * d2).exp();
            }
            means.push(m);
        }
        Self::new(means, weights, 0.08).unwrap()
    }

    pub fn components(&self) -> usize {
        self.means.len()
    }

    fn marginal_var(&self, schedule: &NoiseSchedule, t: usize) -> f64 {
        let a = schedule.alpha_bar(t);
        a * self.sigma * self.sigma + (1.0 - a)
    }

    /// Log density of the diffused mixture at step `t`.
    pub fn log_density(&self, x: &[f64], schedule: &NoiseSchedule, t: usize) -> f64 {
        let a = schedule.alpha_bar(t);
        let v = self.marginal_var(schedule, t);
        let dim = x.len() as f64;
        let log_norm = -0.5 * dim * (2.0 * std::f64::consts::PI * v).ln();
        let mut terms = Vec::with_capacity(self.means.len());
        for (mean, &lw) in self.means.iter().zip(&self.log_weights) {
            let mut d2 = 0.0;
            for (xv, mv) in x.iter().zip(mean) {
                let d = xv - a.sqrt() * mv;
                d2 += d * d;
            }
            terms.push(lw - d2 / (2.0 * v) + log_norm);
        }
        log_sum_exp(&terms)
    }

    /// Noise prediction `-sqrt(1 - abar_t) * grad log p_t(x)` in closed form.
    fn predict_eps_row(&self, x: &[f64], schedule: &NoiseSchedule, t: usize, out: &mut [f64]) {
        let a = schedule.alpha_bar(t);
        let v = self.marginal_var(schedule, t);
        let sa = a.sqrt();
        let mut logits = Vec::with_capacity(self.means.len());
        for (mean, &lw) in self.means.iter().zip(&self.log_weights) {
            let mut d2 = 0.0;
            for (xv, mv) in x.iter().zip(mean) {
                let d = xv - sa * mv;
                d2 += d * d;
            }
            logits.push(lw - d2 / (2.0 * v));
        }
        let lse = log_sum_exp(&logits);
        let scale = (1.0 - a).sqrt() / v;
        out.fill(0.0);
        for (mean, &logit) in self.means.iter().zip(&logits) {
            let resp = (logit - lse).exp();
            if resp == 0.0 {
                continue;
            }
            for ((o, xv), mv) in out.iter_mut().zip(x).zip(mean) {
                *o += resp * scale * (xv - sa * mv);
            }
        }
    }

    /// Draws one clean sample from the mixture.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Array2<f64> {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut pick = self.means.len() - 1;
        for (k, &lw) in self.log_weights.iter().enumerate() {
            acc += lw.exp();
            if u < acc {
                pick = k;
                break;
            }
        }
        let data: Vec<f64> = self.means[pick]
            .iter()
            .map(|&m| m + self.sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Array2::from_shape_vec((self.height, self.width), data).unwrap()
    }

    pub fn mixture_cdf_at_pixel(&self, pixel: usize, value: f64) -> f64 {
        // Marginal at one pixel is a 1-d mixture of normals.
        self.means
            .iter()
            .zip(&self.log_weights)
            .map(|(m, &lw)| lw.exp() * normal_cdf((value - m[pixel]) / self.sigma))
            .sum()
    }
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

// Abramowitz-Stegun 7.1.26, |err| < 1.5e-7; plenty for distributional tests.
fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let y = 1.0
        - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t
            + 0.254829592)
            * t
            * (-x * x).exp();
    sign * y
}

pub fn log_sum_exp(vals: &[f64]) -> f64 {
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Dense denoiser: a per-pixel Gaussian baseline plus a tiny MLP
/// correction.
///
/// The baseline is the optimal linear noise predictor for an independent
/// Gaussian fit `N(mean_p, var_p)` to the training corpus:
/// `sqrt(1-abar) (x_p - sqrt(abar) mean_p) / (abar var_p + 1 - abar)`.
/// It carries the full-rank linear structure that could never pass through
/// the narrow hidden layers; the network only learns the nonlinear
/// correction on top, `eps_hat = baseline(x, t) + net(x, emb(t))`.
#[derive(Debug, Clone)]
pub struct DenoiserNet {
    pub net: Mlp,
    pub baseline_mean: Vec<f64>,
    pub baseline_var: Vec<f64>,
    /// Nearest-neighbor correlation of the fitted Gaussian; couples the
    /// baseline score locally (first-order Neumann term), which is what
    /// lets evidence at one pixel spill to its neighbours during sampling.
    pub baseline_rho: f64,
    pub height: usize,
    pub width: usize,
    pub embed_dim: usize,
}

impl DenoiserNet {
    pub fn new(height: usize, width: usize, hidden: usize, embed_dim: usize, seed: u64) -> Self {
        let pixels = height * width;
        let mut rng = stream_rng(seed, "denoiser-init", 0);
        let net = Mlp::new(
            &[pixels + embed_dim, hidden, hidden, pixels],
            Activation::Silu,
            Activation::Identity,
            Init::Xavier,
            Init::Zeros,
            &mut rng,
        );
        Self {
            net,
            baseline_mean: vec![0.0; pixels],
            baseline_var: vec![1.0; pixels],
            baseline_rho: 0.0,
            height,
            width,
            embed_dim,
        }
    }

    /// Fits the baseline statistics to a corpus (with a variance floor so
    /// constant pixels stay well-conditioned), including the average
    /// nearest-neighbor correlation.
    pub fn fit_baseline(&mut self, buffer: &TrainBuffer) {
        let pixels = self.height * self.width;
        let n = buffer.len() as f64;
        let mut mean = vec![0.0; pixels];
        for s in buffer.samples() {
            for (m, &v) in mean.iter_mut().zip(s.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; pixels];
        for s in buffer.samples() {
            for ((vv, &v), m) in var.iter_mut().zip(s.iter()).zip(&mean) {
                let d = v - m;
                *vv += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v = (*v / n).max(1e-3));
        // Average correlation between horizontally/vertically adjacent
        // pixels under the fitted means/variances.
        let (h, w) = (self.height, self.width);
        let mut cov_sum = 0.0;
        let mut pairs = 0.0;
        for s in buffer.samples() {
            let flat: Vec<f64> = s.iter().copied().collect();
            for i in 0..h {
                for j in 0..w {
                    let p = i * w + j;
                    if j + 1 < w {
                        let q = p + 1;
                        cov_sum += (flat[p] - mean[p]) * (flat[q] - mean[q])
                            / (var[p] * var[q]).sqrt();
                        pairs += 1.0;
                    }
                    if i + 1 < h {
                        let q = p + w;
                        cov_sum += (flat[p] - mean[p]) * (flat[q] - mean[q])
                            / (var[p] * var[q]).sqrt();
                        pairs += 1.0;
                    }
                }
            }
        }
        self.baseline_rho = if pairs > 0.0 {
            (cov_sum / (pairs / n) / n).clamp(0.0, 0.9)
        } else {
            0.0
        };
        self.baseline_mean = mean;
        self.baseline_var = var;
    }

    /// Baseline noise prediction for the fitted Gaussian
    /// `N(mean, D^(1/2)(I + rho N)D^(1/2))` with `N` the 4-neighbour
    /// averaging stencil, diffused to step `t`. Uses a first-order expansion
    /// of the precision in `rho`:
    /// `eps = sqrt(1-abar) [u - rho A0^-1 C u]`, `u = A0^-1 (x - sqrt(abar) mean)`.
    fn baseline_eps(&self, x: &[f64], schedule: &NoiseSchedule, t: usize, out: &mut [f64]) {
        let a = schedule.alpha_bar(t);
        let sa = a.sqrt();
        let coeff = (1.0 - a).sqrt();
        let (h, w) = (self.height, self.width);
        // u = A0^-1 r with A0 = diag(abar var + 1 - abar)
        for (((o, xv), m), v) in out
            .iter_mut()
            .zip(x)
            .zip(&self.baseline_mean)
            .zip(&self.baseline_var)
        {
            *o = (xv - sa * m) / (a * v + 1.0 - a);
        }
        if self.baseline_rho > 0.0 {
            let rho = self.baseline_rho;
            let u: Vec<f64> = out.to_vec();
            for i in 0..h {
                for j in 0..w {
                    let p = i * w + j;
                    let sp = self.baseline_var[p].sqrt();
                    let mut acc = 0.0;
                    let mut count = 0.0;
                    let mut add = |q: usize| {
                        acc += self.baseline_var[q].sqrt() * u[q];
                        count += 1.0;
                    };
                    if i > 0 {
                        add(p - w);
                    }
                    if i + 1 < h {
                        add(p + w);
                    }
                    if j > 0 {
                        add(p - 1);
                    }
                    if j + 1 < w {
                        add(p + 1);
                    }
                    // C = abar * D^(1/2) N D^(1/2), N row-normalized.
                    let c_u = a * sp * acc / count.max(1.0);
                    out[p] -= rho * c_u / (a * self.baseline_var[p] + 1.0 - a);
                }
            }
        }
        for o in out.iter_mut() {
            *o *= coeff;
        }
    }

    fn assemble_input(&self, x: &[f64], t: usize, out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(x);
        out.extend_from_slice(&crate::nn::time_embedding(t, self.embed_dim));
    }
}

#[derive(Debug, Clone)]
pub enum ScoreBackend {
    AnalyticGmm(GmmPrior),
    TinyDenoiser(DenoiserNet),
}

/// Prior score model bound to the noise schedule it was built for.
#[derive(Debug, Clone)]
pub struct ScoreModel {
    pub backend: ScoreBackend,
    pub schedule: NoiseSchedule,
}

/// Hyperparameters for denoiser training runs.
#[derive(Debug, Clone, Copy)]
pub struct TrainOpts {
    pub epochs: usize,
    pub lr: f64,
    /// Adam first-moment decay.
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
}

impl Default for TrainOpts {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr: 1e-2,
            momentum: 0.9,
            batch_size: 32,
            seed: 0,
            clip: 100.0,
        }
    }
}

impl ScoreModel {
    pub fn analytic(prior: GmmPrior, schedule: NoiseSchedule) -> Self {
        Self {
            backend: ScoreBackend::AnalyticGmm(prior),
            schedule,
        }
    }

    pub fn backend_tag(&self) -> &'static str {
        match self.backend {
            ScoreBackend::AnalyticGmm(_) => "analytic-gmm",
            ScoreBackend::TinyDenoiser(_) => "tiny-denoiser",
        }
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        match &self.backend {
            ScoreBackend::AnalyticGmm(g) => (g.height, g.width),
            ScoreBackend::TinyDenoiser(d) => (d.height, d.width),
        }
    }

    /// Flat-row noise prediction used by the sampler hot path.
    pub fn predict_eps_row(&self, x: &[f64], t: usize) -> Vec<f64> {
        match &self.backend {
            ScoreBackend::AnalyticGmm(g) => {
                let mut out = vec![0.0; x.len()];
                g.predict_eps_row(x, &self.schedule, t, &mut out);
                out
            }
            ScoreBackend::TinyDenoiser(d) => {
                let mut out = vec![0.0; x.len()];
                d.baseline_eps(x, &self.schedule, t, &mut out);
                let mut input = Vec::with_capacity(x.len() + d.embed_dim);
                d.assemble_input(x, t, &mut input);
                let corr = d.net.forward(&input, 1);
                for (o, c) in out.iter_mut().zip(&corr) {
                    *o += c;
                }
                out
            }
        }
    }

    /// Grid-shaped noise prediction.
    pub fn predict_eps(&self, x_t: &Array2<f64>, t: usize) -> Result<Array2<f64>> {
        if t >= self.schedule.steps() {
            return Err(AtdError::StepOutOfRange {
                step: t,
                steps: self.schedule.steps(),
            });
        }
        let dims = x_t.dim();
        if dims != self.grid_dims() {
            return Err(AtdError::ShapeMismatch(format!(
                "x_t {:?} vs model grid {:?}",
                dims,
                self.grid_dims()
            )));
        }
        let row: Vec<f64> = x_t.iter().copied().collect();
        let out = self.predict_eps_row(&row, t);
        Ok(Array2::from_shape_vec(dims, out).unwrap())
    }

    /// Stable checksum of all parameters; constant across a run by contract.
    pub fn param_checksum(&self) -> u64 {
        match &self.backend {
            ScoreBackend::AnalyticGmm(g) => {
                let mut h = StableHasher::new("gmm-prior");
                for m in &g.means {
                    h.write_f64_slice(m);
                }
                h.write_f64_slice(&g.log_weights);
                h.write_f64(g.sigma);
                h.finish()
            }
            ScoreBackend::TinyDenoiser(d) => {
                let mut h = StableHasher::new("denoiser-params");
                h.write_f64_slice(&d.baseline_mean);
                h.write_f64_slice(&d.baseline_var);
                h.write_u64(d.net.checksum());
                h.finish()
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let denoiser = match &self.backend {
            ScoreBackend::TinyDenoiser(d) => d,
            ScoreBackend::AnalyticGmm(_) => {
                return Err(AtdError::BackendMismatch("analytic-gmm"));
            }
        };
        let mut ckpt = Checkpoint::new("permanent", "tiny-denoiser", self.schedule.content_hash());
        ckpt.tensors.push(crate::nn::NamedTensor {
            name: "meta".into(),
            shape: vec![3],
            data: vec![
                denoiser.height as f64,
                denoiser.width as f64,
                denoiser.embed_dim as f64,
            ],
        });
        let pixels = denoiser.height * denoiser.width;
        ckpt.tensors.push(crate::nn::NamedTensor {
            name: "baseline.mean".into(),
            shape: vec![pixels],
            data: denoiser.baseline_mean.clone(),
        });
        ckpt.tensors.push(crate::nn::NamedTensor {
            name: "baseline.var".into(),
            shape: vec![pixels],
            data: denoiser.baseline_var.clone(),
        });
        denoiser.net.export_tensors("net", &mut ckpt.tensors);
        ckpt.save(path)
    }

    pub fn load(path: &Path, schedule: NoiseSchedule) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.kind != "permanent" || ckpt.backend != "tiny-denoiser" {
            return Err(AtdError::CheckpointMismatch(format!(
                "expected a permanent tiny-denoiser checkpoint, got {}/{}",
                ckpt.kind, ckpt.backend
            )));
        }
        let expect = format!("{:016x}", schedule.content_hash());
        if ckpt.schedule_hash != expect {
            return Err(AtdError::CheckpointMismatch(
                "checkpoint was trained under a different noise schedule".into(),
            ));
        }
        let meta = ckpt.tensor("meta")?.data.clone();
        let (h, w, e) = (meta[0] as usize, meta[1] as usize, meta[2] as usize);
        // Hidden width is recovered from the stored tensor shapes.
        let l0 = ckpt.tensor("net.0.w")?;
        let hidden = l0.shape[0];
        let mut denoiser = DenoiserNet::new(h, w, hidden, e, 0);
        denoiser.baseline_mean = ckpt.tensor("baseline.mean")?.data.clone();
        denoiser.baseline_var = ckpt.tensor("baseline.var")?.data.clone();
        if denoiser.baseline_mean.len() != h * w || denoiser.baseline_var.len() != h * w {
            return Err(AtdError::CheckpointMismatch("baseline tensor shape".into()));
        }
        denoiser.net.import_tensors("net", &ckpt)?;
        Ok(Self {
            backend: ScoreBackend::TinyDenoiser(denoiser),
            schedule,
        })
    }
}

/// Loss traces from one denoiser training run.
#[derive(Debug, Clone, Default)]
pub struct DsmTrainReport {
    /// Mean training loss per epoch (fresh noise draws each epoch).
    pub epoch_losses: Vec<f64>,
    /// Loss on a fixed `(x0, t, eps)` evaluation batch after each epoch;
    /// comparable across epochs.
    pub eval_losses: Vec<f64>,
}

struct DsmEvalBatch {
    /// Flat `[x_t, emb]` rows for the net.
    input: Vec<f64>,
    /// Injected noise minus the baseline prediction: what the net must fit.
    residual_target: Vec<f64>,
    n: usize,
}

fn dsm_eval_batch(
    denoiser: &DenoiserNet,
    schedule: &NoiseSchedule,
    buffer: &TrainBuffer,
    seed: u64,
) -> DsmEvalBatch {
    let pixels = denoiser.height * denoiser.width;
    let mut rng = stream_rng(seed, "dsm-eval", 0);
    let n = buffer.len().min(64);
    let mut input = Vec::with_capacity(n * (pixels + denoiser.embed_dim));
    let mut residual_target = Vec::with_capacity(n * pixels);
    let mut xt = vec![0.0; pixels];
    let mut base = vec![0.0; pixels];
    for x0 in buffer.samples().iter().take(n) {
        let t = rng.gen_range(0..schedule.steps());
        let a = schedule.alpha_bar(t);
        for (slot, &v) in xt.iter_mut().zip(x0.iter()) {
            let eps: f64 = rng.sample(StandardNormal);
            *slot = a.sqrt() * v + (1.0 - a).sqrt() * eps;
            residual_target.push(eps);
        }
        denoiser.baseline_eps(&xt, schedule, t, &mut base);
        let offset = residual_target.len() - pixels;
        for (slot, b) in residual_target[offset..].iter_mut().zip(&base) {
            *slot -= b;
        }
        input.extend_from_slice(&xt);
        input.extend_from_slice(&crate::nn::time_embedding(t, denoiser.embed_dim));
    }
    DsmEvalBatch {
        input,
        residual_target,
        n,
    }
}

fn dsm_eval_loss(denoiser: &DenoiserNet, batch: &DsmEvalBatch) -> f64 {
    let out = denoiser.net.forward(&batch.input, batch.n);
    out.iter()
        .zip(&batch.residual_target)
        .map(|(o, t)| (o - t) * (o - t))
        .sum::<f64>()
        / batch.n as f64
}

/// One DSM training pass over the buffer.
fn dsm_train(
    denoiser: &mut DenoiserNet,
    schedule: &NoiseSchedule,
    buffer: &TrainBuffer,
    opts: &TrainOpts,
) -> Result<DsmTrainReport> {
    if buffer.is_empty() {
        return Err(AtdError::Empty("train buffer"));
    }
    let pixels = denoiser.height * denoiser.width;
    let eval = dsm_eval_batch(denoiser, schedule, buffer, opts.seed);
    let mut rng = stream_rng(opts.seed, "dsm-train", 0);
    let mut optimizer = crate::nn::Adam::new(opts.lr, opts.clip);
    optimizer.beta1 = opts.momentum;
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    let mut eval_losses = Vec::with_capacity(opts.epochs);
    let mut order: Vec<usize> = (0..buffer.len()).collect();
    let mut xt = vec![0.0; pixels];
    let mut base = vec![0.0; pixels];
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(opts.batch_size.max(1)) {
            let batch = chunk.len();
            let mut input = Vec::with_capacity(batch * (pixels + denoiser.embed_dim));
            let mut residual_target = Vec::with_capacity(batch * pixels);
            for &idx in chunk {
                let x0 = &buffer.samples()[idx];
                let t = rng.gen_range(0..schedule.steps());
                let a = schedule.alpha_bar(t);
                for (slot, &v) in xt.iter_mut().zip(x0.iter()) {
                    let eps: f64 = rng.sample(StandardNormal);
                    *slot = a.sqrt() * v + (1.0 - a).sqrt() * eps;
                    residual_target.push(eps);
                }
                denoiser.baseline_eps(&xt, schedule, t, &mut base);
                let offset = residual_target.len() - pixels;
                for (slot, b) in residual_target[offset..].iter_mut().zip(&base) {
                    *slot -= b;
                }
                input.extend_from_slice(&xt);
                input.extend_from_slice(&crate::nn::time_embedding(t, denoiser.embed_dim));
            }
            let (out, cache) = denoiser.net.forward_train(&input, batch);
            let mut dl = vec![0.0; out.len()];
            let mut loss = 0.0;
            for i in 0..out.len() {
                let err = out[i] - residual_target[i];
                loss += err * err;
                dl[i] = 2.0 * err / batch as f64;
            }
            loss /= batch as f64;
            let grad = denoiser.net.backward(&cache, &dl);
            denoiser.net.apply_adam(&grad, &mut optimizer);
            total += loss;
            batches += 1.0;
        }
        epoch_losses.push(total / batches);
        eval_losses.push(dsm_eval_loss(denoiser, &eval));
    }
    Ok(DsmTrainReport {
        epoch_losses,
        eval_losses,
    })
}

/// Trains a tiny denoiser from scratch on the buffer by denoising score
/// matching.
pub fn pretrain_denoiser(
    buffer: &TrainBuffer,
    schedule: &NoiseSchedule,
    hidden: usize,
    embed_dim: usize,
    opts: &TrainOpts,
) -> Result<(ScoreModel, DsmTrainReport)> {
    if buffer.is_empty() {
        return Err(AtdError::Empty("train buffer"));
    }
    let (h, w) = buffer.samples()[0].dim();
    let mut denoiser = DenoiserNet::new(h, w, hidden, embed_dim, opts.seed);
    denoiser.fit_baseline(buffer);
    let report = dsm_train(&mut denoiser, schedule, buffer, opts)?;
    Ok((
        ScoreModel {
            backend: ScoreBackend::TinyDenoiser(denoiser),
            schedule: schedule.clone(),
        },
        report,
    ))
}

/// Fine-tunes a copy of the model on posterior samples; the original is left
/// untouched (frozen-by-default contract). Errors on the analytic backend.
pub fn update_permanent(
    model: &ScoreModel,
    posterior_buffer: &TrainBuffer,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<(ScoreModel, DsmTrainReport)> {
    if posterior_buffer.is_empty() {
        return Err(AtdError::Empty("posterior buffer"));
    }
    let mut copy = model.clone();
    let denoiser = match &mut copy.backend {
        ScoreBackend::TinyDenoiser(d) => d,
        ScoreBackend::AnalyticGmm(_) => return Err(AtdError::BackendMismatch("analytic-gmm")),
    };
    if epochs == 0 {
        return Ok((copy, DsmTrainReport::default()));
    }
    let opts = TrainOpts {
        epochs,
        lr,
        momentum: 0.9,
        batch_size: posterior_buffer.len(),
        seed,
        clip: 100.0,
    };
    let schedule = model.schedule.clone();
    let report = dsm_train(denoiser, &schedule, posterior_buffer, &opts)?;
    Ok((copy, report))
}
