//! Minimal dense-network machinery shared by the denoiser, the h-transform
//! correction net and the reward model.
//!
//! Layers are small and fixed, so reverse-mode gradients are written out by
//! hand. All forward passes operate on flat row-major batches
//! (`batch x dim`), which keeps the sampler hot path a handful of
//! cache-friendly matmuls.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{AtdError, Result};
use crate::seed::StableHasher;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    /// x * sigmoid(x); smooth, used by the diffusion nets.
    Silu,
    /// max(x, 0.01 x)
    LeakyRelu,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::LeakyRelu => {
                if x >= 0.0 {
                    x
                } else {
                    0.01 * x
                }
            }
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::LeakyRelu => {
                if x >= 0.0 {
                    1.0
                } else {
                    0.01
                }
            }
        }
    }
}

/// Fully connected layer with row-major `out_dim x in_dim` weights.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub act: Activation,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform(-a, a) with a = sqrt(6 / (in + out)).
    Xavier,
    Zeros,
}

/// Dot product with four independent accumulators; the fixed regrouping
/// keeps results deterministic while letting the loop vectorize.
#[inline]
fn dot(w: &[f64], x: &[f64]) -> f64 {
    let n = w.len().min(x.len());
    let chunks = n / 4;
    let mut acc = [0.0f64; 4];
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += w[i] * x[i];
        acc[1] += w[i + 1] * x[i + 1];
        acc[2] += w[i + 2] * x[i + 2];
        acc[3] += w[i + 3] * x[i + 3];
    }
    let mut rest = 0.0;
    for i in 4 * chunks..n {
        rest += w[i] * x[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + rest
}

impl Dense {
    pub fn new(in_dim: usize, out_dim: usize, act: Activation, init: Init, rng: &mut ChaCha8Rng) -> Self {
        let mut w = vec![0.0; in_dim * out_dim];
        if let Init::Xavier = init {
            let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
            for v in &mut w {
                *v = rng.gen_range(-a..a);
            }
        }
        Dense {
            w,
            b: vec![0.0; out_dim],
            in_dim,
            out_dim,
            act,
        }
    }

    /// `out[r] = act(W x[r] + b)`, also returning pre-activations when
    /// `pre` is provided (training path).
    fn forward(&self, x: &[f64], batch: usize, out: &mut Vec<f64>, mut pre: Option<&mut Vec<f64>>) {
        debug_assert_eq!(x.len(), batch * self.in_dim);
        out.clear();
        out.resize(batch * self.out_dim, 0.0);
        if let Some(p) = pre.as_deref_mut() {
            p.clear();
            p.resize(batch * self.out_dim, 0.0);
        }
        for r in 0..batch {
            let xin = &x[r * self.in_dim..(r + 1) * self.in_dim];
            let orow = &mut out[r * self.out_dim..(r + 1) * self.out_dim];
            for (o, slot) in orow.iter_mut().enumerate() {
                let wrow = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
                let acc = self.b[o] + dot(wrow, xin);
                if let Some(p) = pre.as_deref_mut() {
                    p[r * self.out_dim + o] = acc;
                }
                *slot = self.act.apply(acc);
            }
        }
    }
}

/// Stack of dense layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Per-layer caches recorded by [`Mlp::forward_train`].
pub struct ForwardCache {
    batch: usize,
    /// Input plus each layer's activation output (len = layers + 1).
    activations: Vec<Vec<f64>>,
    /// Pre-activation values per layer.
    pre: Vec<Vec<f64>>,
}

/// Flat gradient aligned with [`Mlp::param_count`] indexing.
pub struct MlpGrad(pub Vec<f64>);

impl Mlp {
    /// Builds from layer sizes; hidden layers use `hidden_act`, the last
    /// layer `final_act`. `final_init` lets callers zero the output layer so
    /// the network starts as the exact zero function while the trunk stays
    /// trainable.
    pub fn new(
        dims: &[usize],
        hidden_act: Activation,
        final_act: Activation,
        trunk_init: Init,
        final_init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(dims.len() >= 2, "need at least one layer");
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for i in 0..dims.len() - 1 {
            let last = i == dims.len() - 2;
            layers.push(Dense::new(
                dims[i],
                dims[i + 1],
                if last { final_act } else { hidden_act },
                if last { final_init } else { trunk_init },
                rng,
            ));
        }
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map(|l| l.in_dim).unwrap_or(0)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    /// Inference pass over a flat batch.
    pub fn forward(&self, x: &[f64], batch: usize) -> Vec<f64> {
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for layer in &self.layers {
            layer.forward(&cur, batch, &mut next, None);
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    /// Training pass; keeps activations and pre-activations for backward.
    pub fn forward_train(&self, x: &[f64], batch: usize) -> (Vec<f64>, ForwardCache) {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pres = Vec::with_capacity(self.layers.len());
        activations.push(x.to_vec());
        let mut cur = x.to_vec();
        for layer in &self.layers {
            let mut out = Vec::new();
            let mut pre = Vec::new();
            layer.forward(&cur, batch, &mut out, Some(&mut pre));
            pres.push(pre);
            activations.push(out.clone());
            cur = out;
        }
        (
            cur,
            ForwardCache {
                batch,
                activations,
                pre: pres,
            },
        )
    }

    /// Backpropagates `dL/d(output)` (flat `batch x out_dim`) through the
    /// cached pass, returning the flat parameter gradient.
    pub fn backward(&self, cache: &ForwardCache, dl_dout: &[f64]) -> MlpGrad {
        self.backward_impl(cache, dl_dout, false).0
    }

    /// Like [`Self::backward`], additionally returning `dL/d(input)`.
    pub fn backward_with_input_grad(
        &self,
        cache: &ForwardCache,
        dl_dout: &[f64],
    ) -> (MlpGrad, Vec<f64>) {
        let (grad, input) = self.backward_impl(cache, dl_dout, true);
        (grad, input.unwrap())
    }

    fn backward_impl(
        &self,
        cache: &ForwardCache,
        dl_dout: &[f64],
        want_input_grad: bool,
    ) -> (MlpGrad, Option<Vec<f64>>) {
        let batch = cache.batch;
        let mut grad = vec![0.0; self.param_count()];
        let mut delta = dl_dout.to_vec();
        let mut offset_end = self.param_count();
        let mut input_grad = None;
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let pre = &cache.pre[l];
            let a_prev = &cache.activations[l];
            // delta currently holds dL/da_l; convert to dL/dz_l in place.
            for (d, &p) in delta.iter_mut().zip(pre.iter()) {
                *d *= layer.act.derivative(p);
            }
            let w_len = layer.w.len();
            let b_len = layer.b.len();
            let w_off = offset_end - w_len - b_len;
            let b_off = offset_end - b_len;
            {
                let (gw, gb) = {
                    let (head, tail) = grad.split_at_mut(b_off);
                    (&mut head[w_off..], &mut tail[..b_len])
                };
                for r in 0..batch {
                    let drow = &delta[r * layer.out_dim..(r + 1) * layer.out_dim];
                    let arow = &a_prev[r * layer.in_dim..(r + 1) * layer.in_dim];
                    for (o, &d) in drow.iter().enumerate() {
                        gb[o] += d;
                        let grow = &mut gw[o * layer.in_dim..(o + 1) * layer.in_dim];
                        for (g, &a) in grow.iter_mut().zip(arow) {
                            *g += d * a;
                        }
                    }
                }
            }
            if l > 0 || want_input_grad {
                let mut prev = vec![0.0; batch * layer.in_dim];
                for r in 0..batch {
                    let drow = &delta[r * layer.out_dim..(r + 1) * layer.out_dim];
                    let prow = &mut prev[r * layer.in_dim..(r + 1) * layer.in_dim];
                    for (o, &d) in drow.iter().enumerate() {
                        let wrow = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                        for (p, &wv) in prow.iter_mut().zip(wrow) {
                            *p += d * wv;
                        }
                    }
                }
                if l == 0 {
                    input_grad = Some(prev);
                } else {
                    delta = prev;
                }
            }
            offset_end = w_off;
        }
        (MlpGrad(grad), input_grad)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn get_param(&self, mut idx: usize) -> f64 {
        for layer in &self.layers {
            if idx < layer.w.len() {
                return layer.w[idx];
            }
            idx -= layer.w.len();
            if idx < layer.b.len() {
                return layer.b[idx];
            }
            idx -= layer.b.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_param(&mut self, mut idx: usize, value: f64) {
        for layer in &mut self.layers {
            if idx < layer.w.len() {
                layer.w[idx] = value;
                return;
            }
            idx -= layer.w.len();
            if idx < layer.b.len() {
                layer.b[idx] = value;
                return;
            }
            idx -= layer.b.len();
        }
        panic!("parameter index out of range");
    }

    /// Applies one SGD step given a flat gradient of the batch-mean loss.
    /// The gradient's global norm is clipped to `clip` when positive.
    pub fn apply_grad_clipped(
        &mut self,
        grad: &MlpGrad,
        lr: f64,
        velocity: &mut Vec<f64>,
        momentum: f64,
        clip: f64,
    ) {
        if velocity.len() != grad.0.len() {
            velocity.clear();
            velocity.resize(grad.0.len(), 0.0);
        }
        let mut scale = 1.0;
        if clip > 0.0 {
            let norm = grad.0.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > clip {
                scale = clip / norm;
            }
        }
        let mut idx = 0;
        for layer in &mut self.layers {
            for v in layer.w.iter_mut().chain(layer.b.iter_mut()) {
                let vel = &mut velocity[idx];
                *vel = momentum * *vel - lr * scale * grad.0[idx];
                *v += *vel;
                idx += 1;
            }
        }
    }

    pub fn apply_grad(&mut self, grad: &MlpGrad, lr: f64, velocity: &mut Vec<f64>, momentum: f64) {
        self.apply_grad_clipped(grad, lr, velocity, momentum, 0.0);
    }

    pub fn apply_adam(&mut self, grad: &MlpGrad, opt: &mut Adam) {
        opt.prepare(grad.0.len());
        let mut scale = 1.0;
        if opt.clip > 0.0 {
            let norm = grad.0.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > opt.clip {
                scale = opt.clip / norm;
            }
        }
        opt.t += 1;
        let bc1 = 1.0 - opt.beta1.powi(opt.t as i32);
        let bc2 = 1.0 - opt.beta2.powi(opt.t as i32);
        let mut idx = 0;
        for layer in &mut self.layers {
            for v in layer.w.iter_mut().chain(layer.b.iter_mut()) {
                let g = scale * grad.0[idx];
                opt.m[idx] = opt.beta1 * opt.m[idx] + (1.0 - opt.beta1) * g;
                opt.v[idx] = opt.beta2 * opt.v[idx] + (1.0 - opt.beta2) * g * g;
                let mhat = opt.m[idx] / bc1;
                let vhat = opt.v[idx] / bc2;
                *v -= opt.lr * mhat / (vhat.sqrt() + opt.eps);
                idx += 1;
            }
        }
    }

    pub fn checksum(&self) -> u64 {
        let mut h = StableHasher::new("mlp-params");
        for layer in &self.layers {
            h.write_f64_slice(&layer.w);
            h.write_f64_slice(&layer.b);
        }
        h.finish()
    }
}

/// Adam optimizer state. The per-coordinate normalization matters here: the
/// DSM residual magnitude spans two orders across diffusion steps, which
/// plain SGD cannot absorb.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, clip: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    fn prepare(&mut self, n: usize) {
        if self.m.len() != n {
            self.m = vec![0.0; n];
            self.v = vec![0.0; n];
            self.t = 0;
        }
    }
}

/// Sinusoidal embedding of an integer diffusion step.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even");
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let exponent = if half > 1 {
            i as f64 / (half - 1) as f64
        } else {
            0.0
        };
        let freq = (-(10000f64.ln()) * exponent).exp();
        let angle = t as f64 * freq;
        out[i] = angle.sin();
        out[half + i] = angle.cos();
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Flat checkpoint document: parameter tensors plus backend/kind tags and the
/// hash of the schedule the model was trained under.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema: String,
    pub kind: String,
    pub backend: String,
    pub schedule_hash: String,
    pub tensors: Vec<NamedTensor>,
}

pub const CHECKPOINT_SCHEMA: &str = "atd-ckpt-v1";

impl Checkpoint {
    pub fn new(kind: &str, backend: &str, schedule_hash: u64) -> Self {
        Checkpoint {
            schema: CHECKPOINT_SCHEMA.to_string(),
            kind: kind.to_string(),
            backend: backend.to_string(),
            schedule_hash: format!("{schedule_hash:016x}"),
            tensors: Vec::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ckpt.schema != CHECKPOINT_SCHEMA {
            return Err(AtdError::CheckpointMismatch(format!(
                "unsupported schema {:?}",
                ckpt.schema
            )));
        }
        Ok(ckpt)
    }

    pub fn tensor(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| AtdError::CheckpointMismatch(format!("missing tensor {name:?}")))
    }
}

impl Mlp {
    pub fn export_tensors(&self, prefix: &str, out: &mut Vec<NamedTensor>) {
        for (i, layer) in self.layers.iter().enumerate() {
            out.push(NamedTensor {
                name: format!("{prefix}.{i}.w"),
                shape: vec![layer.out_dim, layer.in_dim],
                data: layer.w.clone(),
            });
            out.push(NamedTensor {
                name: format!("{prefix}.{i}.b"),
                shape: vec![layer.out_dim],
                data: layer.b.clone(),
            });
        }
    }

    pub fn import_tensors(&mut self, prefix: &str, ckpt: &Checkpoint) -> Result<()> {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let w = ckpt.tensor(&format!("{prefix}.{i}.w"))?;
            let b = ckpt.tensor(&format!("{prefix}.{i}.b"))?;
            if w.shape != [layer.out_dim, layer.in_dim] || b.shape != [layer.out_dim] {
                return Err(AtdError::CheckpointMismatch(format!(
                    "tensor shape mismatch at layer {i}"
                )));
            }
            layer.w.copy_from_slice(&w.data);
            layer.b.copy_from_slice(&b.data);
        }
        Ok(())
    }
}
