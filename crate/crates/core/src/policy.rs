//! Query selection: the pairwise-disagreement exploration score, the
//! Gaussian-kernel agreement (likelihood) score, the reward-weighted
//! exploitation score, and their budget-adaptive combination, plus the
//! random and greedy baselines.
//!
//! All pairwise sums run over ordered sample pairs including the diagonal,
//! so an ensemble of n identical samples has likelihood n^2 and exploration 0.

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::GridSpec;
use crate::error::{AtdError, Result};
use crate::par;
use crate::posterior::PosteriorEnsemble;
use crate::reward::RewardModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    None,
    Minmax,
}

/// Scoring knobs. `amplification >= 1` stretches the effective budget inside
/// the mixing weight, shifting mass toward exploration.
#[derive(Debug, Clone, Copy)]
pub struct PolicyConfig {
    pub sigma_x: f64,
    pub amplification: f64,
    pub normalization: Normalization,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            sigma_x: 1.0,
            amplification: 1.0,
            normalization: Normalization::Minmax,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_x <= 0.0 {
            return Err(AtdError::InvalidParam("sigma_x must be > 0".into()));
        }
        if self.amplification < 1.0 {
            return Err(AtdError::InvalidParam("amplification must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-candidate score components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateScores {
    pub expl: f64,
    pub likeli: f64,
    pub reward_sum: f64,
    pub exploit: f64,
    pub combined: f64,
}

/// Scores for every candidate at one step, plus the mixing weight used.
#[derive(Debug, Clone)]
pub struct ScoreBreakdown {
    pub per_candidate: Vec<CandidateScores>,
    pub alpha: f64,
}

fn patch_view<'a>(sample: &'a Array2<f64>, grid: &GridSpec, q: usize) -> ArrayView2<'a, f64> {
    let (r, c, h, w) = grid.patch_bounds(q).unwrap();
    sample.slice(s![r..r + h, c..c + w])
}

/// Squared distances between all ordered sample pairs restricted to patch
/// `q`, as a flat n x n matrix.
fn pairwise_sq_dists(ens: &PosteriorEnsemble, grid: &GridSpec, q: usize) -> Vec<f64> {
    let n = ens.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        let a = patch_view(&ens.samples[i], grid, q);
        for j in (i + 1)..n {
            let b = patch_view(&ens.samples[j], grid, q);
            let mut acc = 0.0;
            for (x, y) in a.iter().zip(b.iter()) {
                let diff = x - y;
                acc += diff * diff;
            }
            d[i * n + j] = acc;
            d[j * n + i] = acc;
        }
    }
    d
}

fn scores_from_dists(d: &[f64], n: usize, sigma_x: f64) -> (f64, f64) {
    let denom = 2.0 * sigma_x * sigma_x;
    let mut dist_sum = 0.0;
    let mut kernel_sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let dij = d[i * n + j];
            dist_sum += dij;
            kernel_sum += (-dij / denom).exp();
        }
    }
    // Both sums run over ordered pairs: off-diagonal terms appear twice,
    // the diagonal contributes 0 to the distances and exp(0) = 1 each to
    // the kernel.
    (2.0 * dist_sum / denom, n as f64 + 2.0 * kernel_sum)
}

/// Pairwise-disagreement exploration score at candidate `q`:
/// `sum_ij sum_pixels (x_i - x_j)^2 / (2 sigma_x^2)`. Exactly zero when all
/// samples agree on the patch.
pub fn expl_score(ens: &PosteriorEnsemble, grid: &GridSpec, q: usize, sigma_x: f64) -> Result<f64> {
    grid.patch_bounds(q)?;
    let d = pairwise_sq_dists(ens, grid, q);
    Ok(scores_from_dists(&d, ens.len(), sigma_x).0)
}

/// Pairwise-agreement likelihood score at candidate `q`:
/// `sum_ij exp(-sum_pixels (x_i - x_j)^2 / (2 sigma_x^2))`. Diagonal terms
/// contribute 1 each, so the value lies in `[n, n^2]`.
pub fn likeli_score(ens: &PosteriorEnsemble, grid: &GridSpec, q: usize, sigma_x: f64) -> Result<f64> {
    grid.patch_bounds(q)?;
    let d = pairwise_sq_dists(ens, grid, q);
    Ok(scores_from_dists(&d, ens.len(), sigma_x).1)
}

/// Summed reward-model predictions over the ensemble's patch estimates.
pub fn reward_sum(
    ens: &PosteriorEnsemble,
    grid: &GridSpec,
    q: usize,
    reward: &RewardModel,
) -> Result<f64> {
    grid.patch_bounds(q)?;
    let mut total = 0.0;
    for sample in &ens.samples {
        total += reward.predict(&patch_view(sample, grid, q).to_owned())?;
    }
    Ok(total)
}

/// Reward-weighted expected log-likelihood.
pub fn exploit_score(
    ens: &PosteriorEnsemble,
    grid: &GridSpec,
    q: usize,
    reward: &RewardModel,
    sigma_x: f64,
) -> Result<f64> {
    Ok(likeli_score(ens, grid, q, sigma_x)? * reward_sum(ens, grid, q, reward)?)
}

/// Budget-dependent mixing weight
/// `alpha = max(0, (aB - t) / (aB + t))` clamped to [0, 1].
pub fn alpha_weight(t: usize, budget: usize, amplification: f64) -> Result<f64> {
    if t > budget {
        return Err(AtdError::InvalidParam(format!(
            "step {t} beyond budget {budget}"
        )));
    }
    let b_eff = amplification * budget as f64;
    let t = t as f64;
    Ok(((b_eff - t) / (b_eff + t)).clamp(0.0, 1.0))
}

fn min_max_normalize(values: &mut [f64]) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    if span > 0.0 {
        for v in values.iter_mut() {
            *v = (*v - lo) / span;
        }
    } else {
        values.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Scores every candidate: exploration and exploitation families, optional
/// per-step min-max normalization, and the alpha-mixed combination.
pub fn score_candidates(
    ens: &PosteriorEnsemble,
    grid: &GridSpec,
    reward: &RewardModel,
    cfg: &PolicyConfig,
    t: usize,
    budget: usize,
) -> Result<ScoreBreakdown> {
    cfg.validate()?;
    let alpha = alpha_weight(t, budget, cfg.amplification)?;
    let n = grid.candidates();
    let raw: Vec<Result<(f64, f64, f64)>> = par::map_indexed(n, |q| {
        grid.patch_bounds(q)?;
        let d = pairwise_sq_dists(ens, grid, q);
        let (expl, likeli) = scores_from_dists(&d, ens.len(), cfg.sigma_x);
        let rsum = reward_sum(ens, grid, q, reward)?;
        Ok((expl, likeli, rsum))
    });
    let mut expl = Vec::with_capacity(n);
    let mut likeli = Vec::with_capacity(n);
    let mut rsums = Vec::with_capacity(n);
    for r in raw {
        let (e, l, rs) = r?;
        expl.push(e);
        likeli.push(l);
        rsums.push(rs);
    }
    let exploit: Vec<f64> = likeli
        .iter()
        .zip(&rsums)
        .map(|(l, r)| l * r)
        .collect();
    let mut expl_mix = expl.clone();
    let mut exploit_mix = exploit.clone();
    if cfg.normalization == Normalization::Minmax {
        min_max_normalize(&mut expl_mix);
        min_max_normalize(&mut exploit_mix);
    }
    let per_candidate = (0..n)
        .map(|q| CandidateScores {
            expl: expl[q],
            likeli: likeli[q],
            reward_sum: rsums[q],
            exploit: exploit[q],
            combined: alpha * expl_mix[q] + (1.0 - alpha) * exploit_mix[q],
        })
        .collect();
    Ok(ScoreBreakdown {
        per_candidate,
        alpha,
    })
}

fn argmax_unvisited<F: Fn(&CandidateScores) -> f64>(
    scores: &ScoreBreakdown,
    visited: &[bool],
    key: F,
) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (q, cand) in scores.per_candidate.iter().enumerate() {
        if visited[q] {
            continue;
        }
        let v = key(cand);
        if !v.is_finite() {
            return Err(AtdError::NonFiniteScore {
                step: 0,
                candidate: q,
            });
        }
        match best {
            // Strictly-greater comparison breaks ties toward the lowest index.
            Some((_, bv)) if v <= bv => {}
            _ => best = Some((q, v)),
        }
    }
    best.map(|(q, _)| q).ok_or(AtdError::CandidatesExhausted)
}

/// Argmax of the combined score over unvisited candidates, ties broken by
/// lowest index.
pub fn select_query(scores: &ScoreBreakdown, visited: &[bool]) -> Result<usize> {
    argmax_unvisited(scores, visited, |c| c.combined)
}

/// Greedy-adaptive selection: argmax of the exploitation score.
pub fn select_greedy(scores: &ScoreBreakdown, visited: &[bool]) -> Result<usize> {
    argmax_unvisited(scores, visited, |c| c.exploit)
}

/// Uniform draw over unvisited candidates.
pub fn baseline_random(visited: &[bool], rng: &mut ChaCha8Rng) -> Result<usize> {
    let unvisited: Vec<usize> = visited
        .iter()
        .enumerate()
        .filter(|(_, &v)| !v)
        .map(|(q, _)| q)
        .collect();
    if unvisited.is_empty() {
        return Err(AtdError::CandidatesExhausted);
    }
    Ok(unvisited[rng.gen_range(0..unvisited.len())])
}
