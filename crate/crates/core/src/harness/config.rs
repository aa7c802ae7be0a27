//! Experiment configuration: a TOML document with every field defaulted, so
//! partial files and command-line overrides compose cleanly.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::domain::SearchTask;
use crate::error::{AtdError, Result};
use crate::permanent::{
    pretrain_denoiser, GmmPrior, ScoreModel, TrainOpts,
};
use crate::policy::{Normalization, PolicyConfig};
use crate::schedule::{NoiseSchedule, ScheduleParams};
use crate::transient::SchedulerMode;

pub const CONFIG_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    EmPtdm,
    Rs,
    Ga,
    DiffatdStatic,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::EmPtdm => "em-ptdm",
            Method::Rs => "rs",
            Method::Ga => "ga",
            Method::DiffatdStatic => "diffatd-static",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "em-ptdm" => Ok(Method::EmPtdm),
            "rs" => Ok(Method::Rs),
            "ga" => Ok(Method::Ga),
            "diffatd-static" => Ok(Method::DiffatdStatic),
            _ => Err(AtdError::Config(format!("unknown method {s:?}"))),
        }
    }

    /// Whether the method scores candidates through posterior ensembles.
    pub fn uses_ensembles(&self) -> bool {
        !matches!(self, Method::Rs)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TaskConfig {
    /// `balls` generates the synthetic benchmark; `files` loads task files.
    pub kind: String,
    pub budget: usize,
    pub paths: Vec<PathBuf>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            kind: "balls".into(),
            budget: 250,
            paths: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PolicySection {
    pub p_samples: usize,
    pub sigma_x: f64,
    pub amplification: f64,
    pub normalization: Normalization,
    /// Outcome threshold defining a discoverable location in the SR metric.
    pub success_threshold: f64,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            p_samples: 16,
            sigma_x: 1.0,
            amplification: 1.0,
            normalization: Normalization::Minmax,
            success_threshold: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SchedulerSection {
    pub mode: SchedulerMode,
    pub updates: usize,
    pub gamma: f64,
}

impl Default for SchedulerSection {
    fn default() -> Self {
        Self {
            mode: SchedulerMode::Adaptive,
            updates: 30,
            gamma: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct HModelSection {
    pub widths: Vec<usize>,
    pub embed_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub tau_loss: f64,
    /// Global gradient-norm clip for h-updates; 0 disables.
    pub clip: f64,
    /// Minibatch size per h-update SGD step; 0 trains full-batch.
    pub batch_size: usize,
    /// Posterior buffer size per scheduled update; 0 reuses `p_samples`.
    pub buffer_p: usize,
}

impl Default for HModelSection {
    fn default() -> Self {
        Self {
            widths: vec![32, 64],
            embed_dim: 32,
            epochs: 30,
            lr: 1e-3,
            momentum: 0.9,
            tau_loss: 1e-6,
            clip: 100.0,
            batch_size: 4,
            buffer_p: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RewardSection {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for RewardSection {
    fn default() -> Self {
        Self {
            epochs: 3,
            lr: 0.01,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PermanentSection {
    /// `analytic-gmm` or `tiny-denoiser`.
    pub backend: String,
    /// `blobs` or `standard-normal` (analytic backend only).
    pub analytic_prior: String,
    /// Checkpoint path; empty means pretraining happens in-process.
    pub checkpoint: String,
    pub hidden: usize,
    pub embed_dim: usize,
    /// In-process pretraining corpus when no checkpoint is given.
    pub corpus: String,
    pub corpus_n: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_seed: u64,
    /// Cross-task permanent-memory update.
    pub update_enabled: bool,
    pub update_epochs: usize,
    pub update_lr: f64,
}

impl Default for PermanentSection {
    fn default() -> Self {
        Self {
            backend: "tiny-denoiser".into(),
            analytic_prior: "blobs".into(),
            checkpoint: String::new(),
            hidden: 64,
            embed_dim: 32,
            corpus: "digits-like".into(),
            corpus_n: 128,
            pretrain_epochs: 300,
            pretrain_lr: 1e-3,
            pretrain_seed: 7,
            update_enabled: false,
            update_epochs: 10,
            update_lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SuiteSection {
    pub methods: Vec<Method>,
    pub budgets: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for SuiteSection {
    fn default() -> Self {
        Self {
            methods: vec![Method::Rs, Method::Ga, Method::EmPtdm],
            budgets: vec![150, 200, 250],
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

/// Full experiment configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    pub schema: u32,
    pub method: Method,
    pub task: TaskConfig,
    pub policy: PolicySection,
    pub scheduler: SchedulerSection,
    pub h_model: HModelSection,
    pub reward: RewardSection,
    pub diffusion: ScheduleParams,
    pub permanent: PermanentSection,
    pub suite: SuiteSection,
    /// Dump per-candidate scores for every step.
    pub dump_scores: bool,
}

impl Default for Method {
    fn default() -> Self {
        Method::EmPtdm
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| AtdError::Config(e.to_string()))?;
        if cfg.schema != CONFIG_SCHEMA {
            return Err(AtdError::Config(format!(
                "unsupported config schema {} (expected {CONFIG_SCHEMA})",
                cfg.schema
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.policy_config().validate()?;
        if self.policy.p_samples < 2 {
            return Err(AtdError::Config("p_samples must be >= 2".into()));
        }
        if self.task.kind != "balls" && self.task.kind != "files" {
            return Err(AtdError::Config(format!(
                "unknown task kind {:?}",
                self.task.kind
            )));
        }
        if self.task.kind == "files" && self.task.paths.is_empty() {
            return Err(AtdError::Config("task.kind = files needs paths".into()));
        }
        match self.permanent.backend.as_str() {
            "analytic-gmm" | "tiny-denoiser" => {}
            other => {
                return Err(AtdError::Config(format!(
                    "unknown permanent backend {other:?}"
                )))
            }
        }
        Ok(())
    }

    pub fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            sigma_x: self.policy.sigma_x,
            amplification: self.policy.amplification,
            normalization: self.policy.normalization,
        }
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::from_params(&self.diffusion)
    }

    pub fn h_buffer_size(&self) -> usize {
        if self.h_model.buffer_p == 0 {
            self.policy.p_samples
        } else {
            self.h_model.buffer_p
        }
    }

    /// Generates or loads the task for one seed. Balls layouts depend only on
    /// the seed, so different budgets probe the same hidden environment.
    pub fn build_task(&self, seed: u64, budget: usize) -> Result<SearchTask> {
        match self.task.kind.as_str() {
            "balls" => crate::datagen::gen_random_balls_task(
                budget,
                crate::seed::derive(seed, "task", 0),
            ),
            "files" => {
                let idx = (seed as usize) % self.task.paths.len();
                let mut task = crate::domain::load_task(&self.task.paths[idx])?;
                if budget > task.grid.candidates() {
                    return Err(AtdError::BudgetExceedsCandidates {
                        budget,
                        candidates: task.grid.candidates(),
                    });
                }
                task.budget = budget;
                Ok(task)
            }
            other => Err(AtdError::Config(format!("unknown task kind {other:?}"))),
        }
    }

    /// Builds the permanent memory for the given grid. Analytic backends are
    /// constructed directly; the denoiser loads its checkpoint or pretrains
    /// in-process on the configured corpus.
    pub fn build_permanent(&self, height: usize, width: usize) -> Result<ScoreModel> {
        let schedule = self.noise_schedule()?;
        match self.permanent.backend.as_str() {
            "analytic-gmm" => {
                let prior = match self.permanent.analytic_prior.as_str() {
                    "blobs" => GmmPrior::canonical_blobs(height, width),
                    "standard-normal" => GmmPrior::standard_normal(height, width),
                    other => {
                        return Err(AtdError::Config(format!(
                            "unknown analytic prior {other:?}"
                        )))
                    }
                };
                Ok(ScoreModel::analytic(prior, schedule))
            }
            "tiny-denoiser" => {
                if !self.permanent.checkpoint.is_empty() {
                    return ScoreModel::load(Path::new(&self.permanent.checkpoint), schedule);
                }
                let kind = match self.permanent.corpus.as_str() {
                    "gmm-draws" => crate::datagen::CorpusKind::GmmDraws,
                    "balls" => crate::datagen::CorpusKind::Balls,
                    "digits-like" => crate::datagen::CorpusKind::DigitsLike,
                    other => {
                        return Err(AtdError::Config(format!("unknown corpus {other:?}")))
                    }
                };
                let corpus = crate::datagen::gen_prior_corpus(
                    kind,
                    self.permanent.corpus_n,
                    height,
                    width,
                    self.permanent.pretrain_seed,
                )?;
                let opts = TrainOpts {
                    epochs: self.permanent.pretrain_epochs,
                    lr: self.permanent.pretrain_lr,
                    momentum: 0.9,
                    batch_size: 32,
                    seed: self.permanent.pretrain_seed,
                    clip: 100.0,
                };
                let (model, _) = pretrain_denoiser(
                    &corpus,
                    &schedule,
                    self.permanent.hidden,
                    self.permanent.embed_dim,
                    &opts,
                )?;
                Ok(model)
            }
            other => Err(AtdError::Config(format!(
                "unknown permanent backend {other:?}"
            ))),
        }
    }
}
