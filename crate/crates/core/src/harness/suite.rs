//! Suite execution: the cross-product of methods x budgets x seeds, with
//! per-cell aggregation. Episodes are independent and run in parallel;
//! failures are recorded per seed and the rest of the cell continues.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::config::{ExperimentConfig, Method};
use crate::harness::episode::run_episode;
use crate::harness::record::{write_run_log, RunLogHeader, RunRecord, RUNLOG_SCHEMA};
use crate::par;

/// One completed episode inside a cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub seed: u64,
    pub sr: f64,
    pub outcomes: Vec<f64>,
}

/// Aggregated results for one (method, budget) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub method: Method,
    pub budget: usize,
    pub episodes: Vec<EpisodeSummary>,
    /// Seeds whose episodes failed, with the error text.
    pub incomplete: Vec<(u64, String)>,
}

impl CellResult {
    pub fn srs(&self) -> Vec<f64> {
        self.episodes.iter().map(|e| e.sr).collect()
    }

    pub fn mean_sr(&self) -> f64 {
        let srs = self.srs();
        if srs.is_empty() {
            return f64::NAN;
        }
        srs.iter().sum::<f64>() / srs.len() as f64
    }

    pub fn sd_sr(&self) -> f64 {
        let srs = self.srs();
        if srs.len() < 2 {
            return 0.0;
        }
        let mean = self.mean_sr();
        (srs.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (srs.len() - 1) as f64).sqrt()
    }

    /// Mean cumulative-success curve over completed episodes.
    pub fn mean_curve(&self) -> Vec<f64> {
        if self.episodes.is_empty() {
            return Vec::new();
        }
        let len = self.episodes.iter().map(|e| e.outcomes.len()).min().unwrap();
        let mut curve = vec![0.0; len];
        for e in &self.episodes {
            let mut acc = 0.0;
            for (slot, &y) in curve.iter_mut().zip(&e.outcomes) {
                acc += y;
                *slot += acc;
            }
        }
        for slot in &mut curve {
            *slot /= self.episodes.len() as f64;
        }
        curve
    }
}

/// All cells of one suite, in configuration order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteResults {
    pub cells: Vec<CellResult>,
}

impl SuiteResults {
    pub fn cell(&self, method: Method, budget: usize) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.budget == budget)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Runs the full suite described by `cfg.suite`. Permanent memories are
/// built once per budget-independent grid and shared across episodes. When
/// `log_dir` is set, every episode writes its run log there.
pub fn run_suite(cfg: &ExperimentConfig, log_dir: Option<&Path>) -> Result<SuiteResults> {
    cfg.validate()?;
    if let Some(dir) = log_dir {
        std::fs::create_dir_all(dir)?;
    }
    // Grid dims come from a probe task; all tasks of a suite share geometry.
    let probe = cfg.build_task(cfg.suite.seeds.first().copied().unwrap_or(0), 1)?;
    let model = cfg.build_permanent(probe.grid.height, probe.grid.width)?;

    struct Job {
        method: Method,
        budget: usize,
        seed: u64,
    }
    let mut jobs = Vec::new();
    for &method in &cfg.suite.methods {
        for &budget in &cfg.suite.budgets {
            for &seed in &cfg.suite.seeds {
                jobs.push(Job {
                    method,
                    budget,
                    seed,
                });
            }
        }
    }
    let outputs = par::map_slice(&jobs, |job| {
        let mut cell_cfg = cfg.clone();
        cell_cfg.method = job.method;
        cell_cfg.task.budget = job.budget;
        let run = cell_cfg
            .build_task(job.seed, job.budget)
            .and_then(|task| run_episode(&cell_cfg, &task, &model, job.seed));
        match run {
            Ok(episode) => {
                let mut log_error = None;
                if let Some(dir) = log_dir {
                    let name = format!("{}_b{}_s{}.jsonl", job.method.name(), job.budget, job.seed);
                    let header = RunLogHeader {
                        schema: RUNLOG_SCHEMA.into(),
                        method: job.method.name().into(),
                        budget: job.budget,
                        seed: job.seed,
                    };
                    if let Err(e) =
                        write_run_log(&dir.join(name), &header, &episode.records, None)
                    {
                        log_error = Some(e.to_string());
                    }
                }
                match log_error {
                    None => Ok(EpisodeSummary {
                        seed: job.seed,
                        sr: episode.sr,
                        outcomes: episode.outcomes,
                    }),
                    Some(e) => Err((job.seed, e)),
                }
            }
            Err(e) => Err((job.seed, e.to_string())),
        }
    });

    let mut cells = Vec::new();
    for &method in &cfg.suite.methods {
        for &budget in &cfg.suite.budgets {
            cells.push(CellResult {
                method,
                budget,
                episodes: Vec::new(),
                incomplete: Vec::new(),
            });
        }
    }
    for (job, outcome) in jobs.iter().zip(outputs) {
        let cell = cells
            .iter_mut()
            .find(|c| c.method == job.method && c.budget == job.budget)
            .expect("cell exists");
        match outcome {
            Ok(summary) => cell.episodes.push(summary),
            Err((seed, reason)) => cell.incomplete.push((seed, reason)),
        }
    }
    Ok(SuiteResults { cells })
}

/// Replays a run log and recomputes the success rate from its records.
pub fn replay_sr(records: &[RunRecord], task: &crate::domain::SearchTask, threshold: f64) -> Result<f64> {
    let outcomes: Vec<f64> = records.iter().map(|r| r.outcome).collect();
    crate::domain::success_rate(&[outcomes], &[task], threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::CONFIG_SCHEMA;

    fn tiny_suite_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            schema: CONFIG_SCHEMA,
            ..Default::default()
        };
        cfg.policy.p_samples = 2;
        cfg.scheduler.updates = 0;
        cfg.permanent.backend = "analytic-gmm".into();
        cfg.diffusion.steps = 4;
        cfg.suite.methods = vec![Method::Rs];
        cfg.suite.budgets = vec![3, 4];
        cfg.suite.seeds = vec![0, 1];
        // 8x8 tasks for speed
        cfg.task.kind = "files".into();
        let dir = std::env::temp_dir().join(format!("atd-suite-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let mut paths = Vec::new();
        for s in 0..2u64 {
            let spec = crate::datagen::BallsTaskSpec {
                height: 8,
                width: 8,
                count: 2,
                radius: 1,
                patch_h: 1,
                patch_w: 1,
                budget: 8,
                seed: s,
                max_retries: 500,
            };
            let task = crate::datagen::gen_balls_task(&spec).unwrap();
            let path = dir.join(format!("t{s}.json"));
            crate::domain::save_task(&task, &path).unwrap();
            paths.push(path);
        }
        cfg.task.paths = paths;
        cfg
    }

    #[test]
    fn single_cell_suite_reduces_to_run_episode() {
        let mut cfg = tiny_suite_cfg();
        cfg.suite.methods = vec![Method::Rs];
        cfg.suite.budgets = vec![4];
        cfg.suite.seeds = vec![1];
        let results = run_suite(&cfg, None).unwrap();
        assert_eq!(results.cells.len(), 1);
        let cell = &results.cells[0];
        assert_eq!(cell.episodes.len(), 1);
        // direct episode
        let mut ecfg = cfg.clone();
        ecfg.method = Method::Rs;
        ecfg.task.budget = 4;
        let task = ecfg.build_task(1, 4).unwrap();
        let model = ecfg.build_permanent(8, 8).unwrap();
        let episode = run_episode(&ecfg, &task, &model, 1).unwrap();
        assert_eq!(cell.episodes[0].sr, episode.sr);
        assert_eq!(cell.episodes[0].outcomes, episode.outcomes);
    }

    #[test]
    fn adding_a_seed_never_changes_other_cells() {
        let cfg = tiny_suite_cfg();
        let base = run_suite(&cfg, None).unwrap();
        let mut extended = cfg.clone();
        extended.suite.seeds = vec![0, 1, 2];
        let more = run_suite(&extended, None).unwrap();
        for cell in &base.cells {
            let other = more.cell(cell.method, cell.budget).unwrap();
            for e in &cell.episodes {
                let oe = other.episodes.iter().find(|o| o.seed == e.seed).unwrap();
                assert_eq!(oe.sr, e.sr);
                assert_eq!(oe.outcomes, e.outcomes);
            }
        }
    }

    #[test]
    fn mean_curve_matches_cumulative_outcomes() {
        let cfg = tiny_suite_cfg();
        let results = run_suite(&cfg, None).unwrap();
        for cell in &results.cells {
            let curve = cell.mean_curve();
            assert_eq!(curve.len(), cell.budget.min(cell.episodes[0].outcomes.len()));
            // single check on first point: mean of first outcomes
            let first: f64 = cell.episodes.iter().map(|e| e.outcomes[0]).sum::<f64>()
                / cell.episodes.len() as f64;
            assert!((curve[0] - first).abs() < 1e-12);
        }
    }

    #[test]
    fn suite_logs_are_replayable() {
        let cfg = tiny_suite_cfg();
        let dir = tempfile::tempdir().unwrap();
        let results = run_suite(&cfg, Some(dir.path())).unwrap();
        let cell = &results.cells[0];
        let name = format!("{}_b{}_s{}.jsonl", cell.method.name(), cell.budget, 0);
        let (_, records, poisoned) =
            crate::harness::record::read_run_log(&dir.path().join(name)).unwrap();
        assert!(!poisoned);
        let task = cfg.build_task(0, cell.budget).unwrap();
        let sr = replay_sr(&records, &task, 0.0).unwrap();
        let ep = cell.episodes.iter().find(|e| e.seed == 0).unwrap();
        assert_eq!(sr, ep.sr);
    }
}
