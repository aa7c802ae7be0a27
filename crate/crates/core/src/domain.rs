//! Tasks, observations, budgets and feedback semantics for the partially
//! observable grid environment.
//!
//! A task hides a dense content image plus a binary target mask. Queries
//! reveal one patch at a time; the outcome of a query is the fraction of
//! target pixels inside that patch. Tasks and observation sets are immutable
//! values: [`query`] returns a fresh [`ObservationSet`].

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{AtdError, Result};

pub const TASK_SCHEMA: &str = "atd-task-v1";

/// Grid geometry: cell dimensions plus the query-block (patch) dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    pub patch_h: usize,
    pub patch_w: usize,
}

impl GridSpec {
    pub fn new(height: usize, width: usize, patch_h: usize, patch_w: usize) -> Result<Self> {
        if height == 0 || width == 0 || patch_h == 0 || patch_w == 0 {
            return Err(AtdError::InvalidParam("grid dims must be positive".into()));
        }
        if height % patch_h != 0 || width % patch_w != 0 {
            return Err(AtdError::InvalidParam(format!(
                "patch {patch_h}x{patch_w} does not tile a {height}x{width} grid"
            )));
        }
        Ok(Self {
            height,
            width,
            patch_h,
            patch_w,
        })
    }

    /// Number of candidate query locations.
    pub fn candidates(&self) -> usize {
        (self.height / self.patch_h) * (self.width / self.patch_w)
    }

    pub fn patch_rows(&self) -> usize {
        self.height / self.patch_h
    }

    pub fn patch_cols(&self) -> usize {
        self.width / self.patch_w
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn patch_area(&self) -> usize {
        self.patch_h * self.patch_w
    }

    /// Pixel window of candidate `q` in row-major patch order.
    pub fn patch_bounds(&self, q: usize) -> Result<(usize, usize, usize, usize)> {
        if q >= self.candidates() {
            return Err(AtdError::QueryOutOfRange {
                index: q,
                candidates: self.candidates(),
            });
        }
        let pr = q / self.patch_cols();
        let pc = q % self.patch_cols();
        Ok((
            pr * self.patch_h,
            pc * self.patch_w,
            self.patch_h,
            self.patch_w,
        ))
    }
}

/// One hidden search environment with its measurement budget.
#[derive(Debug, Clone)]
pub struct SearchTask {
    pub grid: GridSpec,
    pub content: Array2<f64>,
    pub target_mask: Array2<u8>,
    pub budget: usize,
}

/// Revealed cell contents plus the binary reveal mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub values: Array2<f64>,
    pub mask: Array2<f64>,
    pub queried: Vec<usize>,
}

impl ObservationSet {
    pub fn empty(grid: &GridSpec) -> Self {
        Self {
            values: Array2::zeros((grid.height, grid.width)),
            mask: Array2::zeros((grid.height, grid.width)),
            queried: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.queried.is_empty()
    }
}

/// Result of a single query.
#[derive(Debug, Clone, PartialEq)]
pub struct Feedback {
    pub query_index: usize,
    pub patch_values: Array2<f64>,
    pub outcome: f64,
}

/// Validates and assembles a task.
pub fn make_task(
    content: Array2<f64>,
    target_mask: Array2<u8>,
    grid: GridSpec,
    budget: usize,
) -> Result<SearchTask> {
    if content.dim() != (grid.height, grid.width) {
        return Err(AtdError::ShapeMismatch(format!(
            "content {:?} vs grid {}x{}",
            content.dim(),
            grid.height,
            grid.width
        )));
    }
    if target_mask.dim() != content.dim() {
        return Err(AtdError::ShapeMismatch(format!(
            "target_mask {:?} vs content {:?}",
            target_mask.dim(),
            content.dim()
        )));
    }
    if budget == 0 {
        return Err(AtdError::InvalidParam("budget must be >= 1".into()));
    }
    if budget > grid.candidates() {
        return Err(AtdError::BudgetExceedsCandidates {
            budget,
            candidates: grid.candidates(),
        });
    }
    if content.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(AtdError::InvalidParam(
            "content values must lie in [0, 1]".into(),
        ));
    }
    if target_mask.iter().any(|&v| v > 1) {
        return Err(AtdError::InvalidParam("target_mask must be binary".into()));
    }
    Ok(SearchTask {
        grid,
        content,
        target_mask,
        budget,
    })
}

impl SearchTask {
    /// Target fraction of patch `q` (the feedback outcome).
    pub fn outcome(&self, q: usize) -> Result<f64> {
        let (r, c, h, w) = self.grid.patch_bounds(q)?;
        let patch = self.target_mask.slice(s![r..r + h, c..c + w]);
        let hits: u32 = patch.iter().map(|&v| u32::from(v)).sum();
        Ok(f64::from(hits) / (h * w) as f64)
    }

    /// Number of candidate locations whose outcome exceeds `threshold`.
    pub fn discoverable(&self, threshold: f64) -> usize {
        (0..self.grid.candidates())
            .filter(|&q| self.outcome(q).unwrap() > threshold)
            .count()
    }
}

/// Executes query `q`, returning the feedback and the extended observation set.
pub fn query(task: &SearchTask, obs: &ObservationSet, q: usize) -> Result<(Feedback, ObservationSet)> {
    let (r, c, h, w) = task.grid.patch_bounds(q)?;
    if obs.queried.contains(&q) {
        return Err(AtdError::DuplicateQuery(q));
    }
    if obs.queried.len() >= task.budget {
        return Err(AtdError::BudgetExhausted(obs.queried.len()));
    }
    let mut next = obs.clone();
    let patch = task.content.slice(s![r..r + h, c..c + w]).to_owned();
    next.values
        .slice_mut(s![r..r + h, c..c + w])
        .assign(&patch);
    next.mask.slice_mut(s![r..r + h, c..c + w]).fill(1.0);
    next.queried.push(q);
    let outcome = task.outcome(q)?;
    Ok((
        Feedback {
            query_index: q,
            patch_values: patch,
            outcome,
        },
        next,
    ))
}

/// Budget-normalized cumulative discovered target fraction, averaged over
/// tasks: `SR = (1/L) sum_i [1 / min(B_i, U_i)] sum_t y_i(q_t)`, clamped to
/// `[0, 1]`. `U_i` counts candidate locations with outcome above `threshold`.
pub fn success_rate(outcomes: &[Vec<f64>], tasks: &[&SearchTask], threshold: f64) -> Result<f64> {
    if outcomes.is_empty() || outcomes.len() != tasks.len() {
        return Err(AtdError::Empty("run list"));
    }
    let mut total = 0.0;
    for (ys, task) in outcomes.iter().zip(tasks) {
        if ys.len() > task.budget {
            return Err(AtdError::InvalidParam(format!(
                "run has {} steps but budget is {}",
                ys.len(),
                task.budget
            )));
        }
        let u = task.discoverable(threshold);
        let denom = task.budget.min(u).max(1) as f64;
        total += ys.iter().sum::<f64>() / denom;
    }
    Ok((total / outcomes.len() as f64).clamp(0.0, 1.0))
}

#[derive(Serialize, Deserialize)]
struct TaskFile {
    schema: String,
    height: usize,
    width: usize,
    patch_h: usize,
    patch_w: usize,
    budget: usize,
    content: Vec<f64>,
    target_mask: Vec<u8>,
}

/// Writes a task as a schema-tagged JSON document (row-major arrays).
pub fn save_task(task: &SearchTask, path: &Path) -> Result<()> {
    let file = TaskFile {
        schema: TASK_SCHEMA.to_string(),
        height: task.grid.height,
        width: task.grid.width,
        patch_h: task.grid.patch_h,
        patch_w: task.grid.patch_w,
        budget: task.budget,
        content: task.content.iter().copied().collect(),
        target_mask: task.target_mask.iter().copied().collect(),
    };
    std::fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

pub fn load_task(path: &Path) -> Result<SearchTask> {
    let file: TaskFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if file.schema != TASK_SCHEMA {
        return Err(AtdError::Config(format!(
            "unsupported task schema {:?}",
            file.schema
        )));
    }
    let grid = GridSpec::new(file.height, file.width, file.patch_h, file.patch_w)?;
    let content = Array2::from_shape_vec((file.height, file.width), file.content)
        .map_err(|e| AtdError::ShapeMismatch(e.to_string()))?;
    let mask = Array2::from_shape_vec((file.height, file.width), file.target_mask)
        .map_err(|e| AtdError::ShapeMismatch(e.to_string()))?;
    make_task(content, mask, grid, file.budget)
}
