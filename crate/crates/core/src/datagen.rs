//! Benchmark construction: the disjoint-balls dataset, species-count grid
//! ingestion, and synthetic corpora for prior training.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use std::path::Path;

use crate::domain::{make_task, GridSpec, SearchTask};
use crate::error::{AtdError, Result};
use crate::permanent::{GmmPrior, TrainBuffer};
use crate::seed::stream_rng;

/// Parameters for one disjoint-balls task.
#[derive(Debug, Clone, Copy)]
pub struct BallsTaskSpec {
    pub height: usize,
    pub width: usize,
    pub count: usize,
    pub radius: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub budget: usize,
    pub seed: u64,
    pub max_retries: usize,
}

impl BallsTaskSpec {
    /// Canonical 32x32 benchmark geometry with single-cell queries.
    pub fn benchmark(count: usize, radius: usize, budget: usize, seed: u64) -> Self {
        Self {
            height: 32,
            width: 32,
            count,
            radius,
            patch_h: 1,
            patch_w: 1,
            budget,
            seed,
            max_retries: 1000,
        }
    }
}

/// Pixels of a discrete disk: `(dx, dy)` with `dx^2 + dy^2 <= r^2`.
pub fn disk_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dx in -r..=r {
        for dy in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Generates a task containing `count` pairwise-disjoint disks of one
/// radius, placed uniformly at random inside the grid. Content equals the
/// disk indicator image.
pub fn gen_balls_task(spec: &BallsTaskSpec) -> Result<SearchTask> {
    let grid = GridSpec::new(spec.height, spec.width, spec.patch_h, spec.patch_w)?;
    if spec.count == 0 {
        return Err(AtdError::InvalidParam("ball count must be >= 1".into()));
    }
    let r = spec.radius;
    if spec.height < 2 * r + 1 || spec.width < 2 * r + 1 {
        return Err(AtdError::InvalidParam(
            "grid too small for the ball radius".into(),
        ));
    }
    let offsets = disk_offsets(r);
    let mut rng = stream_rng(spec.seed, "balls", 0);
    let mut mask = Array2::<u8>::zeros((spec.height, spec.width));
    for _ in 0..spec.count {
        let mut placed = false;
        for _ in 0..spec.max_retries {
            let cy = rng.gen_range(r..spec.height - r) as isize;
            let cx = rng.gen_range(r..spec.width - r) as isize;
            let overlap = offsets
                .iter()
                .any(|&(dx, dy)| mask[[(cy + dy) as usize, (cx + dx) as usize]] == 1);
            if !overlap {
                for &(dx, dy) in &offsets {
                    mask[[(cy + dy) as usize, (cx + dx) as usize]] = 1;
                }
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(AtdError::PlacementFailure {
                count: spec.count,
                radius: r,
                retries: spec.max_retries,
            });
        }
    }
    let content = mask.map(|&v| f64::from(v));
    make_task(content, mask, grid, spec.budget)
}

/// Benchmark task with the ball count drawn from [5, 10] and radius from
/// {3, 4}, one draw per task. Dense combinations (ten radius-4 disks barely
/// fit a 32x32 grid) can defeat rejection sampling; placement failures
/// re-seed the draw, deterministically.
pub fn gen_random_balls_task(budget: usize, seed: u64) -> Result<SearchTask> {
    let mut last = None;
    for attempt in 0..32u64 {
        let mut rng = stream_rng(seed, "balls-spec", attempt);
        let count = rng.gen_range(5..=10);
        let radius = if rng.gen_bool(0.5) { 3 } else { 4 };
        let mut spec = BallsTaskSpec::benchmark(count, radius, budget, seed);
        spec.seed = crate::seed::derive(seed, "balls-layout", attempt);
        match gen_balls_task(&spec) {
            Ok(task) => return Ok(task),
            Err(e @ AtdError::PlacementFailure { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt ran"))
}

/// Geographic bounding box (degrees).
#[derive(Debug, Clone, Copy)]
pub struct BoundingBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl BoundingBox {
    pub fn validate(&self) -> Result<()> {
        if self.lat_max <= self.lat_min || self.lon_max <= self.lon_min {
            return Err(AtdError::InvalidParam("degenerate bounding box".into()));
        }
        Ok(())
    }
}

pub const SPECIES_GRID: usize = 64;

/// Observation counts binned onto a 64x64 grid.
#[derive(Debug, Clone)]
pub struct SpeciesGrid {
    pub counts: Array2<u64>,
    pub region: BoundingBox,
    pub skipped: usize,
}

/// Bins `(lat, lon, count)` records into the region grid; records outside
/// the region are skipped and counted.
pub fn ingest_species_records(
    rows: &[(f64, f64, u64)],
    region: BoundingBox,
) -> Result<SpeciesGrid> {
    region.validate()?;
    if rows.is_empty() {
        return Err(AtdError::Empty("species records"));
    }
    let mut counts = Array2::<u64>::zeros((SPECIES_GRID, SPECIES_GRID));
    let mut skipped = 0;
    let n = SPECIES_GRID as f64;
    for &(lat, lon, c) in rows {
        if lat < region.lat_min || lat > region.lat_max || lon < region.lon_min || lon > region.lon_max
        {
            skipped += 1;
            continue;
        }
        let row = (((lat - region.lat_min) / (region.lat_max - region.lat_min)) * n) as usize;
        let col = (((lon - region.lon_min) / (region.lon_max - region.lon_min)) * n) as usize;
        counts[[row.min(SPECIES_GRID - 1), col.min(SPECIES_GRID - 1)]] += c;
    }
    Ok(SpeciesGrid {
        counts,
        region,
        skipped,
    })
}

/// Reads headerless `lat,lon,count` rows (a header line is tolerated).
pub fn read_species_csv(path: &Path) -> Result<Vec<(f64, f64, u64)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| AtdError::Config(format!("csv: {e}")))?;
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| AtdError::Config(format!("csv row: {e}")))?;
        if record.len() < 3 {
            continue;
        }
        let parse = (
            record[0].trim().parse::<f64>(),
            record[1].trim().parse::<f64>(),
            record[2].trim().parse::<u64>(),
        );
        match parse {
            (Ok(lat), Ok(lon), Ok(c)) => rows.push((lat, lon, c)),
            _ if i == 0 => continue, // header
            _ => {
                return Err(AtdError::Config(format!(
                    "unparseable species record at line {}",
                    i + 1
                )))
            }
        }
    }
    Ok(rows)
}

/// Turns a count grid into a search task: content normalized by the grid
/// maximum, targets where counts reach the threshold, 2x2 query blocks.
pub fn species_to_task(grid: &SpeciesGrid, threshold: u64, budget: usize) -> Result<SearchTask> {
    if threshold == 0 {
        return Err(AtdError::InvalidParam("threshold must be >= 1".into()));
    }
    let max = *grid.counts.iter().max().unwrap();
    if max == 0 {
        return Err(AtdError::InvalidParam("all-zero species grid".into()));
    }
    let content = grid.counts.map(|&c| c as f64 / max as f64);
    let mask = grid.counts.map(|&c| u8::from(c >= threshold));
    let gs = GridSpec::new(SPECIES_GRID, SPECIES_GRID, 2, 2)?;
    make_task(content, mask, gs, budget)
}

/// Synthetic corpus families for prior pretraining.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusKind {
    /// Draws from the canonical analytic mixture (clamped to [0, 1]).
    GmmDraws,
    /// Disjoint-ball indicator images.
    Balls,
    /// Random soft-stroke images; a stand-in for handwritten-digit corpora.
    DigitsLike,
}

/// Generates `n` grids in [0, 1], deterministic per seed.
pub fn gen_prior_corpus(
    kind: CorpusKind,
    n: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<TrainBuffer> {
    if n == 0 {
        return Err(AtdError::InvalidParam("corpus size must be >= 1".into()));
    }
    let mut buffer = TrainBuffer::new(n);
    match kind {
        CorpusKind::GmmDraws => {
            let prior = GmmPrior::canonical_blobs(height, width);
            let mut rng = stream_rng(seed, "corpus-gmm", 0);
            for _ in 0..n {
                buffer.push(prior.sample(&mut rng).map(|v| v.clamp(0.0, 1.0)))?;
            }
        }
        CorpusKind::Balls => {
            if (height, width) != (32, 32) {
                return Err(AtdError::InvalidParam(
                    "the balls corpus uses the 32x32 benchmark geometry".into(),
                ));
            }
            for i in 0..n {
                let task =
                    gen_random_balls_task(1, crate::seed::derive(seed, "corpus-balls", i as u64))?;
                buffer.push(task.content)?;
            }
        }
        CorpusKind::DigitsLike => {
            for i in 0..n {
                let mut rng = stream_rng(seed, "corpus-digits", i as u64);
                buffer.push(stroke_image(height, width, &mut rng))?;
            }
        }
    }
    Ok(buffer)
}

/// Soft polyline strokes between random anchors; intensities in [0, 1].
/// Strokes are deliberately thick and smooth (low spatial frequency) so a
/// narrow dense denoiser can internalize the corpus structure.
fn stroke_image<R: Rng>(height: usize, width: usize, rng: &mut R) -> Array2<f64> {
    let mut img = Array2::<f64>::zeros((height, width));
    let segments = rng.gen_range(2..=4);
    let margin = 3.0;
    let mut prev = (
        rng.gen_range(margin..height as f64 - margin),
        rng.gen_range(margin..width as f64 - margin),
    );
    let thickness: f64 = rng.gen_range(2.5..3.5);
    let reach = (3.0 * thickness).ceil();
    for _ in 0..segments {
        let next = (
            rng.gen_range(margin..height as f64 - margin),
            rng.gen_range(margin..width as f64 - margin),
        );
        let steps = ((next.0 - prev.0).hypot(next.1 - prev.1).ceil() as usize).max(1) * 2;
        for s in 0..=steps {
            let f = s as f64 / steps as f64;
            let cy = prev.0 + f * (next.0 - prev.0);
            let cx = prev.1 + f * (next.1 - prev.1);
            let lo_y = (cy - reach).floor().max(0.0) as usize;
            let hi_y = ((cy + reach).ceil() as usize).min(height - 1);
            let lo_x = (cx - reach).floor().max(0.0) as usize;
            let hi_x = ((cx + reach).ceil() as usize).min(width - 1);
            for i in lo_y..=hi_y {
                for j in lo_x..=hi_x {
                    let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
                    let v = (-d2 / (thickness * thickness)).exp();
                    let cell = &mut img[[i, j]];
                    *cell = (*cell + v * (1.0 - *cell)).min(1.0);
                }
            }
        }
        prev = next;
    }
    // Mild per-image noise floor keeps the corpus off exact zeros.
    for v in img.iter_mut() {
        let jitter: f64 = rng.sample::<f64, _>(StandardNormal) * 0.01;
        *v = (*v + jitter).clamp(0.0, 1.0);
    }
    img
}

/// Draws `count` distinct benchmark tasks for a seed list.
pub fn balls_task_set(budget: usize, seeds: &[u64]) -> Result<Vec<SearchTask>> {
    seeds
        .iter()
        .map(|&s| gen_random_balls_task(budget, s))
        .collect()
}

/// Picks `n` items from a buffer without replacement (seeded).
pub fn subsample_buffer(buffer: &TrainBuffer, n: usize, seed: u64) -> Result<TrainBuffer> {
    if buffer.is_empty() {
        return Err(AtdError::Empty("train buffer"));
    }
    let mut idx: Vec<usize> = (0..buffer.len()).collect();
    let mut rng = stream_rng(seed, "subsample", 0);
    idx.shuffle(&mut rng);
    idx.truncate(n.max(1));
    TrainBuffer::from_samples(
        idx.into_iter()
            .map(|i| buffer.samples()[i].clone())
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disk_pixel_counts_match_rasterization() {
        assert_eq!(disk_offsets(3).len(), 29);
        assert_eq!(disk_offsets(4).len(), 49);
    }

    #[test]
    fn balls_task_total_mass_and_disjointness() {
        let spec = BallsTaskSpec::benchmark(5, 3, 250, 42);
        let task = gen_balls_task(&spec).unwrap();
        let total: u64 = task.target_mask.iter().map(|&v| u64::from(v)).sum();
        assert_eq!(total, 5 * 29, "disjoint disks must not share pixels");
        assert_eq!(task.content, task.target_mask.map(|&v| f64::from(v)));
    }

    #[test]
    fn balls_task_deterministic_per_seed() {
        let spec = BallsTaskSpec::benchmark(7, 4, 200, 9);
        let a = gen_balls_task(&spec).unwrap();
        let b = gen_balls_task(&spec).unwrap();
        assert_eq!(a.target_mask, b.target_mask);
        let c = gen_balls_task(&BallsTaskSpec::benchmark(7, 4, 200, 10)).unwrap();
        assert_ne!(a.target_mask, c.target_mask);
    }

    #[test]
    fn dense_packing_succeeds_or_reports_failure() {
        let spec = BallsTaskSpec::benchmark(10, 4, 250, 3);
        match gen_balls_task(&spec) {
            Ok(task) => {
                let total: u64 = task.target_mask.iter().map(|&v| u64::from(v)).sum();
                assert_eq!(total, 10 * 49);
            }
            Err(AtdError::PlacementFailure { count, radius, .. }) => {
                assert_eq!((count, radius), (10, 4));
            }
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn species_binning_single_and_additive() {
        let region = BoundingBox {
            lat_min: 0.0,
            lat_max: 64.0,
            lon_min: 0.0,
            lon_max: 64.0,
        };
        let grid = ingest_species_records(&[(32.2, 32.2, 1)], region).unwrap();
        assert_eq!(grid.counts.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(grid.counts[[32, 32]], 1);

        let grid = ingest_species_records(&[(5.5, 8.5, 2), (5.5, 8.5, 3)], region).unwrap();
        assert_eq!(grid.counts[[5, 8]], 5);
    }

    #[test]
    fn species_records_outside_region_are_skipped() {
        let region = BoundingBox {
            lat_min: 10.0,
            lat_max: 20.0,
            lon_min: 10.0,
            lon_max: 20.0,
        };
        let grid =
            ingest_species_records(&[(15.0, 15.0, 1), (25.0, 15.0, 2), (15.0, 5.0, 2)], region)
                .unwrap();
        assert_eq!(grid.skipped, 2);
        assert!(ingest_species_records(&[], region).is_err());
    }

    #[test]
    fn uniform_scatter_binning_statistics() {
        let region = BoundingBox {
            lat_min: -1.0,
            lat_max: 1.0,
            lon_min: -1.0,
            lon_max: 1.0,
        };
        let mut rng = stream_rng(3, "scatter", 0);
        let rows: Vec<(f64, f64, u64)> = (0..10_000)
            .map(|_| {
                (
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    1u64,
                )
            })
            .collect();
        let grid = ingest_species_records(&rows, region).unwrap();
        let total: u64 = grid.counts.iter().sum();
        assert_eq!(total, 10_000);
        let mean = total as f64 / (SPECIES_GRID * SPECIES_GRID) as f64;
        let p = 1.0 / (SPECIES_GRID * SPECIES_GRID) as f64;
        let sigma_mean = (10_000.0 * p * (1.0 - p)).sqrt() / (SPECIES_GRID * SPECIES_GRID) as f64;
        assert!((mean - 10_000.0 / 4096.0).abs() <= 3.0 * sigma_mean.max(1e-9));
    }

    #[test]
    fn species_task_thresholding() {
        let region = BoundingBox {
            lat_min: 0.0,
            lat_max: 1.0,
            lon_min: 0.0,
            lon_max: 1.0,
        };
        let mut rows = vec![(0.01, 0.01, 4u64), (0.99, 0.99, 2u64)];
        rows.push((0.5, 0.5, 1));
        let grid = ingest_species_records(&rows, region).unwrap();
        let task = species_to_task(&grid, 1, 100).unwrap();
        assert_eq!(task.grid.candidates(), 1024);
        // threshold 1 -> mask = counts > 0
        let nonzero = grid.counts.iter().filter(|&&c| c > 0).count();
        let mask_set: usize = task.target_mask.iter().map(|&v| usize::from(v)).sum();
        assert_eq!(nonzero, mask_set);
        // content normalized by max count
        assert!((task.content.iter().cloned().fold(0.0, f64::max) - 1.0).abs() < 1e-12);
        // sum of outcomes * patch area = cells meeting threshold
        let total: f64 = (0..task.grid.candidates())
            .map(|q| task.outcome(q).unwrap() * 4.0)
            .sum();
        assert!((total - mask_set as f64).abs() < 1e-9);
    }

    #[test]
    fn species_task_rejects_all_zero() {
        let region = BoundingBox {
            lat_min: 0.0,
            lat_max: 1.0,
            lon_min: 2.0,
            lon_max: 3.0,
        };
        let grid = ingest_species_records(&[(0.5, 2.5, 0)], region).unwrap();
        assert!(species_to_task(&grid, 1, 10).is_err());
    }

    #[test]
    fn uniform_counts_make_every_outcome_one() {
        let region = BoundingBox {
            lat_min: 0.0,
            lat_max: 1.0,
            lon_min: 0.0,
            lon_max: 1.0,
        };
        let mut rows = Vec::new();
        let step = 1.0 / SPECIES_GRID as f64;
        for i in 0..SPECIES_GRID {
            for j in 0..SPECIES_GRID {
                rows.push((
                    (i as f64 + 0.5) * step,
                    (j as f64 + 0.5) * step,
                    3u64,
                ));
            }
        }
        let grid = ingest_species_records(&rows, region).unwrap();
        let task = species_to_task(&grid, 3, 64).unwrap();
        for q in 0..task.grid.candidates() {
            assert_eq!(task.outcome(q).unwrap(), 1.0);
        }
    }

    #[test]
    fn corpora_are_seed_deterministic_and_bounded() {
        for kind in [CorpusKind::GmmDraws, CorpusKind::Balls, CorpusKind::DigitsLike] {
            // Balls need the benchmark geometry; 16x16 cannot fit 10 disks.
            let dim = if kind == CorpusKind::Balls { 32 } else { 16 };
            let a = gen_prior_corpus(kind, 3, dim, dim, 7).unwrap();
            let b = gen_prior_corpus(kind, 3, dim, dim, 7).unwrap();
            for (x, y) in a.samples().iter().zip(b.samples()) {
                assert_eq!(x, y);
            }
            for s in a.samples() {
                assert!(s.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
        let single = gen_prior_corpus(CorpusKind::GmmDraws, 1, 8, 8, 0).unwrap();
        assert_eq!(single.len(), 1);
        assert!(gen_prior_corpus(CorpusKind::Balls, 0, 8, 8, 0).is_err());
    }

    #[test]
    fn csv_round_trip_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.csv");
        std::fs::write(&path, "lat,lon,count\n1.5,2.5,3\n4.0,5.0,7\n").unwrap();
        let rows = read_species_csv(&path).unwrap();
        assert_eq!(rows, vec![(1.5, 2.5, 3), (4.0, 5.0, 7)]);
    }
}
