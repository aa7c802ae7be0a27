//! `atd`: generate datasets, pretrain the permanent memory, run episodes and
//! suites, and render reports/plots.

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

use atd_core::datagen;
use atd_core::domain;
use atd_core::harness::{self, config::Method, ExperimentConfig};
use atd_core::permanent::{pretrain_denoiser, TrainOpts};
use atd_core::schedule::NoiseSchedule;

#[derive(Parser)]
#[command(name = "atd", about = "Active target discovery simulator", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate datasets: benchmark tasks, species tasks, prior corpora.
    Generate {
        #[command(subcommand)]
        what: GenerateCmd,
    },
    /// Pretrain the permanent-memory denoiser and write a checkpoint.
    Pretrain(PretrainArgs),
    /// Run a single episode or a full suite.
    Run {
        #[command(subcommand)]
        what: RunCmd,
    },
    /// Render result tables from saved suite results.
    Report {
        /// Suite results JSON produced by `run suite`.
        #[arg(long)]
        results: PathBuf,
        /// Output directory (defaults under the output root).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render discovery curves and SR-vs-budget charts.
    Plot {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum GenerateCmd {
    /// Disjoint-balls benchmark tasks (32x32 grid, single-cell queries).
    Balls {
        /// Number of tasks.
        #[arg(long, default_value_t = 5)]
        count: usize,
        #[arg(long, default_value_t = 250)]
        budget: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for task files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Species task from a lat,lon,count CSV file.
    Species {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        lat_min: f64,
        #[arg(long)]
        lat_max: f64,
        #[arg(long)]
        lon_min: f64,
        #[arg(long)]
        lon_max: f64,
        #[arg(long, default_value_t = 1)]
        threshold: u64,
        #[arg(long, default_value_t = 250)]
        budget: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthetic pretraining corpus (written as a task-free sample file).
    Corpus {
        /// gmm-draws | balls | digits-like
        #[arg(long, default_value = "digits-like")]
        kind: String,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct PretrainArgs {
    /// Corpus file from `generate corpus`; omit to generate in-process.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Corpus kind when generating in-process.
    #[arg(long, default_value = "digits-like")]
    kind: String,
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 32)]
    embed_dim: usize,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    beta_start: f64,
    #[arg(long, default_value_t = 0.2)]
    beta_end: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum RunCmd {
    /// One episode on one task.
    Episode(RunArgs),
    /// The methods x budgets x seeds matrix from the config.
    Suite(RunArgs),
    /// Sequential tasks with optional cross-task permanent updates.
    Cross(RunArgs),
}

/// Shared run arguments: a config file plus per-field overrides.
#[derive(Args, Clone)]
struct RunArgs {
    /// TOML config; omitted fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (under ATD_OUT_ROOT when relative).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    budgets: Option<String>,
    #[arg(long)]
    methods: Option<String>,
    #[arg(long)]
    task_kind: Option<String>,
    #[arg(long)]
    task_paths: Option<String>,
    #[arg(long)]
    p_samples: Option<usize>,
    #[arg(long)]
    sigma_x: Option<f64>,
    #[arg(long)]
    amplification: Option<f64>,
    /// minmax | none
    #[arg(long)]
    normalization: Option<String>,
    #[arg(long)]
    success_threshold: Option<f64>,
    /// adaptive | uniform
    #[arg(long)]
    scheduler_mode: Option<String>,
    #[arg(long)]
    updates: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    h_epochs: Option<usize>,
    #[arg(long)]
    h_lr: Option<f64>,
    #[arg(long)]
    h_momentum: Option<f64>,
    #[arg(long)]
    h_tau_loss: Option<f64>,
    #[arg(long)]
    h_buffer_p: Option<usize>,
    #[arg(long)]
    reward_epochs: Option<usize>,
    #[arg(long)]
    reward_lr: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    beta_start: Option<f64>,
    #[arg(long)]
    beta_end: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    /// analytic-gmm | tiny-denoiser
    #[arg(long)]
    backend: Option<String>,
    /// blobs | standard-normal
    #[arg(long)]
    analytic_prior: Option<String>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<String>,
    #[arg(long)]
    corpus_n: Option<usize>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    pretrain_lr: Option<f64>,
    #[arg(long)]
    pretrain_seed: Option<u64>,
    #[arg(long)]
    permanent_update: Option<bool>,
    #[arg(long)]
    permanent_update_epochs: Option<usize>,
    #[arg(long)]
    permanent_update_lr: Option<f64>,
    #[arg(long)]
    dump_scores: Option<bool>,
    /// Task files for `run cross`.
    #[arg(long)]
    tasks: Option<String>,
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> anyhow::Result<Vec<T>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| anyhow::anyhow!("bad {what} entry {s:?}"))
        })
        .collect()
}

impl RunArgs {
    fn build_config(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => ExperimentConfig {
                schema: harness::config::CONFIG_SCHEMA,
                ..Default::default()
            },
        };
        if let Some(m) = &self.method {
            cfg.method = Method::parse(m)?;
        }
        if let Some(b) = self.budget {
            cfg.task.budget = b;
        }
        if let Some(k) = &self.task_kind {
            cfg.task.kind = k.clone();
        }
        if let Some(p) = &self.task_paths {
            cfg.task.paths = p.split(',').map(|s| PathBuf::from(s.trim())).collect();
        }
        if let Some(v) = self.p_samples {
            cfg.policy.p_samples = v;
        }
        if let Some(v) = self.sigma_x {
            cfg.policy.sigma_x = v;
        }
        if let Some(v) = self.amplification {
            cfg.policy.amplification = v;
        }
        if let Some(v) = &self.normalization {
            cfg.policy.normalization = match v.as_str() {
                "minmax" => atd_core::policy::Normalization::Minmax,
                "none" => atd_core::policy::Normalization::None,
                other => bail!("unknown normalization {other:?}"),
            };
        }
        if let Some(v) = self.success_threshold {
            cfg.policy.success_threshold = v;
        }
        if let Some(v) = &self.scheduler_mode {
            cfg.scheduler.mode = match v.as_str() {
                "adaptive" => atd_core::transient::SchedulerMode::Adaptive,
                "uniform" => atd_core::transient::SchedulerMode::Uniform,
                other => bail!("unknown scheduler mode {other:?}"),
            };
        }
        if let Some(v) = self.updates {
            cfg.scheduler.updates = v;
        }
        if let Some(v) = self.gamma {
            cfg.scheduler.gamma = v;
        }
        if let Some(v) = self.h_epochs {
            cfg.h_model.epochs = v;
        }
        if let Some(v) = self.h_lr {
            cfg.h_model.lr = v;
        }
        if let Some(v) = self.h_momentum {
            cfg.h_model.momentum = v;
        }
        if let Some(v) = self.h_tau_loss {
            cfg.h_model.tau_loss = v;
        }
        if let Some(v) = self.h_buffer_p {
            cfg.h_model.buffer_p = v;
        }
        if let Some(v) = self.reward_epochs {
            cfg.reward.epochs = v;
        }
        if let Some(v) = self.reward_lr {
            cfg.reward.lr = v;
        }
        if let Some(v) = self.steps {
            cfg.diffusion.steps = v;
        }
        if let Some(v) = self.beta_start {
            cfg.diffusion.beta_start = v;
        }
        if let Some(v) = self.beta_end {
            cfg.diffusion.beta_end = v;
        }
        if let Some(v) = self.eta {
            cfg.diffusion.eta = v;
        }
        if let Some(v) = &self.backend {
            cfg.permanent.backend = v.clone();
        }
        if let Some(v) = &self.analytic_prior {
            cfg.permanent.analytic_prior = v.clone();
        }
        if let Some(v) = &self.checkpoint {
            cfg.permanent.checkpoint = v.display().to_string();
        }
        if let Some(v) = &self.corpus {
            cfg.permanent.corpus = v.clone();
        }
        if let Some(v) = self.corpus_n {
            cfg.permanent.corpus_n = v;
        }
        if let Some(v) = self.pretrain_epochs {
            cfg.permanent.pretrain_epochs = v;
        }
        if let Some(v) = self.pretrain_lr {
            cfg.permanent.pretrain_lr = v;
        }
        if let Some(v) = self.pretrain_seed {
            cfg.permanent.pretrain_seed = v;
        }
        if let Some(v) = self.permanent_update {
            cfg.permanent.update_enabled = v;
        }
        if let Some(v) = self.permanent_update_epochs {
            cfg.permanent.update_epochs = v;
        }
        if let Some(v) = self.permanent_update_lr {
            cfg.permanent.update_lr = v;
        }
        if let Some(v) = self.dump_scores {
            cfg.dump_scores = v;
        }
        if let Some(ms) = &self.methods {
            cfg.suite.methods = ms
                .split(',')
                .map(|s| Method::parse(s.trim()))
                .collect::<Result<_, _>>()?;
        }
        if let Some(bs) = &self.budgets {
            cfg.suite.budgets = parse_list(bs, "budget")?;
        }
        if let Some(ss) = &self.seeds {
            cfg.suite.seeds = parse_list(ss, "seed")?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self, default_name: &str) -> PathBuf {
        let dir = self
            .out
            .clone()
            .unwrap_or_else(|| PathBuf::from(default_name));
        resolve_out(&dir)
    }
}

/// Relative outputs land under `ATD_OUT_ROOT` (default: current directory).
fn resolve_out(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    let root = std::env::var_os("ATD_OUT_ROOT").unwrap_or_else(|| ".".into());
    PathBuf::from(root).join(path)
}

fn cmd_generate(what: GenerateCmd) -> anyhow::Result<()> {
    match what {
        GenerateCmd::Balls {
            count,
            budget,
            seed,
            out,
        } => {
            let out = resolve_out(&out);
            std::fs::create_dir_all(&out)?;
            for i in 0..count {
                let task_seed = seed + i as u64;
                let task = datagen::gen_random_balls_task(budget, task_seed)?;
                let path = out.join(format!("balls_{task_seed}.json"));
                domain::save_task(&task, &path)?;
                println!("wrote {}", path.display());
            }
        }
        GenerateCmd::Species {
            records,
            lat_min,
            lat_max,
            lon_min,
            lon_max,
            threshold,
            budget,
            out,
        } => {
            let rows = datagen::read_species_csv(&records)?;
            let region = datagen::BoundingBox {
                lat_min,
                lat_max,
                lon_min,
                lon_max,
            };
            let grid = datagen::ingest_species_records(&rows, region)?;
            if grid.skipped > 0 {
                eprintln!("skipped {} records outside the region", grid.skipped);
            }
            let task = datagen::species_to_task(&grid, threshold, budget)?;
            let out = resolve_out(&out);
            domain::save_task(&task, &out)?;
            println!("wrote {}", out.display());
        }
        GenerateCmd::Corpus {
            kind,
            n,
            height,
            width,
            seed,
            out,
        } => {
            let kind = parse_corpus_kind(&kind)?;
            let buffer = datagen::gen_prior_corpus(kind, n, height, width, seed)?;
            let out = resolve_out(&out);
            write_corpus(&buffer, &out)?;
            println!("wrote {} samples to {}", buffer.len(), out.display());
        }
    }
    Ok(())
}

fn parse_corpus_kind(kind: &str) -> anyhow::Result<datagen::CorpusKind> {
    Ok(match kind {
        "gmm-draws" => datagen::CorpusKind::GmmDraws,
        "balls" => datagen::CorpusKind::Balls,
        "digits-like" => datagen::CorpusKind::DigitsLike,
        other => bail!("unknown corpus kind {other:?}"),
    })
}

#[derive(serde::Serialize, serde::Deserialize)]
struct CorpusFile {
    schema: String,
    height: usize,
    width: usize,
    samples: Vec<Vec<f64>>,
}

fn write_corpus(buffer: &atd_core::permanent::TrainBuffer, path: &Path) -> anyhow::Result<()> {
    let (h, w) = buffer.samples()[0].dim();
    let file = CorpusFile {
        schema: "atd-corpus-v1".into(),
        height: h,
        width: w,
        samples: buffer
            .samples()
            .iter()
            .map(|s| s.iter().copied().collect())
            .collect(),
    };
    std::fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

fn read_corpus(path: &Path) -> anyhow::Result<atd_core::permanent::TrainBuffer> {
    let file: CorpusFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if file.schema != "atd-corpus-v1" {
        bail!("unsupported corpus schema {:?}", file.schema);
    }
    let samples = file
        .samples
        .into_iter()
        .map(|row| ndarray::Array2::from_shape_vec((file.height, file.width), row))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(atd_core::permanent::TrainBuffer::from_samples(samples)?)
}

fn cmd_pretrain(args: PretrainArgs) -> anyhow::Result<()> {
    let buffer = match &args.corpus {
        Some(path) => read_corpus(path)?,
        None => datagen::gen_prior_corpus(
            parse_corpus_kind(&args.kind)?,
            args.n,
            args.height,
            args.width,
            args.seed,
        )?,
    };
    let schedule = NoiseSchedule::linear(args.steps, args.beta_start, args.beta_end, 0.0)?;
    let opts = TrainOpts {
        epochs: args.epochs,
        lr: args.lr,
        momentum: 0.9,
        batch_size: 32,
        seed: args.seed,
        clip: 100.0,
    };
    let (model, report) =
        pretrain_denoiser(&buffer, &schedule, args.hidden, args.embed_dim, &opts)?;
    let out = resolve_out(&args.out);
    model.save(&out)?;
    println!(
        "pretrained on {} samples, eval loss {:.4} -> {:.4}, wrote {}",
        buffer.len(),
        report.eval_losses.first().copied().unwrap_or(f64::NAN),
        report.eval_losses.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn cmd_run_episode(args: RunArgs) -> anyhow::Result<()> {
    let cfg = args.build_config()?;
    let seed = args.seed.unwrap_or(0);
    let task = cfg.build_task(seed, cfg.task.budget)?;
    let model = cfg.build_permanent(task.grid.height, task.grid.width)?;
    let out_dir = args.out_dir("runs");
    std::fs::create_dir_all(&out_dir)?;
    let name = format!("{}_b{}_s{}", cfg.method.name(), task.budget, seed);
    let header = harness::RunLogHeader {
        schema: harness::record::RUNLOG_SCHEMA.into(),
        method: cfg.method.name().into(),
        budget: task.budget,
        seed,
    };
    match harness::run_episode(&cfg, &task, &model, seed) {
        Ok(episode) => {
            let log = out_dir.join(format!("{name}.jsonl"));
            harness::write_run_log(&log, &header, &episode.records, None)?;
            std::fs::write(
                out_dir.join(format!("{name}_curve.csv")),
                harness::plot::run_curve_csv(&episode.records),
            )?;
            if cfg.dump_scores {
                let dump = out_dir.join(format!("{name}_scores.jsonl"));
                let mut text = String::new();
                for (step, b) in episode.score_dumps.iter().enumerate() {
                    for (q, c) in b.per_candidate.iter().enumerate() {
                        text.push_str(&serde_json::to_string(&serde_json::json!({
                            "step": step, "candidate": q,
                            "expl": c.expl, "likeli": c.likeli,
                            "reward_sum": c.reward_sum, "exploit": c.exploit,
                            "combined": c.combined,
                        }))?);
                        text.push('\n');
                    }
                }
                std::fs::write(dump, text)?;
            }
            println!("SR = {:.4}  ({} steps, log {})", episode.sr, episode.records.len(), name);
        }
        Err(atd_core::AtdError::NonFiniteScore { step, candidate }) => {
            let log = out_dir.join(format!("{name}.jsonl"));
            harness::write_run_log(
                &log,
                &header,
                &[],
                Some((step, &format!("non-finite score at candidate {candidate}"))),
            )?;
            bail!("episode aborted: non-finite score at step {step}");
        }
        Err(e) => return Err(e.into()),
    }
    Ok(())
}

fn cmd_run_suite(args: RunArgs) -> anyhow::Result<()> {
    let cfg = args.build_config()?;
    let out_dir = args.out_dir("suite");
    std::fs::create_dir_all(&out_dir)?;
    let logs = out_dir.join("logs");
    let results = harness::run_suite(&cfg, Some(&logs))?;
    results.save(&out_dir.join("results.json"))?;
    harness::report::write_report(&results, &out_dir)?;
    harness::plot::emit_plots(&results, &out_dir.join("plots"))?;
    print!("{}", harness::report::results_table(&results));
    println!("results under {}", out_dir.display());
    Ok(())
}

fn cmd_run_cross(args: RunArgs) -> anyhow::Result<()> {
    let cfg = args.build_config()?;
    let seed = args.seed.unwrap_or(0);
    let paths = args
        .tasks
        .as_ref()
        .context("run cross needs --tasks a.json,b.json")?;
    let tasks = paths
        .split(',')
        .map(|p| domain::load_task(Path::new(p.trim())))
        .collect::<Result<Vec<_>, _>>()?;
    if tasks.is_empty() {
        bail!("no tasks given");
    }
    let model = cfg.build_permanent(tasks[0].grid.height, tasks[0].grid.width)?;
    let result = harness::cross_task_loop(&cfg, &tasks, &model, seed)?;
    for (i, ep) in result.episodes.iter().enumerate() {
        println!("task {i}: SR = {:.4}", ep.sr);
    }
    Ok(())
}

fn cmd_report(results: PathBuf, out: Option<PathBuf>) -> anyhow::Result<()> {
    let results = harness::SuiteResults::load(&results)?;
    let table = harness::report::results_table(&results);
    print!("{table}");
    if let Some(dir) = out {
        harness::report::write_report(&results, &resolve_out(&dir))?;
    }
    Ok(())
}

fn cmd_plot(results: PathBuf, out: Option<PathBuf>) -> anyhow::Result<()> {
    let results = harness::SuiteResults::load(&results)?;
    let dir = resolve_out(&out.unwrap_or_else(|| PathBuf::from("plots")));
    harness::plot::emit_plots(&results, &dir)?;
    println!("plots under {}", dir.display());
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate { what } => cmd_generate(what),
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Run { what } => match what {
            RunCmd::Episode(args) => cmd_run_episode(args),
            RunCmd::Suite(args) => cmd_run_suite(args),
            RunCmd::Cross(args) => cmd_run_cross(args),
        },
        Command::Report { results, out } => cmd_report(results, out),
        Command::Plot { results, out } => cmd_plot(results, out),
    }
}
