//! The subcommands, as library functions that return what they wrote.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};

use stochflow::dataset::{make_task, SweepAxis, Task, TaskConfig};
use stochflow::experiment::{evaluate_model, mean_std, Variant};
use stochflow::interpolant::InterpolantSchedule;
use stochflow::metrics::MetricsReport;
use stochflow::numcore::{checkpoint, VelocityScoreModel};
use stochflow::sampler::{generate, Solver, Trajectory};
use stochflow::trainer::train;

use crate::config::RunConfig;
use crate::manifest::{Manifest, Status};

pub const MODEL_FILE: &str = "model.stfl";
pub const EMA_MODEL_FILE: &str = "model_ema.stfl";
pub const HISTORY_FILE: &str = "history.csv";
pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

pub const RESULTS_HEADER: [&str; 9] =
    ["run_id", "d", "n_train", "seed", "config_hash", "mean_cosine", "sinkhorn", "mse", "match_fraction"];
/// Sweep rows carry the result columns followed by these.
pub const SWEEP_EXTRA: [&str; 2] = ["variant", "status"];
pub const SUMMARY_HEADER: [&str; 13] = [
    "axis", "value", "variant", "n_ok", "n_failed", "mean_cosine_mean", "mean_cosine_std", "sinkhorn_mean",
    "sinkhorn_std", "mse_mean", "mse_std", "match_fraction_mean", "match_fraction_std",
];
pub const ABLATE_HEADER: [&str; 13] = [
    "kind", "scale", "variant", "n_ok", "n_failed", "mean_cosine_mean", "mean_cosine_std", "sinkhorn_mean",
    "sinkhorn_std", "mse_mean", "mse_std", "match_fraction_mean", "match_fraction_std",
];

/// Command-line settings that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub solver: Option<Solver>,
    pub steps: Option<usize>,
    pub eps: Option<f64>,
    pub ema: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(solver) = self.solver {
            cfg.sampler.solver = solver;
        }
        if let Some(steps) = self.steps {
            cfg.sampler.steps = steps;
        }
        if let Some(eps) = self.eps {
            cfg.sampler.source_noise = eps;
        }
        cfg.use_ema |= self.ema;
        cfg.validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub run_id: String,
    pub dim: usize,
    pub n_train: usize,
    pub seed: u64,
    pub config_hash: String,
    pub report: Option<MetricsReport>,
}

impl ResultRow {
    fn fields(&self) -> Vec<String> {
        let mut v = vec![
            self.run_id.clone(),
            self.dim.to_string(),
            self.n_train.to_string(),
            self.seed.to_string(),
            self.config_hash.clone(),
        ];
        match &self.report {
            Some(r) => v.extend([r.mean_cosine, r.sinkhorn, r.mse, r.match_fraction].map(|x| format!("{x:e}"))),
            None => v.extend(std::iter::repeat_n(String::new(), 4)),
        }
        v
    }
}

fn task_for(cfg: &RunConfig) -> Result<Task> {
    let tc = TaskConfig {
        test_n: cfg.data.n_test,
        noise_std: cfg.data.noise_std,
        ..TaskConfig::new(cfg.data.dim, cfg.data.n_train, cfg.seed())
    };
    Ok(make_task(&tc)?)
}

fn append_row(path: &Path, header: &[&str], fields: &[String]) -> Result<()> {
    let fresh = !path.exists();
    let file = std::fs::OpenOptions::new().create(true).append(true).open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(header)?;
    }
    w.write_record(fields)?;
    w.flush()?;
    Ok(())
}

fn write_model(model: &VelocityScoreModel, path: &Path) -> Result<()> {
    checkpoint::save(model, path).with_context(|| format!("writing {}", path.display()))
}

/// Trains into `dir`, writing both checkpoints and the loss history.
fn train_into(cfg: &RunConfig, dir: &Path, manifest: &mut Manifest) -> Result<(Task, VelocityScoreModel)> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let task = task_for(cfg)?;
    let out = train(&task, &cfg.train)?;
    write_model(&out.model, &dir.join(MODEL_FILE))?;
    write_model(&out.ema_model, &dir.join(EMA_MODEL_FILE))?;
    let hist = dir.join(HISTORY_FILE);
    out.history.write_csv(BufWriter::new(File::create(&hist)?))?;
    manifest.artifacts.extend([
        ("checkpoint".to_owned(), PathBuf::from(MODEL_FILE)),
        ("checkpoint_ema".to_owned(), PathBuf::from(EMA_MODEL_FILE)),
        ("history".to_owned(), PathBuf::from(HISTORY_FILE)),
    ]);
    let model = if cfg.use_ema { out.ema_model } else { out.model };
    Ok((task, model))
}

fn start_manifest(command: &str, cfg: &RunConfig) -> Manifest {
    Manifest::start(command, cfg.run_id(), cfg.config_hash(), cfg.seed(), cfg.canonical())
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let mut manifest = start_manifest("train", cfg);
    manifest.write(out)?;
    let result = train_into(cfg, out, &mut manifest).map(|_| ());
    manifest.finish(&result);
    manifest.write(out)?;
    result.map(|()| manifest)
}

fn checkpoint_path(cfg: &RunConfig, out: &Path, explicit: Option<&Path>) -> PathBuf {
    match explicit {
        Some(p) => p.to_owned(),
        None => out.join(if cfg.use_ema { EMA_MODEL_FILE } else { MODEL_FILE }),
    }
}

fn load_checked(cfg: &RunConfig, path: &Path) -> Result<VelocityScoreModel> {
    let model = checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if model.dim() != cfg.data.dim {
        bail!("checkpoint {} has dimension {}, config asks for d = {}", path.display(), model.dim(), cfg.data.dim);
    }
    Ok(model)
}

/// Scores a checkpoint on the config's test split and appends to `results.csv`.
pub fn cmd_eval(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> Result<ResultRow> {
    let model = load_checked(cfg, &checkpoint_path(cfg, out, checkpoint))?;
    let task = task_for(cfg)?;
    let report = evaluate_model(&model, &task, &cfg.sampler_config(), &cfg.sinkhorn())?;
    let row = ResultRow {
        run_id: cfg.run_id(),
        dim: cfg.data.dim,
        n_train: cfg.data.n_train,
        seed: cfg.seed(),
        config_hash: cfg.config_hash(),
        report: Some(report),
    };
    std::fs::create_dir_all(out)?;
    append_row(&out.join(RESULTS_FILE), &RESULTS_HEADER, &row.fields())?;
    Ok(row)
}

fn point_header(dim: usize, with_t: bool) -> Vec<String> {
    let mut h: Vec<String> = if with_t { vec!["t".into()] } else { Vec::new() };
    h.extend((0..dim).map(|j| format!("x_{j}")));
    h
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub samples: PathBuf,
    pub trajectories: Vec<PathBuf>,
}

/// Generates from the first `n` test sources; optionally one trajectory file per sample.
pub fn cmd_sample(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: Option<&Path>,
    n: usize,
    trajectories: bool,
) -> Result<SampleOutput> {
    let sampler = cfg.sampler_config();
    sampler.validate()?;
    let model = load_checked(cfg, &checkpoint_path(cfg, out, checkpoint))?;
    let task = task_for(cfg)?;
    if n == 0 || n > task.source_test.rows() {
        bail!("n = {n} must be between 1 and the test size {}", task.source_test.rows());
    }
    let idx: Vec<usize> = (0..n).collect();
    let sources = task.source_test.select_rows(&idx);
    let mut traj = Trajectory::default();
    let generated = generate(&model, &sources, &sampler, trajectories.then_some(&mut traj))?;
    std::fs::create_dir_all(out)?;
    let samples = out.join("samples.csv");
    stochflow::dataset::write_csv(&generated, BufWriter::new(File::create(&samples)?))?;
    let mut paths = Vec::new();
    if trajectories {
        let dir = out.join("trajectories");
        std::fs::create_dir_all(&dir)?;
        let dt = 1.0 / sampler.steps as f64;
        for i in 0..n {
            let path = dir.join(format!("traj_{i:04}.csv"));
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(point_header(cfg.data.dim, true))?;
            for (k, state) in traj.states.iter().enumerate() {
                let mut rec = vec![format!("{:e}", k as f64 * dt)];
                rec.extend(state.row(i).iter().map(|x| format!("{x:e}")));
                w.write_record(rec)?;
            }
            w.flush()?;
            paths.push(path);
        }
    }
    Ok(SampleOutput { samples, trajectories: paths })
}

/// Runs `f` over `items` on `jobs` worker threads, keeping input order.
pub fn run_pool<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let r = f(item);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_inner().unwrap().into_iter().map(|r| r.expect("every slot filled")).collect()
}

/// Worker count from `STOCHFLOW_JOBS`, else the number of cores.
pub fn default_jobs() -> usize {
    std::env::var("STOCHFLOW_JOBS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PointState {
    Executed,
    Skipped,
    Failed,
}

#[derive(Clone, Debug)]
pub struct PointOutcome {
    pub row: ResultRow,
    pub state: PointState,
}

fn read_metrics_row(path: &Path) -> Result<MetricsReport> {
    let mut r = csv::Reader::from_path(path)?;
    let rec = r.records().next().context("empty metrics file")??;
    let num = |i: usize| -> Result<f64> { Ok(rec.get(i).context("short metrics row")?.parse()?) };
    Ok(MetricsReport {
        mean_cosine: num(5)?,
        sinkhorn: num(6)?,
        mse: num(7)?,
        match_fraction: num(8)?,
        sinkhorn_converged: true,
        n_eval: 0,
    })
}

/// Trains and evaluates one point in `runs/<run_id>`, or reuses a completed run.
fn run_point_dir(cfg: &RunConfig, runs: &Path) -> PointOutcome {
    let run_id = cfg.run_id();
    let dir = runs.join(&run_id);
    let mut row = ResultRow {
        run_id,
        dim: cfg.data.dim,
        n_train: cfg.data.n_train,
        seed: cfg.seed(),
        config_hash: cfg.config_hash(),
        report: None,
    };
    if let Ok(m) = Manifest::read(&dir) {
        if m.is_complete(&dir) {
            if let Ok(report) = read_metrics_row(&dir.join(RESULTS_FILE)) {
                row.report = Some(report);
                return PointOutcome { row, state: PointState::Skipped };
            }
        }
    }
    let mut manifest = start_manifest("point", cfg);
    let _ = std::fs::remove_file(dir.join(RESULTS_FILE));
    let result = (|| -> Result<MetricsReport> {
        manifest.write(&dir)?;
        let (task, model) = train_into(cfg, &dir, &mut manifest)?;
        let report = evaluate_model(&model, &task, &cfg.sampler_config(), &cfg.sinkhorn())?;
        let done = ResultRow { report: Some(report), ..row.clone() };
        append_row(&dir.join(RESULTS_FILE), &RESULTS_HEADER, &done.fields())?;
        manifest.artifacts.push(("metrics".into(), PathBuf::from(RESULTS_FILE)));
        Ok(report)
    })();
    let status = result.as_ref().map(|_| ()).map_err(|e| anyhow::anyhow!("{e:#}"));
    manifest.finish(&status);
    let _ = manifest.write(&dir);
    match result {
        Ok(report) => {
            row.report = Some(report);
            PointOutcome { row, state: PointState::Executed }
        }
        Err(_) => PointOutcome { row, state: PointState::Failed },
    }
}

#[derive(Clone, Debug)]
pub struct GroupStats {
    pub n_ok: usize,
    pub n_failed: usize,
    /// `(mean, std)` for cosine, Sinkhorn, MSE and match fraction.
    pub metrics: [(f64, f64); 4],
}

fn group_stats(outcomes: &[&PointOutcome]) -> GroupStats {
    let ok: Vec<&MetricsReport> = outcomes.iter().filter_map(|o| o.row.report.as_ref()).collect();
    let col = |f: fn(&MetricsReport) -> f64| mean_std(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
    GroupStats {
        n_ok: ok.len(),
        n_failed: outcomes.len() - ok.len(),
        metrics: [col(|r| r.mean_cosine), col(|r| r.sinkhorn), col(|r| r.mse), col(|r| r.match_fraction)],
    }
}

fn stats_fields(s: &GroupStats) -> Vec<String> {
    let mut v = vec![s.n_ok.to_string(), s.n_failed.to_string()];
    for (m, sd) in s.metrics {
        v.push(format!("{m:e}"));
        v.push(format!("{sd:e}"));
    }
    v
}

#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub variant: Variant,
    pub value: usize,
    pub cfg: RunConfig,
}

#[derive(Clone, Debug)]
pub struct SweepOutput {
    pub points: Vec<SweepPoint>,
    pub outcomes: Vec<PointOutcome>,
}

impl SweepOutput {
    pub fn count(&self, state: PointState) -> usize {
        self.outcomes.iter().filter(|o| o.state == state).count()
    }
}

pub fn sweep_points(cfg: &RunConfig) -> Vec<SweepPoint> {
    let mut points = Vec::new();
    for &value in &cfg.sweep.values {
        let (dim, n_train) = match cfg.sweep.axis {
            SweepAxis::Dim => (value, cfg.data.n_train),
            SweepAxis::NTrain => (cfg.data.dim, value),
        };
        for &variant in &cfg.sweep.variants {
            for &seed in &cfg.sweep.seeds {
                points.push(SweepPoint { variant, value, cfg: cfg.for_point(variant, dim, n_train, seed) });
            }
        }
    }
    points
}

fn write_top_manifest(command: &str, cfg: &RunConfig, out: &Path, artifacts: &[&str], failed: usize) -> Result<()> {
    let mut m = start_manifest(command, cfg);
    m.artifacts = artifacts.iter().map(|a| (a.trim_end_matches(".csv").to_owned(), PathBuf::from(a))).collect();
    let status = if failed == 0 { Ok(()) } else { Err(anyhow::anyhow!("{failed} point(s) failed")) };
    m.finish(&status);
    m.write(out)
}

/// Executes every (axis value, variant, seed) point; failed points are recorded, not fatal.
pub fn cmd_sweep(cfg: &RunConfig, out: &Path, jobs: usize) -> Result<SweepOutput> {
    let runs = out.join("runs");
    std::fs::create_dir_all(&runs)?;
    let points = sweep_points(cfg);
    let outcomes = run_pool(&points, jobs, |p| run_point_dir(&p.cfg, &runs));

    let mut results = csv::Writer::from_path(out.join(RESULTS_FILE))?;
    results.write_record(RESULTS_HEADER.iter().chain(&SWEEP_EXTRA))?;
    for (p, o) in points.iter().zip(&outcomes) {
        let mut f = o.row.fields();
        let status = if o.state == PointState::Failed { Status::Failed } else { Status::Completed };
        f.extend([p.variant.to_string(), status.as_str().to_owned()]);
        results.write_record(f)?;
    }
    results.flush()?;

    let mut summary = csv::Writer::from_path(out.join(SUMMARY_FILE))?;
    summary.write_record(SUMMARY_HEADER)?;
    for &value in &cfg.sweep.values {
        for &variant in &cfg.sweep.variants {
            let group: Vec<&PointOutcome> = points
                .iter()
                .zip(&outcomes)
                .filter(|(p, _)| p.value == value && p.variant == variant)
                .map(|(_, o)| o)
                .collect();
            let mut f = vec![cfg.sweep.axis.as_str().to_owned(), value.to_string(), variant.to_string()];
            f.extend(stats_fields(&group_stats(&group)));
            summary.write_record(f)?;
        }
    }
    summary.flush()?;

    let output = SweepOutput { points, outcomes };
    write_top_manifest("sweep", cfg, out, &[RESULTS_FILE, SUMMARY_FILE], output.count(PointState::Failed))?;
    Ok(output)
}

pub const ABLATE_FILE: &str = "ablate_gamma.csv";
pub const ABLATE_RUNS_FILE: &str = "ablate_runs.csv";

#[derive(Clone, Debug)]
pub struct AblateCell {
    pub schedule: InterpolantSchedule,
    pub stats: GroupStats,
}

/// Trains the configured variant over every (kind, scale) cell and seed.
pub fn cmd_ablate_gamma(cfg: &RunConfig, out: &Path, jobs: usize) -> Result<Vec<AblateCell>> {
    let runs = out.join("runs");
    std::fs::create_dir_all(&runs)?;
    let variant = cfg.ablate.variant;
    let mut cells = Vec::new();
    for &kind in &cfg.ablate.kinds {
        for &scale in &cfg.ablate.scales {
            cells.push(InterpolantSchedule::new(kind, scale)?);
        }
    }
    let mut points = Vec::new();
    for (c, schedule) in cells.iter().enumerate() {
        let base = RunConfig { schedule: *schedule, ..cfg.clone() };
        for &seed in &cfg.sweep.seeds {
            points.push((c, base.for_point(variant, cfg.data.dim, cfg.data.n_train, seed)));
        }
    }
    let outcomes = run_pool(&points, jobs, |(_, p)| run_point_dir(p, &runs));

    let mut per_run = csv::Writer::from_path(out.join(ABLATE_RUNS_FILE))?;
    per_run.write_record(["kind", "scale"].iter().chain(&RESULTS_HEADER).chain(&SWEEP_EXTRA))?;
    for ((c, _), o) in points.iter().zip(&outcomes) {
        let mut f = vec![cells[*c].kind().to_string(), format!("{:?}", cells[*c].scale())];
        f.extend(o.row.fields());
        let status = if o.state == PointState::Failed { Status::Failed } else { Status::Completed };
        f.extend([variant.to_string(), status.as_str().to_owned()]);
        per_run.write_record(f)?;
    }
    per_run.flush()?;

    let mut table = csv::Writer::from_path(out.join(ABLATE_FILE))?;
    table.write_record(ABLATE_HEADER)?;
    let mut result = Vec::new();
    for (c, schedule) in cells.iter().enumerate() {
        let group: Vec<&PointOutcome> =
            points.iter().zip(&outcomes).filter(|((pc, _), _)| *pc == c).map(|(_, o)| o).collect();
        let stats = group_stats(&group);
        let mut f = vec![schedule.kind().to_string(), format!("{:?}", schedule.scale()), variant.to_string()];
        f.extend(stats_fields(&stats));
        table.write_record(f)?;
        result.push(AblateCell { schedule: *schedule, stats });
    }
    table.flush()?;
    let failed = result.iter().map(|c| c.stats.n_failed).sum();
    write_top_manifest("ablate-gamma", cfg, out, &[ABLATE_FILE, ABLATE_RUNS_FILE], failed)?;
    Ok(result)
}
