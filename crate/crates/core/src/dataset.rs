//! Concentric hypersphere point clouds and sweep grids.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::numcore::Tensor2;

pub const SOURCE_RADIUS: f64 = 1.0;
pub const TARGET_RADIUS: f64 = 2.0;
pub const DEFAULT_NOISE_STD: f64 = 0.1;
pub const DEFAULT_TRAIN_N: usize = 1024;
pub const DEFAULT_TEST_N: usize = 512;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatasetError {
    #[error("invalid dataset config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShellConfig {
    pub dim: usize,
    pub radius: f64,
    pub noise_std: f64,
    pub n: usize,
}

impl ShellConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.dim == 0 {
            return Err(DatasetError::Config("dim must be at least 1".into()));
        }
        if self.n == 0 {
            return Err(DatasetError::Config("sample count must be at least 1".into()));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(DatasetError::Config(format!("radius {} must be positive", self.radius)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(DatasetError::Config(format!(
                "noise_std {} must be non-negative",
                self.noise_std
            )));
        }
        Ok(())
    }
}

/// `(radius + noise_std * e) * g / |g|` per row, with `g` standard normal in
/// `dim` dimensions and `e` a scalar standard normal.
pub fn sample_shell<R: Rng + ?Sized>(cfg: &ShellConfig, rng: &mut R) -> Result<Tensor2, DatasetError> {
    cfg.validate()?;
    let mut out = Tensor2::zeros(cfg.n, cfg.dim);
    for i in 0..cfg.n {
        let row = out.row_mut(i);
        let mut norm_sq = 0.0;
        // A zero draw has probability zero, but redraw rather than divide by it.
        while norm_sq == 0.0 {
            for v in row.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            norm_sq = row.iter().map(|v| v * v).sum::<f64>();
        }
        let mut radius = cfg.radius;
        if cfg.noise_std > 0.0 {
            radius += cfg.noise_std * rng.sample::<f64, _>(StandardNormal);
        }
        let scale = radius / norm_sq.sqrt();
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    Ok(out)
}

/// Train and test splits of the inner (source) and outer (target) shells.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub source_train: Tensor2,
    pub target_train: Tensor2,
    pub source_test: Tensor2,
    pub target_test: Tensor2,
}

impl Task {
    pub fn dim(&self) -> usize {
        self.source_train.cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskConfig {
    pub dim: usize,
    pub train_n: usize,
    pub test_n: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl TaskConfig {
    pub fn new(dim: usize, train_n: usize, seed: u64) -> Self {
        Self {
            dim,
            train_n,
            test_n: DEFAULT_TEST_N,
            noise_std: DEFAULT_NOISE_STD,
            seed,
        }
    }
}

// Independent ChaCha streams per split, so test sets do not depend on train_n.
const STREAM_SOURCE_TRAIN: u64 = 1;
const STREAM_TARGET_TRAIN: u64 = 2;
const STREAM_SOURCE_TEST: u64 = 3;
const STREAM_TARGET_TEST: u64 = 4;

pub fn split_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn make_task(cfg: &TaskConfig) -> Result<Task, DatasetError> {
    let shell = |radius: f64, n: usize, stream: u64| {
        let c = ShellConfig {
            dim: cfg.dim,
            radius,
            noise_std: cfg.noise_std,
            n,
        };
        sample_shell(&c, &mut split_rng(cfg.seed, stream))
    };
    Ok(Task {
        source_train: shell(SOURCE_RADIUS, cfg.train_n, STREAM_SOURCE_TRAIN)?,
        target_train: shell(TARGET_RADIUS, cfg.train_n, STREAM_TARGET_TRAIN)?,
        source_test: shell(SOURCE_RADIUS, cfg.test_n, STREAM_SOURCE_TEST)?,
        target_test: shell(TARGET_RADIUS, cfg.test_n, STREAM_TARGET_TEST)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SweepAxis {
    Dim,
    NTrain,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Dim => "dim",
            Self::NTrain => "n_train",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dim" => Ok(Self::Dim),
            "n_train" => Ok(Self::NTrain),
            other => Err(DatasetError::Config(format!("unknown sweep axis `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<usize>,
    pub fixed_dim: usize,
    pub fixed_n_train: usize,
    pub seeds: Vec<u64>,
}

impl SweepConfig {
    /// Dimension grid `{2, 8, 32, 128, 512, 2048}` at 1024 training points.
    pub fn dim_default() -> Self {
        Self {
            axis: SweepAxis::Dim,
            values: vec![2, 8, 32, 128, 512, 2048],
            fixed_dim: 512,
            fixed_n_train: DEFAULT_TRAIN_N,
            seeds: vec![0, 1, 2],
        }
    }

    /// Training-set grid from 128 to 8192 at `d = 512`.
    pub fn n_train_default() -> Self {
        Self {
            axis: SweepAxis::NTrain,
            values: vec![128, 512, 2048, 8192],
            fixed_dim: 512,
            fixed_n_train: DEFAULT_TRAIN_N,
            seeds: vec![0, 1, 2],
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.values.is_empty() || self.values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DatasetError::Config("sweep values must be strictly increasing".into()));
        }
        if self.values[0] == 0 {
            return Err(DatasetError::Config("sweep values must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(DatasetError::Config("sweep needs at least one seed".into()));
        }
        Ok(())
    }

    /// `(dim, n_train)` for each grid value.
    pub fn points(&self) -> Vec<(usize, usize)> {
        self.values
            .iter()
            .map(|&v| match self.axis {
                SweepAxis::Dim => (v, self.fixed_n_train),
                SweepAxis::NTrain => (self.fixed_dim, v),
            })
            .collect()
    }
}

/// Writes points with an `x_0,...,x_{d-1}` header.
pub fn write_csv<W: Write>(points: &Tensor2, mut out: W) -> std::io::Result<()> {
    let header: Vec<String> = (0..points.cols()).map(|k| format!("x_{k}")).collect();
    writeln!(out, "{}", header.join(","))?;
    for row in points.iter_rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}
