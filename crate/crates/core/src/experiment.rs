//! Train-then-evaluate runs for the shell benchmark, and the injection variants
//! compared in the sweeps and ablations.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::dataset::{make_task, DatasetError, Task, TaskConfig};
use crate::interpolant::{GammaKind, InterpolantSchedule};
use crate::metrics::{evaluate, MetricError, MetricsReport, SinkhornConfig};
use crate::sampler::{generate, SamplerConfig, SamplerError};
use crate::trainer::{train, TrainConfig, TrainError, TrainOutput};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("unknown variant `{0}`")]
    UnknownVariant(String),
}

/// Which of the three injections are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Plain two-sided flow matching.
    Standard,
    /// All three injections.
    Stochastic,
    NoTwoStage,
    NoSourceNoise,
    NoInterpolantNoise,
}

impl Variant {
    /// The five ablation columns: all, minus each injection, none.
    pub const ABLATIONS: [Variant; 5] = [
        Self::Stochastic,
        Self::NoTwoStage,
        Self::NoSourceNoise,
        Self::NoInterpolantNoise,
        Self::Standard,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Standard => "standard",
            Self::Stochastic => "stochastic",
            Self::NoTwoStage => "no_two_stage",
            Self::NoSourceNoise => "no_src_noise",
            Self::NoInterpolantNoise => "no_interp_noise",
        }
    }

    pub fn two_stage(self) -> bool {
        matches!(self, Self::Stochastic | Self::NoSourceNoise | Self::NoInterpolantNoise)
    }

    pub fn source_noise(self) -> bool {
        matches!(self, Self::Stochastic | Self::NoTwoStage | Self::NoInterpolantNoise)
    }

    pub fn interpolant_noise(self) -> bool {
        matches!(self, Self::Stochastic | Self::NoTwoStage | Self::NoSourceNoise)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "standard" | "no_noises" => Ok(Self::Standard),
            "stochastic" | "all_noises" => Ok(Self::Stochastic),
            "no_two_stage" => Ok(Self::NoTwoStage),
            "no_src_noise" => Ok(Self::NoSourceNoise),
            "no_interp_noise" => Ok(Self::NoInterpolantNoise),
            other => Err(ExperimentError::UnknownVariant(other.to_owned())),
        }
    }
}

/// Shared settings from which each variant's train and sampler configs derive.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// Training hyperparameters; the injection flags and schedule are overridden per variant.
    pub train: TrainConfig,
    /// Interpolant schedule used whenever interpolant noise is on.
    pub stochastic_schedule: InterpolantSchedule,
    /// Sampler settings; `source_noise` applies only to variants trained with source noise.
    pub sampler: SamplerConfig,
    pub sinkhorn: SinkhornConfig,
    pub test_n: usize,
    pub data_noise_std: f64,
    /// Evaluate the EMA weights instead of the raw ones.
    pub use_ema: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            stochastic_schedule: InterpolantSchedule::new(GammaKind::SinSquared, 1.0).expect("valid"),
            sampler: SamplerConfig {
                source_noise: 1.0,
                ..SamplerConfig::default()
            },
            sinkhorn: SinkhornConfig::default(),
            test_n: crate::dataset::DEFAULT_TEST_N,
            data_noise_std: crate::dataset::DEFAULT_NOISE_STD,
            use_ema: false,
        }
    }
}

impl ExperimentConfig {
    /// Settings tuned for the shell benchmark sweeps on a laptop CPU.
    ///
    /// Unit-variance jitter and interpolant noise swamp unit-radius shells once
    /// `d` is large (the noise norm grows like `sqrt(d)`), so both are scaled
    /// down here and sampling starts from the clean source.
    pub fn shell_benchmark() -> Self {
        Self {
            train: TrainConfig {
                epochs_total: 100,
                source_noise_scale: 0.1,
                ..TrainConfig::default()
            },
            stochastic_schedule: InterpolantSchedule::new(GammaKind::SinSquared, 0.1).expect("valid"),
            sampler: SamplerConfig::default(),
            ..Self::default()
        }
    }

    pub fn train_config(&self, variant: Variant, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            two_stage: variant.two_stage(),
            source_noise: variant.source_noise(),
            schedule: if variant.interpolant_noise() {
                self.stochastic_schedule
            } else {
                InterpolantSchedule::deterministic()
            },
            ..self.train.clone()
        }
    }

    /// Models trained without source jitter are sampled without it as well.
    pub fn sampler_config(&self, variant: Variant, seed: u64) -> SamplerConfig {
        SamplerConfig {
            source_noise: if variant.source_noise() {
                self.sampler.source_noise
            } else {
                0.0
            },
            schedule: if variant.interpolant_noise() {
                self.stochastic_schedule
            } else {
                InterpolantSchedule::deterministic()
            },
            seed,
            ..self.sampler
        }
    }

    pub fn task_config(&self, dim: usize, n_train: usize, seed: u64) -> TaskConfig {
        TaskConfig {
            test_n: self.test_n,
            noise_std: self.data_noise_std,
            ..TaskConfig::new(dim, n_train, seed)
        }
    }
}

#[derive(Clone, Debug)]
pub struct PointResult {
    pub variant: Variant,
    pub dim: usize,
    pub n_train: usize,
    pub seed: u64,
    pub report: MetricsReport,
    pub trained: TrainOutput,
}

/// Generates from the test sources and scores against the test targets.
pub fn evaluate_model(
    model: &crate::numcore::VelocityScoreModel,
    task: &Task,
    sampler: &SamplerConfig,
    sinkhorn: &SinkhornConfig,
) -> Result<MetricsReport, ExperimentError> {
    let generated = generate(model, &task.source_test, sampler, None)?;
    Ok(evaluate(&task.source_test, &generated, &task.target_test, sinkhorn)?)
}

pub fn run_point(
    cfg: &ExperimentConfig,
    variant: Variant,
    dim: usize,
    n_train: usize,
    seed: u64,
) -> Result<PointResult, ExperimentError> {
    let task = make_task(&cfg.task_config(dim, n_train, seed))?;
    let train_cfg = cfg.train_config(variant, seed);
    let trained = train(&task, &train_cfg)?;
    let model = if cfg.use_ema { &trained.ema_model } else { &trained.model };
    let report = evaluate_model(model, &task, &cfg.sampler_config(variant, seed), &cfg.sinkhorn)?;
    Ok(PointResult {
        variant,
        dim,
        n_train,
        seed,
        report,
        trained,
    })
}

/// Arithmetic mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_flags_cover_the_ablation_table() {
        let flags: Vec<(bool, bool, bool)> = Variant::ABLATIONS
            .iter()
            .map(|v| (v.two_stage(), v.source_noise(), v.interpolant_noise()))
            .collect();
        assert_eq!(
            flags,
            vec![
                (true, true, true),
                (false, true, true),
                (true, false, true),
                (true, true, false),
                (false, false, false),
            ]
        );
        for v in Variant::ABLATIONS {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
    }

    #[test]
    fn standard_variant_is_plain_flow_matching() {
        let cfg = ExperimentConfig::default();
        let t = cfg.train_config(Variant::Standard, 3);
        assert!(!t.two_stage && !t.source_noise && t.schedule.is_deterministic());
        let s = cfg.sampler_config(Variant::Standard, 3);
        assert_eq!(s.source_noise, 0.0);
        let s = cfg.sampler_config(Variant::Stochastic, 3);
        assert_eq!(s.source_noise, 1.0);
    }

    #[test]
    fn mean_std_basics() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
    }
}
