//! Two-stage flow matching with source perturbation and stochastic interpolants.
//!
//! Each optimizer step draws, in this fixed order: per-row times, one auxiliary
//! Gaussian tensor and the interpolant noise. The auxiliary draw replaces the
//! source during noise-to-target pre-training and jitters it during
//! fine-tuning. Drawing it regardless of the injection flags keeps the random
//! stream aligned across configurations, so toggling an injection with zero
//! strength reproduces the un-injected run exactly.

use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::dataset::{split_rng, Task};
use crate::interpolant::{InterpolantError, InterpolantSchedule};
use crate::numcore::{EmaState, NumError, OptimizerState, Tensor2, VelocityScoreModel, DEFAULT_HIDDEN};

const STREAM_INIT: u64 = 10;
const STREAM_TRAIN: u64 = 11;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, step {step}: loss_v = {loss_v}, loss_eta = {loss_eta}")]
    NonFinite {
        epoch: usize,
        step: usize,
        loss_v: f64,
        loss_eta: f64,
    },
    #[error(transparent)]
    Interpolant(#[from] InterpolantError),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Noise-to-target: the source sample is discarded.
    Pretrain,
    /// Source-to-target.
    Finetune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Pretrain => "pretrain",
            Self::Finetune => "finetune",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs_total: usize,
    /// Stage-1 epochs; `None` means a quarter of `epochs_total`.
    pub epochs_pretrain: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden: usize,
    /// Standard deviation of the stage-2 source jitter.
    pub source_noise_scale: f64,
    pub schedule: InterpolantSchedule,
    pub ema_decay: f64,
    pub seed: u64,
    pub two_stage: bool,
    pub source_noise: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_total: 200,
            epochs_pretrain: None,
            batch_size: 256,
            lr: 0.01,
            hidden: DEFAULT_HIDDEN,
            source_noise_scale: 1.0,
            schedule: InterpolantSchedule::deterministic(),
            ema_decay: 0.999,
            seed: 0,
            two_stage: false,
            source_noise: false,
        }
    }
}

impl TrainConfig {
    /// Number of stage-1 epochs actually run.
    pub fn pretrain_epochs(&self) -> usize {
        if !self.two_stage {
            return 0;
        }
        self.epochs_pretrain.unwrap_or(self.epochs_total / 4)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if let Some(p) = self.epochs_pretrain {
            if p > self.epochs_total {
                return Err(TrainError::Config(format!(
                    "epochs_pretrain ({p}) exceeds epochs_total ({})",
                    self.epochs_total
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if self.hidden == 0 {
            return Err(TrainError::Config("hidden width must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("learning rate {} must be non-negative", self.lr)));
        }
        if !(self.source_noise_scale >= 0.0 && self.source_noise_scale.is_finite()) {
            return Err(TrainError::Config(format!(
                "source_noise_scale {} must be non-negative",
                self.source_noise_scale
            )));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(TrainError::Config(format!("ema decay {} outside (0, 1)", self.ema_decay)));
        }
        Ok(())
    }

    /// Whether the score head enters the objective.
    pub fn trains_score(&self) -> bool {
        !self.schedule.is_deterministic()
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss_v: f64,
    pub loss_eta: f64,
    pub grads: VelocityScoreModel,
}

fn sample_times<R: Rng + ?Sized>(schedule: &InterpolantSchedule, n: usize, rng: &mut R) -> Vec<f64> {
    let (lo, hi) = schedule.time_bounds();
    (0..n).map(|_| rng.random::<f64>().clamp(lo, hi)).collect()
}

/// Mean-squared losses of both heads on one batch, and the gradient of their sum.
///
/// Both losses average over rows and coordinates. When the schedule is
/// deterministic the score loss is still reported but contributes no gradient.
pub fn compute_loss<R: Rng + ?Sized>(
    model: &VelocityScoreModel,
    cfg: &TrainConfig,
    x0: &Tensor2,
    x1: &Tensor2,
    stage: Stage,
    rng: &mut R,
) -> Result<LossOutput, TrainError> {
    x0.check_same_shape(x1)?;
    let (batch, dim) = x0.shape();
    let t = sample_times(&cfg.schedule, batch, rng);
    let aux = Tensor2::standard_normal(batch, dim, rng);
    let source = match stage {
        Stage::Pretrain => aux,
        Stage::Finetune if cfg.source_noise => {
            let mut jittered = x0.clone();
            jittered.axpy(cfg.source_noise_scale, &aux)?;
            jittered
        }
        Stage::Finetune => x0.clone(),
    };
    let draw = cfg.schedule.draw(&source, x1, &t, rng)?;

    let (v, eta, cache) = model.forward_cached(&draw.xt, &draw.t)?;
    let norm = 2.0 / (batch * dim) as f64;
    let resid_v = v.sub(&draw.v_target)?;
    let resid_eta = eta.sub(&draw.eta_target)?;
    let loss_v = resid_v.mean_square();
    let loss_eta = resid_eta.mean_square();
    let grad_v = resid_v.scale(norm);
    let grad_eta = if cfg.trains_score() {
        resid_eta.scale(norm)
    } else {
        Tensor2::zeros(batch, dim)
    };
    let grads = model.backward_cached(&cache, &grad_v, &grad_eta)?;
    Ok(LossOutput {
        loss_v,
        loss_eta,
        grads,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    pub loss_v: f64,
    pub loss_eta: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "epoch,stage,loss_v,loss_eta";

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER)?;
        for r in &self.records {
            writeln!(out, "{},{},{:e},{:e}", r.epoch, r.stage, r.loss_v, r.loss_eta)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: VelocityScoreModel,
    pub ema_model: VelocityScoreModel,
    pub history: TrainHistory,
}

/// Optimizer steps in one epoch over `n_target` target rows.
pub fn steps_per_epoch(n_target: usize, batch_size: usize) -> usize {
    n_target.div_ceil(batch_size)
}

pub fn train(task: &Task, cfg: &TrainConfig) -> Result<TrainOutput, TrainError> {
    cfg.validate()?;
    let sources = &task.source_train;
    let targets = &task.target_train;
    if sources.rows() == 0 || targets.rows() == 0 {
        return Err(TrainError::Config("training splits must be non-empty".into()));
    }
    if sources.cols() != targets.cols() {
        return Err(TrainError::Config(format!(
            "source dimension {} differs from target dimension {}",
            sources.cols(),
            targets.cols()
        )));
    }

    let mut model = VelocityScoreModel::new(task.dim(), cfg.hidden, &mut split_rng(cfg.seed, STREAM_INIT));
    let mut opt = OptimizerState::new(&model, cfg.lr);
    let mut ema = EmaState::new(&model, cfg.ema_decay)?;
    let mut rng = split_rng(cfg.seed, STREAM_TRAIN);
    let mut history = TrainHistory::default();
    let pretrain = cfg.pretrain_epochs();
    let mut order: Vec<usize> = (0..targets.rows()).collect();

    for epoch in 0..cfg.epochs_total {
        let stage = if epoch < pretrain {
            Stage::Pretrain
        } else {
            Stage::Finetune
        };
        order.shuffle(&mut rng);
        let (mut sum_v, mut sum_eta, mut rows) = (0.0, 0.0, 0usize);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let x1 = targets.select_rows(chunk);
            let src_idx: Vec<usize> = (0..chunk.len())
                .map(|_| rng.random_range(0..sources.rows()))
                .collect();
            let x0 = sources.select_rows(&src_idx);
            let out = compute_loss(&model, cfg, &x0, &x1, stage, &mut rng)?;
            if !(out.loss_v.is_finite() && out.loss_eta.is_finite()) {
                return Err(TrainError::NonFinite {
                    epoch,
                    step,
                    loss_v: out.loss_v,
                    loss_eta: out.loss_eta,
                });
            }
            opt.step(&mut model, &out.grads)?;
            ema.update(&model)?;
            sum_v += out.loss_v * chunk.len() as f64;
            sum_eta += out.loss_eta * chunk.len() as f64;
            rows += chunk.len();
        }
        history.records.push(EpochRecord {
            epoch,
            stage,
            loss_v: sum_v / rows as f64,
            loss_eta: sum_eta / rows as f64,
        });
    }

    Ok(TrainOutput {
        model,
        ema_model: ema.into_shadow(),
        history,
    })
}
