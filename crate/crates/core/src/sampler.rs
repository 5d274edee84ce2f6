//! ODE and SDE integration of a learned flow on a uniform time grid.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::interpolant::InterpolantSchedule;
use crate::numcore::{NumError, Tensor2, VelocityScoreModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error("non-finite state after step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Solver {
    Euler,
    Heun,
    EulerMaruyama,
    /// Euler–Maruyama noise with a Heun-corrected drift.
    StochasticHeun,
}

impl Solver {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Euler => "euler",
            Self::Heun => "heun",
            Self::EulerMaruyama => "euler_maruyama",
            Self::StochasticHeun => "stochastic_heun",
        }
    }

    pub fn is_stochastic(self) -> bool {
        matches!(self, Self::EulerMaruyama | Self::StochasticHeun)
    }
}

impl fmt::Display for Solver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Solver {
    type Err = SamplerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "euler" => Ok(Self::Euler),
            "heun" => Ok(Self::Heun),
            "sde" | "euler_maruyama" => Ok(Self::EulerMaruyama),
            "stochastic_heun" => Ok(Self::StochasticHeun),
            other => Err(SamplerError::Config(format!("unknown solver `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub solver: Solver,
    pub steps: usize,
    /// Standard deviation of the inference-time source jitter.
    pub source_noise: f64,
    /// `c` in `sigma_t^2 / 2 = c sin^2(pi t)`.
    pub diffusion_coef: f64,
    /// Diffusion is switched off within this distance of either endpoint.
    pub margin: f64,
    pub schedule: InterpolantSchedule,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            solver: Solver::Heun,
            steps: 50,
            source_noise: 0.0,
            diffusion_coef: 1.0,
            margin: 1e-3,
            schedule: InterpolantSchedule::deterministic(),
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.steps == 0 {
            return Err(SamplerError::Config("steps must be at least 1".into()));
        }
        if !(0.0..0.1).contains(&self.margin) {
            return Err(SamplerError::Config(format!("margin {} outside [0, 0.1)", self.margin)));
        }
        if !(self.source_noise >= 0.0 && self.source_noise.is_finite()) {
            return Err(SamplerError::Config(format!(
                "inference source noise {} must be non-negative",
                self.source_noise
            )));
        }
        if !(self.diffusion_coef >= 0.0 && self.diffusion_coef.is_finite()) {
            return Err(SamplerError::Config(format!(
                "diffusion coefficient {} must be non-negative",
                self.diffusion_coef
            )));
        }
        if self.solver.is_stochastic() {
            if self.schedule.is_deterministic() {
                return Err(SamplerError::Config(
                    "SDE sampling needs a stochastic interpolant schedule (gamma_kind = none has no score term)".into(),
                ));
            }
            if self.margin <= 0.0 && self.diffusion_coef > 0.0 {
                return Err(SamplerError::Config("SDE sampling needs a positive endpoint margin".into()));
            }
        }
        Ok(())
    }

    /// `sigma_t`, forced to zero within the margin of either endpoint.
    pub fn sigma(&self, t: f64) -> f64 {
        if t < self.margin || t > 1.0 - self.margin {
            return 0.0;
        }
        (2.0 * self.diffusion_coef).sqrt() * (PI * t).sin().abs()
    }
}

/// Intermediate states, starting with the (possibly jittered) initial state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Tensor2>,
}

fn check_finite(x: &Tensor2, step: usize) -> Result<(), SamplerError> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(SamplerError::NonFinite { step })
    }
}

pub fn perturb_source<R: Rng + ?Sized>(x0: &Tensor2, eps: f64, rng: &mut R) -> Tensor2 {
    if eps == 0.0 {
        return x0.clone();
    }
    let z = Tensor2::standard_normal(x0.rows(), x0.cols(), rng);
    let mut out = x0.clone();
    out.axpy(eps, &z).expect("same shape");
    out
}

/// Integrates `dx = v(x, t) dt` from `t = 0` to `t = 1`.
pub fn integrate_ode<F>(
    mut velocity: F,
    x_start: &Tensor2,
    cfg: &SamplerConfig,
    mut trajectory: Option<&mut Trajectory>,
) -> Result<Tensor2, SamplerError>
where
    F: FnMut(&Tensor2, f64) -> Result<Tensor2, SamplerError>,
{
    if cfg.steps == 0 {
        return Err(SamplerError::Config("steps must be at least 1".into()));
    }
    let dt = 1.0 / cfg.steps as f64;
    let mut x = x_start.clone();
    if let Some(tr) = trajectory.as_deref_mut() {
        tr.states.push(x.clone());
    }
    for k in 0..cfg.steps {
        let t = k as f64 * dt;
        let t_next = (k + 1) as f64 * dt;
        let slope = velocity(&x, t)?;
        match cfg.solver {
            Solver::Heun => {
                let mut pred = x.clone();
                pred.axpy(dt, &slope)?;
                let slope_next = velocity(&pred, t_next)?;
                x.axpy(0.5 * dt, &slope)?;
                x.axpy(0.5 * dt, &slope_next)?;
            }
            _ => x.axpy(dt, &slope)?,
        }
        check_finite(&x, k)?;
        if let Some(tr) = trajectory.as_deref_mut() {
            tr.states.push(x.clone());
        }
    }
    Ok(x)
}

/// Integrates `dx = (v - ½σ²γ⁻¹η) dt + σ dW` with Euler–Maruyama (or stochastic Heun).
///
/// `fields` returns `(v, eta)` at `(x, t)`. Wherever `sigma_t = 0`, the score
/// term is omitted and the step is exactly an Euler step.
pub fn integrate_sde<F, R>(
    mut fields: F,
    x_start: &Tensor2,
    cfg: &SamplerConfig,
    rng: &mut R,
    mut trajectory: Option<&mut Trajectory>,
) -> Result<Tensor2, SamplerError>
where
    F: FnMut(&Tensor2, f64) -> Result<(Tensor2, Tensor2), SamplerError>,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    let dt = 1.0 / cfg.steps as f64;
    let sqrt_dt = dt.sqrt();
    let mut drift = |x: &Tensor2, t: f64| -> Result<Tensor2, SamplerError> {
        let (mut v, eta) = fields(x, t)?;
        let sigma = cfg.sigma(t);
        if sigma > 0.0 {
            let gamma = cfg.schedule.gamma(t);
            if gamma <= 0.0 {
                return Err(SamplerError::Config(format!("gamma vanishes at t = {t} inside the margin")));
            }
            v.axpy(-0.5 * sigma * sigma / gamma, &eta)?;
        }
        Ok(v)
    };

    let mut x = x_start.clone();
    if let Some(tr) = trajectory.as_deref_mut() {
        tr.states.push(x.clone());
    }
    for k in 0..cfg.steps {
        let t = k as f64 * dt;
        let sigma = cfg.sigma(t);
        let noise = Tensor2::standard_normal(x.rows(), x.cols(), rng);
        let f = drift(&x, t)?;
        match cfg.solver {
            Solver::StochasticHeun => {
                let mut pred = x.clone();
                pred.axpy(dt, &f)?;
                pred.axpy(sigma * sqrt_dt, &noise)?;
                let f_next = drift(&pred, (k + 1) as f64 * dt)?;
                x.axpy(0.5 * dt, &f)?;
                x.axpy(0.5 * dt, &f_next)?;
            }
            _ => x.axpy(dt, &f)?,
        }
        if sigma > 0.0 {
            x.axpy(sigma * sqrt_dt, &noise)?;
        }
        check_finite(&x, k)?;
        if let Some(tr) = trajectory.as_deref_mut() {
            tr.states.push(x.clone());
        }
    }
    Ok(x)
}

/// Jitters the source with `cfg.source_noise` and integrates with the chosen solver.
pub fn generate(
    model: &VelocityScoreModel,
    source: &Tensor2,
    cfg: &SamplerConfig,
    trajectory: Option<&mut Trajectory>,
) -> Result<Tensor2, SamplerError> {
    cfg.validate()?;
    if source.cols() != model.dim() {
        return Err(NumError::Shape(format!(
            "source has {} columns, model expects {}",
            source.cols(),
            model.dim()
        ))
        .into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = perturb_source(source, cfg.source_noise, &mut rng);
    let times = |x: &Tensor2, t: f64| vec![t; x.rows()];
    if cfg.solver.is_stochastic() {
        integrate_sde(
            |x, t| Ok(model.forward(x, &times(x, t))?),
            &start,
            cfg,
            &mut rng,
            trajectory,
        )
    } else {
        integrate_ode(|x, t| Ok(model.velocity(x, &times(x, t))?), &start, cfg, trajectory)
    }
}
