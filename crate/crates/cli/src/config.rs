//! Sectioned `key = value` run configuration.
//!
//! ```text
//! [train]
//! epochs = 100
//! [schedule]
//! kind = sin_squared
//! scale = 0.1
//! ```
//!
//! Blank lines and `#` comments are ignored. Every key has a default, so an
//! empty file is a valid config.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

use stochflow::dataset::{SweepAxis, DEFAULT_NOISE_STD, DEFAULT_TEST_N, DEFAULT_TRAIN_N};
use stochflow::experiment::{ExperimentConfig, Variant};
use stochflow::interpolant::{GammaKind, InterpolantSchedule};
use stochflow::metrics::SinkhornConfig;
use stochflow::sampler::SamplerConfig;
use stochflow::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown key `{key}` in [{section}]")]
    UnknownKey { line: usize, section: String, key: String },
    #[error("line {line}: bad value for `{key}`: {message}")]
    Value { line: usize, key: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    pub dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub noise_std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSection {
    pub axis: SweepAxis,
    pub values: Vec<usize>,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblateSection {
    pub kinds: Vec<GammaKind>,
    pub scales: Vec<f64>,
    pub variant: Variant,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub schedule: InterpolantSchedule,
    pub sampler: SamplerConfig,
    pub use_ema: bool,
    pub sinkhorn_reg: f64,
    pub data: DataSection,
    pub sweep: SweepSection,
    pub ablate: AblateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            schedule: InterpolantSchedule::deterministic(),
            sampler: SamplerConfig::default(),
            use_ema: false,
            sinkhorn_reg: SinkhornConfig::default().reg,
            data: DataSection {
                dim: 2,
                n_train: DEFAULT_TRAIN_N,
                n_test: DEFAULT_TEST_N,
                noise_std: DEFAULT_NOISE_STD,
            },
            sweep: SweepSection {
                axis: SweepAxis::Dim,
                values: vec![2, 8, 32, 128, 512, 2048],
                variants: vec![Variant::Standard, Variant::Stochastic],
                seeds: vec![0, 1, 2],
            },
            ablate: AblateSection {
                kinds: vec![GammaKind::SquareRoot, GammaKind::SinSquared, GammaKind::Quadratic],
                scales: vec![0.25, 0.5, 1.0],
                variant: Variant::Stochastic,
            },
        }
    }
}

fn parse_list<T: FromStr>(raw: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    let items: Result<Vec<T>, String> = raw
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| format!("`{s}`: {e}")))
        .collect();
    let items = items?;
    if items.is_empty() {
        return Err("empty list".into());
    }
    Ok(items)
}

fn parse_bool(raw: &str) -> Result<bool, String> {
    match raw {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        other => Err(format!("expected true or false, got `{other}`")),
    }
}

fn parse_one<T: FromStr>(raw: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    raw.parse::<T>().map_err(|e| format!("`{raw}`: {e}"))
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut kind = GammaKind::None;
        let mut scale = 1.0;
        let mut section = String::new();
        let mut seen = std::collections::HashSet::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw_line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                    line,
                    message: format!("unterminated section header `{content}`"),
                })?;
                let name = name.trim();
                if !["train", "schedule", "sampler", "data", "sweep", "ablate"].contains(&name) {
                    return Err(ConfigError::Syntax { line, message: format!("unknown section [{name}]") });
                }
                section = name.to_owned();
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                message: format!("expected `key = value`, got `{content}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if section.is_empty() {
                return Err(ConfigError::Syntax { line, message: format!("key `{key}` appears before any section") });
            }
            if !seen.insert(format!("{section}.{key}")) {
                return Err(ConfigError::Value { line, key: key.into(), message: "duplicate key".into() });
            }
            let bad = |message: String| ConfigError::Value { line, key: key.into(), message };
            let t = &mut cfg.train;
            let s = &mut cfg.sampler;
            match (section.as_str(), key) {
                ("train", "epochs") => t.epochs_total = parse_one(value).map_err(bad)?,
                ("train", "pretrain_epochs") => t.epochs_pretrain = Some(parse_one(value).map_err(bad)?),
                ("train", "batch_size") => t.batch_size = parse_one(value).map_err(bad)?,
                ("train", "lr") => t.lr = parse_one(value).map_err(bad)?,
                ("train", "hidden") => t.hidden = parse_one(value).map_err(bad)?,
                ("train", "source_noise_scale") => t.source_noise_scale = parse_one(value).map_err(bad)?,
                ("train", "ema_decay") => t.ema_decay = parse_one(value).map_err(bad)?,
                ("train", "seed") => t.seed = parse_one(value).map_err(bad)?,
                ("train", "two_stage") => t.two_stage = parse_bool(value).map_err(bad)?,
                ("train", "source_noise") => t.source_noise = parse_bool(value).map_err(bad)?,
                ("schedule", "kind") => kind = parse_one(value).map_err(bad)?,
                ("schedule", "scale") => scale = parse_one(value).map_err(bad)?,
                ("sampler", "solver") => s.solver = parse_one(value).map_err(bad)?,
                ("sampler", "steps") => s.steps = parse_one(value).map_err(bad)?,
                ("sampler", "eps") => s.source_noise = parse_one(value).map_err(bad)?,
                ("sampler", "diffusion_coef") => s.diffusion_coef = parse_one(value).map_err(bad)?,
                ("sampler", "margin") => s.margin = parse_one(value).map_err(bad)?,
                ("sampler", "ema") => cfg.use_ema = parse_bool(value).map_err(bad)?,
                ("sampler", "sinkhorn_reg") => cfg.sinkhorn_reg = parse_one(value).map_err(bad)?,
                ("data", "dim") => cfg.data.dim = parse_one(value).map_err(bad)?,
                ("data", "n_train") => cfg.data.n_train = parse_one(value).map_err(bad)?,
                ("data", "n_test") => cfg.data.n_test = parse_one(value).map_err(bad)?,
                ("data", "noise_std") => cfg.data.noise_std = parse_one(value).map_err(bad)?,
                ("sweep", "axis") => cfg.sweep.axis = parse_one(value).map_err(bad)?,
                ("sweep", "values") => cfg.sweep.values = parse_list(value).map_err(bad)?,
                ("sweep", "variants") => cfg.sweep.variants = parse_list(value).map_err(bad)?,
                ("sweep", "seeds") => cfg.sweep.seeds = parse_list(value).map_err(bad)?,
                ("ablate", "kinds") => cfg.ablate.kinds = parse_list(value).map_err(bad)?,
                ("ablate", "scales") => cfg.ablate.scales = parse_list(value).map_err(bad)?,
                ("ablate", "variant") => cfg.ablate.variant = parse_one(value).map_err(bad)?,
                _ => {
                    return Err(ConfigError::UnknownKey { line, section: section.clone(), key: key.into() });
                }
            }
        }
        cfg.schedule = match kind {
            GammaKind::None => InterpolantSchedule::deterministic(),
            _ => InterpolantSchedule::new(kind, scale).map_err(|e| ConfigError::Invalid(e.to_string()))?,
        };
        cfg.sampler.schedule = cfg.schedule;
        cfg.train.schedule = cfg.schedule;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.train.validate().map_err(|e| invalid(&e))?;
        if self.data.dim == 0 || self.data.n_train == 0 || self.data.n_test == 0 {
            return Err(ConfigError::Invalid("data dim, n_train and n_test must be positive".into()));
        }
        if !(self.data.noise_std >= 0.0 && self.data.noise_std.is_finite()) {
            return Err(ConfigError::Invalid(format!("noise_std {} must be non-negative", self.data.noise_std)));
        }
        if !(self.sinkhorn_reg > 0.0 && self.sinkhorn_reg.is_finite()) {
            return Err(ConfigError::Invalid(format!("sinkhorn_reg {} must be positive", self.sinkhorn_reg)));
        }
        if self.sampler.steps == 0 {
            return Err(ConfigError::Invalid("sampler steps must be at least 1".into()));
        }
        if self.sweep.values.contains(&0) {
            return Err(ConfigError::Invalid("sweep values must be positive".into()));
        }
        if self.ablate.scales.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
            return Err(ConfigError::Invalid("ablate scales must be non-negative".into()));
        }
        Ok(())
    }

    /// One line per resolved setting in a fixed order. Formatting and comments
    /// in the source file do not affect it.
    pub fn canonical(&self) -> String {
        let t = &self.train;
        let s = &self.sampler;
        let join = |v: Vec<String>| v.join(",");
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        put("train.epochs", t.epochs_total.to_string());
        put("train.pretrain_epochs", format!("{:?}", t.epochs_pretrain));
        put("train.batch_size", t.batch_size.to_string());
        put("train.lr", format!("{:?}", t.lr));
        put("train.hidden", t.hidden.to_string());
        put("train.source_noise_scale", format!("{:?}", t.source_noise_scale));
        put("train.ema_decay", format!("{:?}", t.ema_decay));
        put("train.two_stage", t.two_stage.to_string());
        put("train.source_noise", t.source_noise.to_string());
        put("schedule.kind", self.schedule.kind().to_string());
        put("schedule.scale", format!("{:?}", self.schedule.scale()));
        put("sampler.solver", s.solver.as_str().to_owned());
        put("sampler.steps", s.steps.to_string());
        put("sampler.eps", format!("{:?}", s.source_noise));
        put("sampler.diffusion_coef", format!("{:?}", s.diffusion_coef));
        put("sampler.margin", format!("{:?}", s.margin));
        put("sampler.ema", self.use_ema.to_string());
        put("sampler.sinkhorn_reg", format!("{:?}", self.sinkhorn_reg));
        put("data.dim", self.data.dim.to_string());
        put("data.n_train", self.data.n_train.to_string());
        put("data.n_test", self.data.n_test.to_string());
        put("data.noise_std", format!("{:?}", self.data.noise_std));
        put("sweep.axis", self.sweep.axis.as_str().to_owned());
        put("sweep.values", join(self.sweep.values.iter().map(|v| v.to_string()).collect()));
        put("sweep.variants", join(self.sweep.variants.iter().map(|v| v.to_string()).collect()));
        put("sweep.seeds", join(self.sweep.seeds.iter().map(|v| v.to_string()).collect()));
        put("ablate.kinds", join(self.ablate.kinds.iter().map(|v| v.to_string()).collect()));
        put("ablate.scales", join(self.ablate.scales.iter().map(|v| format!("{v:?}")).collect()));
        put("ablate.variant", self.ablate.variant.to_string());
        out
    }

    pub fn config_hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    /// Stable identifier of one (config, seed) pair; 16 hex digits of SHA-256.
    pub fn run_id(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.canonical().as_bytes());
        h.update(format!("seed={}\n", self.train.seed).as_bytes());
        hex::encode(&h.finalize()[..8])
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig { seed: self.train.seed, ..self.sampler }
    }

    pub fn sinkhorn(&self) -> SinkhornConfig {
        SinkhornConfig { reg: self.sinkhorn_reg, ..SinkhornConfig::default() }
    }

    /// The base for variant runs: `[schedule]` is the stochastic schedule and
    /// `[sampler] eps` the jitter for variants trained with source noise.
    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            train: self.train.clone(),
            stochastic_schedule: self.schedule,
            sampler: self.sampler,
            sinkhorn: self.sinkhorn(),
            test_n: self.data.n_test,
            data_noise_std: self.data.noise_std,
            use_ema: self.use_ema,
        }
    }

    /// This config specialised to one sweep point, with the variant's flags
    /// written into `[train]` so the run id reflects them.
    pub fn for_point(&self, variant: Variant, dim: usize, n_train: usize, seed: u64) -> RunConfig {
        let exp = self.experiment();
        let train = exp.train_config(variant, seed);
        let sampler = exp.sampler_config(variant, seed);
        RunConfig {
            schedule: train.schedule,
            train,
            sampler,
            data: DataSection { dim, n_train, ..self.data.clone() },
            ..self.clone()
        }
    }
}
