use stochflow::dataset::{make_task, TaskConfig};
use stochflow::experiment::{evaluate_model, run_point, ExperimentConfig, Variant};
use stochflow::metrics::SinkhornConfig;
use stochflow::numcore::VelocityScoreModel;
use stochflow::sampler::{generate, SamplerConfig};
use stochflow::trainer::{train, TrainConfig};

fn short_config(epochs: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::shell_benchmark();
    cfg.train.epochs_total = epochs;
    cfg.test_n = 256;
    cfg
}

#[test]
fn training_reduces_velocity_loss_in_two_dimensions() {
    let task = make_task(&TaskConfig::new(2, 1024, 0)).unwrap();
    let cfg = TrainConfig { epochs_total: 200, ..TrainConfig::default() };
    let out = train(&task, &cfg).unwrap();
    let h = &out.history.records;
    assert_eq!(h.len(), 200);
    assert!(h[199].loss_v < h[0].loss_v, "{} -> {}", h[0].loss_v, h[199].loss_v);
}

#[test]
fn trained_flat_model_aligns_and_lands_on_outer_shell() {
    let r = run_point(&short_config(100), Variant::Standard, 2, 1024, 1).unwrap();
    assert!(r.report.mean_cosine >= 0.9, "cosine {}", r.report.mean_cosine);

    let task = make_task(&TaskConfig::new(2, 1024, 1)).unwrap();
    let out = generate(&r.trained.model, &task.source_test, &SamplerConfig::default(), None).unwrap();
    let norms = out.row_norms();
    let mean = norms.iter().sum::<f64>() / norms.len() as f64;
    assert!((mean - 2.0).abs() < 0.15, "mean radius {mean}");
}

#[test]
fn zero_model_keeps_sources_in_place() {
    let task = make_task(&TaskConfig::new(3, 64, 4)).unwrap();
    let model = VelocityScoreModel::zeros(3, 8);
    let report = evaluate_model(&model, &task, &SamplerConfig::default(), &SinkhornConfig::default()).unwrap();
    assert!((report.mean_cosine - 1.0).abs() < 1e-12);
    assert_eq!(report.mse, 0.0);
}

#[test]
fn ema_and_raw_weights_score_differently_when_undertrained() {
    let mut cfg = short_config(3);
    let raw = run_point(&cfg, Variant::Standard, 4, 256, 0).unwrap().report;
    cfg.use_ema = true;
    let ema = run_point(&cfg, Variant::Standard, 4, 256, 0).unwrap().report;
    assert_ne!(raw.mean_cosine, ema.mean_cosine);
    assert_ne!(raw.sinkhorn, ema.sinkhorn);
}

#[test]
fn injections_help_when_dimension_is_high() {
    let cfg = short_config(60);
    let std = run_point(&cfg, Variant::Standard, 256, 512, 0).unwrap().report;
    let sto = run_point(&cfg, Variant::Stochastic, 256, 512, 0).unwrap().report;
    assert!(sto.mean_cosine > std.mean_cosine, "{} vs {}", sto.mean_cosine, std.mean_cosine);
}
