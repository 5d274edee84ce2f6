//! Reference checks shared by the integration tests and the acceptance runner.
//! Every oracle here is computed independently of the code under test.

#![allow(dead_code)]

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stochflow::interpolant::{GammaKind, InterpolantSchedule};
use stochflow::metrics::{linear_sum_assignment, sinkhorn_distance, wasserstein_smoothing_check, SinkhornConfig};
use stochflow::numcore::{Parameters, Tensor2, VelocityScoreModel};
use stochflow::sampler::{generate, integrate_ode, integrate_sde, SamplerConfig, SamplerError, Solver};

pub const ORDER_STEPS: [usize; 4] = [10, 20, 40, 80];

/// Least-squares slope of `ln(err)` against `ln(1/steps)` for `dx/dt = x`, `x(0) = 1`.
pub fn empirical_order(solver: Solver) -> (f64, Vec<f64>) {
    let x0 = Tensor2::filled(1, 1, 1.0);
    let exact = std::f64::consts::E;
    let errors: Vec<f64> = ORDER_STEPS
        .iter()
        .map(|&steps| {
            let cfg = SamplerConfig { solver, steps, ..SamplerConfig::default() };
            let out = integrate_ode(|x: &Tensor2, _t| Ok(x.clone()), &x0, &cfg, None).unwrap();
            (out.data()[0] - exact).abs()
        })
        .collect();
    let xs: Vec<f64> = ORDER_STEPS.iter().map(|&n| -(n as f64).ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    (num / den, errors)
}

fn sde_config(steps: usize, diffusion_coef: f64) -> SamplerConfig {
    SamplerConfig {
        solver: Solver::EulerMaruyama,
        steps,
        diffusion_coef,
        schedule: InterpolantSchedule::new(GammaKind::SinSquared, 1.0).unwrap(),
        ..SamplerConfig::default()
    }
}

/// Pure diffusion from zero: `Var[x_1] = ∫ 2 sin²(πt) dt = 1`.
/// Returns `(sample variance, standard error of that variance)`.
pub fn sde_variance(paths: usize, steps: usize, seed: u64) -> (f64, f64) {
    let cfg = sde_config(steps, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = Tensor2::zeros(paths, 1);
    let zero = |x: &Tensor2, _t: f64| -> Result<(Tensor2, Tensor2), SamplerError> {
        Ok((Tensor2::zeros(x.rows(), x.cols()), Tensor2::zeros(x.rows(), x.cols())))
    };
    let out = integrate_sde(zero, &x0, &cfg, &mut rng, None).unwrap();
    let n = paths as f64;
    let mean = out.data().iter().sum::<f64>() / n;
    let m2: f64 = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let m4: f64 = out.data().iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    let se = ((m4 - m2 * m2 * (n - 3.0) / (n - 1.0)) / n).max(0.0).sqrt();
    (m2, se)
}

/// Euler–Maruyama with `c = 0` against the plain Euler ODE on a nonlinear field.
pub fn sde_without_diffusion_is_euler() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x0 = Tensor2::standard_normal(16, 3, &mut rng);
    let field = |x: &Tensor2, t: f64| x.map(|v| (v * (1.0 + t)).sin() - 0.3 * v);
    let sde = integrate_sde(
        |x: &Tensor2, t| Ok((field(x, t), x.scale(5.0))),
        &x0,
        &sde_config(37, 0.0),
        &mut rng,
        None,
    )
    .unwrap();
    let ode_cfg = SamplerConfig { solver: Solver::Euler, steps: 37, ..SamplerConfig::default() };
    let ode = integrate_ode(|x: &Tensor2, t| Ok(field(x, t)), &x0, &ode_cfg, None).unwrap();
    sde.data().iter().zip(ode.data()).all(|(a, b)| a.to_bits() == b.to_bits())
}

/// Worst relative deviation of Sinkhorn at `reg = 0.01` from the sorted-pairing
/// optimum over random 1-D instances with five points per side.
pub fn sinkhorn_vs_sorted_1d(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SinkhornConfig { reg: 0.01, per_coordinate: false, max_iter: 200_000, ..SinkhornConfig::default() };
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let mut a: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut b: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..3.0)).collect();
        let ta = Tensor2::from_vec(5, 1, a.clone()).unwrap();
        let tb = Tensor2::from_vec(5, 1, b.clone()).unwrap();
        let got = sinkhorn_distance(&ta, &tb, &cfg).unwrap().cost;
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let exact = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 5.0;
        worst = worst.max((got - exact).abs() / exact);
    }
    worst
}

fn brute_force(cost: &[f64], n: usize) -> f64 {
    fn rec(cost: &[f64], n: usize, row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == n {
            *best = best.min(acc);
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                rec(cost, n, row + 1, used, acc + cost[row * n + j], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(cost, n, 0, &mut vec![false; n], 0.0, &mut best);
    best
}

/// Number of random instances with `n ≤ 8` where the solver misses the
/// exhaustive optimum. Costs are small integers, so sums are exact.
pub fn hungarian_mismatches(trials: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trials)
        .filter(|_| {
            let n = rng.random_range(1..=8usize);
            let cost: Vec<f64> = (0..n * n).map(|_| rng.random_range(0..100u32) as f64).collect();
            let perm = linear_sum_assignment(&cost, n).unwrap();
            let mut seen = vec![false; n];
            let valid = perm.len() == n && perm.iter().all(|&j| j < n && !std::mem::replace(&mut seen[j], true));
            let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
            !valid || total != brute_force(&cost, n)
        })
        .count()
}

/// Worst relative error between backprop and central differences of
/// `L = <gv, v> + <ge, eta>` over every parameter of a small random network.
pub fn gradient_check(dim: usize, hidden: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = VelocityScoreModel::new(dim, hidden, &mut rng);
    let x = Tensor2::standard_normal(5, dim, &mut rng);
    let t: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..1.0)).collect();
    let gv = Tensor2::standard_normal(5, dim, &mut rng);
    let ge = Tensor2::standard_normal(5, dim, &mut rng);
    let loss = |m: &VelocityScoreModel| {
        let (v, e) = m.forward(&x, &t).unwrap();
        let dot = |a: &Tensor2, b: &Tensor2| a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum::<f64>();
        dot(&v, &gv) + dot(&e, &ge)
    };
    let grads = model.backward(&x, &t, &gv, &ge).unwrap();
    let analytic: Vec<f64> = grads.param_slices().concat();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    let mut k = 0;
    for s in 0..probe.param_slices().len() {
        for i in 0..probe.param_slices()[s].len() {
            let orig = probe.param_slices()[s][i];
            probe.param_slices_mut()[s][i] = orig + h;
            let up = loss(&probe);
            probe.param_slices_mut()[s][i] = orig - h;
            let down = loss(&probe);
            probe.param_slices_mut()[s][i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = (numeric - analytic[k]).abs() / numeric.abs().max(analytic[k].abs()).max(1e-6);
            worst = worst.max(rel);
            k += 1;
        }
    }
    worst
}

/// Samples the same sources twice with the deterministic ODE and `ε = 0`.
/// Returns `(bitwise identical, distinct output rows)`.
pub fn ode_determinism(n: usize, dim: usize, seed: u64) -> (bool, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = VelocityScoreModel::new(dim, 32, &mut rng);
    let sources = Tensor2::standard_normal(n, dim, &mut rng);
    let cfg = SamplerConfig { solver: Solver::Heun, steps: 20, source_noise: 0.0, seed: 99, ..SamplerConfig::default() };
    let first = generate(&model, &sources, &cfg, None).unwrap();
    let again = generate(&model, &sources, &SamplerConfig { seed: 1234, ..cfg }, None).unwrap();
    let identical = first.data().iter().zip(again.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    let distinct: HashSet<Vec<u64>> = first.iter_rows().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
    (identical, distinct.len())
}

/// Fraction of trials in which Gaussian smoothing does not increase `W1`
/// between two independent standard-normal samples.
pub fn smoothing_success_rate(trials: usize, n: usize, noise_std: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect()
    };
    let ok = (0..trials)
        .filter(|_| {
            let a = normal(&mut rng);
            let b = normal(&mut rng);
            let r = wasserstein_smoothing_check(&a, &b, noise_std, 100, &mut rng).unwrap();
            r.smoothed <= r.raw
        })
        .count();
    ok as f64 / trials as f64
}
