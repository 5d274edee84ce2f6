//! Transport-quality metrics between source, generated and target point clouds.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::numcore::Tensor2;

/// Largest `n` accepted by [`match_fraction`]; the cost matrix is `n × n`.
pub const DEFAULT_ASSIGNMENT_CAP: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("row {0} has zero norm")]
    ZeroNorm(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{n} points exceed the assignment cap of {cap}")]
    TooLarge { n: usize, cap: usize },
    #[error("invalid argument: {0}")]
    Argument(String),
}

fn paired(a: &Tensor2, b: &Tensor2) -> Result<(), MetricError> {
    if a.shape() != b.shape() {
        return Err(MetricError::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean over rows of `<x0, x1> / (|x0| |x1|)`.
pub fn mean_cosine(sources: &Tensor2, generated: &Tensor2) -> Result<f64, MetricError> {
    paired(sources, generated)?;
    if sources.rows() == 0 {
        return Err(MetricError::Argument("no rows".into()));
    }
    let mut total = 0.0;
    for i in 0..sources.rows() {
        let (a, b) = (sources.row(i), generated.row(i));
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(MetricError::ZeroNorm(i));
        }
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        total += dot / (na * nb);
    }
    Ok(total / sources.rows() as f64)
}

/// Mean over rows and coordinates of the squared difference.
pub fn mean_mse(sources: &Tensor2, generated: &Tensor2) -> Result<f64, MetricError> {
    paired(sources, generated)?;
    Ok(sources.sub(generated).expect("shapes checked").mean_square())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornConfig {
    pub reg: f64,
    pub max_iter: usize,
    /// Stop once the L1 violation of the row marginal drops below this.
    pub tol: f64,
    /// Divide the squared-Euclidean cost by the dimension before iterating.
    pub per_coordinate: bool,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            reg: 0.1,
            max_iter: 10_000,
            tol: 1e-8,
            per_coordinate: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornResult {
    /// `<P, C>` without the entropy term.
    pub cost: f64,
    pub iterations: usize,
    pub marginal_error: f64,
    pub converged: bool,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Entropic OT between uniform measures on the rows of `a` and `b`, in the log domain.
///
/// The pair is put in a canonical order before iterating, so swapping the
/// arguments reproduces the same result bit for bit.
pub fn sinkhorn_distance(a: &Tensor2, b: &Tensor2, cfg: &SinkhornConfig) -> Result<SinkhornResult, MetricError> {
    let swap = match a.rows().cmp(&b.rows()) {
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Equal => {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                == Some(std::cmp::Ordering::Greater)
        }
    };
    if swap {
        sinkhorn_oriented(b, a, cfg)
    } else {
        sinkhorn_oriented(a, b, cfg)
    }
}

fn sinkhorn_oriented(a: &Tensor2, b: &Tensor2, cfg: &SinkhornConfig) -> Result<SinkhornResult, MetricError> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(MetricError::Argument("sinkhorn needs non-empty point sets".into()));
    }
    if a.cols() != b.cols() {
        return Err(MetricError::Shape(format!("dimensions {} and {}", a.cols(), b.cols())));
    }
    if cfg.reg.is_nan() || cfg.reg <= 0.0 {
        return Err(MetricError::Argument(format!("regularization {} must be positive", cfg.reg)));
    }
    let (n, m) = (a.rows(), b.rows());
    let scale = if cfg.per_coordinate { a.cols().max(1) as f64 } else { 1.0 };
    let mut cost = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            cost[i * m + j] = sq_dist(a.row(i), b.row(j)) / scale;
        }
    }

    let eps = cfg.reg;
    let log_a = -(n as f64).ln();
    let log_b = -(m as f64).ln();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut err = f64::INFINITY;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        iterations += 1;
        for i in 0..n {
            let row = &cost[i * m..(i + 1) * m];
            f[i] = eps * log_a - eps * log_sum_exp(row.iter().zip(&g).map(|(c, gj)| (gj - c) / eps));
        }
        for j in 0..m {
            g[j] = eps * log_b - eps * log_sum_exp((0..n).map(|i| (f[i] - cost[i * m + j]) / eps));
        }
        // Columns are exact after the g update; measure the row marginal.
        err = 0.0;
        for i in 0..n {
            let row = &cost[i * m..(i + 1) * m];
            let mass: f64 = row.iter().zip(&g).map(|(c, gj)| ((f[i] + gj - c) / eps).exp()).sum();
            err += (mass - 1.0 / n as f64).abs();
        }
        if err < cfg.tol {
            break;
        }
    }

    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            let c = cost[i * m + j];
            total += ((f[i] + g[j] - c) / eps).exp() * c;
        }
    }
    Ok(SinkhornResult {
        cost: total,
        iterations,
        marginal_error: err,
        converged: err < cfg.tol,
    })
}

/// Minimum-cost perfect matching on a square cost matrix (row-major).
///
/// Shortest augmenting paths with dual potentials, `O(n^3)`. Among equal-cost
/// alternatives the column scanned first (lowest index) wins, so the result is
/// deterministic for tied inputs.
pub fn linear_sum_assignment(cost: &[f64], n: usize) -> Result<Vec<usize>, MetricError> {
    if cost.len() != n * n {
        return Err(MetricError::Shape(format!("{} entries for a {n}x{n} matrix", cost.len())));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(MetricError::Argument("assignment costs must be finite".into()));
    }
    // 1-based columns; column 0 is the virtual root of each search.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut min_to = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if reduced < min_to[j] {
                    min_to[j] = reduced;
                    way[j] = j0;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[owner[j] - 1] = j - 1;
    }
    Ok(assignment)
}

/// Share of sources matched to their own generated sample under the
/// Euclidean-cost optimal assignment.
pub fn match_fraction(sources: &Tensor2, generated: &Tensor2, cap: usize) -> Result<f64, MetricError> {
    paired(sources, generated)?;
    let n = sources.rows();
    if n == 0 {
        return Err(MetricError::Argument("no rows".into()));
    }
    if n > cap {
        return Err(MetricError::TooLarge { n, cap });
    }
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cost[i * n + j] = sq_dist(sources.row(i), generated.row(j)).sqrt();
        }
    }
    let assignment = linear_sum_assignment(&cost, n)?;
    let hits = assignment.iter().enumerate().filter(|(i, j)| i == *j).count();
    Ok(hits as f64 / n as f64)
}

/// Exact 1-D Wasserstein-1 distance between two empirical measures.
pub fn wasserstein1_1d(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::Argument("empty sample".into()));
    }
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    if xs.len() == ys.len() {
        let total: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - y).abs()).sum();
        return Ok(total / xs.len() as f64);
    }
    // Integrate |F_a - F_b| over the merged support.
    let (wa, wb) = (1.0 / xs.len() as f64, 1.0 / ys.len() as f64);
    let (mut i, mut j) = (0, 0);
    let (mut fa, mut fb) = (0.0_f64, 0.0_f64);
    let mut prev = xs[0].min(ys[0]);
    let mut total = 0.0;
    while i < xs.len() || j < ys.len() {
        let next = match (xs.get(i), ys.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        total += (fa - fb).abs() * (next - prev);
        while i < xs.len() && xs[i] == next {
            fa += wa;
            i += 1;
        }
        while j < ys.len() && ys[j] == next {
            fb += wb;
            j += 1;
        }
        prev = next;
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmoothingCheck {
    pub raw: f64,
    pub smoothed: f64,
}

/// Compares `W1(A, B)` with `W1(A * N, B * N)` for a Gaussian kernel `N`.
///
/// The smoothed measures are represented by pooling `redraws` independently
/// jittered copies of each sample, which converges to the Gaussian convolution
/// of the empirical measure as `redraws` grows.
pub fn wasserstein_smoothing_check<R: Rng + ?Sized>(
    a: &[f64],
    b: &[f64],
    noise_std: f64,
    redraws: usize,
    rng: &mut R,
) -> Result<SmoothingCheck, MetricError> {
    if redraws == 0 {
        return Err(MetricError::Argument("need at least one noise redraw".into()));
    }
    let raw = wasserstein1_1d(a, b)?;
    if noise_std == 0.0 {
        return Ok(SmoothingCheck { raw, smoothed: raw });
    }
    let mut jitter = |xs: &[f64]| -> Vec<f64> {
        let mut out = Vec::with_capacity(xs.len() * redraws);
        for _ in 0..redraws {
            out.extend(xs.iter().map(|x| x + noise_std * rng.sample::<f64, _>(StandardNormal)));
        }
        out
    };
    let pa = jitter(a);
    let pb = jitter(b);
    Ok(SmoothingCheck {
        raw,
        smoothed: wasserstein1_1d(&pa, &pb)?,
    })
}

/// The four evaluation numbers for one generated batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub mean_cosine: f64,
    /// Per-coordinate Sinkhorn cost between generated and target sets.
    pub sinkhorn: f64,
    pub sinkhorn_converged: bool,
    pub mse: f64,
    pub match_fraction: f64,
    pub n_eval: usize,
}

pub fn evaluate(
    sources: &Tensor2,
    generated: &Tensor2,
    targets: &Tensor2,
    sinkhorn: &SinkhornConfig,
) -> Result<MetricsReport, MetricError> {
    let ot = sinkhorn_distance(generated, targets, sinkhorn)?;
    Ok(MetricsReport {
        mean_cosine: mean_cosine(sources, generated)?,
        sinkhorn: ot.cost,
        sinkhorn_converged: ot.converged,
        mse: mean_mse(sources, generated)?,
        match_fraction: match_fraction(sources, generated, DEFAULT_ASSIGNMENT_CAP)?,
        n_eval: sources.rows(),
    })
}
