//! Shared-trunk MLP with a velocity head and a score head.
//!
//! Layout: `[x | emb(t)] -> FC -> ELU -> FC -> ELU -> FC -> ELU -> {FC_v, FC_eta}`,
//! i.e. four fully connected layers along either output path.

use std::f64::consts::PI;

use rand::Rng;

use super::tensor::{gemm_into, matmul, Tensor2, Trans};
use super::NumError;

/// Frequencies of the sinusoidal time features.
pub const TIME_FREQUENCIES: [f64; 4] = [1.0, 2.0, 4.0, 8.0];
/// Raw `t` plus a sin/cos pair per frequency.
pub const TIME_FEATURES: usize = 1 + 2 * TIME_FREQUENCIES.len();
pub const DEFAULT_HIDDEN: usize = 64;
const TRUNK_DEPTH: usize = 3;

/// Anything that exposes its parameters as a fixed, ordered list of flat arrays.
pub trait Parameters {
    fn param_slices(&self) -> Vec<&[f64]>;
    fn param_slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }
}

impl Parameters for Vec<f64> {
    fn param_slices(&self) -> Vec<&[f64]> {
        vec![self.as_slice()]
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.as_mut_slice()]
    }
}

/// Affine layer `y = x · W + b` with `W` stored `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor2,
    pub bias: Tensor2,
}

impl Linear {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor2::zeros(fan_in, fan_out),
            bias: Tensor2::zeros(1, fan_out),
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Self {
            weight: Tensor2::from_vec_unchecked(fan_in, fan_out, data),
            bias: Tensor2::zeros(1, fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }

    fn apply(&self, input: &Tensor2) -> Result<Tensor2, NumError> {
        let mut out = Tensor2::zeros(input.rows(), self.fan_out());
        for i in 0..out.rows() {
            out.row_mut(i).copy_from_slice(self.bias.data());
        }
        gemm_into(input, &self.weight, Trans::None, 1.0, &mut out)?;
        Ok(out)
    }
}

/// Velocity field `v(x, t)` and noise predictor `eta(x, t)` on one trunk.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityScoreModel {
    dim: usize,
    hidden: usize,
    trunk: Vec<Linear>,
    velocity_head: Linear,
    score_head: Linear,
}

/// Intermediates of a forward pass, consumed by [`VelocityScoreModel::backward_cached`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Inputs to each trunk layer; `inputs[0]` is `[x | emb(t)]`.
    inputs: Vec<Tensor2>,
    /// Pre-activations of each trunk layer.
    pre: Vec<Tensor2>,
    /// Trunk output fed to both heads.
    features: Tensor2,
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// `[t, sin(2πkt), cos(2πkt)]` for each frequency `k`.
pub fn time_embedding(t: f64) -> [f64; TIME_FEATURES] {
    let mut out = [0.0; TIME_FEATURES];
    out[0] = t;
    for (i, k) in TIME_FREQUENCIES.iter().enumerate() {
        let phase = 2.0 * PI * k * t;
        out[1 + 2 * i] = phase.sin();
        out[2 + 2 * i] = phase.cos();
    }
    out
}

impl VelocityScoreModel {
    /// Randomly initialised model for data dimension `dim`.
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        let input = dim + TIME_FEATURES;
        let mut trunk = Vec::with_capacity(TRUNK_DEPTH);
        trunk.push(Linear::glorot(input, hidden, rng));
        for _ in 1..TRUNK_DEPTH {
            trunk.push(Linear::glorot(hidden, hidden, rng));
        }
        Self {
            dim,
            hidden,
            trunk,
            velocity_head: Linear::glorot(hidden, dim, rng),
            score_head: Linear::glorot(hidden, dim, rng),
        }
    }

    /// All weights and biases zero.
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        let input = dim + TIME_FEATURES;
        let mut trunk = vec![Linear::zeros(input, hidden)];
        for _ in 1..TRUNK_DEPTH {
            trunk.push(Linear::zeros(hidden, hidden));
        }
        Self {
            dim,
            hidden,
            trunk,
            velocity_head: Linear::zeros(hidden, dim),
            score_head: Linear::zeros(hidden, dim),
        }
    }

    /// A zero model with the same shapes, used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dim, self.hidden)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn input_width(&self) -> usize {
        self.dim + TIME_FEATURES
    }

    pub fn trunk(&self) -> &[Linear] {
        &self.trunk
    }

    pub fn trunk_mut(&mut self) -> &mut [Linear] {
        &mut self.trunk
    }

    pub fn velocity_head_mut(&mut self) -> &mut Linear {
        &mut self.velocity_head
    }

    pub fn score_head_mut(&mut self) -> &mut Linear {
        &mut self.score_head
    }

    /// Stable parameter names in serialization order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor2)> {
        let mut out = Vec::new();
        for (i, layer) in self.trunk.iter().enumerate() {
            out.push((format!("trunk.{i}.weight"), &layer.weight));
            out.push((format!("trunk.{i}.bias"), &layer.bias));
        }
        out.push(("velocity_head.weight".into(), &self.velocity_head.weight));
        out.push(("velocity_head.bias".into(), &self.velocity_head.bias));
        out.push(("score_head.weight".into(), &self.score_head.weight));
        out.push(("score_head.bias".into(), &self.score_head.bias));
        out
    }

    /// Reassembles a model from tensors in [`Self::named_tensors`] order.
    pub fn from_named_tensors(tensors: Vec<(String, Tensor2)>) -> Result<Self, NumError> {
        let expected = 2 * TRUNK_DEPTH + 4;
        if tensors.len() != expected {
            return Err(NumError::Shape(format!(
                "expected {expected} parameter arrays, found {}",
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        let mut take = |name: &str| -> Result<Tensor2, NumError> {
            let (found, t) = it.next().expect("length checked");
            if found != name {
                return Err(NumError::Shape(format!("expected `{name}`, found `{found}`")));
            }
            Ok(t)
        };
        let mut trunk = Vec::with_capacity(TRUNK_DEPTH);
        for i in 0..TRUNK_DEPTH {
            let weight = take(&format!("trunk.{i}.weight"))?;
            let bias = take(&format!("trunk.{i}.bias"))?;
            trunk.push(Linear { weight, bias });
        }
        let velocity_head = Linear {
            weight: take("velocity_head.weight")?,
            bias: take("velocity_head.bias")?,
        };
        let score_head = Linear {
            weight: take("score_head.weight")?,
            bias: take("score_head.bias")?,
        };
        let hidden = trunk[0].fan_out();
        let dim = velocity_head.fan_out();
        let model = Self {
            dim,
            hidden,
            trunk,
            velocity_head,
            score_head,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<(), NumError> {
        let mut width = self.input_width();
        for (i, layer) in self.trunk.iter().enumerate() {
            if layer.fan_in() != width || layer.bias.shape() != (1, layer.fan_out()) {
                return Err(NumError::Shape(format!("trunk layer {i} has inconsistent shape")));
            }
            width = layer.fan_out();
        }
        for (name, head) in [("velocity", &self.velocity_head), ("score", &self.score_head)] {
            if head.fan_in() != width
                || head.fan_out() != self.dim
                || head.bias.shape() != (1, self.dim)
            {
                return Err(NumError::Shape(format!("{name} head has inconsistent shape")));
            }
        }
        if !self.param_slices().iter().all(|s| s.iter().all(|v| v.is_finite())) {
            return Err(NumError::NonFinite("model parameters".into()));
        }
        Ok(())
    }

    fn network_input(&self, x: &Tensor2, t: &[f64]) -> Result<Tensor2, NumError> {
        if x.cols() != self.dim {
            return Err(NumError::Shape(format!(
                "model expects {} input columns, got {}",
                self.dim,
                x.cols()
            )));
        }
        if t.len() != x.rows() {
            return Err(NumError::Shape(format!(
                "{} time values for {} rows",
                t.len(),
                x.rows()
            )));
        }
        if let Some(bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(NumError::Domain(format!("time {bad} outside [0, 1]")));
        }
        let width = self.input_width();
        let mut input = Tensor2::zeros(x.rows(), width);
        for (i, &ti) in t.iter().enumerate() {
            let row = input.row_mut(i);
            row[..self.dim].copy_from_slice(x.row(i));
            row[self.dim..].copy_from_slice(&time_embedding(ti));
        }
        Ok(input)
    }

    /// Returns `(v, eta)` for a batch of points and per-row times.
    pub fn forward(&self, x: &Tensor2, t: &[f64]) -> Result<(Tensor2, Tensor2), NumError> {
        let (v, eta, _) = self.forward_cached(x, t)?;
        Ok((v, eta))
    }

    /// Velocity head only; skips the score projection.
    pub fn velocity(&self, x: &Tensor2, t: &[f64]) -> Result<Tensor2, NumError> {
        let mut h = self.network_input(x, t)?;
        for layer in &self.trunk {
            h = layer.apply(&h)?.map(elu);
        }
        self.velocity_head.apply(&h)
    }

    pub fn forward_cached(
        &self,
        x: &Tensor2,
        t: &[f64],
    ) -> Result<(Tensor2, Tensor2, ForwardCache), NumError> {
        let mut h = self.network_input(x, t)?;
        let mut inputs = Vec::with_capacity(TRUNK_DEPTH);
        let mut pre = Vec::with_capacity(TRUNK_DEPTH);
        for layer in &self.trunk {
            let a = layer.apply(&h)?;
            let next = a.map(elu);
            inputs.push(h);
            pre.push(a);
            h = next;
        }
        let v = self.velocity_head.apply(&h)?;
        let eta = self.score_head.apply(&h)?;
        Ok((
            v,
            eta,
            ForwardCache {
                inputs,
                pre,
                features: h,
            },
        ))
    }

    /// Gradient of `sum(grad_v ⊙ v) + sum(grad_eta ⊙ eta)` with respect to every parameter.
    pub fn backward(
        &self,
        x: &Tensor2,
        t: &[f64],
        grad_v: &Tensor2,
        grad_eta: &Tensor2,
    ) -> Result<VelocityScoreModel, NumError> {
        let (_, _, cache) = self.forward_cached(x, t)?;
        self.backward_cached(&cache, grad_v, grad_eta)
    }

    pub fn backward_cached(
        &self,
        cache: &ForwardCache,
        grad_v: &Tensor2,
        grad_eta: &Tensor2,
    ) -> Result<VelocityScoreModel, NumError> {
        let batch = cache.features.rows();
        for (name, g) in [("velocity", grad_v), ("score", grad_eta)] {
            if g.shape() != (batch, self.dim) {
                return Err(NumError::Shape(format!(
                    "{name} upstream gradient is {:?}, expected {:?}",
                    g.shape(),
                    (batch, self.dim)
                )));
            }
            if !g.is_finite() {
                return Err(NumError::NonFinite(format!("{name} upstream gradient")));
            }
        }

        let mut grads = self.zeros_like();
        let feats = &cache.features;
        gemm_into(feats, grad_v, Trans::Left, 0.0, &mut grads.velocity_head.weight)?;
        grads.velocity_head.bias = grad_v.sum_rows();
        gemm_into(feats, grad_eta, Trans::Left, 0.0, &mut grads.score_head.weight)?;
        grads.score_head.bias = grad_eta.sum_rows();

        let mut upstream = matmul(grad_v, &self.velocity_head.weight, Trans::Right)?;
        gemm_into(grad_eta, &self.score_head.weight, Trans::Right, 1.0, &mut upstream)?;

        for i in (0..TRUNK_DEPTH).rev() {
            let delta = upstream.zip_with(&cache.pre[i], |g, a| g * elu_grad(a))?;
            gemm_into(&cache.inputs[i], &delta, Trans::Left, 0.0, &mut grads.trunk[i].weight)?;
            grads.trunk[i].bias = delta.sum_rows();
            if i > 0 {
                upstream = matmul(&delta, &self.trunk[i].weight, Trans::Right)?;
            }
        }
        Ok(grads)
    }
}

impl Parameters for VelocityScoreModel {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * TRUNK_DEPTH + 4);
        for layer in self.trunk.iter().chain([&self.velocity_head, &self.score_head]) {
            out.push(layer.weight.data());
            out.push(layer.bias.data());
        }
        out
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * TRUNK_DEPTH + 4);
        for layer in self
            .trunk
            .iter_mut()
            .chain([&mut self.velocity_head, &mut self.score_head])
        {
            out.push(layer.weight.data_mut());
            out.push(layer.bias.data_mut());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn loss(model: &VelocityScoreModel, x: &Tensor2, t: &[f64], gv: &Tensor2, ge: &Tensor2) -> f64 {
        let (v, e) = model.forward(x, t).unwrap();
        let dot = |a: &Tensor2, b: &Tensor2| a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum::<f64>();
        dot(&v, gv) + dot(&e, ge)
    }

    #[test]
    fn zero_model_outputs_zero() {
        let model = VelocityScoreModel::zeros(3, 8);
        let x = Tensor2::from_vec(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0]).unwrap();
        let (v, e) = model.forward(&x, &[0.1, 0.9]).unwrap();
        assert!(v.data().iter().chain(e.data()).all(|&z| z == 0.0));
    }

    #[test]
    fn scalar_network_matches_hand_composition() {
        // d = 1, hidden = 1, and only the x input feeds the first layer.
        let mut model = VelocityScoreModel::zeros(1, 1);
        let (w1, b1, w2, b2, w3, b3) = (2.0, -0.5, -1.5, 0.25, 0.8, 0.1);
        let (wv, bv, we, be) = (3.0, -1.0, -2.0, 0.5);
        {
            let trunk = model.trunk_mut();
            trunk[0].weight.data_mut()[0] = w1;
            trunk[0].bias.data_mut()[0] = b1;
            trunk[1].weight.data_mut()[0] = w2;
            trunk[1].bias.data_mut()[0] = b2;
            trunk[2].weight.data_mut()[0] = w3;
            trunk[2].bias.data_mut()[0] = b3;
        }
        model.velocity_head_mut().weight.data_mut()[0] = wv;
        model.velocity_head_mut().bias.data_mut()[0] = bv;
        model.score_head_mut().weight.data_mut()[0] = we;
        model.score_head_mut().bias.data_mut()[0] = be;

        let x = 0.7;
        let h1 = elu(w1 * x + b1);
        let h2 = elu(w2 * h1 + b2);
        let h3 = elu(w3 * h2 + b3);
        let (v, e) = model
            .forward(&Tensor2::from_vec(1, 1, vec![x]).unwrap(), &[0.3])
            .unwrap();
        assert!((v.data()[0] - (wv * h3 + bv)).abs() < 1e-15);
        assert!((e.data()[0] - (we * h3 + be)).abs() < 1e-15);
        // h1 = 0.9 > 0, h2 = -1.1 lands in the exponential branch.
        assert!(w2 * h1 + b2 < 0.0);
    }

    #[test]
    fn identical_rows_give_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = VelocityScoreModel::new(4, 16, &mut rng);
        let row = [0.3, -1.0, 2.0, 0.1];
        let x = Tensor2::from_rows(&[row.to_vec(), row.to_vec()]).unwrap();
        let (v, e) = model.forward(&x, &[0.4, 0.4]).unwrap();
        assert_eq!(v.row(0), v.row(1));
        assert_eq!(e.row(0), e.row(1));
    }

    #[test]
    fn shape_and_domain_errors() {
        let model = VelocityScoreModel::zeros(3, 4);
        let x = Tensor2::zeros(2, 2);
        assert!(matches!(model.forward(&x, &[0.0, 0.0]), Err(NumError::Shape(_))));
        let x = Tensor2::zeros(2, 3);
        assert!(matches!(model.forward(&x, &[0.0]), Err(NumError::Shape(_))));
        assert!(matches!(model.forward(&x, &[0.0, 1.5]), Err(NumError::Domain(_))));
        let g = Tensor2::filled(2, 3, f64::NAN);
        let z = Tensor2::zeros(2, 3);
        assert!(matches!(
            model.backward(&x, &[0.0, 0.5], &g, &z),
            Err(NumError::NonFinite(_))
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient_and_linearity_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = VelocityScoreModel::new(3, 8, &mut rng);
        let x = Tensor2::standard_normal(5, 3, &mut rng);
        let t = [0.1, 0.2, 0.5, 0.7, 0.95];
        let zero = Tensor2::zeros(5, 3);
        let g = model.backward(&x, &t, &zero, &zero).unwrap();
        assert!(g.param_slices().iter().all(|s| s.iter().all(|&v| v == 0.0)));

        let gv = Tensor2::standard_normal(5, 3, &mut rng);
        let ge = Tensor2::standard_normal(5, 3, &mut rng);
        let g1 = model.backward(&x, &t, &gv, &ge).unwrap();
        let g2 = model.backward(&x, &t, &gv.scale(2.0), &ge.scale(2.0)).unwrap();
        for (a, b) in g1.param_slices().iter().zip(g2.param_slices()) {
            for (p, q) in a.iter().zip(b) {
                assert!((2.0 * p - q).abs() <= 1e-12 * (1.0 + q.abs()));
            }
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = VelocityScoreModel::new(4, 12, &mut rng);
        let x = Tensor2::standard_normal(6, 4, &mut rng);
        let t: Vec<f64> = (0..6).map(|i| 0.05 + 0.15 * i as f64).collect();
        let gv = Tensor2::standard_normal(6, 4, &mut rng);
        let ge = Tensor2::standard_normal(6, 4, &mut rng);
        let analytic = model.backward(&x, &t, &gv, &ge).unwrap();
        let analytic: Vec<f64> = analytic.param_slices().concat();

        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let mut probe = model.clone();
        for (k, &exact) in analytic.iter().enumerate() {
            let orig = get_flat(&probe, k);
            set_flat(&mut probe, k, orig + h);
            let up = loss(&probe, &x, &t, &gv, &ge);
            set_flat(&mut probe, k, orig - h);
            let down = loss(&probe, &x, &t, &gv, &ge);
            set_flat(&mut probe, k, orig);
            let numeric = (up - down) / (2.0 * h);
            let rel = (numeric - exact).abs() / numeric.abs().max(exact.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }

    fn get_flat(m: &VelocityScoreModel, mut k: usize) -> f64 {
        for s in m.param_slices() {
            if k < s.len() {
                return s[k];
            }
            k -= s.len();
        }
        unreachable!()
    }

    fn set_flat(m: &mut VelocityScoreModel, mut k: usize, value: f64) {
        for s in m.param_slices_mut() {
            if k < s.len() {
                s[k] = value;
                return;
            }
            k -= s.len();
        }
        unreachable!()
    }
}
