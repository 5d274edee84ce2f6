//! Interpolant paths `x_t = (1 - t) x0 + t x1 + gamma_t z` and their regression targets.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

use crate::numcore::{NumError, Tensor2};

/// Margin kept between sampled times and the endpoints for the square-root schedule.
pub const SQRT_ENDPOINT_MARGIN: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InterpolantError {
    #[error("gamma_dot of the square-root schedule is singular at t = {0}")]
    Singularity(f64),
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("unknown gamma schedule `{0}`")]
    UnknownKind(String),
    #[error("noise scale must be finite and non-negative, got {0}")]
    BadScale(f64),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GammaKind {
    None,
    SquareRoot,
    SinSquared,
    Quadratic,
}

impl GammaKind {
    pub const STOCHASTIC: [GammaKind; 3] = [Self::SquareRoot, Self::SinSquared, Self::Quadratic];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::SquareRoot => "square_root",
            Self::SinSquared => "sin_squared",
            Self::Quadratic => "quadratic",
        }
    }
}

impl fmt::Display for GammaKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GammaKind {
    type Err = InterpolantError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "square_root" | "sqrt" => Ok(Self::SquareRoot),
            "sin_squared" => Ok(Self::SinSquared),
            "quadratic" => Ok(Self::Quadratic),
            other => Err(InterpolantError::UnknownKind(other.to_owned())),
        }
    }
}

/// Linear path with an optional Gaussian bridge term `gamma_t z`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InterpolantSchedule {
    kind: GammaKind,
    scale: f64,
}

impl Default for InterpolantSchedule {
    fn default() -> Self {
        Self::deterministic()
    }
}

impl InterpolantSchedule {
    pub fn new(kind: GammaKind, scale: f64) -> Result<Self, InterpolantError> {
        if !(scale.is_finite() && scale >= 0.0) {
            return Err(InterpolantError::BadScale(scale));
        }
        Ok(Self { kind, scale })
    }

    pub fn deterministic() -> Self {
        Self {
            kind: GammaKind::None,
            scale: 0.0,
        }
    }

    pub fn kind(&self) -> GammaKind {
        self.kind
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// True when `gamma_t` vanishes identically.
    pub fn is_deterministic(&self) -> bool {
        self.kind == GammaKind::None || self.scale == 0.0
    }

    pub fn alpha(&self, t: f64) -> f64 {
        1.0 - t
    }

    pub fn beta(&self, t: f64) -> f64 {
        t
    }

    pub fn gamma(&self, t: f64) -> f64 {
        let a = self.scale;
        match self.kind {
            GammaKind::None => 0.0,
            GammaKind::SquareRoot => a * (2.0 * t * (1.0 - t)).max(0.0).sqrt(),
            GammaKind::SinSquared => a * (PI * t).sin().powi(2),
            GammaKind::Quadratic => a * t * (1.0 - t),
        }
    }

    pub fn gamma_dot(&self, t: f64) -> Result<f64, InterpolantError> {
        check_time(t)?;
        if self.is_deterministic() {
            return Ok(0.0);
        }
        let a = self.scale;
        Ok(match self.kind {
            GammaKind::None => 0.0,
            GammaKind::SquareRoot => {
                let inner = 2.0 * t * (1.0 - t);
                if inner <= 0.0 {
                    return Err(InterpolantError::Singularity(t));
                }
                a * (1.0 - 2.0 * t) / inner.sqrt()
            }
            GammaKind::SinSquared => a * PI * (2.0 * PI * t).sin(),
            GammaKind::Quadratic => a * (1.0 - 2.0 * t),
        })
    }

    /// `alpha_t^2 + beta_t^2 + gamma_t^2`.
    pub fn variance_profile(&self, t: f64) -> f64 {
        self.alpha(t).powi(2) + self.beta(t).powi(2) + self.gamma(t).powi(2)
    }

    /// Interval of times at which targets are finite.
    pub fn time_bounds(&self) -> (f64, f64) {
        if self.kind == GammaKind::SquareRoot && !self.is_deterministic() {
            (SQRT_ENDPOINT_MARGIN, 1.0 - SQRT_ENDPOINT_MARGIN)
        } else {
            (0.0, 1.0)
        }
    }

    /// Draws `z` row by row and builds the interpolant.
    pub fn draw<R: Rng + ?Sized>(
        &self,
        x0: &Tensor2,
        x1: &Tensor2,
        t: &[f64],
        rng: &mut R,
    ) -> Result<InterpolantDraw, InterpolantError> {
        let z = Tensor2::standard_normal(x0.rows(), x0.cols(), rng);
        self.draw_with_noise(x0, x1, t, z)
    }

    /// Builds the interpolant from an explicit noise tensor.
    pub fn draw_with_noise(
        &self,
        x0: &Tensor2,
        x1: &Tensor2,
        t: &[f64],
        z: Tensor2,
    ) -> Result<InterpolantDraw, InterpolantError> {
        x0.check_same_shape(x1)?;
        x0.check_same_shape(&z)?;
        if t.len() != x0.rows() {
            return Err(NumError::Shape(format!("{} times for {} rows", t.len(), x0.rows())).into());
        }
        let d = x0.cols();
        let mut xt = Tensor2::zeros(x0.rows(), d);
        let mut v_target = Tensor2::zeros(x0.rows(), d);
        for (i, &ti) in t.iter().enumerate() {
            check_time(ti)?;
            let (a, b, g) = (self.alpha(ti), self.beta(ti), self.gamma(ti));
            let g_dot = self.gamma_dot(ti)?;
            let (r0, r1, rz) = (x0.row(i), x1.row(i), z.row(i));
            let out = xt.row_mut(i);
            for k in 0..d {
                out[k] = a * r0[k] + b * r1[k] + g * rz[k];
            }
            let vel = v_target.row_mut(i);
            for k in 0..d {
                vel[k] = r1[k] - r0[k] + g_dot * rz[k];
            }
        }
        Ok(InterpolantDraw {
            xt,
            v_target,
            eta_target: z,
            t: t.to_vec(),
        })
    }
}

fn check_time(t: f64) -> Result<(), InterpolantError> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(InterpolantError::TimeOutOfRange(t))
    }
}

/// One batch of interpolant points and their regression targets.
#[derive(Clone, Debug)]
pub struct InterpolantDraw {
    pub xt: Tensor2,
    pub v_target: Tensor2,
    /// Exactly the `z` used to build `xt`.
    pub eta_target: Tensor2,
    pub t: Vec<f64>,
}

/// Convenience wrapper around [`InterpolantSchedule::draw`].
pub fn draw_interpolant<R: Rng + ?Sized>(
    schedule: &InterpolantSchedule,
    x0: &Tensor2,
    x1: &Tensor2,
    t: &[f64],
    rng: &mut R,
) -> Result<InterpolantDraw, InterpolantError> {
    schedule.draw(x0, x1, t, rng)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn sched(kind: GammaKind, a: f64) -> InterpolantSchedule {
        InterpolantSchedule::new(kind, a).unwrap()
    }

    fn t1(v: f64) -> Tensor2 {
        Tensor2::from_vec(1, 1, vec![v]).unwrap()
    }

    #[test]
    fn closed_forms() {
        let s = sched(GammaKind::SinSquared, 1.0);
        assert!((s.gamma(0.5) - 1.0).abs() < 1e-15);
        assert!(s.gamma_dot(0.5).unwrap().abs() < 1e-15);

        let q = sched(GammaKind::Quadratic, 2.0);
        assert!((q.gamma(0.25) - 0.375).abs() < 1e-15);
        assert!((q.gamma_dot(0.25).unwrap() - 1.0).abs() < 1e-15);

        let r = sched(GammaKind::SquareRoot, 1.0);
        assert!((r.gamma(0.5) - 0.5_f64.sqrt()).abs() < 1e-15);
        assert!((r.gamma_dot(0.5).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn boundary_values_vanish() {
        for kind in [GammaKind::None, GammaKind::SquareRoot, GammaKind::SinSquared, GammaKind::Quadratic] {
            for a in [0.0, 0.5, 3.0] {
                let s = sched(kind, a);
                assert_eq!(s.gamma(0.0), 0.0);
                assert!(s.gamma(1.0).abs() < 1e-15);
                assert_eq!((s.alpha(0.0), s.beta(0.0)), (1.0, 0.0));
                assert_eq!((s.alpha(1.0), s.beta(1.0)), (0.0, 1.0));
            }
        }
    }

    #[test]
    fn square_root_derivative_is_singular_at_endpoints() {
        let r = sched(GammaKind::SquareRoot, 1.0);
        assert_eq!(r.gamma_dot(0.0), Err(InterpolantError::Singularity(0.0)));
        assert_eq!(r.gamma_dot(1.0), Err(InterpolantError::Singularity(1.0)));
        assert_eq!(sched(GammaKind::SquareRoot, 0.0).gamma_dot(0.0), Ok(0.0));
        assert!(r.draw_with_noise(&t1(0.0), &t1(1.0), &[0.0], t1(1.0)).is_err());
        assert_eq!(r.time_bounds(), (1e-3, 1.0 - 1e-3));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(InterpolantSchedule::new(GammaKind::SinSquared, -1.0).is_err());
        assert!("cosine".parse::<GammaKind>().is_err());
        assert_eq!("sin_squared".parse::<GammaKind>().unwrap(), GammaKind::SinSquared);
        let s = sched(GammaKind::Quadratic, 1.0);
        assert!(s.gamma_dot(1.5).is_err());
    }

    #[test]
    fn variance_profiles() {
        let r = sched(GammaKind::SquareRoot, 1.0);
        for t in [0.0, 0.1, 0.37, 0.5, 0.9, 1.0] {
            assert!((r.variance_profile(t) - 1.0).abs() < 1e-14);
        }
        assert!((InterpolantSchedule::deterministic().variance_profile(0.5) - 0.5).abs() < 1e-15);
        assert!((sched(GammaKind::SinSquared, 1.0).variance_profile(0.5) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn endpoint_and_worked_draws() {
        let none = InterpolantSchedule::deterministic();
        let x0 = Tensor2::from_vec(1, 2, vec![1.0, -1.0]).unwrap();
        let x1 = Tensor2::from_vec(1, 2, vec![3.0, 0.5]).unwrap();
        let d = none.draw(&x0, &x1, &[0.0], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(d.xt, x0);
        assert_eq!(d.v_target.data(), &[2.0, 1.5]);

        let s = sched(GammaKind::SinSquared, 1.0);
        let d = s.draw_with_noise(&t1(0.0), &t1(2.0), &[0.5], t1(1.0)).unwrap();
        assert!((d.xt.data()[0] - 2.0).abs() < 1e-15);
        assert!((d.v_target.data()[0] - 2.0).abs() < 1e-15);
        assert_eq!(d.eta_target.data(), &[1.0]);
    }

    #[test]
    fn sqrt_endpoint_limit_within_margin() {
        let r = sched(GammaKind::SquareRoot, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = Tensor2::standard_normal(8, 3, &mut rng);
        let x1 = Tensor2::standard_normal(8, 3, &mut rng);
        let z = Tensor2::standard_normal(8, 3, &mut rng);
        let m = SQRT_ENDPOINT_MARGIN;
        let zmax = z.data().iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        let xmax = x0.sub(&x1).unwrap().data().iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        let d0 = r.draw_with_noise(&x0, &x1, &[m; 8], z.clone()).unwrap();
        let d1 = r.draw_with_noise(&x0, &x1, &[1.0 - m; 8], z).unwrap();
        let bound = (2.0 * m).sqrt() * zmax + m * xmax + 1e-12;
        for (a, b) in d0.xt.data().iter().zip(x0.data()) {
            assert!((a - b).abs() <= bound);
        }
        for (a, b) in d1.xt.data().iter().zip(x1.data()) {
            assert!((a - b).abs() <= bound);
        }
    }

    fn any_kind() -> impl Strategy<Value = GammaKind> {
        prop_oneof![
            Just(GammaKind::None),
            Just(GammaKind::SquareRoot),
            Just(GammaKind::SinSquared),
            Just(GammaKind::Quadratic),
        ]
    }

    proptest! {
        #[test]
        fn endpoints_reproduce_data(kind in any_kind(), a in 0.0f64..3.0, seed in any::<u64>()) {
            let s = sched(kind, a);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x0 = Tensor2::standard_normal(3, 4, &mut rng);
            let x1 = Tensor2::standard_normal(3, 4, &mut rng);
            let (lo, hi) = s.time_bounds();
            if lo == 0.0 {
                let d0 = s.draw(&x0, &x1, &[0.0; 3], &mut rng).unwrap();
                prop_assert_eq!(&d0.xt, &x0);
                let d1 = s.draw(&x0, &x1, &[1.0; 3], &mut rng).unwrap();
                for (p, q) in d1.xt.data().iter().zip(x1.data()) {
                    prop_assert!((p - q).abs() < 1e-12);
                }
            } else {
                prop_assert!(s.draw(&x0, &x1, &[lo; 3], &mut rng).is_ok());
                prop_assert!(s.draw(&x0, &x1, &[hi; 3], &mut rng).is_ok());
            }
        }

        #[test]
        fn pathwise_derivative_matches_target(
            kind in prop_oneof![Just(GammaKind::None), Just(GammaKind::SinSquared), Just(GammaKind::Quadratic), Just(GammaKind::SquareRoot)],
            a in 0.0f64..2.0,
            t in 0.05f64..0.95,
            seed in any::<u64>(),
        ) {
            let s = sched(kind, a);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x0 = Tensor2::standard_normal(2, 3, &mut rng);
            let x1 = Tensor2::standard_normal(2, 3, &mut rng);
            let z = Tensor2::standard_normal(2, 3, &mut rng);
            let h = 1e-5;
            let up = s.draw_with_noise(&x0, &x1, &[t + h; 2], z.clone()).unwrap();
            let down = s.draw_with_noise(&x0, &x1, &[t - h; 2], z.clone()).unwrap();
            let mid = s.draw_with_noise(&x0, &x1, &[t; 2], z).unwrap();
            for k in 0..6 {
                let fd = (up.xt.data()[k] - down.xt.data()[k]) / (2.0 * h);
                prop_assert!((fd - mid.v_target.data()[k]).abs() < 1e-6);
            }
        }

        #[test]
        fn zero_scale_equals_deterministic(kind in any_kind(), seed in any::<u64>(), t in 0.0f64..=1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x0 = Tensor2::standard_normal(2, 2, &mut rng);
            let x1 = Tensor2::standard_normal(2, 2, &mut rng);
            let z = Tensor2::standard_normal(2, 2, &mut rng);
            let a = sched(kind, 0.0).draw_with_noise(&x0, &x1, &[t; 2], z.clone()).unwrap();
            let b = InterpolantSchedule::deterministic().draw_with_noise(&x0, &x1, &[t; 2], z).unwrap();
            prop_assert_eq!(a.xt, b.xt);
            prop_assert_eq!(a.v_target, b.v_target);
        }

        #[test]
        fn zero_noise_reduces_to_linear_path(kind in any_kind(), a in 0.0f64..3.0, t in 0.01f64..0.99) {
            let x0 = Tensor2::from_vec(1, 2, vec![0.5, -2.0]).unwrap();
            let x1 = Tensor2::from_vec(1, 2, vec![1.0, 4.0]).unwrap();
            let d = sched(kind, a).draw_with_noise(&x0, &x1, &[t], Tensor2::zeros(1, 2)).unwrap();
            for k in 0..2 {
                let lin = (1.0 - t) * x0.data()[k] + t * x1.data()[k];
                prop_assert!((d.xt.data()[k] - lin).abs() < 1e-14);
                prop_assert!((d.v_target.data()[k] - (x1.data()[k] - x0.data()[k])).abs() < 1e-14);
            }
        }
    }
}
