use super::mlp::Parameters;
use super::NumError;

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new<P: Parameters + ?Sized>(params: &P, lr: f64) -> Self {
        let shapes: Vec<usize> = params.param_slices().iter().map(|s| s.len()).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step<P: Parameters + ?Sized>(&mut self, params: &mut P, grads: &P) -> Result<(), NumError> {
        let grads = grads.param_slices();
        let mut params = params.param_slices_mut();
        if params.len() != self.first_moment.len()
            || grads.len() != params.len()
            || params
                .iter()
                .zip(&grads)
                .zip(&self.first_moment)
                .any(|((p, g), m)| p.len() != m.len() || g.len() != m.len())
        {
            return Err(NumError::Shape("adam state does not match parameters".into()));
        }

        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(&grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Exponential moving average of parameters.
#[derive(Clone, Debug)]
pub struct EmaState<P> {
    shadow: P,
    decay: f64,
}

impl<P: Parameters + Clone> EmaState<P> {
    pub fn new(params: &P, decay: f64) -> Result<Self, NumError> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(NumError::Domain(format!("ema decay {decay} outside (0, 1)")));
        }
        Ok(Self {
            shadow: params.clone(),
            decay,
        })
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn shadow(&self) -> &P {
        &self.shadow
    }

    pub fn into_shadow(self) -> P {
        self.shadow
    }

    /// `shadow <- decay * shadow + (1 - decay) * params`
    pub fn update(&mut self, params: &P) -> Result<(), NumError> {
        let src = params.param_slices();
        let mut dst = self.shadow.param_slices_mut();
        if src.len() != dst.len() || src.iter().zip(&dst).any(|(a, b)| a.len() != b.len()) {
            return Err(NumError::Shape("ema shadow does not match parameters".into()));
        }
        let keep = self.decay;
        for (d, s) in dst.iter_mut().zip(&src) {
            for (a, &b) in d.iter_mut().zip(s.iter()) {
                *a = keep * *a + (1.0 - keep) * b;
            }
        }
        Ok(())
    }
}
