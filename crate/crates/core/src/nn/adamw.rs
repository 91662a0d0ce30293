use serde::{Deserialize, Serialize};

use crate::autodiff::{AdError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay:
/// `θ ← θ − lr · (m̂ / (√v̂ + eps) + weight_decay · θ)`.
#[derive(Clone, Debug)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, params: &[&Tensor]) -> Self {
        Self {
            config,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.v
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]]) -> Result<(), AdError> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(AdError::ShapeMismatch(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(AdError::ShapeMismatch(format!("param {} vs grad {}", p.len(), g.len())));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(AdError::NonFinite("gradient".into()));
            }
        }
        let c = self.config;
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((theta, &gi), mi), vi) in p.values_mut().iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *theta -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * *theta);
            }
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(AdError::NonFinite("parameters after optimizer step".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, wd: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            weight_decay: wd,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut theta = Tensor::scalar(0.0);
        let mut opt = AdamWState::new(cfg(0.1, 0.0), &[&theta]);
        opt.step(&mut [&mut theta], &[&[1.0]]).unwrap();
        // m̂ = v̂ = 1 → Δ = −0.1 · 1 / (1 + 1e-8)
        assert!((theta.item() - -0.1 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut theta = Tensor::vector(vec![0.3, -1.0]).unwrap();
        let mut opt = AdamWState::new(cfg(0.1, 0.0), &[&theta]);
        for _ in 0..5 {
            opt.step(&mut [&mut theta], &[&[0.0, 0.0]]).unwrap();
        }
        assert_eq!(theta.values(), &[0.3, -1.0]);
    }

    #[test]
    fn decoupled_decay_shrinks_geometrically() {
        let mut theta = Tensor::scalar(2.0);
        let mut opt = AdamWState::new(cfg(0.1, 0.5), &[&theta]);
        let mut expected = 2.0;
        for _ in 0..4 {
            opt.step(&mut [&mut theta], &[&[0.0]]).unwrap();
            expected *= 1.0 - 0.1 * 0.5;
            assert!((theta.item() - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_reference_adam_on_quadratic() {
        // reference: plain Adam on f(θ) = (θ − 3)², hand-written loop
        let c = cfg(0.05, 0.0);
        let mut theta = Tensor::scalar(0.0);
        let mut opt = AdamWState::new(c, &[&theta]);
        let (mut r_theta, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=50 {
            let g = 2.0 * (theta.item() - 3.0);
            opt.step(&mut [&mut theta], &[&[g]]).unwrap();
            let rg = 2.0 * (r_theta - 3.0);
            m = 0.9 * m + 0.1 * rg;
            v = 0.999 * v + 0.001 * rg * rg;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            r_theta -= 0.05 * mh / (vh.sqrt() + 1e-8);
            assert!((theta.item() - r_theta).abs() < 1e-12);
        }
        assert!(opt.second_moment()[0][0] >= 0.0);
    }

    #[test]
    fn rejects_non_finite_gradients() {
        let mut theta = Tensor::scalar(0.0);
        let mut opt = AdamWState::new(cfg(0.1, 0.0), &[&theta]);
        let err = opt.step(&mut [&mut theta], &[&[f64::NAN]]).unwrap_err();
        assert!(matches!(err, AdError::NonFinite(_)));
        assert_eq!(opt.t, 0);
    }
}
