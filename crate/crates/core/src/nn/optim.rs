use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::Parameter;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

const GRAD_NORM_WARN: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<F> {
    pub name: String,
    pub first: Vec<F>,
    pub second: Vec<F>,
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<F: Float = f32> {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<Moments<F>>,
    index: HashMap<String, usize>,
}

impl<F: Float> Adam<F> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Rebuilds an optimizer from persisted state.
    pub fn from_state(config: AdamConfig, step: u64, moments: Vec<Moments<F>>) -> Self {
        let index = moments
            .iter()
            .enumerate()
            .map(|(i, m)| (m.name.clone(), i))
            .collect();
        Adam {
            config,
            step,
            moments,
            index,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Moment tensors in first-update order.
    pub fn moments(&self) -> &[Moments<F>] {
        &self.moments
    }

    /// Applies one update to every parameter from its accumulated gradient.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: Vec<&mut Parameter<F>>) -> Result<()> {
        let mut sq_norm = 0.0;
        for p in &params {
            for g in &p.grad {
                if !g.is_finite() {
                    return Err(Error::NonFiniteGradient(p.name.clone()));
                }
                sq_norm += g.as_f64() * g.as_f64();
            }
        }
        if sq_norm.sqrt() > GRAD_NORM_WARN {
            log::warn!(
                "gradient norm {:.3e} exceeds {GRAD_NORM_WARN:e}",
                sq_norm.sqrt()
            );
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2) = (F::from_f64_lossy(c.beta1), F::from_f64_lossy(c.beta2));
        let (one_m_b1, one_m_b2) = (
            F::from_f64_lossy(1.0 - c.beta1),
            F::from_f64_lossy(1.0 - c.beta2),
        );
        let corr1 = F::from_f64_lossy(1.0 - c.beta1.powi(t));
        let corr2 = F::from_f64_lossy(1.0 - c.beta2.powi(t));
        let lr = F::from_f64_lossy(c.learning_rate);
        let eps = F::from_f64_lossy(c.eps);

        for p in params {
            let idx = match self.index.get(&p.name) {
                Some(&i) => i,
                None => {
                    let n = p.numel();
                    self.moments.push(Moments {
                        name: p.name.clone(),
                        first: vec![F::zero(); n],
                        second: vec![F::zero(); n],
                    });
                    self.index.insert(p.name.clone(), self.moments.len() - 1);
                    self.moments.len() - 1
                }
            };
            let mo = &mut self.moments[idx];
            if mo.first.len() != p.numel() {
                return Err(Error::config(format!(
                    "optimizer state for `{}` has the wrong size",
                    p.name
                )));
            }
            let mut values = p.value.data().to_vec();
            for (((w, &g), m), v) in values
                .iter_mut()
                .zip(&p.grad)
                .zip(&mut mo.first)
                .zip(&mut mo.second)
            {
                *m = b1 * *m + one_m_b1 * g;
                *v = b2 * *v + one_m_b2 * g * g;
                let m_hat = *m / corr1;
                let v_hat = *v / corr2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.value = Tensor::from_vec(p.value.shape(), values)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Parameter<f64> {
        Parameter::new("w", Tensor::scalar(v))
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut opt = Adam::<f64>::new(AdamConfig::default());
        let mut p = scalar_param(0.7);
        for i in 1..=50 {
            opt.step(vec![&mut p]).unwrap();
            assert_eq!(opt.step_count(), i);
            assert_eq!(p.value.item(), 0.7);
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut opt = Adam::<f64>::new(AdamConfig::default());
        let mut p = scalar_param(1.0);
        p.grad = vec![1.0];
        opt.step(vec![&mut p]).unwrap();
        // m_hat = 1, v_hat = 1 after bias correction
        let expect = 1.0 - 2e-4 / (1.0 + 1e-8);
        assert!((p.value.item() - expect).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_with_name() {
        let mut opt = Adam::<f32>::new(AdamConfig::default());
        let mut p = Parameter::new("gen.head.out.bias", Tensor::scalar(1.0f32));
        p.grad = vec![f32::NAN];
        let err = opt.step(vec![&mut p]).unwrap_err();
        assert!(err.to_string().contains("gen.head.out.bias"));
        assert_eq!(p.value.item(), 1.0);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn quadratic_iterates_approach_minimizer() {
        // loss = (w - 3)^2
        let mut opt = Adam::<f64>::new(AdamConfig::default());
        let mut p = scalar_param(0.0);
        let mut dist = 3.0f64;
        for _ in 0..2000 {
            p.grad = vec![2.0 * (p.value.item() - 3.0)];
            opt.step(vec![&mut p]).unwrap();
            let d = (p.value.item() - 3.0).abs();
            assert!(d < dist, "iterate moved away: {d} >= {dist}");
            dist = d;
        }
    }

    #[test]
    fn identical_runs_identical_trajectories() {
        let run = || {
            let mut opt = Adam::<f32>::new(AdamConfig::default());
            let mut p = Parameter::new("w", Tensor::vector(vec![0.1f32, -0.4, 2.0]));
            let mut traj = Vec::new();
            for k in 0..20 {
                p.grad = p
                    .value
                    .data()
                    .iter()
                    .map(|v| v * 1.5 - k as f32 * 0.01)
                    .collect();
                opt.step(vec![&mut p]).unwrap();
                traj.push(p.value.data().to_vec());
            }
            traj
        };
        assert_eq!(run(), run());
    }
}
