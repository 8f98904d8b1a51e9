//! Layers, parameter bookkeeping, weight initialization and the optimizer.

mod layers;
mod optim;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Float, Gradients, Graph, Shape, Tensor, Var};

pub use layers::{BatchNorm2d, Conv2d, ConvTranspose2d, BN_EPS, BN_MOMENTUM};
pub use optim::{Adam, AdamConfig, Moments};

/// Forward-pass mode; batch norm uses batch statistics only in `Train`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A named trainable tensor and its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter<F: Float = f32> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Vec<F>,
}

impl<F: Float> Parameter<F> {
    pub fn new(name: impl Into<String>, value: Tensor<F>) -> Self {
        let grad = vec![F::zero(); value.numel()];
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    /// Records this parameter as a leaf on `g`.
    pub fn bind(&self, g: &mut Graph<F>) -> Var {
        g.param(&self.name, self.value.clone())
    }
}

/// Named non-trainable state (batch-norm running statistics).
#[derive(Debug, Clone)]
pub struct Buffer<F: Float = f32> {
    pub name: String,
    pub value: Tensor<F>,
}

/// Anything that owns parameters. Listing order is the construction order
/// and is stable across runs.
pub trait Module<F: Float> {
    fn params(&self) -> Vec<&Parameter<F>>;
    fn params_mut(&mut self) -> Vec<&mut Parameter<F>>;

    fn buffers(&self) -> Vec<&Buffer<F>> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer<F>> {
        Vec::new()
    }

    fn param_names(&self) -> Vec<String> {
        self.params().iter().map(|p| p.name.clone()).collect()
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.grad.iter_mut().for_each(|g| *g = F::zero());
        }
    }

    /// Adds the gradients recorded for this module's parameters. Parameters
    /// unreachable from the loss are left untouched.
    fn accumulate_grads(&mut self, grads: &Gradients<F>) {
        for p in self.params_mut() {
            if let Some(g) = grads.param(&p.name) {
                p.grad
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, &b)| *a = *a + b);
            }
        }
    }
}

/// He-normal initialization: `N(0, 2 / fan_in)`.
pub fn he_normal<F: Float>(shape: Shape, fan_in: usize, rng: &mut impl Rng) -> Tensor<F> {
    let std = he_std(fan_in);
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..shape.numel())
        .map(|_| F::from_f64_lossy(dist.sample(rng)))
        .collect();
    Tensor::from_vec(shape, data).expect("init shape")
}

pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn he_std_for_3x3_from_64_channels() {
        assert!((he_std(64 * 9) - 0.058_925_565).abs() < 1e-8);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let shape = Shape::new(8, 4, 3, 3);
        let a: Tensor = he_normal(shape, 36, &mut ChaCha8Rng::seed_from_u64(5));
        let b: Tensor = he_normal(shape, 36, &mut ChaCha8Rng::seed_from_u64(5));
        let c: Tensor = he_normal(shape, 36, &mut ChaCha8Rng::seed_from_u64(6));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn empirical_std_within_five_percent() {
        let target = he_std(576);
        let t: Tensor<f64> = he_normal(
            Shape::new(1, 1, 100, 100),
            576,
            &mut ChaCha8Rng::seed_from_u64(11),
        );
        let n = t.numel() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let std = (t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(
            (std / target - 1.0).abs() < 0.05,
            "std {std} target {target}"
        );
    }
}
