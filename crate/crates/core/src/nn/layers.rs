use rand::Rng;

use super::{he_normal, Buffer, Mode, Module, Parameter};
use crate::error::Result;
use crate::tensor::{Float, Graph, Shape, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Conv2d<F: Float = f32> {
    pub weight: Parameter<F>,
    pub bias: Parameter<F>,
    pub stride: usize,
    pub padding: usize,
}

impl<F: Float> Conv2d<F> {
    /// Square `kernel x kernel` convolution; padding defaults to `kernel / 2`.
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Conv2d {
            weight: Parameter::new(
                format!("{name}.weight"),
                he_normal(Shape::new(out_ch, in_ch, kernel, kernel), fan_in, rng),
            ),
            bias: Parameter::new(
                format!("{name}.bias"),
                Tensor::vector(vec![F::zero(); out_ch]),
            ),
            stride,
            padding: kernel / 2,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().channels
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().batch
    }

    pub fn forward(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let w = self.weight.bind(g);
        let b = self.bias.bind(g);
        g.conv2d(x, w, Some(b), self.stride, self.padding)
    }
}

impl<F: Float> Module<F> for Conv2d<F> {
    fn params(&self) -> Vec<&Parameter<F>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<F>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Transposed convolution; weight layout is `(in_ch, out_ch, k, k)`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<F: Float = f32> {
    pub weight: Parameter<F>,
    pub bias: Parameter<F>,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl<F: Float> ConvTranspose2d<F> {
    /// 3x3, stride 2, padding 1, output padding 1: exactly doubles height and width.
    pub fn upsample2(name: &str, in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        ConvTranspose2d {
            weight: Parameter::new(
                format!("{name}.weight"),
                he_normal(Shape::new(in_ch, out_ch, 3, 3), in_ch * 9, rng),
            ),
            bias: Parameter::new(
                format!("{name}.bias"),
                Tensor::vector(vec![F::zero(); out_ch]),
            ),
            stride: 2,
            padding: 1,
            output_padding: 1,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().channels
    }

    pub fn forward(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let w = self.weight.bind(g);
        let b = self.bias.bind(g);
        g.conv_transpose2d(
            x,
            w,
            Some(b),
            self.stride,
            self.padding,
            self.output_padding,
        )
    }
}

impl<F: Float> Module<F> for ConvTranspose2d<F> {
    fn params(&self) -> Vec<&Parameter<F>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<F>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d<F: Float = f32> {
    pub gamma: Parameter<F>,
    pub beta: Parameter<F>,
    pub running_mean: Buffer<F>,
    pub running_var: Buffer<F>,
    pub momentum: F,
    pub eps: F,
}

impl<F: Float> BatchNorm2d<F> {
    pub fn new(name: &str, channels: usize) -> Self {
        let vec = |v: F| Tensor::vector(vec![v; channels]);
        BatchNorm2d {
            gamma: Parameter::new(format!("{name}.gamma"), vec(F::one())),
            beta: Parameter::new(format!("{name}.beta"), vec(F::zero())),
            running_mean: Buffer {
                name: format!("{name}.running_mean"),
                value: vec(F::zero()),
            },
            running_var: Buffer {
                name: format!("{name}.running_var"),
                value: vec(F::one()),
            },
            momentum: F::from_f64_lossy(BN_MOMENTUM),
            eps: F::from_f64_lossy(BN_EPS),
        }
    }

    /// In `Train` mode normalizes with batch statistics and folds them into
    /// the running averages (unbiased variance); `Eval` reads the running
    /// averages only.
    pub fn forward(&mut self, g: &mut Graph<F>, x: Var, mode: Mode) -> Result<Var> {
        let gamma = self.gamma.bind(g);
        let beta = self.beta.bind(g);
        match mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm_train(x, gamma, beta, self.eps)?;
                let m = self.momentum;
                let keep = F::one() - m;
                let n = F::from_usize(stats.count).expect("count");
                let unbias = n / (n - F::one());
                let mean: Vec<F> = self
                    .running_mean
                    .value
                    .data()
                    .iter()
                    .zip(&stats.mean)
                    .map(|(&r, &b)| keep * r + m * b)
                    .collect();
                let var: Vec<F> = self
                    .running_var
                    .value
                    .data()
                    .iter()
                    .zip(&stats.var)
                    .map(|(&r, &b)| keep * r + m * b * unbias)
                    .collect();
                self.running_mean.value = Tensor::vector(mean);
                self.running_var.value = Tensor::vector(var);
                Ok(y)
            }
            Mode::Eval => g.batch_norm_eval(
                x,
                gamma,
                beta,
                self.running_mean.value.data(),
                self.running_var.value.data(),
                self.eps,
            ),
        }
    }
}

impl<F: Float> Module<F> for BatchNorm2d<F> {
    fn params(&self) -> Vec<&Parameter<F>> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<F>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn buffers(&self) -> Vec<&Buffer<F>> {
        vec![&self.running_mean, &self.running_var]
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer<F>> {
        vec![&mut self.running_mean, &mut self.running_var]
    }
}
