use std::collections::HashMap;

use super::conv::{self, ConvGeometry};
use super::{Float, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel batch statistics produced by a train-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchNormStats<F> {
    pub mean: Vec<F>,
    /// Biased (population) variance.
    pub var: Vec<F>,
    /// Values reduced per channel (`batch * height * width`).
    pub count: usize,
}

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: F,
    },
    Relu(Var),
    LeakyRelu {
        x: Var,
        slope: F,
    },
    Sigmoid(Var),
    LogClamped {
        x: Var,
        eps: F,
    },
    MeanAll(Var),
    SpatialMean(Var),
    L1Distance(Var, Var),
    Concat(Var, Var),
    AvgPool2(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    ConvTranspose2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<F>,
        inv_std: Vec<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Reverse-mode differentiation tape.
///
/// Operations are recorded in insertion order; [`Graph::backward`] replays
/// them once in reverse. A graph can be differentiated only once.
pub struct Graph<F: Float = f32> {
    nodes: Vec<Node<F>>,
    params: Vec<(String, Var)>,
    frozen: Vec<String>,
    consumed: bool,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
            frozen: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Parameters whose name starts with `prefix` are recorded as constants.
    pub fn freeze_prefix(&mut self, prefix: impl Into<String>) {
        self.frozen.push(prefix.into());
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient (inputs under gradient checks, images
    /// being optimized, ...).
    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a named trainable parameter, unless frozen.
    pub fn param(&mut self, name: &str, value: Tensor<F>) -> Var {
        if self.frozen.iter().any(|p| name.starts_with(p.as_str())) {
            return self.constant(value);
        }
        let var = self.push(value, Op::Leaf, true);
        self.params.push((name.to_owned(), var));
        var
    }

    pub fn value(&self, var: Var) -> &Tensor<F> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> Shape {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(sa)
    }

    fn unary(&mut self, x: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<Var> {
        let shape = self.same_shape(name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_vec(shape, data)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: F, shift: F) -> Var {
        self.unary(x, |v| scale * v + shift, Op::Affine { x, scale })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| if v > F::zero() { v } else { F::zero() },
            Op::Relu(x),
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: F) -> Var {
        self.unary(
            x,
            |v| if v > F::zero() { v } else { slope * v },
            Op::LeakyRelu { x, slope },
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| {
                // split by sign so exp never overflows
                if v >= F::zero() {
                    F::one() / (F::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (F::one() + e)
                }
            },
            Op::Sigmoid(x),
        )
    }

    /// `ln(clamp(x, eps, 1 - eps))`; zero gradient where the clamp is active.
    pub fn log_clamped(&mut self, x: Var, eps: F) -> Var {
        let hi = F::one() - eps;
        let clamped = self
            .value(x)
            .data()
            .iter()
            .filter(|&&v| !(v > eps && v < hi))
            .count();
        if clamped > 0 {
            log::debug!("log guard clamped {clamped} probabilities to [{eps}, {hi}]");
        }
        self.unary(x, |v| v.max(eps).min(hi).ln(), Op::LogClamped { x, eps })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = F::from_usize(t.numel()).expect("element count");
        let value = Tensor::scalar(t.data().iter().copied().sum::<F>() / n);
        let rg = self.rg(&[x]);
        self.push(value, Op::MeanAll(x), rg)
    }

    /// Mean over height and width, giving a `(batch, channels, 1, 1)` tensor.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.shape();
        let n = F::from_usize(s.plane()).expect("plane size");
        let data = t
            .data()
            .chunks(s.plane())
            .map(|p| p.iter().copied().sum::<F>() / n)
            .collect();
        let value =
            Tensor::from_vec(Shape::new(s.batch, s.channels, 1, 1), data).expect("spatial mean");
        let rg = self.rg(&[x]);
        self.push(value, Op::SpatialMean(x), rg)
    }

    /// Mean absolute difference over all elements.
    pub fn l1_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("l1_distance", a, b)?;
        let sum: F = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y).abs())
            .sum();
        let n = F::from_usize(shape.numel()).expect("element count");
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(sum / n), Op::L1Distance(a, b), rg))
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if (sa.batch, sa.height, sa.width) != (sb.batch, sb.height, sb.width) {
            return Err(Error::shape("concat_channels", sa, sb));
        }
        let out = Shape {
            channels: sa.channels + sb.channels,
            ..sa
        };
        let mut data = Vec::with_capacity(out.numel());
        for (ia, ib) in self
            .value(a)
            .data()
            .chunks(sa.item())
            .zip(self.value(b).data().chunks(sb.item()))
        {
            data.extend_from_slice(ia);
            data.extend_from_slice(ib);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_vec(out, data)?, Op::Concat(a, b), rg))
    }

    /// 2x2 average pooling with stride 2; a trailing odd row/column is dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.height < 2 || s.width < 2 {
            return Err(Error::config(format!(
                "avg_pool2 needs spatial size >= 2, got {s}"
            )));
        }
        let (oh, ow) = (s.height / 2, s.width / 2);
        let quarter = F::from_f64_lossy(0.25);
        let mut data = Vec::with_capacity(s.batch * s.channels * oh * ow);
        for p in t.data().chunks(s.plane()) {
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * s.width + 2 * xx;
                    data.push((p[i] + p[i + 1] + p[i + s.width] + p[i + s.width + 1]) * quarter);
                }
            }
        }
        let value = Tensor::from_vec(Shape::new(s.batch, s.channels, oh, ow), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::AvgPool2(x), rg))
    }

    fn check_bias(&self, bias: Option<Var>, channels: usize, kernel: Shape) -> Result<()> {
        if let Some(b) = bias {
            if self.value(b).numel() != channels {
                return Err(Error::shape("conv bias", self.shape(b), kernel));
            }
        }
        Ok(())
    }

    /// `kernel` is `(out_ch, in_ch, kh, kw)`, `bias` has `out_ch` elements.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (xs, ks) = (self.shape(input), self.shape(kernel));
        if xs.channels != ks.channels {
            return Err(Error::shape("conv2d", xs, ks));
        }
        if ks.height % 2 == 0 || ks.width % 2 == 0 {
            return Err(Error::config(format!(
                "conv2d kernel must have odd size, got {ks}"
            )));
        }
        self.check_bias(bias, ks.batch, ks)?;
        let geom =
            ConvGeometry::forward(xs.height, xs.width, ks.height, ks.width, stride, padding)?;
        let value = conv::conv2d_forward(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            &geom,
        );
        let rg = self.rg(&[input, kernel]) || bias.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// `kernel` is `(in_ch, out_ch, kh, kw)`. Output size is
    /// `(in - 1) * stride - 2 * padding + k + output_padding`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let (xs, ks) = (self.shape(input), self.shape(kernel));
        if xs.channels != ks.batch {
            return Err(Error::shape("conv_transpose2d", xs, ks));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::config(format!(
                "conv_transpose2d stride must be 1 or 2, got {stride}"
            )));
        }
        self.check_bias(bias, ks.channels, ks)?;
        let geom = ConvGeometry::transposed(
            xs.height,
            xs.width,
            ks.height,
            ks.width,
            stride,
            padding,
            output_padding,
        )?;
        let value = conv::conv_transpose2d_forward(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            &geom,
        );
        let rg = self.rg(&[input, kernel]) || bias.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    fn check_affine(&self, input: Var, gamma: Var, beta: Var) -> Result<Shape> {
        let s = self.shape(input);
        for p in [gamma, beta] {
            if self.value(p).numel() != s.channels {
                return Err(Error::shape("batch_norm", s, self.shape(p)));
            }
        }
        Ok(s)
    }

    /// Normalizes with batch statistics. Returns the output and the
    /// statistics so callers can update running averages.
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: F,
    ) -> Result<(Var, BatchNormStats<F>)> {
        let s = self.check_affine(input, gamma, beta)?;
        let count = s.batch * s.plane();
        if count < 2 {
            return Err(Error::DegenerateStatistics(count));
        }
        let x = self.value(input).data();
        let n = F::from_usize(count).expect("count");
        let mut mean = vec![F::zero(); s.channels];
        let mut var = vec![F::zero(); s.channels];
        for (i, plane) in x.chunks(s.plane()).enumerate() {
            let c = i % s.channels;
            mean[c] = mean[c] + plane.iter().copied().sum::<F>();
        }
        mean.iter_mut().for_each(|m| *m = *m / n);
        for (i, plane) in x.chunks(s.plane()).enumerate() {
            let c = i % s.channels;
            var[c] = var[c]
                + plane
                    .iter()
                    .map(|&v| (v - mean[c]) * (v - mean[c]))
                    .sum::<F>();
        }
        var.iter_mut().for_each(|v| *v = *v / n);
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![F::zero(); x.len()];
        let mut out = vec![F::zero(); x.len()];
        for (i, ((plane, xh), o)) in x
            .chunks(s.plane())
            .zip(xhat.chunks_mut(s.plane()))
            .zip(out.chunks_mut(s.plane()))
            .enumerate()
        {
            let c = i % s.channels;
            for ((&v, h), o) in plane.iter().zip(xh.iter_mut()).zip(o.iter_mut()) {
                *h = (v - mean[c]) * inv_std[c];
                *o = gv[c] * *h + bv[c];
            }
        }
        let rg = self.rg(&[input, gamma, beta]);
        let value = Tensor::from_vec(s, out)?;
        let var_out = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((var_out, BatchNormStats { mean, var, count }))
    }

    /// Normalizes with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[F],
        var: &[F],
        eps: F,
    ) -> Result<Var> {
        let s = self.check_affine(input, gamma, beta)?;
        if mean.len() != s.channels || var.len() != s.channels {
            return Err(Error::config(format!(
                "running statistics have {} channels, input has {}",
                mean.len(),
                s.channels
            )));
        }
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = Vec::with_capacity(s.numel());
        for (i, plane) in self.value(input).data().chunks(s.plane()).enumerate() {
            let c = i % s.channels;
            out.extend(
                plane
                    .iter()
                    .map(|&v| gv[c] * (v - mean[c]) * inv_std[c] + bv[c]),
            );
        }
        let rg = self.rg(&[input, gamma, beta]);
        let value = Tensor::from_vec(s, out)?;
        Ok(self.push(
            value,
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
            rg,
        ))
    }

    /// Differentiates the scalar `loss` with respect to every leaf that
    /// requires a gradient. Consumes the tape: a second call is an error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<F>> {
        if self.consumed {
            return Err(Error::usage("backward called on an already consumed tape"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got {}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![F::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(node, &gy, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) => {
                    Some(Tensor::from_vec(node.value.shape(), g).expect("grad shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients {
            grads,
            params: std::mem::take(&mut self.params),
        })
    }

    fn backprop_node(&self, node: &Node<F>, gy: &[F], grads: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let mut acc = |v: Var, contribution: Vec<F>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing
                    .iter_mut()
                    .zip(&contribution)
                    .for_each(|(e, &c)| *e = *e + c),
                slot => *slot = Some(contribution),
            }
        };
        let wants = |v: Var| nodes[v.0].requires_grad;
        let zip_map = |a: &[F], f: &dyn Fn(F, F) -> F| -> Vec<F> {
            a.iter().zip(gy).map(|(&x, &g)| f(x, g)).collect()
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, gy.to_vec());
                acc(*b, gy.to_vec());
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, zip_map(val(*b), &|y, g| y * g));
                }
                if wants(*b) {
                    acc(*b, zip_map(val(*a), &|x, g| x * g));
                }
            }
            Op::Affine { x, scale } => acc(*x, gy.iter().map(|&g| g * *scale).collect()),
            Op::Relu(x) => acc(
                *x,
                zip_map(val(*x), &|v, g| if v > F::zero() { g } else { F::zero() }),
            ),
            Op::LeakyRelu { x, slope } => acc(
                *x,
                zip_map(val(*x), &|v, g| if v > F::zero() { g } else { g * *slope }),
            ),
            Op::Sigmoid(x) => acc(
                *x,
                zip_map(node.value.data(), &|y, g| g * y * (F::one() - y)),
            ),
            Op::LogClamped { x, eps } => {
                let hi = F::one() - *eps;
                acc(
                    *x,
                    zip_map(val(*x), &|v, g| {
                        if v > *eps && v < hi {
                            g / v
                        } else {
                            F::zero()
                        }
                    }),
                )
            }
            Op::MeanAll(x) => {
                let n = val(*x).len();
                let g = gy[0] / F::from_usize(n).expect("count");
                acc(*x, vec![g; n]);
            }
            Op::SpatialMean(x) => {
                let s = nodes[x.0].value.shape();
                let inv = F::one() / F::from_usize(s.plane()).expect("plane");
                acc(
                    *x,
                    gy.iter()
                        .flat_map(|&g| std::iter::repeat_n(g * inv, s.plane()))
                        .collect(),
                );
            }
            Op::L1Distance(a, b) => {
                let n = F::from_usize(val(*a).len()).expect("count");
                let scale = gy[0] / n;
                let da: Vec<F> = val(*a)
                    .iter()
                    .zip(val(*b))
                    .map(|(&x, &y)| {
                        let d = x - y;
                        if d > F::zero() {
                            scale
                        } else if d < F::zero() {
                            -scale
                        } else {
                            F::zero()
                        }
                    })
                    .collect();
                if wants(*b) {
                    acc(*b, da.iter().map(|&v| -v).collect());
                }
                acc(*a, da);
            }
            Op::Concat(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let mut ga = Vec::with_capacity(sa.numel());
                let mut gb = Vec::with_capacity(sb.numel());
                for item in gy.chunks(sa.item() + sb.item()) {
                    ga.extend_from_slice(&item[..sa.item()]);
                    gb.extend_from_slice(&item[sa.item()..]);
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::AvgPool2(x) => {
                let s = nodes[x.0].value.shape();
                let (oh, ow) = (s.height / 2, s.width / 2);
                let quarter = F::from_f64_lossy(0.25);
                let mut dx = vec![F::zero(); s.numel()];
                for (p, gp) in dx.chunks_mut(s.plane()).zip(gy.chunks(oh * ow)) {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let g = gp[y * ow + xx] * quarter;
                            let i = 2 * y * s.width + 2 * xx;
                            for j in [i, i + 1, i + s.width, i + s.width + 1] {
                                p[j] = g;
                            }
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let want = (wants(*input), wants(*kernel), bias.is_some_and(wants));
                let g = conv::conv2d_backward(
                    &nodes[input.0].value,
                    &nodes[kernel.0].value,
                    gy,
                    geom,
                    want,
                );
                if let Some(d) = g.input {
                    acc(*input, d);
                }
                if let Some(d) = g.kernel {
                    acc(*kernel, d);
                }
                if let (Some(b), Some(d)) = (bias, g.bias) {
                    acc(*b, d);
                }
            }
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let want = (wants(*input), wants(*kernel), bias.is_some_and(wants));
                let g = conv::conv_transpose2d_backward(
                    &nodes[input.0].value,
                    &nodes[kernel.0].value,
                    gy,
                    geom,
                    want,
                );
                if let Some(d) = g.input {
                    acc(*input, d);
                }
                if let Some(d) = g.kernel {
                    acc(*kernel, d);
                }
                if let (Some(b), Some(d)) = (bias, g.bias) {
                    acc(*b, d);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = node.value.shape();
                let gv = val(*gamma);
                let mut dgamma = vec![F::zero(); s.channels];
                let mut dbeta = vec![F::zero(); s.channels];
                for (i, (gp, hp)) in gy.chunks(s.plane()).zip(xhat.chunks(s.plane())).enumerate() {
                    let c = i % s.channels;
                    dbeta[c] = dbeta[c] + gp.iter().copied().sum::<F>();
                    dgamma[c] = dgamma[c] + gp.iter().zip(hp).map(|(&g, &h)| g * h).sum::<F>();
                }
                if wants(*input) {
                    let m = F::from_usize(s.batch * s.plane()).expect("count");
                    let mut dx = vec![F::zero(); s.numel()];
                    for (i, ((dp, gp), hp)) in dx
                        .chunks_mut(s.plane())
                        .zip(gy.chunks(s.plane()))
                        .zip(xhat.chunks(s.plane()))
                        .enumerate()
                    {
                        let c = i % s.channels;
                        // dx = gamma * inv_std / m * (m*dy - sum(dy) - xhat * sum(dy*xhat))
                        let k = gv[c] * inv_std[c] / m;
                        for ((d, &g), &h) in dp.iter_mut().zip(gp).zip(hp) {
                            *d = k * (m * g - dbeta[c] - h * dgamma[c]);
                        }
                    }
                    acc(*input, dx);
                }
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let s = node.value.shape();
                let gv = val(*gamma);
                let mut dgamma = vec![F::zero(); s.channels];
                let mut dbeta = vec![F::zero(); s.channels];
                let mut dx = vec![F::zero(); s.numel()];
                for (i, ((dp, gp), xp)) in dx
                    .chunks_mut(s.plane())
                    .zip(gy.chunks(s.plane()))
                    .zip(val(*input).chunks(s.plane()))
                    .enumerate()
                {
                    let c = i % s.channels;
                    for ((d, &g), &x) in dp.iter_mut().zip(gp).zip(xp) {
                        *d = g * gv[c] * inv_std[c];
                        dgamma[c] = dgamma[c] + g * (x - mean[c]) * inv_std[c];
                        dbeta[c] = dbeta[c] + g;
                    }
                }
                acc(*input, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
        }
    }
}

/// Gradients of a loss with respect to the leaves of a consumed graph.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
    params: Vec<(String, Var)>,
}

impl<F: Float> Gradients<F> {
    /// Gradient of a leaf; `None` if the leaf was unreachable from the loss
    /// or does not require a gradient.
    pub fn wrt(&self, var: Var) -> Option<&Tensor<F>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of a named parameter, summed over every binding of that name.
    pub fn param(&self, name: &str) -> Option<Tensor<F>> {
        let mut total: Option<Vec<F>> = None;
        let mut shape = None;
        for (_, var) in self.params.iter().filter(|(n, _)| n == name) {
            if let Some(g) = self.wrt(*var) {
                shape = Some(g.shape());
                match &mut total {
                    Some(t) => t.iter_mut().zip(g.data()).for_each(|(a, &b)| *a = *a + b),
                    None => total = Some(g.data().to_vec()),
                }
            }
        }
        Some(Tensor::from_vec(shape?, total?).expect("param grad shape"))
    }

    /// Names of parameters bound on the tape, in binding order, deduplicated.
    pub fn param_names(&self) -> Vec<&str> {
        let mut seen = HashMap::new();
        self.params
            .iter()
            .filter(|(n, _)| seen.insert(n.as_str(), ()).is_none())
            .map(|(n, _)| n.as_str())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_center_sums_full_support() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(Shape::new(1, 1, 3, 3), 1.0));
        let k = g.constant(Tensor::full(Shape::new(1, 1, 3, 3), 1.0));
        let b = g.constant(Tensor::zeros(Shape::new(1, 1, 1, 1)));
        let y = g.conv2d(x, k, Some(b), 1, 1).unwrap();
        assert_eq!(g.shape(y), Shape::new(1, 1, 3, 3));
        assert_eq!(g.value(y).get(0, 0, 1, 1), 9.0);
        assert_eq!(g.value(y).get(0, 0, 0, 0), 4.0);
    }

    #[test]
    fn identity_pointwise_conv() {
        let mut g = Graph::<f32>::new();
        let data: Vec<f32> = (0..16).map(|v| v as f32 * 0.25).collect();
        let input = Tensor::from_vec(Shape::new(1, 1, 4, 4), data).unwrap();
        let x = g.constant(input.clone());
        let k = g.constant(Tensor::full(Shape::new(1, 1, 1, 1), 1.0));
        let y = g.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(g.value(y), &input);
    }

    #[test]
    fn conv_shape_mismatch_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(Shape::new(1, 2, 4, 4)));
        let k = g.constant(Tensor::zeros(Shape::new(1, 3, 3, 3)));
        let err = g.conv2d(x, k, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("1x2x4x4") && err.contains("1x3x3x3"), "{err}");
    }

    #[test]
    fn transpose_doubles_resolution() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(Shape::new(1, 1, 2, 2), 1.0));
        let k = g.constant(Tensor::full(Shape::new(1, 1, 3, 3), 1.0));
        let y = g.conv_transpose2d(x, k, None, 2, 1, 1).unwrap();
        assert_eq!(g.shape(y), Shape::new(1, 1, 4, 4));
        assert!(g.conv_transpose2d(x, k, None, 2, 1, 2).is_err());
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).item(), 0.5);
    }

    #[test]
    fn concat_routes_gradients_to_slices() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::full(Shape::new(1, 2, 4, 4), 0.5));
        let b = g.input(Tensor::full(Shape::new(1, 3, 4, 4), -0.5));
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.shape(c), Shape::new(1, 5, 4, 4));
        // sum(c) has a gradient of ones everywhere
        let n = g.shape(c).numel() as f64;
        let m = g.mean_all(c);
        let loss = g.affine(m, n, 0.0);
        let grads = g.backward(loss).unwrap();
        assert_eq!(
            grads.wrt(a).unwrap(),
            &Tensor::full(Shape::new(1, 2, 4, 4), 1.0)
        );
        assert_eq!(
            grads.wrt(b).unwrap(),
            &Tensor::full(Shape::new(1, 3, 4, 4), 1.0)
        );
    }

    #[test]
    fn l1_of_identical_is_zero() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![0.1, -4.0, 9.0]).unwrap());
        let d = g.l1_distance(x, x).unwrap();
        assert_eq!(g.value(d).item(), 0.0);
    }

    #[test]
    fn linear_loss_gradient() {
        let mut g = Graph::<f64>::new();
        let xs = [1.0, -2.0, 3.5, 0.25];
        let w = g.param("w", t(Shape::new(1, 1, 2, 2), &[0.3, 0.1, -0.7, 2.0]));
        let x = g.constant(t(Shape::new(1, 1, 2, 2), &xs));
        let p = g.mul(w, x).unwrap();
        let loss = g.mean_all(p);
        let grads = g.backward(loss).unwrap();
        let gw = grads.param("w").unwrap();
        let expect: Vec<f64> = xs.iter().map(|v| v / 4.0).collect();
        assert_eq!(gw.data(), expect.as_slice());
    }

    #[test]
    fn two_consumers_sum_their_paths() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::scalar(3.0));
        let a = g.affine(x, 2.0, 0.0);
        let b = g.mul(x, x).unwrap();
        let loss = g.add(a, b).unwrap();
        let grads = g.backward(loss).unwrap();
        // d/dx (2x + x^2) = 2 + 2x
        assert_eq!(grads.wrt(x).unwrap().item(), 8.0);
    }

    #[test]
    fn backward_rules() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full(Shape::new(1, 1, 2, 2), 1.0));
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));

        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full(Shape::new(1, 1, 2, 2), 1.0));
        let l = g.mean_all(x);
        g.backward(l).unwrap();
        assert!(matches!(g.backward(l), Err(Error::Usage(_))));
    }

    #[test]
    fn constants_never_get_gradients() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::scalar(2.0));
        let x = g.input(Tensor::scalar(1.5));
        let y = g.mul(c, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.wrt(c).is_none());
        assert_eq!(grads.wrt(x).unwrap().item(), 2.0);
    }

    #[test]
    fn frozen_params_are_constants() {
        let mut g = Graph::<f64>::new();
        g.freeze_prefix("disc.");
        let d = g.param("disc.w", Tensor::scalar(2.0));
        let w = g.param("gen.w", Tensor::scalar(3.0));
        let y = g.mul(d, w).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.param("disc.w").is_none());
        assert_eq!(grads.param("gen.w").unwrap().item(), 2.0);
        assert_eq!(grads.param_names(), vec!["gen.w"]);
    }

    #[test]
    fn batch_norm_needs_two_values() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::full(Shape::new(1, 2, 1, 1), 1.0));
        let gamma = g.constant(Tensor::vector(vec![1.0, 1.0]));
        let beta = g.constant(Tensor::vector(vec![0.0, 0.0]));
        assert!(matches!(
            g.batch_norm_train(x, gamma, beta, 1e-5),
            Err(Error::DegenerateStatistics(1))
        ));
    }
}
