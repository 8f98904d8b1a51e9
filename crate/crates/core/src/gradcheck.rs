//! Central finite-difference checks of every differentiable operation,
//! evaluated in 64-bit precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::loss::{discriminator_loss, generator_loss, AdversarialForm, LossWeights};
use crate::models::{FeatureExtractor, Generator, GeneratorSpec};
use crate::nn::{Mode, Module, BN_EPS};
use crate::tensor::{Graph, Shape, Tensor, Var};

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOLERANCE: f64 = 1e-3;
/// Relative errors are measured against at least this magnitude.
pub const FD_FLOOR: f64 = 1e-4;
/// Coordinates probed per input tensor per case.
const MAX_PROBES: usize = 48;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub op: &'static str,
    pub cases: usize,
    pub probes: usize,
    pub max_rel_error: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < FD_TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

fn project(out: &Tensor<f64>, weights: &[f64]) -> f64 {
    out.data().iter().zip(weights).map(|(a, b)| a * b).sum()
}

/// Compares the tape gradient of `sum(build(inputs) * r)` with central
/// differences at up to `MAX_PROBES` coordinates of each input.
/// Returns `(probes, max relative error)`.
pub fn check(
    inputs: &[Tensor<f64>],
    build: &Build<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, f64)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let out_shape = g.shape(out);
    let weights: Vec<f64> = (0..out_shape.numel())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let r = g.constant(Tensor::from_vec(out_shape, weights.clone())?);
    let prod = g.mul(out, r)?;
    let mean = g.mean_all(prod);
    let loss = g.affine(mean, out_shape.numel() as f64, 0.0);
    let grads = g.backward(loss)?;

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(project(g.value(out), &weights))
    };

    let (mut probes, mut worst) = (0, 0.0f64);
    for (i, t) in inputs.iter().enumerate() {
        let zeros = Tensor::zeros(t.shape());
        let analytic = grads.wrt(vars[i]).unwrap_or(&zeros);
        let n = t.numel();
        let coords: Vec<usize> = if n <= MAX_PROBES {
            (0..n).collect()
        } else {
            (0..MAX_PROBES).map(|_| rng.random_range(0..n)).collect()
        };
        for c in coords {
            let mut shifted = inputs.to_vec();
            let mut data = t.data().to_vec();
            data[c] = t.data()[c] + FD_STEP;
            shifted[i] = Tensor::from_vec(t.shape(), data.clone())?;
            let plus = eval(&shifted)?;
            data[c] = t.data()[c] - FD_STEP;
            shifted[i] = Tensor::from_vec(t.shape(), data)?;
            let minus = eval(&shifted)?;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic.data()[c], numeric));
            probes += 1;
        }
    }
    Ok((probes, worst))
}

fn uniform(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_vec(
        shape,
        (0..shape.numel())
            .map(|_| rng.random_range(lo..hi))
            .collect(),
    )
    .expect("shape")
}

/// Values at least `gap` away from zero.
fn off_kink(rng: &mut ChaCha8Rng, shape: Shape, gap: f64) -> Tensor<f64> {
    uniform(rng, shape, -1.0, 1.0).map(|v| {
        if v.abs() < gap {
            v.signum() * gap + v
        } else {
            v
        }
    })
}

fn rand_tensor(rng: &mut ChaCha8Rng, even: bool, lo: f64, hi: f64) -> Tensor<f64> {
    let s = random_shape(rng, even);
    uniform(rng, s, lo, hi)
}

fn rand_off_kink(rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let s = random_shape(rng, false);
    off_kink(rng, s, 0.05)
}

fn random_shape(rng: &mut ChaCha8Rng, even: bool) -> Shape {
    let dim = |rng: &mut ChaCha8Rng| {
        if even {
            2 * rng.random_range(1..=4)
        } else {
            rng.random_range(1..=8)
        }
    };
    let (h, w) = (dim(rng), dim(rng));
    Shape::new(rng.random_range(1..=4), rng.random_range(1..=4), h, w)
}

/// Conv, sigmoid and pooling: a kink-free stand-in for the ReLU extractor.
struct SmoothExtractor(Tensor<f64>);

impl FeatureExtractor<f64> for SmoothExtractor {
    fn extract(&self, g: &mut Graph<f64>, image: Var) -> Result<Var> {
        let k = g.constant(self.0.clone());
        let h = g.conv2d(image, k, None, 1, 1)?;
        let h = g.sigmoid(h);
        g.avg_pool2(h)
    }
}

struct Case {
    inputs: Vec<Tensor<f64>>,
    build: Box<Build<'static>>,
}

fn case(
    inputs: Vec<Tensor<f64>>,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        inputs,
        build: Box::new(build),
    }
}

fn make_case(op: &str, rng: &mut ChaCha8Rng) -> Case {
    match op {
        "add" | "mul" => {
            let s = random_shape(rng, false);
            let mul = op == "mul";
            case(
                vec![uniform(rng, s, -1.0, 1.0), uniform(rng, s, -1.0, 1.0)],
                move |g, v| {
                    if mul {
                        g.mul(v[0], v[1])
                    } else {
                        g.add(v[0], v[1])
                    }
                },
            )
        }
        "affine" => {
            let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0));
            case(vec![rand_tensor(rng, false, -1.0, 1.0)], move |g, v| {
                Ok(g.affine(v[0], a, b))
            })
        }
        "relu" => case(vec![rand_off_kink(rng)], |g, v| Ok(g.relu(v[0]))),
        "leaky_relu" => {
            let slope = rng.random_range(0.01..0.3);
            case(vec![rand_off_kink(rng)], move |g, v| {
                Ok(g.leaky_relu(v[0], slope))
            })
        }
        "sigmoid" => case(vec![rand_tensor(rng, false, -4.0, 4.0)], |g, v| {
            Ok(g.sigmoid(v[0]))
        }),
        "log_clamped" => case(vec![rand_tensor(rng, false, 0.1, 0.9)], |g, v| {
            Ok(g.log_clamped(v[0], 1e-7))
        }),
        "mean_all" => case(vec![rand_tensor(rng, false, -1.0, 1.0)], |g, v| {
            Ok(g.mean_all(v[0]))
        }),
        "spatial_mean" => case(vec![rand_tensor(rng, false, -1.0, 1.0)], |g, v| {
            Ok(g.spatial_mean(v[0]))
        }),
        "l1_distance" => {
            let s = random_shape(rng, false);
            let a = uniform(rng, s, 0.0, 1.0);
            let d = off_kink(rng, s, 0.05);
            let b = Tensor::from_vec(
                s,
                a.data().iter().zip(d.data()).map(|(x, y)| x + y).collect(),
            )
            .expect("shape");
            case(vec![a, b], |g, v| g.l1_distance(v[0], v[1]))
        }
        "concat_channels" => {
            let s = random_shape(rng, false);
            let t = Shape {
                channels: rng.random_range(1..=4),
                ..s
            };
            case(
                vec![uniform(rng, s, -1.0, 1.0), uniform(rng, t, -1.0, 1.0)],
                |g, v| g.concat_channels(v[0], v[1]),
            )
        }
        "avg_pool2" => case(vec![rand_tensor(rng, true, -1.0, 1.0)], |g, v| {
            g.avg_pool2(v[0])
        }),
        "conv2d" => {
            let s = random_shape(rng, false);
            let out_ch = rng.random_range(1..=4);
            let k = if rng.random_bool(0.5) { 3 } else { 1 };
            let stride = rng.random_range(1..=2);
            let inputs = vec![
                uniform(rng, s, -1.0, 1.0),
                uniform(rng, Shape::new(out_ch, s.channels, k, k), -1.0, 1.0),
                uniform(rng, Shape::new(1, 1, 1, out_ch), -1.0, 1.0),
            ];
            case(inputs, move |g, v| {
                g.conv2d(v[0], v[1], Some(v[2]), stride, k / 2)
            })
        }
        "conv_transpose2d" => {
            let s = random_shape(rng, false);
            let out_ch = rng.random_range(1..=4);
            let stride = rng.random_range(1..=2);
            let output_padding = stride - 1;
            let inputs = vec![
                uniform(rng, s, -1.0, 1.0),
                uniform(rng, Shape::new(s.channels, out_ch, 3, 3), -1.0, 1.0),
                uniform(rng, Shape::new(1, 1, 1, out_ch), -1.0, 1.0),
            ];
            case(inputs, move |g, v| {
                g.conv_transpose2d(v[0], v[1], Some(v[2]), stride, 1, output_padding)
            })
        }
        "batch_norm_train" => {
            // with fewer than four samples per channel the normalized output is
            // nearly constant and too curved for central differences
            let mut s = random_shape(rng, false);
            while s.batch * s.plane() < 4 {
                s.batch += 1;
            }
            let c = s.channels;
            let inputs = vec![
                uniform(rng, s, -1.0, 1.0),
                uniform(rng, Shape::new(1, 1, 1, c), 0.5, 1.5),
                uniform(rng, Shape::new(1, 1, 1, c), -0.5, 0.5),
            ];
            case(inputs, |g, v| {
                Ok(g.batch_norm_train(v[0], v[1], v[2], BN_EPS)?.0)
            })
        }
        "batch_norm_eval" => {
            let s = random_shape(rng, false);
            let c = s.channels;
            let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..2.0)).collect();
            let inputs = vec![
                uniform(rng, s, -1.0, 1.0),
                uniform(rng, Shape::new(1, 1, 1, c), 0.5, 1.5),
                uniform(rng, Shape::new(1, 1, 1, c), -0.5, 0.5),
            ];
            case(inputs, move |g, v| {
                g.batch_norm_eval(v[0], v[1], v[2], &mean, &var, BN_EPS)
            })
        }
        "discriminator_loss" => {
            let s = Shape::new(rng.random_range(1..=8), 1, 1, 1);
            case(
                vec![uniform(rng, s, 0.05, 0.95), uniform(rng, s, 0.05, 0.95)],
                |g, v| Ok(discriminator_loss(g, v[0], v[1])),
            )
        }
        "generator_loss" => {
            let b = rng.random_range(1..=3);
            let s = Shape::new(
                b,
                rng.random_range(1..=3),
                2 * rng.random_range(1..=4),
                2 * rng.random_range(1..=4),
            );
            let alpha = rng.random_range(0.0..1.0);
            let form = if rng.random_bool(0.5) {
                AdversarialForm::Minimax
            } else {
                AdversarialForm::NonSaturating
            };
            let beta1 = if rng.random_bool(0.5) {
                0.0
            } else {
                rng.random_range(0.1..1.0)
            };
            // positive kernels and a uniformly brighter generated image keep both
            // |gen - target| and the feature difference away from the L1 kink
            let ext = SmoothExtractor(uniform(rng, Shape::new(3, s.channels, 3, 3), 0.1, 1.0));
            let target = uniform(rng, s, 0.0, 0.8);
            let gen = target.map(|t| t + 0.2);
            let d = uniform(rng, Shape::new(b, 1, 1, 1), 0.05, 0.95);
            let weights = LossWeights {
                beta1,
                adversarial_form: form,
            };
            case(vec![d, gen, target], move |g, v| {
                Ok(generator_loss(g, v[0], v[1], v[2], Some(&ext), &weights, alpha)?.total)
            })
        }
        other => unreachable!("unknown op {other}"),
    }
}

pub const OPS: &[&str] = &[
    "add",
    "mul",
    "affine",
    "relu",
    "leaky_relu",
    "sigmoid",
    "log_clamped",
    "mean_all",
    "spatial_mean",
    "l1_distance",
    "concat_channels",
    "avg_pool2",
    "conv2d",
    "conv_transpose2d",
    "batch_norm_train",
    "batch_norm_eval",
    "discriminator_loss",
    "generator_loss",
];

/// Runs `cases` random cases of every operation in [`OPS`].
pub fn run_suite(cases: usize, seed: u64) -> Result<Vec<GradcheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    OPS.iter()
        .map(|&op| {
            let (mut probes, mut worst) = (0, 0.0f64);
            for _ in 0..cases {
                let c = make_case(op, &mut rng);
                let (p, e) = check(&c.inputs, c.build.as_ref(), &mut rng)?;
                probes += p;
                worst = worst.max(e);
            }
            Ok(GradcheckReport {
                op,
                cases,
                probes,
                max_rel_error: worst,
            })
        })
        .collect()
}

/// Checks parameter and input gradients through a whole small generator,
/// with batch norm in training mode.
pub fn check_generator(seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = GeneratorSpec {
        scale: 2,
        image_channels: 1,
        stem_channels: 3,
        growth_rate: 2,
        bottleneck_width: 3,
        units_per_block: 2,
        blocks_per_stage: 1,
        compression: 1.0,
        dense_connectivity: true,
    };
    let mut gen = Generator::<f64>::new(&spec, &mut rng)?;
    let lr = uniform(&mut rng, Shape::new(2, 1, 4, 4), 0.0, 1.0);
    let out_shape = Shape::new(2, 1, 8, 8);
    let weights: Vec<f64> = (0..out_shape.numel())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();

    let loss_of = |gen: &mut Generator<f64>, lr: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.input(lr.clone());
        let y = gen.forward(&mut g, x, Mode::Train)?;
        Ok(project(g.value(y), &weights))
    };

    let mut g = Graph::new();
    let x = g.input(lr.clone());
    let y = gen.forward(&mut g, x, Mode::Train)?;
    let r = g.constant(Tensor::from_vec(out_shape, weights.clone())?);
    let prod = g.mul(y, r)?;
    let mean = g.mean_all(prod);
    let loss = g.affine(mean, out_shape.numel() as f64, 0.0);
    let grads = g.backward(loss)?;

    // the generator output passes through a sigmoid, so a smaller step keeps
    // the truncation error well under the tolerance
    let step = 1e-5;
    let (mut probes, mut worst) = (0, 0.0f64);
    let n_params = gen.params().len();
    for pi in 0..n_params {
        let (name, numel) = {
            let p = gen.params()[pi];
            (p.name.clone(), p.numel())
        };
        let analytic = grads
            .param(&name)
            .unwrap_or_else(|| Tensor::zeros(gen.params()[pi].shape()));
        for _ in 0..4 {
            let c = rng.random_range(0..numel);
            let original = gen.params()[pi].value.clone();
            let eval_at = |delta: f64, gen: &mut Generator<f64>| -> Result<f64> {
                let mut data = original.data().to_vec();
                data[c] += delta;
                gen.params_mut()[pi].value = Tensor::from_vec(original.shape(), data)?;
                loss_of(gen, &lr)
            };
            let plus = eval_at(step, &mut gen)?;
            let minus = eval_at(-step, &mut gen)?;
            gen.params_mut()[pi].value = original;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(analytic.data()[c], numeric));
            probes += 1;
        }
    }
    let gx = grads.wrt(x).expect("input requires grad").clone();
    for _ in 0..16 {
        let c = rng.random_range(0..lr.numel());
        let shifted = |delta: f64| {
            let mut d = lr.data().to_vec();
            d[c] += delta;
            Tensor::from_vec(lr.shape(), d).expect("shape")
        };
        let numeric = (loss_of(&mut gen, &shifted(step))? - loss_of(&mut gen, &shifted(-step))?)
            / (2.0 * step);
        worst = worst.max(relative_error(gx.data()[c], numeric));
        probes += 1;
    }
    Ok(GradcheckReport {
        op: "generator",
        cases: 1,
        probes,
        max_rel_error: worst,
    })
}
