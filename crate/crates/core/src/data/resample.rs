//! Degradation and baseline upsampling.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Keeps the top-left sample of every `s`x`s` block.
pub fn nn_downsample(hr: &Tensor, s: usize) -> Result<Tensor> {
    let sh = hr.shape();
    if s == 0 || sh.height % s != 0 || sh.width % s != 0 {
        return Err(Error::config(format!(
            "image {sh} is not divisible by scale {s}"
        )));
    }
    let (oh, ow) = (sh.height / s, sh.width / s);
    let src = hr.data();
    let mut out = Vec::with_capacity(sh.batch * sh.channels * oh * ow);
    for plane in src.chunks_exact(sh.plane()) {
        for y in 0..oh {
            let row = &plane[y * s * sh.width..];
            out.extend((0..ow).map(|x| row[x * s]));
        }
    }
    Tensor::from_vec(
        Shape {
            height: oh,
            width: ow,
            ..sh
        },
        out,
    )
}

/// Replicates every pixel into an `s`x`s` block.
pub fn nn_upsample(lr: &Tensor, s: usize) -> Result<Tensor> {
    if s == 0 {
        return Err(Error::config("scale must be at least 1"));
    }
    let sh = lr.shape();
    let (oh, ow) = (sh.height * s, sh.width * s);
    let mut out = Vec::with_capacity(sh.batch * sh.channels * oh * ow);
    for plane in lr.data().chunks_exact(sh.plane()) {
        for y in 0..oh {
            let row = &plane[(y / s) * sh.width..][..sh.width];
            out.extend((0..ow).map(|x| row[x / s]));
        }
    }
    Tensor::from_vec(
        Shape {
            height: oh,
            width: ow,
            ..sh
        },
        out,
    )
}

/// Keys cubic convolution kernel with `a = -0.5`.
pub fn keys_weight(d: f64) -> f64 {
    const A: f64 = -0.5;
    let d = d.abs();
    if d <= 1.0 {
        ((A + 2.0) * d - (A + 3.0)) * d * d + 1.0
    } else if d < 2.0 {
        ((A * d - 5.0 * A) * d + 8.0 * A) * d - 4.0 * A
    } else {
        0.0
    }
}

/// Source taps and weights for one output coordinate.
///
/// Output sample `o` sits at source position `o / s`, matching the
/// top-left phase of [`nn_downsample`].
fn taps(o: usize, s: usize, len: usize) -> [(usize, f64); 4] {
    let pos = o as f64 / s as f64;
    let base = pos.floor();
    let frac = pos - base;
    let mut t = [(0, 0.0); 4];
    for (k, slot) in t.iter_mut().enumerate() {
        let off = k as isize - 1;
        let idx = (base as isize + off).clamp(0, len as isize - 1) as usize;
        *slot = (idx, keys_weight(frac - off as f64));
    }
    t
}

fn bicubic_unclipped(lr: &Tensor, s: usize) -> Result<Vec<f64>> {
    if s == 0 {
        return Err(Error::config("scale must be at least 1"));
    }
    let sh = lr.shape();
    let (oh, ow) = (sh.height * s, sh.width * s);
    let xt: Vec<_> = (0..ow).map(|x| taps(x, s, sh.width)).collect();
    let yt: Vec<_> = (0..oh).map(|y| taps(y, s, sh.height)).collect();
    let mut out = Vec::with_capacity(sh.batch * sh.channels * oh * ow);
    let mut rows = vec![0.0f64; sh.height * ow];
    for plane in lr.data().chunks_exact(sh.plane()) {
        for (y, row) in rows.chunks_exact_mut(ow).enumerate() {
            let src = &plane[y * sh.width..][..sh.width];
            for (r, t) in row.iter_mut().zip(&xt) {
                *r = t.iter().map(|&(i, w)| w * f64::from(src[i])).sum();
            }
        }
        for t in &yt {
            for x in 0..ow {
                out.push(t.iter().map(|&(i, w)| w * rows[i * ow + x]).sum());
            }
        }
    }
    Ok(out)
}

/// Separable bicubic interpolation with edge clamping; output clipped to `[0, 1]`.
pub fn bicubic_upsample(lr: &Tensor, s: usize) -> Result<Tensor> {
    let sh = lr.shape();
    let out = bicubic_unclipped(lr, s)?;
    Tensor::from_vec(
        Shape {
            height: sh.height * s,
            width: sh.width * s,
            ..sh
        },
        out.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(shape: Shape) -> Tensor {
        Tensor::from_vec(shape, (0..shape.numel()).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn downsample_keeps_top_left() {
        let t = ramp(Shape::new(1, 1, 4, 4));
        assert_eq!(nn_downsample(&t, 2).unwrap().data(), &[0.0, 2.0, 8.0, 10.0]);
        assert_eq!(nn_downsample(&t, 1).unwrap(), t);
        assert!(nn_downsample(&t, 3).is_err());
    }

    #[test]
    fn keys_kernel_values() {
        assert_eq!(keys_weight(0.0), 1.0);
        assert_eq!(keys_weight(1.0), 0.0);
        assert_eq!(keys_weight(2.0), 0.0);
        let w: Vec<f64> = [1.5, 0.5, 0.5, 1.5]
            .iter()
            .map(|&d| keys_weight(d))
            .collect();
        assert_eq!(w, vec![-1.0 / 16.0, 9.0 / 16.0, 9.0 / 16.0, -1.0 / 16.0]);
    }

    #[test]
    fn bicubic_reproduces_samples_on_grid() {
        let t = Tensor::from_vec(
            Shape::new(1, 1, 3, 3),
            vec![0.1, 0.9, 0.3, 0.5, 0.2, 0.7, 0.4, 0.6, 0.8],
        )
        .unwrap();
        let up = bicubic_upsample(&t, 4).unwrap();
        assert_eq!(nn_downsample(&up, 4).unwrap(), t);
    }

    #[test]
    fn constant_images_stay_constant() {
        let t = Tensor::full(Shape::new(2, 3, 5, 7), 0.3f32);
        for s in [1, 2, 3, 4] {
            assert!(nn_upsample(&t, s).unwrap().data().iter().all(|&v| v == 0.3));
            let raw = bicubic_unclipped(&t, s).unwrap();
            assert!(raw.iter().all(|&v| (v - 0.3f32 as f64).abs() < 1e-6));
        }
    }

    proptest! {
        #[test]
        fn downsample_is_left_inverse_of_upsample(
            h in 1usize..6, w in 1usize..6, c in 1usize..4, s in 1usize..5, seed in any::<u64>()
        ) {
            let shape = Shape::new(1, c, h, w);
            let data = (0..shape.numel()).map(|i| ((i as u64).wrapping_mul(seed | 1) % 97) as f32 / 97.0).collect();
            let x = Tensor::from_vec(shape, data).unwrap();
            let up = nn_upsample(&x, s).unwrap();
            prop_assert_eq!(up.shape(), Shape::new(1, c, h * s, w * s));
            prop_assert_eq!(nn_downsample(&up, s).unwrap(), x);
        }

        #[test]
        fn bicubic_output_in_unit_range(vals in proptest::collection::vec(0.0f32..=1.0, 16), s in 1usize..5) {
            let x = Tensor::from_vec(Shape::new(1, 1, 4, 4), vals).unwrap();
            let up = bicubic_upsample(&x, s).unwrap();
            prop_assert!(up.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
