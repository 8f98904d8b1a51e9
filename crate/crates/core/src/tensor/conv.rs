//! im2col-based convolution kernels.
//!
//! Loop order is fixed and every batch item is reduced in index order, so
//! forward values and gradients are bit-reproducible for a given build.

use super::{Float, Shape, Tensor};
use crate::error::{Error, Result};

/// Spatial geometry of a strided convolution mapping a `in_h x in_w` plane to
/// an `out_h x out_w` plane. Transposed convolution reuses the same geometry
/// with the roles of input and output swapped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Geometry of a forward convolution over an `in_h x in_w` input.
    pub fn forward(
        in_h: usize,
        in_w: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::config("convolution stride must be >= 1"));
        }
        if in_h + 2 * padding < kernel_h || in_w + 2 * padding < kernel_w {
            return Err(Error::config(format!(
                "{kernel_h}x{kernel_w} kernel does not fit a padded {in_h}x{in_w} input"
            )));
        }
        Ok(ConvGeometry {
            in_h,
            in_w,
            out_h: (in_h + 2 * padding - kernel_h) / stride + 1,
            out_w: (in_w + 2 * padding - kernel_w) / stride + 1,
            kernel_h,
            kernel_w,
            stride,
            padding,
        })
    }

    /// Geometry whose *output* plane is the `in_h x in_w` input of a
    /// transposed convolution.
    pub fn transposed(
        in_h: usize,
        in_w: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Self> {
        if stride == 0 || output_padding >= stride {
            return Err(Error::config(format!(
                "output_padding ({output_padding}) must be smaller than stride ({stride})"
            )));
        }
        let full_h = (in_h - 1) * stride + kernel_h + output_padding;
        let full_w = (in_w - 1) * stride + kernel_w + output_padding;
        if full_h <= 2 * padding || full_w <= 2 * padding {
            return Err(Error::config(
                "transposed convolution padding exceeds output size",
            ));
        }
        let geom = ConvGeometry::forward(
            full_h - 2 * padding,
            full_w - 2 * padding,
            kernel_h,
            kernel_w,
            stride,
            padding,
        )?;
        debug_assert_eq!((geom.out_h, geom.out_w), (in_h, in_w));
        Ok(geom)
    }

    fn cols_rows(&self, channels: usize) -> usize {
        channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_plane(&self) -> usize {
        self.in_h * self.in_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfolds a `channels x in_h x in_w` plane stack into a
/// `(channels*kh*kw) x (out_h*out_w)` matrix.
fn im2col<F: Float>(src: &[F], channels: usize, g: &ConvGeometry, dst: &mut [F]) {
    let plane = g.out_plane();
    let mut row = 0;
    for c in 0..channels {
        let src_c = &src[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let out_row = &mut dst[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let line = &mut out_row[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(F::zero());
                        continue;
                    }
                    let src_row = &src_c[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            F::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back onto the planes.
fn col2im<F: Float>(cols: &[F], channels: usize, g: &ConvGeometry, dst: &mut [F]) {
    let plane = g.out_plane();
    let mut row = 0;
    for c in 0..channels {
        let dst_c = &mut dst[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let col_row = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst_row = &mut dst_c[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let line = &col_row[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst_row[ix as usize] = dst_row[ix as usize] + v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn add_bias<F: Float>(out: &mut [F], bias: Option<&Tensor<F>>, plane: usize) {
    if let Some(bias) = bias {
        for (chunk, &b) in out.chunks_mut(plane).zip(bias.data().iter().cycle()) {
            chunk.iter_mut().for_each(|v| *v = *v + b);
        }
    }
}

fn bias_grad<F: Float>(grad_out: &[F], shape: Shape) -> Vec<F> {
    let mut db = vec![F::zero(); shape.channels];
    for item in grad_out.chunks(shape.item()) {
        for (c, plane) in item.chunks(shape.plane()).enumerate() {
            db[c] = db[c] + plane.iter().copied().sum::<F>();
        }
    }
    db
}

pub(super) struct ConvGrads<F> {
    pub input: Option<Vec<F>>,
    pub kernel: Option<Vec<F>>,
    pub bias: Option<Vec<F>>,
}

/// `kernel` is `(out_ch, in_ch, kh, kw)`.
pub(super) fn conv2d_forward<F: Float>(
    input: &Tensor<F>,
    kernel: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    g: &ConvGeometry,
) -> Tensor<F> {
    let xs = input.shape();
    let out_ch = kernel.shape().batch;
    let rows = g.cols_rows(xs.channels);
    let out_shape = Shape::new(xs.batch, out_ch, g.out_h, g.out_w);
    let mut out = vec![F::zero(); out_shape.numel()];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![F::zero(); rows * g.out_plane()]
    };
    for (x_n, out_n) in input
        .data()
        .chunks(xs.item())
        .zip(out.chunks_mut(out_shape.item()))
    {
        let cols_ref: &[F] = if g.is_pointwise() {
            x_n
        } else {
            im2col(x_n, xs.channels, g, &mut cols);
            &cols
        };
        F::gemm(
            out_ch,
            rows,
            g.out_plane(),
            kernel.data(),
            false,
            cols_ref,
            false,
            out_n,
            false,
        );
    }
    add_bias(&mut out, bias, g.out_plane());
    Tensor::from_vec(out_shape, out).expect("conv output shape")
}

pub(super) fn conv2d_backward<F: Float>(
    input: &Tensor<F>,
    kernel: &Tensor<F>,
    grad_out: &[F],
    g: &ConvGeometry,
    want: (bool, bool, bool),
) -> ConvGrads<F> {
    let xs = input.shape();
    let out_ch = kernel.shape().batch;
    let rows = g.cols_rows(xs.channels);
    let out_item = out_ch * g.out_plane();
    let mut dx = want.0.then(|| vec![F::zero(); xs.numel()]);
    let mut dw = want.1.then(|| vec![F::zero(); kernel.numel()]);
    let mut cols = vec![F::zero(); rows * g.out_plane()];
    let mut dcols = vec![F::zero(); rows * g.out_plane()];
    for (n, (x_n, gy_n)) in input
        .data()
        .chunks(xs.item())
        .zip(grad_out.chunks(out_item))
        .enumerate()
    {
        if let Some(dw) = dw.as_mut() {
            let cols_ref: &[F] = if g.is_pointwise() {
                x_n
            } else {
                im2col(x_n, xs.channels, g, &mut cols);
                &cols
            };
            F::gemm(
                out_ch,
                g.out_plane(),
                rows,
                gy_n,
                false,
                cols_ref,
                true,
                dw,
                true,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dx_n = &mut dx[n * xs.item()..(n + 1) * xs.item()];
            if g.is_pointwise() {
                F::gemm(
                    rows,
                    out_ch,
                    g.out_plane(),
                    kernel.data(),
                    true,
                    gy_n,
                    false,
                    dx_n,
                    false,
                );
            } else {
                F::gemm(
                    rows,
                    out_ch,
                    g.out_plane(),
                    kernel.data(),
                    true,
                    gy_n,
                    false,
                    &mut dcols,
                    false,
                );
                col2im(&dcols, xs.channels, g, dx_n);
            }
        }
    }
    let db = want
        .2
        .then(|| bias_grad(grad_out, Shape::new(xs.batch, out_ch, g.out_h, g.out_w)));
    ConvGrads {
        input: dx,
        kernel: dw,
        bias: db,
    }
}

/// `kernel` is `(in_ch, out_ch, kh, kw)`; `g` maps the output plane to the input plane.
pub(super) fn conv_transpose2d_forward<F: Float>(
    input: &Tensor<F>,
    kernel: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    g: &ConvGeometry,
) -> Tensor<F> {
    let xs = input.shape();
    let out_ch = kernel.shape().channels;
    let rows = g.cols_rows(out_ch);
    let out_shape = Shape::new(xs.batch, out_ch, g.in_h, g.in_w);
    let mut out = vec![F::zero(); out_shape.numel()];
    let mut cols = vec![F::zero(); rows * g.out_plane()];
    for (x_n, out_n) in input
        .data()
        .chunks(xs.item())
        .zip(out.chunks_mut(out_shape.item()))
    {
        F::gemm(
            rows,
            xs.channels,
            g.out_plane(),
            kernel.data(),
            true,
            x_n,
            false,
            &mut cols,
            false,
        );
        col2im(&cols, out_ch, g, out_n);
    }
    add_bias(&mut out, bias, g.in_plane());
    Tensor::from_vec(out_shape, out).expect("conv transpose output shape")
}

pub(super) fn conv_transpose2d_backward<F: Float>(
    input: &Tensor<F>,
    kernel: &Tensor<F>,
    grad_out: &[F],
    g: &ConvGeometry,
    want: (bool, bool, bool),
) -> ConvGrads<F> {
    let xs = input.shape();
    let out_ch = kernel.shape().channels;
    let rows = g.cols_rows(out_ch);
    let out_item = out_ch * g.in_plane();
    let mut dx = want.0.then(|| vec![F::zero(); xs.numel()]);
    let mut dw = want.1.then(|| vec![F::zero(); kernel.numel()]);
    let mut cols = vec![F::zero(); rows * g.out_plane()];
    for (n, (x_n, gy_n)) in input
        .data()
        .chunks(xs.item())
        .zip(grad_out.chunks(out_item))
        .enumerate()
    {
        im2col(gy_n, out_ch, g, &mut cols);
        if let Some(dx) = dx.as_mut() {
            let dx_n = &mut dx[n * xs.item()..(n + 1) * xs.item()];
            F::gemm(
                xs.channels,
                rows,
                g.out_plane(),
                kernel.data(),
                false,
                &cols,
                false,
                dx_n,
                false,
            );
        }
        if let Some(dw) = dw.as_mut() {
            F::gemm(
                xs.channels,
                g.out_plane(),
                rows,
                x_n,
                false,
                &cols,
                true,
                dw,
                true,
            );
        }
    }
    let db = want
        .2
        .then(|| bias_grad(grad_out, Shape::new(xs.batch, out_ch, g.in_h, g.in_w)));
    ConvGrads {
        input: dx,
        kernel: dw,
        bias: db,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_output_sizes() {
        let g = ConvGeometry::forward(8, 8, 3, 3, 2, 1).unwrap();
        assert_eq!((g.out_h, g.out_w), (4, 4));
        let g = ConvGeometry::forward(5, 7, 3, 3, 1, 0).unwrap();
        assert_eq!((g.out_h, g.out_w), (3, 5));
        // stride-2 transposed 3x3 with padding 1 and output_padding 1 doubles
        let t = ConvGeometry::transposed(6, 5, 3, 3, 2, 1, 1).unwrap();
        assert_eq!((t.in_h, t.in_w), (12, 10));
        assert!(ConvGeometry::transposed(6, 5, 3, 3, 2, 1, 2).is_err());
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeometry::forward(5, 4, 3, 3, 2, 1).unwrap();
        let c = 2;
        let x: Vec<f64> = (0..c * 20).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let y: Vec<f64> = (0..c * 9 * g.out_plane())
            .map(|i| ((i * 5) % 13) as f64 - 6.0)
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, c, &g, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, c, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }
}
