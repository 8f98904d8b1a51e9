//! Rank-4 tensors and the reverse-mode differentiation tape.
//!
//! Everything is generic over [`Float`] so that the same kernels run in
//! 32-bit for training and in 64-bit for finite-difference gradient checks.

mod conv;
mod graph;

use std::fmt;
use std::iter::Sum;
use std::sync::Arc;

use crate::error::{Error, Result};

pub use conv::ConvGeometry;
pub use graph::{BatchNormStats, Gradients, Graph, Var};

/// Element type of a tensor.
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + Sum
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * op(a) * op(b) + beta * c` for row-major operands.
    ///
    /// `a` is `m x k` (or `k x m` stored when `trans_a`), `b` is `k x n`
    /// (or `n x k` stored when `trans_b`), `c` is `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn from_f64_lossy(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

fn gemm_strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // stored row-major as rows x cols, or cols x rows when transposed
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_float {
    ($t:ty, $kernel:path) => {
        impl Float for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = gemm_strides(m, k, trans_a);
                let (rsb, csb) = gemm_strides(k, n, trans_b);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: bounds checked above; strides describe the stored layouts.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_float!(f32, matrixmultiply::sgemm);
impl_float!(f64, matrixmultiply::dgemm);

/// Dimensions of a (batch, channels, height, width) tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Shape {
            batch,
            channels,
            height,
            width,
        }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    /// Elements in one spatial plane.
    pub const fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Elements in one batch item.
    pub const fn item(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    pub fn from_dims(dims: [usize; 4]) -> Result<Self> {
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        if dims.contains(&0) {
            return Err(Error::config(format!(
                "tensor dimensions must be >= 1, got {shape}"
            )));
        }
        Ok(shape)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{}x{}x{}",
            self.batch, self.channels, self.height, self.width
        )
    }
}

/// Immutable rank-4 array in row-major (b, c, h, w) order.
///
/// Cloning is cheap: the storage is shared.
#[derive(Clone, PartialEq)]
pub struct Tensor<F = f32> {
    shape: Shape,
    data: Arc<Vec<F>>,
}

impl<F: Float> Tensor<F> {
    pub fn from_vec(shape: Shape, data: Vec<F>) -> Result<Self> {
        Shape::from_dims(shape.dims())?;
        if data.len() != shape.numel() {
            return Err(Error::config(format!(
                "tensor of shape {shape} needs {} values, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn full(shape: Shape, value: F) -> Self {
        Tensor {
            shape,
            data: Arc::new(vec![value; shape.numel()]),
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn scalar(value: F) -> Self {
        Self::full(Shape::scalar(), value)
    }

    /// 1x1x1xN tensor, used for per-channel vectors.
    pub fn vector(values: Vec<F>) -> Self {
        let shape = Shape::new(1, 1, 1, values.len().max(1));
        Tensor::from_vec(shape, values).expect("non-empty vector")
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<F> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn get(&self, b: usize, c: usize, y: usize, x: usize) -> F {
        let s = self.shape;
        self.data[((b * s.channels + c) * s.height + y) * s.width + x]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> F {
        self.data[0]
    }

    pub fn reshape(&self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.numel() {
            return Err(Error::config(format!(
                "cannot reshape {} into {shape}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape,
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    /// Converts element type (e.g. f32 -> f64 for shadow evaluation).
    pub fn cast<G: Float>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape,
            data: Arc::new(
                self.data
                    .iter()
                    .map(|v| G::from_f64_lossy(v.as_f64()))
                    .collect(),
            ),
        }
    }

    /// Selects batch items `index..index+count`.
    pub fn narrow_batch(&self, index: usize, count: usize) -> Result<Self> {
        if count == 0 || index + count > self.shape.batch {
            return Err(Error::config(format!(
                "batch range {index}..{} out of bounds for {}",
                index + count,
                self.shape
            )));
        }
        let item = self.shape.item();
        let data = self.data[index * item..(index + count) * item].to_vec();
        Tensor::from_vec(
            Shape {
                batch: count,
                ..self.shape
            },
            data,
        )
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack(items: &[Tensor<F>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::config("cannot stack zero tensors"))?;
        let per = Shape {
            batch: 1,
            ..first.shape
        };
        let mut data = Vec::with_capacity(items.iter().map(|t| t.numel()).sum());
        let mut batch = 0;
        for t in items {
            if (Shape {
                batch: 1,
                ..t.shape
            }) != per
            {
                return Err(Error::shape("stack", first.shape, t.shape));
            }
            batch += t.shape.batch;
            data.extend_from_slice(&t.data);
        }
        Tensor::from_vec(Shape { batch, ..per }, data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl<F: Float> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        write!(
            f,
            "Tensor({}, {:?}{})",
            self.shape,
            preview,
            if self.numel() > 8 { "..." } else { "" }
        )
    }
}
