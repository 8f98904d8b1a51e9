//! Shared fixtures for the benchmarks.

use densesr::{Shape, Tensor};

/// Deterministic pseudo-random tensor in `[0, 1)`.
pub fn ramp_tensor(shape: Shape, salt: u32) -> Tensor {
    let data = (0..shape.numel() as u32)
        .map(|i| {
            (i.wrapping_mul(2_654_435_761).wrapping_add(salt) >> 8) as f32 / (1u32 << 24) as f32
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape matches data")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_in_unit_interval() {
        let t = ramp_tensor(Shape::new(2, 3, 5, 7), 9);
        assert!(t.data().iter().all(|v| (0.0..1.0).contains(v)));
        assert_eq!(t, ramp_tensor(Shape::new(2, 3, 5, 7), 9));
    }
}
