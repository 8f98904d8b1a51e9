use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::he_normal;
use crate::tensor::{Float, Graph, Shape, Tensor, Var};

/// Maps an image to a feature tensor for the feature-matching loss.
pub trait FeatureExtractor<F: Float> {
    fn extract(&self, g: &mut Graph<F>, image: Var) -> Result<Var>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureExtractorSpec {
    pub image_channels: usize,
    /// Output channels of each conv3x3 + ReLU + 2x average-pool block.
    pub channels: Vec<usize>,
    pub seed: u64,
}

impl Default for FeatureExtractorSpec {
    fn default() -> Self {
        FeatureExtractorSpec {
            image_channels: 3,
            channels: vec![16, 32, 64],
            seed: 0x5eed_f00d,
        }
    }
}

/// Frozen, randomly initialized convolutional feature extractor.
///
/// Its weights enter the graph as constants, so gradients reach the image
/// but never the extractor.
pub struct FixedFeatureExtractor<F: Float = f32> {
    kernels: Vec<(Tensor<F>, Tensor<F>)>,
    calls: AtomicUsize,
}

impl<F: Float> FixedFeatureExtractor<F> {
    pub fn new(spec: &FeatureExtractorSpec) -> Result<Self> {
        if spec.channels.is_empty() {
            return Err(Error::config("feature extractor needs at least one block"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut in_ch = spec.image_channels;
        let kernels = spec
            .channels
            .iter()
            .map(|&out_ch| {
                let w = he_normal(Shape::new(out_ch, in_ch, 3, 3), in_ch * 9, &mut rng);
                in_ch = out_ch;
                (w, Tensor::vector(vec![F::zero(); out_ch]))
            })
            .collect();
        Ok(FixedFeatureExtractor {
            kernels,
            calls: AtomicUsize::new(0),
        })
    }

    /// Number of times [`FeatureExtractor::extract`] has run.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<F: Float> FeatureExtractor<F> for FixedFeatureExtractor<F> {
    fn extract(&self, g: &mut Graph<F>, image: Var) -> Result<Var> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut h = image;
        for (w, b) in &self.kernels {
            let w = g.constant(w.clone());
            let b = g.constant(b.clone());
            h = g.conv2d(h, w, Some(b), 1, 1)?;
            h = g.relu(h);
            h = g.avg_pool2(h)?;
        }
        Ok(h)
    }
}
