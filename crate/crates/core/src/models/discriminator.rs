use rand::Rng;
use serde::{Deserialize, Serialize};

use super::generator::Head;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Buffer, Conv2d, Mode, Module, Parameter};
use crate::tensor::{Float, Graph, Var};

/// Architecture of the real/fake discriminator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorSpec {
    pub image_channels: usize,
    /// Output channels of the stride-2 downsampling layers.
    pub channels: Vec<usize>,
    /// Negative slope for leaky ReLU; `None` uses plain ReLU.
    pub leaky_slope: Option<f64>,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        DiscriminatorSpec {
            image_channels: 3,
            channels: vec![64, 128, 256, 512],
            leaky_slope: None,
        }
    }
}

impl DiscriminatorSpec {
    /// Spatial sizes must be divisible by this.
    pub fn size_divisor(&self) -> usize {
        1 << self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.image_channels, 1 | 3) {
            return Err(Error::config(format!(
                "image channels must be 1 or 3, got {}",
                self.image_channels
            )));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::config(
                "discriminator needs at least one non-empty layer",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct DownLayer<F: Float> {
    conv: Conv2d<F>,
    bn: BatchNorm2d<F>,
}

/// Conv3x3/stride-2 + ReLU + BN layers, then a fully-convolutional tail whose
/// single-channel map is averaged spatially and squashed to a probability.
#[derive(Debug, Clone)]
pub struct Discriminator<F: Float = f32> {
    spec: DiscriminatorSpec,
    layers: Vec<DownLayer<F>>,
    tail: Head<F>,
}

pub const DISCRIMINATOR_PREFIX: &str = "disc";

impl<F: Float> Discriminator<F> {
    pub fn new(spec: &DiscriminatorSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let p = DISCRIMINATOR_PREFIX;
        let mut layers = Vec::new();
        let mut in_ch = spec.image_channels;
        for (i, &out_ch) in spec.channels.iter().enumerate() {
            layers.push(DownLayer {
                conv: Conv2d::new(&format!("{p}.down{i}.conv"), in_ch, out_ch, 3, 2, rng),
                bn: BatchNorm2d::new(&format!("{p}.down{i}.bn"), out_ch),
            });
            in_ch = out_ch;
        }
        let tail = Head::new(&format!("{p}.tail"), in_ch, 1, rng);
        Ok(Discriminator {
            spec: spec.clone(),
            layers,
            tail,
        })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    /// Channel count after each layer, starting with the image channels.
    pub fn channel_trace(&self) -> Vec<usize> {
        std::iter::once(self.spec.image_channels)
            .chain(self.layers.iter().map(|l| l.conv.out_channels()))
            .collect()
    }

    /// Returns a `(B, 1, 1, 1)` tensor of probabilities that each image is real.
    pub fn forward(&mut self, g: &mut Graph<F>, image: Var, mode: Mode) -> Result<Var> {
        let s = g.shape(image);
        let div = self.spec.size_divisor();
        if s.channels != self.spec.image_channels
            || !s.height.is_multiple_of(div)
            || !s.width.is_multiple_of(div)
        {
            return Err(Error::config(format!(
                "discriminator needs {} channels and spatial size divisible by {div}, got {s}",
                self.spec.image_channels
            )));
        }
        let slope = self.spec.leaky_slope;
        let act = |g: &mut Graph<F>, v: Var| match slope {
            Some(a) => g.leaky_relu(v, F::from_f64_lossy(a)),
            None => g.relu(v),
        };
        let mut h = image;
        for layer in &mut self.layers {
            h = layer.conv.forward(g, h)?;
            h = act(g, h);
            h = layer.bn.forward(g, h, mode)?;
        }
        let logits = self.tail.forward(g, h, mode, &act)?;
        let pooled = g.spatial_mean(logits);
        Ok(g.sigmoid(pooled))
    }
}

impl<F: Float> Module<F> for Discriminator<F> {
    fn params(&self) -> Vec<&Parameter<F>> {
        let mut v = Vec::new();
        for l in &self.layers {
            v.extend(l.conv.params());
            v.extend(l.bn.params());
        }
        v.extend(self.tail.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<F>> {
        let mut v = Vec::new();
        for l in &mut self.layers {
            v.extend(l.conv.params_mut());
            v.extend(l.bn.params_mut());
        }
        v.extend(self.tail.params_mut());
        v
    }

    fn buffers(&self) -> Vec<&Buffer<F>> {
        let mut v: Vec<&Buffer<F>> = self.layers.iter().flat_map(|l| l.bn.buffers()).collect();
        v.extend(self.tail.buffers());
        v
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer<F>> {
        let mut v: Vec<&mut Buffer<F>> = self
            .layers
            .iter_mut()
            .flat_map(|l| l.bn.buffers_mut())
            .collect();
        v.extend(self.tail.buffers_mut());
        v
    }
}

impl<F: Float> Discriminator<F> {
    #[doc(hidden)]
    pub fn conv_kernel_sizes(&self) -> Vec<(usize, usize)> {
        let mut v: Vec<_> = self
            .layers
            .iter()
            .map(|l| (l.conv.weight.shape().height, l.conv.stride))
            .collect();
        v.extend(
            self.tail
                .convs()
                .iter()
                .map(|c| (c.weight.shape().height, c.stride)),
        );
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn channel_schedule_and_strides() {
        let d = Discriminator::<f32>::new(
            &DiscriminatorSpec::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(d.channel_trace(), vec![3, 64, 128, 256, 512]);
        assert_eq!(
            d.conv_kernel_sizes(),
            vec![(3, 2), (3, 2), (3, 2), (3, 2), (3, 1), (1, 1), (1, 1)]
        );
    }

    #[test]
    fn rejects_indivisible_input() {
        let spec = DiscriminatorSpec {
            image_channels: 1,
            channels: vec![4, 8, 8, 8],
            leaky_slope: None,
        };
        let mut d = Discriminator::<f32>::new(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(Shape::new(2, 1, 40, 40)));
        assert!(matches!(
            d.forward(&mut g, x, Mode::Train),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn leaky_variant_produces_probabilities() {
        let spec = DiscriminatorSpec {
            image_channels: 1,
            channels: vec![4, 8],
            leaky_slope: Some(0.2),
        };
        let mut d = Discriminator::<f32>::new(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(Shape::new(3, 1, 16, 16), 0.4));
        let y = d.forward(&mut g, x, Mode::Train).unwrap();
        assert_eq!(g.shape(y), Shape::new(3, 1, 1, 1));
        assert!(g.value(y).data().iter().all(|&p| p > 0.0 && p < 1.0));
    }
}
