use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Buffer, Conv2d, ConvTranspose2d, Mode, Module, Parameter};
use crate::tensor::{Float, Graph, Var};

/// Architecture of the dense-block super-resolution generator.
///
/// Each of the `log2(scale)` stages is one dense block followed by a stride-2
/// transposed convolution that doubles the spatial size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub scale: usize,
    /// Channels of both the low-resolution input and the output image (1 or 3).
    pub image_channels: usize,
    pub stem_channels: usize,
    /// Channels appended by each dense unit.
    pub growth_rate: usize,
    /// Output channels of each unit's 1x1 stage.
    pub bottleneck_width: usize,
    pub units_per_block: usize,
    /// Dense blocks chained before each transition layer.
    pub blocks_per_stage: usize,
    /// Channel multiplier applied by each transition layer.
    pub compression: f64,
    /// When false, units do not concatenate their input (ablation only).
    pub dense_connectivity: bool,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            scale: 4,
            image_channels: 3,
            stem_channels: 64,
            growth_rate: 16,
            bottleneck_width: 64,
            units_per_block: 5,
            blocks_per_stage: 1,
            compression: 1.0,
            dense_connectivity: true,
        }
    }
}

impl GeneratorSpec {
    pub fn with_scale(scale: usize) -> Self {
        GeneratorSpec {
            scale,
            ..Default::default()
        }
    }

    /// Number of doubling stages, `log2(scale)`.
    pub fn stages(&self) -> Result<usize> {
        if self.scale < 2 || !self.scale.is_power_of_two() {
            return Err(Error::config(format!(
                "scale factor must be a power of two >= 2, got {}",
                self.scale
            )));
        }
        Ok(self.scale.trailing_zeros() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        self.stages()?;
        if !matches!(self.image_channels, 1 | 3) {
            return Err(Error::config(format!(
                "image channels must be 1 or 3, got {}",
                self.image_channels
            )));
        }
        if self.stem_channels == 0
            || self.growth_rate == 0
            || self.bottleneck_width == 0
            || self.units_per_block == 0
            || self.blocks_per_stage == 0
        {
            return Err(Error::config(
                "generator widths, unit and block counts must be >= 1",
            ));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return Err(Error::config(format!(
                "compression must be in (0, 1], got {}",
                self.compression
            )));
        }
        Ok(())
    }

    /// Dense units between consecutive transition layers.
    pub fn units_per_stage(&self) -> usize {
        self.units_per_block * self.blocks_per_stage
    }

    /// Channels leaving the dense blocks of a stage that receives `input` channels.
    pub fn block_output_channels(&self, input: usize) -> usize {
        if self.dense_connectivity {
            input + self.units_per_stage() * self.growth_rate
        } else {
            self.growth_rate
        }
    }

    fn compressed(&self, channels: usize) -> usize {
        ((channels as f64 * self.compression).floor() as usize).max(1)
    }

    /// `(block input, block output, transition output)` channels per stage.
    pub fn channel_trace(&self) -> Result<Vec<(usize, usize, usize)>> {
        let mut trace = Vec::new();
        let mut ch = self.stem_channels;
        for _ in 0..self.stages()? {
            let out = self.block_output_channels(ch);
            let up = self.compressed(out);
            trace.push((ch, out, up));
            ch = up;
        }
        Ok(trace)
    }
}

/// BN -> ReLU -> Conv1x1 -> BN -> ReLU -> Conv3x3, output concatenated to the input.
#[derive(Debug, Clone)]
struct DenseUnit<F: Float> {
    bn1: BatchNorm2d<F>,
    conv1x1: Conv2d<F>,
    bn2: BatchNorm2d<F>,
    conv3x3: Conv2d<F>,
    concat: bool,
}

impl<F: Float> DenseUnit<F> {
    fn new(name: &str, in_ch: usize, spec: &GeneratorSpec, rng: &mut impl Rng) -> Self {
        DenseUnit {
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), in_ch),
            conv1x1: Conv2d::new(
                &format!("{name}.conv1x1"),
                in_ch,
                spec.bottleneck_width,
                1,
                1,
                rng,
            ),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), spec.bottleneck_width),
            conv3x3: Conv2d::new(
                &format!("{name}.conv3x3"),
                spec.bottleneck_width,
                spec.growth_rate,
                3,
                1,
                rng,
            ),
            concat: spec.dense_connectivity,
        }
    }

    fn forward(&mut self, g: &mut Graph<F>, x: Var, mode: Mode) -> Result<Var> {
        let h = self.bn1.forward(g, x, mode)?;
        let h = g.relu(h);
        let h = self.conv1x1.forward(g, h)?;
        let h = self.bn2.forward(g, h, mode)?;
        let h = g.relu(h);
        let h = self.conv3x3.forward(g, h)?;
        if self.concat {
            g.concat_channels(x, h)
        } else {
            Ok(h)
        }
    }

    fn parts(&self) -> (Vec<&BatchNorm2d<F>>, Vec<&Conv2d<F>>) {
        (
            vec![&self.bn1, &self.bn2],
            vec![&self.conv1x1, &self.conv3x3],
        )
    }
}

#[derive(Debug, Clone)]
struct Stage<F: Float> {
    units: Vec<DenseUnit<F>>,
    up: ConvTranspose2d<F>,
}

/// Fully-convolutional output block: Conv3x3-BN-ReLU, Conv1x1-BN-ReLU, Conv1x1 to image channels.
#[derive(Debug, Clone)]
pub(super) struct Head<F: Float> {
    pub(super) conv3x3: Conv2d<F>,
    pub(super) bn1: BatchNorm2d<F>,
    pub(super) conv1x1: Conv2d<F>,
    pub(super) bn2: BatchNorm2d<F>,
    pub(super) out: Conv2d<F>,
}

impl<F: Float> Head<F> {
    pub(super) fn new(name: &str, channels: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        Head {
            conv3x3: Conv2d::new(&format!("{name}.conv3x3"), channels, channels, 3, 1, rng),
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), channels),
            conv1x1: Conv2d::new(&format!("{name}.conv1x1"), channels, channels, 1, 1, rng),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), channels),
            out: Conv2d::new(&format!("{name}.out"), channels, out_ch, 1, 1, rng),
        }
    }

    /// Returns pre-activation logits.
    pub(super) fn forward(
        &mut self,
        g: &mut Graph<F>,
        x: Var,
        mode: Mode,
        act: &dyn Fn(&mut Graph<F>, Var) -> Var,
    ) -> Result<Var> {
        let h = self.conv3x3.forward(g, x)?;
        let h = self.bn1.forward(g, h, mode)?;
        let h = act(g, h);
        let h = self.conv1x1.forward(g, h)?;
        let h = self.bn2.forward(g, h, mode)?;
        let h = act(g, h);
        self.out.forward(g, h)
    }

    pub(super) fn convs(&self) -> [&Conv2d<F>; 3] {
        [&self.conv3x3, &self.conv1x1, &self.out]
    }

    pub(super) fn params(&self) -> Vec<&Parameter<F>> {
        [
            self.conv3x3.params(),
            self.bn1.params(),
            self.conv1x1.params(),
            self.bn2.params(),
            self.out.params(),
        ]
        .concat()
    }

    pub(super) fn params_mut(&mut self) -> Vec<&mut Parameter<F>> {
        let mut v = self.conv3x3.params_mut();
        v.extend(self.bn1.params_mut());
        v.extend(self.conv1x1.params_mut());
        v.extend(self.bn2.params_mut());
        v.extend(self.out.params_mut());
        v
    }

    pub(super) fn buffers(&self) -> Vec<&Buffer<F>> {
        [self.bn1.buffers(), self.bn2.buffers()].concat()
    }

    pub(super) fn buffers_mut(&mut self) -> Vec<&mut Buffer<F>> {
        let mut v = self.bn1.buffers_mut();
        v.extend(self.bn2.buffers_mut());
        v
    }
}

/// Dense-block generator mapping `(B, C, h, w)` to `(B, C, h*s, w*s)` in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Generator<F: Float = f32> {
    spec: GeneratorSpec,
    stem: Conv2d<F>,
    stages: Vec<Stage<F>>,
    head: Head<F>,
}

pub const GENERATOR_PREFIX: &str = "gen";

impl<F: Float> Generator<F> {
    pub fn new(spec: &GeneratorSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let p = GENERATOR_PREFIX;
        let stem = Conv2d::new(
            &format!("{p}.stem"),
            spec.image_channels,
            spec.stem_channels,
            3,
            1,
            rng,
        );
        let mut stages = Vec::new();
        let mut last = spec.stem_channels;
        for (s, (block_in, block_out, up_out)) in spec.channel_trace()?.into_iter().enumerate() {
            let mut units = Vec::new();
            let mut ch = block_in;
            for u in 0..spec.units_per_stage() {
                units.push(DenseUnit::new(
                    &format!("{p}.stage{s}.dense{u}"),
                    ch,
                    spec,
                    rng,
                ));
                ch = if spec.dense_connectivity {
                    ch + spec.growth_rate
                } else {
                    spec.growth_rate
                };
            }
            debug_assert_eq!(ch, block_out);
            let up =
                ConvTranspose2d::upsample2(&format!("{p}.stage{s}.up"), block_out, up_out, rng);
            stages.push(Stage { units, up });
            last = up_out;
        }
        let head = Head::new(&format!("{p}.head"), last, spec.image_channels, rng);
        Ok(Generator {
            spec: spec.clone(),
            stem,
            stages,
            head,
        })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn transition_count(&self) -> usize {
        self.stages.len()
    }

    /// Channels entering each transition layer.
    pub fn transition_input_channels(&self) -> Vec<usize> {
        self.stages
            .iter()
            .map(|s| s.up.weight.shape().batch)
            .collect()
    }

    pub fn forward(&mut self, g: &mut Graph<F>, lr: Var, mode: Mode) -> Result<Var> {
        let s = g.shape(lr);
        if s.channels != self.spec.image_channels {
            return Err(Error::config(format!(
                "generator expects {} channels, input is {s}",
                self.spec.image_channels
            )));
        }
        let mut h = self.stem.forward(g, lr)?;
        for stage in &mut self.stages {
            for unit in &mut stage.units {
                h = unit.forward(g, h, mode)?;
            }
            h = stage.up.forward(g, h)?;
        }
        let logits = self.head.forward(g, h, mode, &|g, v| g.relu(v))?;
        Ok(g.sigmoid(logits))
    }
}

impl<F: Float> Module<F> for Generator<F> {
    fn params(&self) -> Vec<&Parameter<F>> {
        let mut v = self.stem.params();
        for stage in &self.stages {
            for unit in &stage.units {
                let (bns, convs) = unit.parts();
                v.extend(bns[0].params());
                v.extend(convs[0].params());
                v.extend(bns[1].params());
                v.extend(convs[1].params());
            }
            v.extend(stage.up.params());
        }
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<F>> {
        let mut v = self.stem.params_mut();
        for stage in &mut self.stages {
            for unit in &mut stage.units {
                v.extend(unit.bn1.params_mut());
                v.extend(unit.conv1x1.params_mut());
                v.extend(unit.bn2.params_mut());
                v.extend(unit.conv3x3.params_mut());
            }
            v.extend(stage.up.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }

    fn buffers(&self) -> Vec<&Buffer<F>> {
        let mut v = Vec::new();
        for unit in self.stages.iter().flat_map(|s| &s.units) {
            v.extend(unit.bn1.buffers());
            v.extend(unit.bn2.buffers());
        }
        v.extend(self.head.buffers());
        v
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer<F>> {
        let mut v = Vec::new();
        for unit in self.stages.iter_mut().flat_map(|s| &mut s.units) {
            v.extend(unit.bn1.buffers_mut());
            v.extend(unit.bn2.buffers_mut());
        }
        v.extend(self.head.buffers_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(scale: usize) -> GeneratorSpec {
        GeneratorSpec {
            scale,
            image_channels: 1,
            stem_channels: 4,
            growth_rate: 2,
            bottleneck_width: 4,
            units_per_block: 2,
            ..Default::default()
        }
    }

    #[test]
    fn rejects_non_power_of_two_scale() {
        for s in [0, 1, 3, 6] {
            let spec = GeneratorSpec::with_scale(s);
            assert!(matches!(
                Generator::<f32>::new(&spec, &mut ChaCha8Rng::seed_from_u64(0)),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn default_stage_arithmetic() {
        let spec = GeneratorSpec::default();
        let trace = spec.channel_trace().unwrap();
        assert_eq!(trace[0], (64, 144, 144));
        assert_eq!(trace[1], (144, 224, 224));
        let g8 = Generator::<f32>::new(
            &GeneratorSpec::with_scale(8),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(g8.transition_count(), 3);
        assert_eq!(g8.transition_input_channels(), vec![144, 224, 304]);
    }

    #[test]
    fn compression_shrinks_transitions() {
        let spec = GeneratorSpec {
            compression: 0.5,
            ..Default::default()
        };
        assert_eq!(
            spec.channel_trace().unwrap(),
            vec![(64, 144, 72), (72, 152, 76)]
        );
    }

    #[test]
    fn chained_blocks_extend_the_stage() {
        let two_by_two = GeneratorSpec {
            units_per_block: 2,
            blocks_per_stage: 2,
            ..tiny(4)
        };
        let one_by_four = GeneratorSpec {
            units_per_block: 4,
            ..tiny(4)
        };
        assert_eq!(two_by_two.units_per_stage(), 4);
        assert_eq!(
            two_by_two.channel_trace().unwrap(),
            one_by_four.channel_trace().unwrap()
        );
        let a = Generator::<f32>::new(&two_by_two, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let b = Generator::<f32>::new(&one_by_four, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        assert!(GeneratorSpec {
            blocks_per_stage: 0,
            ..tiny(2)
        }
        .validate()
        .is_err());
    }

    #[test]
    fn ablation_changes_parameter_count_as_predicted() {
        let spec = tiny(2);
        let dense = Generator::<f32>::new(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let plain = Generator::<f32>::new(
            &GeneratorSpec {
                dense_connectivity: false,
                ..spec.clone()
            },
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        // per unit: bn1(2c) + conv1x1(c*b + b) + bn2(2b) + conv3x3(9*b*k + k)
        let (b, k) = (spec.bottleneck_width, spec.growth_rate);
        let unit = |c: usize| 2 * c + c * b + b + 2 * b + 9 * b * k + k;
        // transition (9*c*c + c) and head (9c^2 + c + 2c + c^2 + c + 2c + c*1 + 1) for c channels
        let rest =
            |c: usize| (9 * c * c + c) + (9 * c * c + c) + 2 * c + (c * c + c) + 2 * c + (c + 1);
        let stem = 9 * 4 + 4;
        let dense_count = stem + unit(4) + unit(6) + rest(8);
        let plain_count = stem + unit(4) + unit(2) + rest(2);
        assert_eq!(dense.param_count(), dense_count);
        assert_eq!(plain.param_count(), plain_count);
    }

    #[test]
    fn output_shape_and_range() {
        for scale in [2, 4, 8] {
            let mut gen =
                Generator::<f32>::new(&tiny(scale), &mut ChaCha8Rng::seed_from_u64(scale as u64))
                    .unwrap();
            let mut g = Graph::new();
            let x = g.constant(Tensor::full(Shape::new(2, 1, 8, 9), 0.3));
            let y = gen.forward(&mut g, x, Mode::Train).unwrap();
            assert_eq!(g.shape(y), Shape::new(2, 1, 8 * scale, 9 * scale));
            assert!(g.value(y).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let mut gen = Generator::<f32>::new(&tiny(2), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(Shape::new(2, 3, 8, 8)));
        assert!(gen.forward(&mut g, x, Mode::Train).is_err());
    }
}
