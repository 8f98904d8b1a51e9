//! Training configuration, loadable from a TOML key-value file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSource, SceneSpec, SyntheticSource};
use crate::error::{Error, Result};
use crate::loss::{AdversarialForm, AlphaSchedule, LossWeights};
use crate::models::{DiscriminatorSpec, FeatureExtractorSpec, GeneratorSpec};
use crate::nn::AdamConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub scale: usize,
    pub epochs: u32,
    pub batch_size: usize,
    pub seed: u64,
    pub alpha0: f64,
    pub alpha_decay: f64,
    pub beta1: f64,
    pub generator_learning_rate: f64,
    pub discriminator_learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adversarial_form: AdversarialForm,
    /// Stops after this many generator updates, even mid-epoch.
    pub max_generator_steps: Option<u64>,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: u32,
    /// Checkpoints and the per-step metrics log go here when set.
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetSource,
    /// `generator.scale` is replaced by `scale`.
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
    pub feature_extractor: FeatureExtractorSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            scale: 4,
            epochs: 20,
            batch_size: 16,
            seed: 0,
            alpha0: 0.95,
            alpha_decay: 1.05,
            beta1: 0.0,
            generator_learning_rate: 2e-4,
            discriminator_learning_rate: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adversarial_form: AdversarialForm::Minimax,
            max_generator_steps: None,
            checkpoint_every: 1,
            output_dir: None,
            dataset: DatasetSource::Synthetic(SyntheticSource::default()),
            generator: GeneratorSpec::default(),
            discriminator: DiscriminatorSpec::default(),
            feature_extractor: FeatureExtractorSpec::default(),
        }
    }
}

impl TrainConfig {
    /// Narrow networks, higher learning rates and short epochs that train
    /// in about a minute on one CPU core.
    pub fn compact(scale: usize) -> Self {
        TrainConfig {
            scale,
            epochs: 100,
            generator_learning_rate: 2e-3,
            discriminator_learning_rate: 1e-3,
            generator: GeneratorSpec {
                scale,
                stem_channels: 16,
                growth_rate: 8,
                bottleneck_width: 16,
                units_per_block: 3,
                compression: 0.5,
                ..Default::default()
            },
            discriminator: DiscriminatorSpec {
                channels: vec![8, 16, 32, 64],
                ..Default::default()
            },
            feature_extractor: FeatureExtractorSpec {
                channels: vec![8, 16, 32],
                ..Default::default()
            },
            dataset: DatasetSource::Synthetic(SyntheticSource {
                scene: SceneSpec::default(),
                train: 64,
                val: 32,
            }),
            ..Default::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn generator_spec(&self) -> GeneratorSpec {
        GeneratorSpec {
            scale: self.scale,
            ..self.generator.clone()
        }
    }

    pub fn alpha_schedule(&self) -> AlphaSchedule {
        AlphaSchedule {
            alpha0: self.alpha0,
            decay: self.alpha_decay,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            beta1: self.beta1,
            adversarial_form: self.adversarial_form,
        }
    }

    fn adam(&self, learning_rate: f64) -> AdamConfig {
        AdamConfig {
            learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            ..Default::default()
        }
    }

    pub fn generator_adam(&self) -> AdamConfig {
        self.adam(self.generator_learning_rate)
    }

    pub fn discriminator_adam(&self) -> AdamConfig {
        self.adam(self.discriminator_learning_rate)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config(format!(
                "batch size must be at least 2 for batch norm, got {}",
                self.batch_size
            )));
        }
        if self.epochs < 1 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if !(self.generator_learning_rate > 0.0 && self.discriminator_learning_rate > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if self.generator.image_channels != self.discriminator.image_channels
            || self.generator.image_channels != self.feature_extractor.image_channels
        {
            return Err(Error::config(
                "generator, discriminator and feature extractor disagree on image channels",
            ));
        }
        self.generator_spec().validate()?;
        self.discriminator.validate()?;
        self.alpha_schedule().validate()?;
        self.loss_weights().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let mut c = TrainConfig::compact(8);
        c.output_dir = Some("runs/a".into());
        c.max_generator_steps = Some(400);
        let back = TrainConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let c =
            TrainConfig::from_toml("scale = 2\nbeta1 = 0.25\n[dataset]\nmanifest = \"m.jsonl\"\n")
                .unwrap();
        assert_eq!(c.scale, 2);
        assert_eq!(c.batch_size, 16);
        assert_eq!(c.dataset, DatasetSource::Manifest("m.jsonl".into()));
        assert_eq!(c.generator_spec().scale, 2);
    }

    #[test]
    fn readme_example_parses() {
        let text = r#"
scale = 4
epochs = 100
batch_size = 16
beta1 = 0.0
generator_learning_rate = 0.002
discriminator_learning_rate = 0.001
adversarial_form = "minimax"

[generator]
stem_channels = 16
growth_rate = 8
bottleneck_width = 16
units_per_block = 3
compression = 0.5

[discriminator]
channels = [8, 16, 32, 64]

[dataset.synthetic]
train = 64
val = 32
"#;
        let c = TrainConfig::from_toml(text).unwrap();
        c.validate().unwrap();
        let compact = TrainConfig::compact(4);
        assert_eq!(c.generator, compact.generator);
        assert_eq!(c.discriminator, compact.discriminator);
        assert_eq!(c.dataset, compact.dataset);
        assert_eq!(c.generator_learning_rate, compact.generator_learning_rate);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(TrainConfig::from_toml("sclae = 2").is_err());
        let c = TrainConfig {
            batch_size: 1,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            scale: 3,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig::compact(2).validate().is_ok());
    }
}
