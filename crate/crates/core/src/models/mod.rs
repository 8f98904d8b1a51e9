//! The generator, discriminator and frozen feature extractor.

mod discriminator;
mod extractor;
mod generator;

use rand::Rng;

use crate::error::Result;
use crate::tensor::Float;

pub use discriminator::{Discriminator, DiscriminatorSpec, DISCRIMINATOR_PREFIX};
pub use extractor::{FeatureExtractor, FeatureExtractorSpec, FixedFeatureExtractor};
pub use generator::{Generator, GeneratorSpec, GENERATOR_PREFIX};

pub fn build_generator<F: Float>(spec: &GeneratorSpec, rng: &mut impl Rng) -> Result<Generator<F>> {
    Generator::new(spec, rng)
}

pub fn build_discriminator<F: Float>(
    spec: &DiscriminatorSpec,
    rng: &mut impl Rng,
) -> Result<Discriminator<F>> {
    Discriminator::new(spec, rng)
}
