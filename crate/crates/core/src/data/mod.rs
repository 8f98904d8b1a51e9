//! Chip ingestion, degradation, baselines, synthetic scenes and batching.

mod dataset;
mod io;
mod resample;
mod scene;

pub use dataset::{
    chip_image, make_batches, Batch, ChipPair, DatasetManifest, DatasetSource, ManifestEntry,
    Split, SyntheticSource,
};
pub use io::{load_png, save_png};
pub use resample::{bicubic_upsample, keys_weight, nn_downsample, nn_upsample};
pub use scene::{generate_scene, SceneSpec};
