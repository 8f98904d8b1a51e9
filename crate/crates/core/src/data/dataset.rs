use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::{load_png, save_png};
use super::resample::nn_downsample;
use super::scene::{generate_scene, SceneSpec};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// High-resolution chip with its degraded counterpart.
#[derive(Debug, Clone, PartialEq)]
pub struct ChipPair {
    pub hr: Tensor,
    pub lr: Tensor,
    pub scale: usize,
    pub source_id: String,
    pub split: Split,
    /// Set when `lr` was produced by [`nn_downsample`] from `hr`.
    pub degraded: bool,
}

impl ChipPair {
    pub fn from_hr(
        hr: Tensor,
        scale: usize,
        source_id: impl Into<String>,
        split: Split,
    ) -> Result<Self> {
        if hr.shape().batch != 1 {
            return Err(Error::usage(format!(
                "chip must have batch 1, got {}",
                hr.shape()
            )));
        }
        let lr = nn_downsample(&hr, scale)?;
        Ok(ChipPair {
            hr,
            lr,
            scale,
            source_id: source_id.into(),
            split,
            degraded: true,
        })
    }
}

/// Tiles `image` into `chip`x`chip` windows at `stride`, dropping the
/// right and bottom remainder. Returns `(y, x, chip)` triples in raster order.
pub fn chip_image(
    image: &Tensor,
    chip: usize,
    stride: usize,
) -> Result<Vec<(usize, usize, Tensor)>> {
    let s = image.shape();
    if s.batch != 1 || chip == 0 || stride == 0 || chip > s.height || chip > s.width {
        return Err(Error::config(format!(
            "cannot cut {chip}px chips at stride {stride} from {s}"
        )));
    }
    let mut out = Vec::new();
    for y in (0..=s.height - chip).step_by(stride) {
        for x in (0..=s.width - chip).step_by(stride) {
            out.push((y, x, crop(image, y, x, chip)));
        }
    }
    Ok(out)
}

fn crop(image: &Tensor, y: usize, x: usize, size: usize) -> Tensor {
    let s = image.shape();
    let mut data = Vec::with_capacity(s.channels * size * size);
    for plane in image.data().chunks_exact(s.plane()) {
        for row in y..y + size {
            data.extend_from_slice(&plane[row * s.width + x..][..size]);
        }
    }
    Tensor::from_vec(Shape::new(1, s.channels, size, size), data).expect("crop size")
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub split: Split,
    pub x: usize,
    pub y: usize,
    pub chip_size: usize,
}

/// Line-delimited list of chip windows into PNG files.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Parses a manifest. Relative paths resolve against the manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut e: ManifestEntry =
                serde_json::from_str(&line).map_err(|err| Error::Ingest {
                    path: path.to_path_buf(),
                    reason: format!("line {}: {err}", n + 1),
                })?;
            if e.path.is_relative() {
                e.path = base.join(&e.path);
            }
            if !e.path.exists() {
                return Err(Error::Ingest {
                    path: e.path,
                    reason: "listed in manifest but missing".into(),
                });
            }
            entries.push(e);
        }
        let m = DatasetManifest { entries };
        m.validate()?;
        Ok(m)
    }

    /// Writes entries one JSON object per line, paths as given.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for e in &self.entries {
            serde_json::to_writer(&mut out, e).expect("manifest entries serialize");
            out.push(b'\n');
        }
        fs::File::create(path)
            .and_then(|mut f| f.write_all(&out))
            .map_err(|e| Error::io(path, e))
    }

    /// Rejects windows that appear in both splits.
    pub fn validate(&self) -> Result<()> {
        let mut seen: HashMap<(&Path, usize, usize, usize), Split> = HashMap::new();
        for e in &self.entries {
            if e.chip_size == 0 {
                return Err(Error::config(format!(
                    "{}: chip size must be non-zero",
                    e.path.display()
                )));
            }
            let key = (e.path.as_path(), e.x, e.y, e.chip_size);
            if let Some(&prev) = seen.get(&key) {
                if prev != e.split {
                    return Err(Error::config(format!(
                        "{} at ({}, {}) is in both train and val splits",
                        e.path.display(),
                        e.x,
                        e.y
                    )));
                }
            }
            seen.insert(key, e.split);
        }
        Ok(())
    }

    /// Loads every window and degrades it by `scale`, in manifest order.
    pub fn pairs(&self, scale: usize) -> Result<Vec<ChipPair>> {
        let mut cache: HashMap<&Path, Tensor> = HashMap::new();
        let mut out = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            if !cache.contains_key(e.path.as_path()) {
                cache.insert(&e.path, load_png(&e.path)?);
            }
            let img = &cache[e.path.as_path()];
            let s = img.shape();
            if e.y + e.chip_size > s.height || e.x + e.chip_size > s.width {
                return Err(Error::Ingest {
                    path: e.path.clone(),
                    reason: format!(
                        "window at ({}, {}) size {} exceeds {s}",
                        e.x, e.y, e.chip_size
                    ),
                });
            }
            let hr = crop(img, e.y, e.x, e.chip_size);
            let id = format!("{}@{},{}", e.path.display(), e.x, e.y);
            out.push(ChipPair::from_hr(hr, scale, id, e.split)?);
        }
        Ok(out)
    }
}

/// Synthetic scenes, one chip each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSource {
    pub scene: SceneSpec,
    pub train: usize,
    pub val: usize,
}

impl Default for SyntheticSource {
    fn default() -> Self {
        SyntheticSource {
            scene: SceneSpec::default(),
            train: 256,
            val: 32,
        }
    }
}

impl SyntheticSource {
    /// Scene `i` uses seed `scene.seed + i`; training scenes come first.
    pub fn scene(&self, index: usize) -> SceneSpec {
        self.scene
            .with_seed(self.scene.seed.wrapping_add(index as u64))
    }

    pub fn split_of(&self, index: usize) -> Split {
        if index < self.train {
            Split::Train
        } else {
            Split::Val
        }
    }

    pub fn pairs(&self, scale: usize) -> Result<Vec<ChipPair>> {
        (0..self.train + self.val)
            .map(|i| {
                let spec = self.scene(i);
                let id = format!("synthetic:{}", spec.seed);
                ChipPair::from_hr(generate_scene(&spec)?, scale, id, self.split_of(i))
            })
            .collect()
    }

    /// Writes every scene as a PNG under `dir` plus a `manifest.jsonl` with relative paths.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = DatasetManifest::default();
        for i in 0..self.train + self.val {
            let spec = self.scene(i);
            let name = PathBuf::from(format!("scene_{i:05}.png"));
            save_png(&generate_scene(&spec)?, &dir.join(&name))?;
            manifest.entries.push(ManifestEntry {
                path: name,
                split: self.split_of(i),
                x: 0,
                y: 0,
                chip_size: spec.height.min(spec.width),
            });
        }
        let path = dir.join("manifest.jsonl");
        manifest.save(&path)?;
        Ok(path)
    }
}

/// Where training and validation chips come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Manifest(PathBuf),
    Synthetic(SyntheticSource),
}

impl DatasetSource {
    pub fn pairs(&self, scale: usize) -> Result<Vec<ChipPair>> {
        match self {
            DatasetSource::Manifest(p) => DatasetManifest::load(p)?.pairs(scale),
            DatasetSource::Synthetic(s) => s.pairs(scale),
        }
    }
}

/// Stacked `(B, C, H, W)` high- and low-resolution tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub hr: Tensor,
    pub lr: Tensor,
}

/// Shuffles `pairs` with `seed` and groups them into full batches; the last
/// partial batch is dropped.
pub fn make_batches(pairs: &[ChipPair], batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let shapes: HashSet<_> = pairs.iter().map(|p| (p.hr.shape(), p.lr.shape())).collect();
    if shapes.len() > 1 {
        return Err(Error::config(
            "all chips in a batch set must share one shape",
        ));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
        .chunks_exact(batch_size)
        .map(|idx| {
            let hr: Vec<_> = idx.iter().map(|&i| pairs[i].hr.clone()).collect();
            let lr: Vec<_> = idx.iter().map(|&i| pairs[i].lr.clone()).collect();
            Ok(Batch {
                hr: Tensor::stack(&hr)?,
                lr: Tensor::stack(&lr)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_source(train: usize, val: usize) -> SyntheticSource {
        SyntheticSource {
            scene: SceneSpec {
                height: 16,
                width: 16,
                channels: 1,
                ..Default::default()
            },
            train,
            val,
        }
    }

    #[test]
    fn chip_counts() {
        let img = Tensor::zeros(Shape::new(1, 3, 512, 512));
        assert_eq!(chip_image(&img, 256, 256).unwrap().len(), 4);
        let img = Tensor::zeros(Shape::new(1, 1, 600, 520));
        let chips = chip_image(&img, 256, 256).unwrap();
        assert_eq!(chips.len(), 4);
        assert_eq!(chips[3].0, 256);
        assert!(chip_image(&img, 700, 256).is_err());
    }

    #[test]
    fn chips_copy_the_right_window() {
        let img =
            Tensor::from_vec(Shape::new(1, 1, 4, 4), (0..16).map(|v| v as f32).collect()).unwrap();
        let chips = chip_image(&img, 2, 1).unwrap();
        assert_eq!(chips.len(), 9);
        let (y, x, c) = &chips[5];
        assert_eq!((*y, *x), (1, 2));
        assert_eq!(c.data(), &[6.0, 7.0, 10.0, 11.0]);
    }

    #[test]
    fn batch_counts_and_determinism() {
        let pairs = tiny_source(100, 0).pairs(4).unwrap();
        let a = make_batches(&pairs, 16, 9).unwrap();
        assert_eq!(a.len(), 6);
        assert_eq!(a[0].hr.shape(), Shape::new(16, 1, 16, 16));
        assert_eq!(a[0].lr.shape(), Shape::new(16, 1, 4, 4));
        assert_eq!(a, make_batches(&pairs, 16, 9).unwrap());
        assert_ne!(a, make_batches(&pairs, 16, 10).unwrap());
    }

    #[test]
    fn pairs_are_degraded_hr() {
        for p in tiny_source(3, 2).pairs(2).unwrap() {
            assert!(p.degraded);
            assert_eq!(p.lr, nn_downsample(&p.hr, 2).unwrap());
        }
    }

    #[test]
    fn synthetic_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let src = tiny_source(3, 2);
        let path = src.write(dir.path()).unwrap();
        let manifest = DatasetManifest::load(&path).unwrap();
        assert_eq!(manifest.entries.len(), 5);
        assert_eq!(
            manifest
                .entries
                .iter()
                .filter(|e| e.split == Split::Val)
                .count(),
            2
        );
        let from_disk = manifest.pairs(4).unwrap();
        let direct = src.pairs(4).unwrap();
        for (a, b) in from_disk.iter().zip(&direct) {
            // PNG quantizes to 8 bits
            assert!(a
                .hr
                .data()
                .iter()
                .zip(b.hr.data())
                .all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-6));
            assert_eq!(a.split, b.split);
        }
    }

    #[test]
    fn manifest_rejects_overlapping_splits_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = tiny_source(1, 0).write(dir.path()).unwrap();
        let line = fs::read_to_string(&path).unwrap();
        let dup = line.replace("\"train\"", "\"val\"");
        fs::write(&path, format!("{line}{dup}")).unwrap();
        assert!(matches!(
            DatasetManifest::load(&path),
            Err(Error::Config(_))
        ));
        fs::write(&path, line.replace("scene_00000", "nope")).unwrap();
        assert!(matches!(
            DatasetManifest::load(&path),
            Err(Error::Ingest { .. })
        ));
    }
}
