//! Deterministic synthetic overhead scenes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Building-like filled rectangles.
    pub rectangles: usize,
    /// Side length range in pixels.
    pub rectangle_size: (f64, f64),
    /// Fraction of rectangles drawn at a random angle.
    pub rotated_fraction: f64,
    /// Road-like long thin bars.
    pub bars: usize,
    pub bar_width: (f64, f64),
    /// Vehicle-like small ellipses.
    pub blobs: usize,
    pub blob_radius: (f64, f64),
    /// Peak deviation of the low-frequency background from its mean level.
    pub background_amplitude: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            height: 64,
            width: 64,
            channels: 3,
            rectangles: 6,
            rectangle_size: (6.0, 20.0),
            rotated_fraction: 0.5,
            bars: 2,
            bar_width: (2.0, 4.0),
            blobs: 8,
            blob_radius: (1.0, 2.5),
            background_amplitude: 0.15,
        }
    }
}

const BACKGROUND_LEVEL: f64 = 0.45;

impl SceneSpec {
    pub fn with_seed(&self, seed: u64) -> Self {
        SceneSpec {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [self.rectangle_size, self.bar_width, self.blob_radius];
        if self.height == 0 || self.width == 0 {
            return Err(Error::config("scene size must be non-zero"));
        }
        if !matches!(self.channels, 1 | 3) {
            return Err(Error::config(format!(
                "scene channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        if ranges.iter().any(|&(lo, hi)| !(lo > 0.0 && lo <= hi)) {
            return Err(Error::config(
                "scene size ranges must satisfy 0 < min <= max",
            ));
        }
        if !(0.0..=BACKGROUND_LEVEL).contains(&self.background_amplitude) {
            return Err(Error::config(format!(
                "background amplitude must be in [0, {BACKGROUND_LEVEL}]"
            )));
        }
        if !(0.0..=1.0).contains(&self.rotated_fraction) {
            return Err(Error::config("rotated fraction must be in [0, 1]"));
        }
        Ok(())
    }
}

fn sample(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn colour(rng: &mut ChaCha8Rng, channels: usize, lo: f64, hi: f64) -> Vec<f64> {
    let base = rng.random_range(lo..hi);
    (0..channels)
        .map(|_| {
            if channels == 1 {
                base
            } else {
                (base + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0)
            }
        })
        .collect()
}

struct Canvas {
    h: usize,
    w: usize,
    c: usize,
    px: Vec<f64>,
}

impl Canvas {
    /// Fills every pixel whose centre lies inside the oriented box.
    fn fill_box(&mut self, cy: f64, cx: f64, half_h: f64, half_w: f64, angle: f64, col: &[f64]) {
        let (sin, cos) = angle.sin_cos();
        let reach = half_h.hypot(half_w);
        let y0 = (cy - reach).floor().max(0.0) as usize;
        let x0 = (cx - reach).floor().max(0.0) as usize;
        let y1 = ((cy + reach).ceil() as usize).min(self.h);
        let x1 = ((cx + reach).ceil() as usize).min(self.w);
        for y in y0..y1 {
            for x in x0..x1 {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                if u.abs() <= half_w && v.abs() <= half_h {
                    self.set(y, x, col);
                }
            }
        }
    }

    fn fill_ellipse(&mut self, cy: f64, cx: f64, ry: f64, rx: f64, col: &[f64]) {
        let y0 = (cy - ry).floor().max(0.0) as usize;
        let x0 = (cx - rx).floor().max(0.0) as usize;
        let y1 = ((cy + ry).ceil() as usize).min(self.h);
        let x1 = ((cx + rx).ceil() as usize).min(self.w);
        for y in y0..y1 {
            for x in x0..x1 {
                let (dy, dx) = ((y as f64 + 0.5 - cy) / ry, (x as f64 + 0.5 - cx) / rx);
                if dy * dy + dx * dx <= 1.0 {
                    self.set(y, x, col);
                }
            }
        }
    }

    fn set(&mut self, y: usize, x: usize, col: &[f64]) {
        for (c, &v) in col.iter().enumerate().take(self.c) {
            self.px[(c * self.h + y) * self.w + x] = v;
        }
    }
}

/// Renders a `(1, C, H, W)` scene in `[0, 1]`. Identical specs give identical images.
pub fn generate_scene(spec: &SceneSpec) -> Result<Tensor> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w, c) = (spec.height, spec.width, spec.channels);

    // sum of a few random low-frequency waves, normalized to the amplitude
    let waves: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            let fy = rng.random_range(0.5..2.5) / h as f64;
            let fx = rng.random_range(0.5..2.5) / w as f64;
            (fy, fx, rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    // waves take three quarters of the amplitude budget, a per-channel tint the rest
    let a = spec.background_amplitude;
    let tint: Vec<f64> = (0..c)
        .map(|_| {
            if c == 1 || a == 0.0 {
                0.0
            } else {
                rng.random_range(-a..a) / 4.0
            }
        })
        .collect();
    let amp = 0.75 * a / waves.len() as f64;
    let mut px = vec![0.0; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let n: f64 = waves
                .iter()
                .map(|&(fy, fx, ph)| {
                    (std::f64::consts::TAU * (fy * y as f64 + fx * x as f64) + ph).sin()
                })
                .sum();
            for (ch, t) in tint.iter().enumerate() {
                px[(ch * h + y) * w + x] = BACKGROUND_LEVEL + amp * n + t;
            }
        }
    }
    let mut canvas = Canvas { h, w, c, px };

    for _ in 0..spec.bars {
        let width = sample(&mut rng, spec.bar_width);
        let length = (h.max(w) as f64) * rng.random_range(0.6..1.5);
        let (cy, cx) = (
            rng.random_range(0.0..h as f64),
            rng.random_range(0.0..w as f64),
        );
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let col = colour(&mut rng, c, 0.15, 0.3);
        canvas.fill_box(cy, cx, width / 2.0, length / 2.0, angle, &col);
    }
    for _ in 0..spec.rectangles {
        let bh = sample(&mut rng, spec.rectangle_size);
        let bw = sample(&mut rng, spec.rectangle_size);
        let (cy, cx) = (
            rng.random_range(0.0..h as f64),
            rng.random_range(0.0..w as f64),
        );
        let angle = if rng.random_bool(spec.rotated_fraction) {
            rng.random_range(0.0..std::f64::consts::FRAC_PI_2)
        } else {
            0.0
        };
        let col = colour(&mut rng, c, 0.35, 0.95);
        canvas.fill_box(cy, cx, bh / 2.0, bw / 2.0, angle, &col);
    }
    for _ in 0..spec.blobs {
        let ry = sample(&mut rng, spec.blob_radius);
        let rx = sample(&mut rng, spec.blob_radius);
        let (cy, cx) = (
            rng.random_range(0.0..h as f64),
            rng.random_range(0.0..w as f64),
        );
        let col = colour(&mut rng, c, 0.05, 1.0);
        canvas.fill_ellipse(cy, cx, ry, rx, &col);
    }

    let data = canvas
        .px
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0) as f32)
        .collect();
    Tensor::from_vec(Shape::new(1, c, h, w), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_spec_same_image() {
        let spec = SceneSpec {
            seed: 42,
            ..Default::default()
        };
        assert_eq!(
            generate_scene(&spec).unwrap(),
            generate_scene(&spec).unwrap()
        );
        assert_ne!(
            generate_scene(&spec).unwrap(),
            generate_scene(&spec.with_seed(43)).unwrap()
        );
    }

    #[test]
    fn empty_scene_is_background() {
        for channels in [1, 3] {
            let spec = SceneSpec {
                rectangles: 0,
                bars: 0,
                blobs: 0,
                channels,
                ..Default::default()
            };
            let img = generate_scene(&spec).unwrap();
            let a = spec.background_amplitude as f32 + 1e-6;
            assert!(img
                .data()
                .iter()
                .all(|&v| (v - BACKGROUND_LEVEL as f32).abs() <= a));
        }
    }

    #[test]
    fn default_mean_regression() {
        let img = generate_scene(&SceneSpec::default()).unwrap();
        let mean = img.data().iter().map(|&v| f64::from(v)).sum::<f64>() / img.numel() as f64;
        assert!((0.2..=0.8).contains(&mean), "mean {mean}");
        assert!((mean - DEFAULT_MEAN).abs() < 1e-6, "mean {mean}");
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    const DEFAULT_MEAN: f64 = 0.463_952_8;

    #[test]
    fn grayscale_shape() {
        let spec = SceneSpec {
            channels: 1,
            height: 32,
            width: 48,
            ..Default::default()
        };
        assert_eq!(
            generate_scene(&spec).unwrap().shape(),
            Shape::new(1, 1, 32, 48)
        );
    }
}
