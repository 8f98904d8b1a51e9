//! PSNR evaluation, the scale study and single-image inference.

use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::data::{
    bicubic_upsample, load_png, nn_downsample, nn_upsample, save_png, ChipPair, Split,
};
use crate::error::{Error, Result};
use crate::metrics::{psnr, Method, MethodScores, PsnrReport};
use crate::models::Generator;
use crate::nn::Mode;
use crate::tensor::{Graph, Shape, Tensor};

/// Pixel columns between panels of the comparison grid.
pub const GRID_SEPARATOR: usize = 4;

/// Rebuilds the generator stored in a checkpoint.
pub fn generator_from_checkpoint(ckpt: &Checkpoint) -> Result<Generator> {
    // weights are overwritten below, so the init rng is irrelevant
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut gen = Generator::new(&ckpt.generator, &mut rng)?;
    ckpt.restore(&mut gen)?;
    Ok(gen)
}

/// Super-resolves `lr` with eval-mode batch norm. The generator is not modified.
pub fn upscale(generator: &Generator, lr: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(lr.clone());
    let y = generator.clone().forward(&mut g, x, Mode::Eval)?;
    Ok(g.value(y).clone())
}

/// Scores nearest, bicubic and the model on every validation pair.
pub fn evaluate(generator: &Generator, pairs: &[ChipPair], scale: usize) -> Result<PsnrReport> {
    if generator.spec().scale != scale {
        return Err(Error::config(format!(
            "model is for scale {}, evaluation asks for {scale}",
            generator.spec().scale
        )));
    }
    let val: Vec<&ChipPair> = pairs.iter().filter(|p| p.split == Split::Val).collect();
    if val.is_empty() {
        return Err(Error::config("dataset has no validation chips"));
    }
    let mut methods: Vec<MethodScores> = Method::ALL
        .iter()
        .map(|&method| MethodScores {
            method,
            per_chip: Vec::new(),
        })
        .collect();
    for p in &val {
        if p.scale != scale {
            return Err(Error::config(format!(
                "chip `{}` was degraded by {}, not {scale}",
                p.source_id, p.scale
            )));
        }
        let outputs = [
            nn_upsample(&p.lr, scale)?,
            bicubic_upsample(&p.lr, scale)?,
            upscale(generator, &p.lr)?,
        ];
        for (m, out) in methods.iter_mut().zip(&outputs) {
            m.per_chip.push(psnr(out, &p.hr)?);
        }
    }
    Ok(PsnrReport {
        scale,
        chip_ids: val.iter().map(|p| p.source_id.clone()).collect(),
        methods,
    })
}

/// FNV-1a over shapes and pixel bits of an image set.
pub fn hr_digest(images: &[Tensor]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for t in images {
        for d in t.shape().dims() {
            eat(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            eat(&v.to_bits().to_le_bytes());
        }
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleStudy {
    /// Digest of the high-resolution set every scale was degraded from.
    pub hr_digest: u64,
    pub reports: Vec<PsnrReport>,
}

/// Degrades the same high-resolution chips by each requested scale and scores
/// the matching model. Scales without a model are skipped with a warning.
pub fn scale_study(scales: &[usize], models: &[&Generator], hr: &[Tensor]) -> Result<ScaleStudy> {
    if let Some(&s) = scales.iter().find(|&&s| s < 2) {
        return Err(Error::config(format!(
            "scale study needs factors >= 2, got {s}"
        )));
    }
    let digest = hr_digest(hr);
    let mut reports = Vec::new();
    for &s in scales {
        let Some(gen) = models.iter().find(|g| g.spec().scale == s) else {
            log::warn!("no model for scale {s}, skipping");
            continue;
        };
        let pairs = hr
            .iter()
            .enumerate()
            .map(|(i, t)| ChipPair::from_hr(t.clone(), s, format!("hr{i}"), Split::Val))
            .collect::<Result<Vec<_>>>()?;
        if hr_digest(&pairs.iter().map(|p| p.hr.clone()).collect::<Vec<_>>()) != digest {
            return Err(Error::usage(
                "high-resolution set changed during the scale study",
            ));
        }
        reports.push(evaluate(gen, &pairs, s)?);
    }
    Ok(ScaleStudy {
        hr_digest: digest,
        reports,
    })
}

/// Places images left to right with white separator columns.
pub fn side_by_side(panels: &[Tensor], separator: usize) -> Result<Tensor> {
    let first = panels
        .first()
        .ok_or_else(|| Error::usage("grid needs at least one panel"))?
        .shape();
    if let Some(p) = panels.iter().find(|p| p.shape() != first) {
        return Err(Error::shape("grid", first, p.shape()));
    }
    let n = panels.len();
    let width = n * first.width + (n - 1) * separator;
    let shape = Shape { width, ..first };
    let mut out = vec![1.0f32; shape.numel()];
    for (k, p) in panels.iter().enumerate() {
        let x0 = k * (first.width + separator);
        for (pi, plane) in p.data().chunks_exact(first.plane()).enumerate() {
            for y in 0..first.height {
                let dst = pi * shape.plane() + y * width + x0;
                out[dst..dst + first.width]
                    .copy_from_slice(&plane[y * first.width..][..first.width]);
            }
        }
    }
    Tensor::from_vec(shape, out)
}

/// Super-resolves the PNG at `input` into `output`. With `grid`, also writes
/// nearest | bicubic | model side by side.
pub fn infer(
    generator: &Generator,
    input: &Path,
    output: &Path,
    grid: Option<&Path>,
) -> Result<Tensor> {
    let lr = load_png(input)?;
    let s = generator.spec().scale;
    let sr = upscale(generator, &lr)?;
    save_png(&sr, output)?;
    if let Some(grid_path) = grid {
        let panels = [nn_upsample(&lr, s)?, bicubic_upsample(&lr, s)?, sr.clone()];
        save_png(&side_by_side(&panels, GRID_SEPARATOR)?, grid_path)?;
    }
    Ok(sr)
}

/// Decimates a high-resolution PNG, for preparing inference inputs.
pub fn degrade_png(input: &Path, output: &Path, scale: usize) -> Result<()> {
    save_png(&nn_downsample(&load_png(input)?, scale)?, output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, SceneSpec};
    use crate::models::GeneratorSpec;
    use crate::nn::Module;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_gen(scale: usize) -> Generator {
        let spec = GeneratorSpec {
            scale,
            image_channels: 1,
            stem_channels: 4,
            growth_rate: 2,
            bottleneck_width: 4,
            units_per_block: 1,
            ..Default::default()
        };
        Generator::new(&spec, &mut ChaCha8Rng::seed_from_u64(scale as u64)).unwrap()
    }

    fn scenes(n: u64) -> Vec<Tensor> {
        (0..n)
            .map(|i| {
                generate_scene(&SceneSpec {
                    seed: i,
                    height: 16,
                    width: 16,
                    channels: 1,
                    ..Default::default()
                })
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn report_is_well_formed_and_pure() {
        let gen = small_gen(4);
        let before: Vec<_> = gen.buffers().iter().map(|b| b.value.clone()).collect();
        let pairs: Vec<_> = scenes(3)
            .into_iter()
            .map(|h| ChipPair::from_hr(h, 4, "x", Split::Val).unwrap())
            .collect();
        let r = evaluate(&gen, &pairs, 4).unwrap();
        assert_eq!(r.methods.len(), 3);
        assert!(r.methods.iter().all(|m| m.per_chip.len() == 3));
        let nearest: f64 = pairs
            .iter()
            .map(|p| psnr(&nn_upsample(&p.lr, 4).unwrap(), &p.hr).unwrap().db)
            .sum::<f64>()
            / 3.0;
        assert!((r.mean_db(Method::Nearest).unwrap() - nearest).abs() < 1e-12);
        let after: Vec<_> = gen.buffers().iter().map(|b| b.value.clone()).collect();
        assert_eq!(before, after);
        assert_eq!(evaluate(&gen, &pairs, 4).unwrap(), r);
        assert!(r.to_string().contains("bicubic"));
        assert!(evaluate(&gen, &pairs, 2).is_err());
    }

    #[test]
    fn scale_study_guards() {
        let (g2, g4) = (small_gen(2), small_gen(4));
        let hr = scenes(2);
        assert!(scale_study(&[1, 2], &[&g2], &hr).is_err());
        let study = scale_study(&[2, 4, 8], &[&g2, &g4], &hr).unwrap();
        assert_eq!(
            study.reports.iter().map(|r| r.scale).collect::<Vec<_>>(),
            vec![2, 4]
        );
        assert_eq!(study.hr_digest, hr_digest(&hr));
    }

    #[test]
    fn inference_shapes_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let gen = small_gen(4);
        let input = dir.path().join("in.png");
        save_png(&scenes(1)[0], &input).unwrap();
        let (a, b, grid) = (
            dir.path().join("a.png"),
            dir.path().join("b.png"),
            dir.path().join("grid.png"),
        );
        let sr = infer(&gen, &input, &a, Some(&grid)).unwrap();
        infer(&gen, &input, &b, None).unwrap();
        assert_eq!(sr.shape(), Shape::new(1, 1, 64, 64));
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let g = load_png(&grid).unwrap();
        assert_eq!(g.shape().width, 3 * 64 + 2 * GRID_SEPARATOR);
        assert_eq!(g.shape().height, 64);
    }
}
