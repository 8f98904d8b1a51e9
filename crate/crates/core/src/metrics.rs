//! Peak signal-to-noise ratio and per-method reports.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reported in place of infinity for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Psnr {
    pub db: f64,
    /// True when the images were identical and `db` is [`PSNR_CAP_DB`].
    pub capped: bool,
}

/// PSNR with unit peak, MSE over every channel and pixel.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<Psnr> {
    psnr_with_peak(a, b, 1.0)
}

pub fn psnr_with_peak(a: &Tensor, b: &Tensor, peak: f64) -> Result<Psnr> {
    if a.shape() != b.shape() {
        return Err(Error::shape("psnr", a.shape(), b.shape()));
    }
    let sse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    let mse = sse / a.numel() as f64;
    if mse == 0.0 {
        return Ok(Psnr {
            db: PSNR_CAP_DB,
            capped: true,
        });
    }
    Ok(Psnr {
        db: 10.0 * (peak * peak / mse).log10(),
        capped: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Nearest,
    Bicubic,
    Model,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Nearest, Method::Bicubic, Method::Model];

    pub fn label(self) -> &'static str {
        match self {
            Method::Nearest => "nearest",
            Method::Bicubic => "bicubic",
            Method::Model => "model",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScores {
    pub method: Method,
    pub per_chip: Vec<Psnr>,
}

impl MethodScores {
    /// Mean over uncapped chips; `None` if every chip was capped or there are none.
    pub fn mean_db(&self) -> Option<f64> {
        let finite: Vec<f64> = self
            .per_chip
            .iter()
            .filter(|p| !p.capped)
            .map(|p| p.db)
            .collect();
        (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64)
    }

    pub fn capped_count(&self) -> usize {
        self.per_chip.iter().filter(|p| p.capped).count()
    }
}

/// Per-method PSNR over one validation set at one scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsnrReport {
    pub scale: usize,
    pub chip_ids: Vec<String>,
    pub methods: Vec<MethodScores>,
}

impl PsnrReport {
    pub fn scores(&self, method: Method) -> Option<&MethodScores> {
        self.methods.iter().find(|m| m.method == method)
    }

    pub fn mean_db(&self, method: Method) -> Option<f64> {
        self.scores(method).and_then(MethodScores::mean_db)
    }
}

impl fmt::Display for PsnrReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scale {}x, {} chips", self.scale, self.chip_ids.len())?;
        writeln!(f, "{:<10} {:>10} {:>8}", "method", "PSNR (dB)", "capped")?;
        for m in &self.methods {
            let mean = m
                .mean_db()
                .map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
            writeln!(
                f,
                "{:<10} {:>10} {:>8}",
                m.method.label(),
                mean,
                m.capped_count()
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{bicubic_upsample, generate_scene, nn_downsample, nn_upsample, SceneSpec};
    use crate::tensor::Shape;
    use proptest::prelude::*;

    #[test]
    fn reference_values() {
        let s = Shape::new(1, 1, 2, 2);
        let a = Tensor::zeros(s);
        assert_eq!(
            psnr(&a, &Tensor::full(s, 1.0)).unwrap(),
            Psnr {
                db: 0.0,
                capped: false
            }
        );
        assert_eq!(
            psnr(&a, &a).unwrap(),
            Psnr {
                db: 99.0,
                capped: true
            }
        );
        let b = Tensor::full(s, 0.1);
        assert!((psnr(&a, &b).unwrap().db - 20.0).abs() < 1e-6);
        assert!(psnr(&a, &Tensor::zeros(Shape::new(1, 1, 2, 3))).is_err());
    }

    #[test]
    fn mean_skips_capped() {
        let m = MethodScores {
            method: Method::Model,
            per_chip: vec![
                Psnr {
                    db: 20.0,
                    capped: false,
                },
                Psnr {
                    db: 99.0,
                    capped: true,
                },
                Psnr {
                    db: 30.0,
                    capped: false,
                },
            ],
        };
        assert_eq!(m.mean_db(), Some(25.0));
        assert_eq!(m.capped_count(), 1);
    }

    #[test]
    fn bicubic_beats_nearest_on_scenes() {
        let n = 40;
        let wins = (0..n)
            .filter(|&i| {
                let hr = generate_scene(&SceneSpec {
                    seed: 1000 + i,
                    ..Default::default()
                })
                .unwrap();
                let lr = nn_downsample(&hr, 4).unwrap();
                let nn = psnr(&nn_upsample(&lr, 4).unwrap(), &hr).unwrap().db;
                let bc = psnr(&bicubic_upsample(&lr, 4).unwrap(), &hr).unwrap().db;
                bc >= nn
            })
            .count();
        assert!(wins * 10 >= n as usize * 9, "bicubic won {wins}/{n}");
    }

    proptest! {
        #[test]
        fn symmetric(a in proptest::collection::vec(0.0f32..=1.0, 12), b in proptest::collection::vec(0.0f32..=1.0, 12)) {
            let s = Shape::new(1, 3, 2, 2);
            let ta = Tensor::from_vec(s, a).unwrap();
            let tb = Tensor::from_vec(s, b).unwrap();
            prop_assert_eq!(psnr(&ta, &tb).unwrap(), psnr(&tb, &ta).unwrap());
        }

        #[test]
        fn report_mean_is_arithmetic_mean(dbs in proptest::collection::vec(0.0f64..60.0, 1..50)) {
            let m = MethodScores { method: Method::Bicubic, per_chip: dbs.iter().map(|&db| Psnr { db, capped: false }).collect() };
            let expect = dbs.iter().sum::<f64>() / dbs.len() as f64;
            prop_assert!((m.mean_db().unwrap() - expect).abs() < 1e-9);
        }
    }
}
