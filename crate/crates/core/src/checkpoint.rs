//! Little-endian binary checkpoint format.
//!
//! Layout: magic `DSRC`, `u32` version, then scale, epoch, global step, the
//! generator and discriminator specs, named `f32` tensors, optimizer moments
//! and the training rng state. Strings are `u32`-length-prefixed UTF-8.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{DiscriminatorSpec, GeneratorSpec};
use crate::nn::{AdamConfig, Module, Moments};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"DSRC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub name: String,
    pub config: AdamConfig,
    pub step: u64,
    pub moments: Vec<Moments<f32>>,
}

/// ChaCha8 position: seed, stream and word offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub scale: usize,
    /// Completed epochs.
    pub epoch: u32,
    pub global_step: u64,
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
    /// Parameters and batch-norm buffers of both networks.
    pub tensors: Vec<(String, Tensor)>,
    pub optimizers: Vec<OptimizerState>,
    pub rng: RngState,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0
            .extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        self.u32(v.len());
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end =
            end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
    fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = self.u32()?;
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Checkpoint("length overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION as usize);
        w.u32(self.scale);
        w.u32(self.epoch as usize);
        w.u64(self.global_step);

        let g = &self.generator;
        for v in [
            g.scale,
            g.image_channels,
            g.stem_channels,
            g.growth_rate,
            g.bottleneck_width,
            g.units_per_block,
            g.blocks_per_stage,
        ] {
            w.u32(v);
        }
        w.f64(g.compression);
        w.u8(u8::from(g.dense_connectivity));

        let d = &self.discriminator;
        w.u32(d.image_channels);
        w.u32(d.channels.len());
        d.channels.iter().for_each(|&c| w.u32(c));
        w.u8(u8::from(d.leaky_slope.is_some()));
        w.f64(d.leaky_slope.unwrap_or(0.0));

        w.u32(self.tensors.len());
        for (name, t) in &self.tensors {
            w.str(name);
            w.u32(4);
            t.shape().dims().iter().for_each(|&n| w.u32(n));
            w.f32s(t.data());
        }

        w.u32(self.optimizers.len());
        for o in &self.optimizers {
            w.str(&o.name);
            let c = o.config;
            for v in [c.learning_rate, c.beta1, c.beta2, c.eps] {
                w.f64(v);
            }
            w.u64(o.step);
            w.u32(o.moments.len());
            for m in &o.moments {
                w.str(&m.name);
                w.f32s(&m.first);
                w.f32s(&m.second);
            }
        }

        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let scale = r.u32()?;
        let epoch = r.u32()? as u32;
        let global_step = r.u64()?;

        let generator = GeneratorSpec {
            scale: r.u32()?,
            image_channels: r.u32()?,
            stem_channels: r.u32()?,
            growth_rate: r.u32()?,
            bottleneck_width: r.u32()?,
            units_per_block: r.u32()?,
            blocks_per_stage: r.u32()?,
            compression: r.f64()?,
            dense_connectivity: r.u8()? != 0,
        };
        let image_channels = r.u32()?;
        let n = r.u32()?;
        let channels = (0..n).map(|_| r.u32()).collect::<Result<_>>()?;
        let leaky = r.u8()? != 0;
        let slope = r.f64()?;
        let discriminator = DiscriminatorSpec {
            image_channels,
            channels,
            leaky_slope: leaky.then_some(slope),
        };

        let n = r.u32()?;
        let mut tensors = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name = r.str()?;
            let rank = r.u32()?;
            if rank != 4 {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has rank {rank}, expected 4"
                )));
            }
            let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
            let shape =
                Shape::from_dims(dims).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
            let data = r.f32s()?;
            let t = Tensor::from_vec(shape, data)
                .map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
            tensors.push((name, t));
        }

        let n = r.u32()?;
        let mut optimizers = Vec::with_capacity(n.min(16));
        for _ in 0..n {
            let name = r.str()?;
            let config = AdamConfig {
                learning_rate: r.f64()?,
                beta1: r.f64()?,
                beta2: r.f64()?,
                eps: r.f64()?,
            };
            let step = r.u64()?;
            let m = r.u32()?;
            let mut moments = Vec::with_capacity(m.min(4096));
            for _ in 0..m {
                let name = r.str()?;
                let first = r.f32s()?;
                let second = r.f32s()?;
                if first.len() != second.len() {
                    return Err(Error::Checkpoint(format!(
                        "moments of `{name}` differ in length"
                    )));
                }
                moments.push(Moments {
                    name,
                    first,
                    second,
                });
            }
            optimizers.push(OptimizerState {
                name,
                config,
                step,
                moments,
            });
        }

        let rng = RngState {
            seed: r.array()?,
            stream: r.u64()?,
            word_pos: u128::from_le_bytes(r.array()?),
        };
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                buf.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            scale,
            epoch,
            global_step,
            generator,
            discriminator,
            tensors,
            optimizers,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    pub fn optimizer(&self, name: &str) -> Result<&OptimizerState> {
        self.optimizers
            .iter()
            .find(|o| o.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("no optimizer state named `{name}`")))
    }

    /// Copies stored values into `module`'s parameters and buffers by name.
    pub fn restore(&self, module: &mut dyn Module<f32>) -> Result<()> {
        let by_name: HashMap<&str, &Tensor> =
            self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let lookup = |name: &str, shape: Shape| -> Result<Tensor> {
            let t = by_name
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {}, model expects {shape}",
                    t.shape()
                )));
            }
            Ok((*t).clone())
        };
        for p in module.params_mut() {
            p.value = lookup(&p.name, p.shape())?;
        }
        for b in module.buffers_mut() {
            b.value = lookup(&b.name, b.value.shape())?;
        }
        Ok(())
    }
}

/// Parameters followed by buffers, in module order.
pub fn module_tensors(module: &dyn Module<f32>) -> Vec<(String, Tensor)> {
    let params = module
        .params()
        .into_iter()
        .map(|p| (p.name.clone(), p.value.clone()));
    let buffers = module
        .buffers()
        .into_iter()
        .map(|b| (b.name.clone(), b.value.clone()));
    params.chain(buffers).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            scale: 4,
            epoch: 3,
            global_step: 57,
            generator: GeneratorSpec {
                compression: 0.5,
                dense_connectivity: false,
                ..Default::default()
            },
            discriminator: DiscriminatorSpec {
                leaky_slope: Some(0.2),
                ..Default::default()
            },
            tensors: vec![
                (
                    "gen.a".into(),
                    Tensor::from_vec(
                        Shape::new(2, 1, 1, 3),
                        vec![1.0, -2.5, 3.25, 0.0, f32::MIN, 7.0],
                    )
                    .unwrap(),
                ),
                ("disc.b".into(), Tensor::vector(vec![0.125])),
            ],
            optimizers: vec![OptimizerState {
                name: "gen".into(),
                config: AdamConfig::default(),
                step: 9,
                moments: vec![Moments {
                    name: "gen.a".into(),
                    first: vec![0.5; 6],
                    second: vec![0.25; 6],
                }],
            }],
            rng: RngState {
                seed: [7; 32],
                stream: 3,
                word_pos: 1 << 70,
            },
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], b"DSRC");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Checkpoint(_))
        ));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
        let mut future = bytes;
        future[4] = 2;
        assert!(Checkpoint::from_bytes(&future)
            .unwrap_err()
            .to_string()
            .contains("version"));
    }
}
