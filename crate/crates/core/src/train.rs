//! Alternating discriminator/generator optimization.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{module_tensors, Checkpoint, OptimizerState, RngState};
use crate::config::TrainConfig;
use crate::data::{make_batches, Batch, ChipPair, Split};
use crate::error::{Error, Result};
use crate::loss::{discriminator_loss, generator_loss, LossReport};
use crate::models::{
    Discriminator, FeatureExtractor, FixedFeatureExtractor, Generator, DISCRIMINATOR_PREFIX,
    GENERATOR_PREFIX,
};
use crate::nn::{Adam, Mode, Module};
use crate::tensor::Graph;

/// One line of the per-step metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u32,
    pub alpha: f64,
    pub d_loss: f64,
    pub g_total: f64,
    pub g_adv: f64,
    pub g_content: f64,
    pub g_fm: f64,
}

impl StepRecord {
    fn new(step: u64, epoch: u32, d_loss: f64, r: &LossReport) -> Self {
        StepRecord {
            step,
            epoch,
            alpha: r.alpha_used,
            d_loss,
            g_total: r.total,
            g_adv: r.adversarial,
            g_content: r.content,
            g_fm: r.feature_matching,
        }
    }
}

/// Both networks, their optimizers and the data-order rng.
pub struct Trainer {
    config: TrainConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    gen_opt: Adam,
    disc_opt: Adam,
    extractor: Option<FixedFeatureExtractor>,
    rng: ChaCha8Rng,
    epoch: u32,
    global_step: u64,
}

const GEN_OPT: &str = "gen";
const DISC_OPT: &str = "disc";

fn prefix(p: &str) -> String {
    format!("{p}.")
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let generator = Generator::new(&config.generator_spec(), &mut rng)?;
        let discriminator = Discriminator::new(&config.discriminator, &mut rng)?;
        let extractor = if config.beta1 > 0.0 {
            Some(FixedFeatureExtractor::new(&config.feature_extractor)?)
        } else {
            None
        };
        Ok(Trainer {
            gen_opt: Adam::new(config.generator_adam()),
            disc_opt: Adam::new(config.discriminator_adam()),
            config,
            generator,
            discriminator,
            extractor,
            rng,
            epoch: 0,
            global_step: 0,
        })
    }

    /// Resumes from `ckpt`. The architecture in `config` must match the checkpoint.
    pub fn from_checkpoint(config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(config)?;
        if ckpt.scale != t.config.scale {
            return Err(Error::config(format!(
                "checkpoint is for scale {}, config asks for {}",
                ckpt.scale, t.config.scale
            )));
        }
        if ckpt.generator != t.config.generator_spec()
            || ckpt.discriminator != t.config.discriminator
        {
            return Err(Error::config(
                "checkpoint architecture differs from the configuration",
            ));
        }
        ckpt.restore(&mut t.generator)?;
        ckpt.restore(&mut t.discriminator)?;
        for (name, opt) in [(GEN_OPT, &mut t.gen_opt), (DISC_OPT, &mut t.disc_opt)] {
            let s = ckpt.optimizer(name)?;
            *opt = Adam::from_state(s.config, s.step, s.moments.clone());
        }
        let mut rng = ChaCha8Rng::from_seed(ckpt.rng.seed);
        rng.set_stream(ckpt.rng.stream);
        rng.set_word_pos(ckpt.rng.word_pos);
        t.rng = rng;
        t.epoch = ckpt.epoch;
        t.global_step = ckpt.global_step;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Completed epochs.
    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors = module_tensors(&self.generator);
        tensors.extend(module_tensors(&self.discriminator));
        let opt = |name: &str, o: &Adam| OptimizerState {
            name: name.into(),
            config: o.config,
            step: o.step_count(),
            moments: o.moments().to_vec(),
        };
        Checkpoint {
            scale: self.config.scale,
            epoch: self.epoch,
            global_step: self.global_step,
            generator: self.generator.spec().clone(),
            discriminator: self.discriminator.spec().clone(),
            tensors,
            optimizers: vec![opt(GEN_OPT, &self.gen_opt), opt(DISC_OPT, &self.disc_opt)],
            rng: RngState {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos(),
            },
        }
    }

    /// Updates the discriminator once on `batch`; the generator is untouched.
    /// Returns the discriminator loss.
    pub fn discriminator_step(&mut self, batch: &Batch) -> Result<f64> {
        let mut g = Graph::new();
        g.freeze_prefix(prefix(GENERATOR_PREFIX));
        let lr = g.constant(batch.lr.clone());
        let hr = g.constant(batch.hr.clone());
        // a throwaway copy keeps the generator's running statistics fixed
        let fake = self.generator.clone().forward(&mut g, lr, Mode::Train)?;
        let d_real = self.discriminator.forward(&mut g, hr, Mode::Train)?;
        let d_fake = self.discriminator.forward(&mut g, fake, Mode::Train)?;
        let loss = discriminator_loss(&mut g, d_real, d_fake);
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.global_step,
                term: "d_loss",
            });
        }
        let grads = g.backward(loss)?;
        self.discriminator.zero_grads();
        self.discriminator.accumulate_grads(&grads);
        self.disc_opt.step(self.discriminator.params_mut())?;
        Ok(value)
    }

    /// Updates the generator once on `batch` with the current epoch's alpha.
    pub fn generator_step(&mut self, batch: &Batch) -> Result<LossReport> {
        let alpha = self.config.alpha_schedule().at(self.epoch);
        let mut g = Graph::new();
        g.freeze_prefix(prefix(DISCRIMINATOR_PREFIX));
        let lr = g.constant(batch.lr.clone());
        let hr = g.constant(batch.hr.clone());
        let fake = self.generator.forward(&mut g, lr, Mode::Train)?;
        let d_fake = self
            .discriminator
            .clone()
            .forward(&mut g, fake, Mode::Train)?;
        let extractor = self
            .extractor
            .as_ref()
            .map(|e| e as &dyn FeatureExtractor<f32>);
        let out = generator_loss(
            &mut g,
            d_fake,
            fake,
            hr,
            extractor,
            &self.config.loss_weights(),
            alpha,
        )?;
        let r = out.report;
        for (term, v) in [
            ("g_adv", r.adversarial),
            ("g_content", r.content),
            ("g_fm", r.feature_matching),
            ("g_total", r.total),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: self.global_step,
                    term,
                });
            }
        }
        let grads = g.backward(out.total)?;
        self.generator.zero_grads();
        self.generator.accumulate_grads(&grads);
        self.gen_opt.step(self.generator.params_mut())?;
        Ok(r)
    }

    /// One discriminator update followed by one generator update.
    pub fn step(&mut self, batch: &Batch) -> Result<StepRecord> {
        let d_loss = self.discriminator_step(batch)?;
        let report = self.generator_step(batch)?;
        let rec = StepRecord::new(self.global_step, self.epoch, d_loss, &report);
        self.global_step += 1;
        Ok(rec)
    }

    fn steps_left(&self) -> Option<u64> {
        self.config
            .max_generator_steps
            .map(|m| m.saturating_sub(self.global_step))
    }

    /// Runs one pass over the training chips. Returns `false` if the step
    /// budget ran out before the pass finished.
    pub fn run_epoch(
        &mut self,
        train: &[ChipPair],
        on_step: &mut dyn FnMut(&StepRecord),
    ) -> Result<bool> {
        let seed = self.rng.random::<u64>();
        let batches = make_batches(train, self.config.batch_size, seed)?;
        if batches.is_empty() {
            return Err(Error::config(format!(
                "{} training chips cannot fill one batch of {}",
                train.len(),
                self.config.batch_size
            )));
        }
        for batch in &batches {
            if self.steps_left() == Some(0) {
                return Ok(false);
            }
            let rec = self.step(batch)?;
            on_step(&rec);
        }
        self.epoch += 1;
        Ok(true)
    }

    /// Trains until `config.epochs` epochs or the step budget are done.
    ///
    /// With an output directory set, writes `metrics.jsonl`, periodic
    /// `epoch_NNNN.ckpt` files and `final.ckpt`; a non-finite loss leaves
    /// `emergency.ckpt` before the error is returned.
    pub fn train(
        &mut self,
        pairs: &[ChipPair],
        on_step: &mut dyn FnMut(&StepRecord),
    ) -> Result<TrainSummary> {
        let train: Vec<ChipPair> = pairs
            .iter()
            .filter(|p| p.split == Split::Train)
            .cloned()
            .collect();
        if train.is_empty() {
            return Err(Error::config("dataset has no training chips"));
        }
        let out_dir = self.config.output_dir.clone();
        let mut log = match &out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("metrics.jsonl");
                let file = fs::OpenOptions::new().create(true).append(true).open(&path);
                Some((BufWriter::new(file.map_err(|e| Error::io(&path, e))?), path))
            }
            None => None,
        };
        let mut checkpoints = Vec::new();
        let mut last = None;
        while self.epoch < self.config.epochs {
            let mut log_err = None;
            let result = self.run_epoch(&train, &mut |rec| {
                if let Some((w, path)) = &mut log {
                    let line = serde_json::to_string(rec).expect("record serializes");
                    if let Err(e) = writeln!(w, "{line}") {
                        log_err.get_or_insert_with(|| Error::io(path.as_path(), e));
                    }
                }
                last = Some(*rec);
                on_step(rec);
            });
            if let Some(e) = log_err {
                return Err(e);
            }
            let finished = match result {
                Err(e @ Error::NonFiniteLoss { .. }) => {
                    if let Some(dir) = &out_dir {
                        let p = dir.join("emergency.ckpt");
                        self.checkpoint().save(&p)?;
                        log::error!("{e}; emergency checkpoint written to {}", p.display());
                    }
                    return Err(e);
                }
                other => other?,
            };
            if !finished {
                break;
            }
            log::info!("epoch {} done at step {}", self.epoch, self.global_step);
            let every = self.config.checkpoint_every;
            if let Some(dir) = &out_dir {
                if every > 0 && self.epoch.is_multiple_of(every) {
                    checkpoints.push(self.save_to(dir, &format!("epoch_{:04}.ckpt", self.epoch))?);
                }
            }
        }
        if let Some((w, path)) = &mut log {
            w.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        let final_checkpoint = match &out_dir {
            Some(dir) => Some(self.save_to(dir, "final.ckpt")?),
            None => None,
        };
        Ok(TrainSummary {
            epochs: self.epoch,
            steps: self.global_step,
            last,
            checkpoints,
            final_checkpoint,
        })
    }

    fn save_to(&self, dir: &Path, name: &str) -> Result<PathBuf> {
        let p = dir.join(name);
        self.checkpoint().save(&p)?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub epochs: u32,
    pub steps: u64,
    pub last: Option<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: Option<PathBuf>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetSource, SceneSpec, SyntheticSource};
    use crate::models::{DiscriminatorSpec, GeneratorSpec};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            scale: 2,
            epochs: 2,
            batch_size: 2,
            seed: 7,
            generator: GeneratorSpec {
                image_channels: 1,
                stem_channels: 4,
                growth_rate: 2,
                bottleneck_width: 4,
                units_per_block: 2,
                ..Default::default()
            },
            discriminator: DiscriminatorSpec {
                image_channels: 1,
                channels: vec![4, 8],
                leaky_slope: None,
            },
            feature_extractor: crate::models::FeatureExtractorSpec {
                image_channels: 1,
                channels: vec![4],
                seed: 1,
            },
            dataset: DatasetSource::Synthetic(SyntheticSource {
                scene: SceneSpec {
                    height: 16,
                    width: 16,
                    channels: 1,
                    ..Default::default()
                },
                train: 6,
                val: 2,
            }),
            ..Default::default()
        }
    }

    fn values(m: &dyn Module<f32>) -> Vec<Vec<f32>> {
        m.params().iter().map(|p| p.value.data().to_vec()).collect()
    }

    fn buffers(m: &dyn Module<f32>) -> Vec<Vec<f32>> {
        m.buffers()
            .iter()
            .map(|b| b.value.data().to_vec())
            .collect()
    }

    #[test]
    fn each_step_updates_only_its_player() {
        let cfg = tiny_config();
        let pairs = cfg.dataset.pairs(cfg.scale).unwrap();
        let batch = &make_batches(&pairs, 2, 0).unwrap()[0];
        let mut t = Trainer::new(cfg).unwrap();

        let (g0, gb0, d0) = (
            values(&t.generator),
            buffers(&t.generator),
            values(&t.discriminator),
        );
        t.discriminator_step(batch).unwrap();
        assert_eq!(values(&t.generator), g0);
        assert_eq!(buffers(&t.generator), gb0);
        assert_ne!(values(&t.discriminator), d0);

        let (d1, db1, g1) = (
            values(&t.discriminator),
            buffers(&t.discriminator),
            values(&t.generator),
        );
        t.generator_step(batch).unwrap();
        assert_eq!(values(&t.discriminator), d1);
        assert_eq!(buffers(&t.discriminator), db1);
        assert_ne!(values(&t.generator), g1);
    }

    #[test]
    fn alpha_follows_epoch() {
        let cfg = tiny_config();
        let pairs = cfg.dataset.pairs(cfg.scale).unwrap();
        let mut t = Trainer::new(cfg).unwrap();
        let mut recs = Vec::new();
        t.train(&pairs, &mut |r| recs.push(*r)).unwrap();
        assert_eq!(recs.len(), 6);
        assert!(recs[..3].iter().all(|r| r.epoch == 0 && r.alpha == 0.95));
        assert!(recs[3..]
            .iter()
            .all(|r| r.epoch == 1 && (r.alpha - 0.95 / 1.05).abs() < 1e-12));
        assert_eq!(
            recs.iter().map(|r| r.step).collect::<Vec<_>>(),
            (0..6).collect::<Vec<_>>()
        );
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let mut cfg = tiny_config();
        cfg.epochs = 3;
        cfg.beta1 = 0.3;
        let pairs = cfg.dataset.pairs(cfg.scale).unwrap();

        let mut full = Trainer::new(cfg.clone()).unwrap();
        full.train(&pairs, &mut |_| {}).unwrap();

        let mut first = Trainer::new(TrainConfig {
            epochs: 1,
            ..cfg.clone()
        })
        .unwrap();
        first.train(&pairs, &mut |_| {}).unwrap();
        let bytes = first.checkpoint().to_bytes();
        let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ckpt.to_bytes(), bytes);
        let mut resumed = Trainer::from_checkpoint(cfg, &ckpt).unwrap();
        resumed.train(&pairs, &mut |_| {}).unwrap();
        assert_eq!(
            resumed.checkpoint().to_bytes(),
            full.checkpoint().to_bytes()
        );
    }

    #[test]
    fn step_budget_stops_mid_epoch() {
        let mut cfg = tiny_config();
        cfg.max_generator_steps = Some(4);
        let pairs = cfg.dataset.pairs(cfg.scale).unwrap();
        let mut t = Trainer::new(cfg).unwrap();
        let s = t.train(&pairs, &mut |_| {}).unwrap();
        assert_eq!((s.steps, s.epochs), (4, 1));
    }

    #[test]
    fn writes_log_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.output_dir = Some(dir.path().to_path_buf());
        let pairs = cfg.dataset.pairs(cfg.scale).unwrap();
        let s = Trainer::new(cfg)
            .unwrap()
            .train(&pairs, &mut |_| {})
            .unwrap();
        assert_eq!(s.checkpoints.len(), 2);
        let log = fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        let recs: Vec<StepRecord> = log
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(recs.len(), 6);
        let ckpt = Checkpoint::load(s.final_checkpoint.as_ref().unwrap()).unwrap();
        assert_eq!((ckpt.epoch, ckpt.global_step), (2, 6));
    }

    #[test]
    fn rejects_mismatched_checkpoint() {
        let cfg = tiny_config();
        let ckpt = Trainer::new(cfg.clone()).unwrap().checkpoint();
        assert!(Trainer::from_checkpoint(
            TrainConfig {
                scale: 4,
                ..cfg.clone()
            },
            &ckpt
        )
        .is_err());
        let mut other = cfg;
        other.generator.growth_rate = 3;
        assert!(Trainer::from_checkpoint(other, &ckpt).is_err());
    }
}
