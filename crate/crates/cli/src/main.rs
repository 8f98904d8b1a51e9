use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use densesr::checkpoint::Checkpoint;
use densesr::config::TrainConfig;
use densesr::data::{DatasetSource, SceneSpec, SyntheticSource};
use densesr::eval::{evaluate, generator_from_checkpoint, infer, scale_study};
use densesr::gradcheck::{check_generator, run_suite, FD_TOLERANCE};
use densesr::loss::AdversarialForm;
use densesr::train::Trainer;

#[derive(Parser)]
#[command(
    name = "densesr",
    version,
    about = "Dense-block GAN super-resolution for overhead imagery"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a generator/discriminator pair.
    Train(TrainArgs),
    /// Compare nearest, bicubic and model PSNR on a validation split.
    Evaluate(EvalArgs),
    /// Super-resolve one PNG.
    Infer(InferArgs),
    /// PSNR of one model per scale on a shared high-resolution set.
    ScaleStudy(StudyArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(GradcheckArgs),
    /// Write synthetic scenes and a manifest.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Full-width networks.
    Default,
    /// Narrow networks sized for a CPU.
    Compact,
}

#[derive(Clone, Copy, ValueEnum)]
enum AdvForm {
    Minimax,
    NonSaturating,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file with `TrainConfig` fields; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Starting values when no config file is given.
    #[arg(long, value_enum, default_value = "compact")]
    preset: Preset,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long, value_enum)]
    adversarial_form: Option<AdvForm>,
    #[arg(long)]
    max_generator_steps: Option<u64>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Continue from a checkpoint written with the same configuration.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    /// Manifest of PNG chips; defaults to synthetic scenes.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Take the dataset from a training config file.
    #[arg(long, conflicts_with = "manifest")]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    val: usize,
    /// Synthetic training scenes preceding the validation ones; keeps seeds aligned with training.
    #[arg(long, default_value_t = 256)]
    train: usize,
    #[arg(long, default_value_t = 0)]
    scene_seed: u64,
}

impl DataArgs {
    fn source(&self) -> Result<DatasetSource> {
        if let Some(m) = &self.manifest {
            return Ok(DatasetSource::Manifest(m.clone()));
        }
        if let Some(c) = &self.config {
            return Ok(TrainConfig::load(c)?.dataset);
        }
        Ok(DatasetSource::Synthetic(SyntheticSource {
            scene: SceneSpec {
                seed: self.scene_seed,
                ..Default::default()
            },
            train: self.train,
            val: self.val,
        }))
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scale: usize,
    #[command(flatten)]
    data: DataArgs,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Write a nearest | bicubic | model comparison here.
    #[arg(long)]
    grid: Option<PathBuf>,
}

#[derive(Args)]
struct StudyArgs {
    /// One checkpoint per scale.
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
    scales: Vec<usize>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    train: usize,
    #[arg(long, default_value_t = 32)]
    val: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => match a.preset {
            Preset::Default => TrainConfig::default(),
            Preset::Compact => TrainConfig::compact(a.scale.unwrap_or(4)),
        },
    };
    cfg.seed = a.seed;
    if let Some(v) = a.scale {
        cfg.scale = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.beta1 {
        cfg.beta1 = v;
    }
    if let Some(v) = a.adversarial_form {
        cfg.adversarial_form = match v {
            AdvForm::Minimax => AdversarialForm::Minimax,
            AdvForm::NonSaturating => AdversarialForm::NonSaturating,
        };
    }
    if a.max_generator_steps.is_some() {
        cfg.max_generator_steps = a.max_generator_steps;
    }
    if let Some(m) = a.manifest {
        cfg.dataset = DatasetSource::Manifest(m);
    }
    if a.output_dir.is_some() {
        cfg.output_dir = a.output_dir;
    }
    if cfg.output_dir.is_none() {
        bail!("--output-dir (or output_dir in the config) is required");
    }

    let pairs = cfg.dataset.pairs(cfg.scale).context("loading dataset")?;
    let mut trainer = match &a.resume {
        Some(p) => Trainer::from_checkpoint(cfg, &Checkpoint::load(p)?)?,
        None => Trainer::new(cfg)?,
    };
    let summary = trainer.train(&pairs, &mut |r| {
        log::debug!(
            "step {} d {:.4} g {:.4} content {:.4}",
            r.step,
            r.d_loss,
            r.g_total,
            r.g_content
        );
    })?;
    if let Some(last) = summary.last {
        println!(
            "trained {} epochs, {} steps; last content loss {:.4}, discriminator loss {:.4}",
            summary.epochs, summary.steps, last.g_content, last.d_loss
        );
    }
    if let Some(p) = summary.final_checkpoint {
        println!("checkpoint: {}", p.display());
    }
    Ok(())
}

fn load_generator(path: &Path) -> Result<densesr::models::Generator> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(generator_from_checkpoint(&ckpt)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(a)?,
        Command::Evaluate(a) => {
            let gen = load_generator(&a.checkpoint)?;
            let pairs = a.data.source()?.pairs(a.scale)?;
            let report = evaluate(&gen, &pairs, a.scale)?;
            print!("{report}");
            if let Some(p) = a.json {
                std::fs::write(&p, serde_json::to_string_pretty(&report)?)
                    .with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::Infer(a) => {
            let gen = load_generator(&a.checkpoint)?;
            let out = infer(&gen, &a.input, &a.output, a.grid.as_deref())?;
            let s = out.shape();
            println!("wrote {} ({}x{})", a.output.display(), s.width, s.height);
        }
        Command::ScaleStudy(a) => {
            let gens = a
                .checkpoints
                .iter()
                .map(|p| load_generator(p))
                .collect::<Result<Vec<_>>>()?;
            let hr: Vec<_> = a
                .data
                .source()?
                .pairs(1)?
                .into_iter()
                .filter(|p| p.split == densesr::data::Split::Val)
                .map(|p| p.hr)
                .collect();
            let study = scale_study(&a.scales, &gens.iter().collect::<Vec<_>>(), &hr)?;
            println!("high-resolution set digest {:016x}", study.hr_digest);
            println!(
                "{:>6} {:>10} {:>10} {:>10}",
                "scale", "nearest", "bicubic", "model"
            );
            for r in &study.reports {
                let m = |k| {
                    r.mean_db(k)
                        .map_or_else(|| "-".into(), |v| format!("{v:.2}"))
                };
                use densesr::metrics::Method::*;
                println!(
                    "{:>6} {:>10} {:>10} {:>10}",
                    r.scale,
                    m(Nearest),
                    m(Bicubic),
                    m(Model)
                );
            }
        }
        Command::Gradcheck(a) => {
            let mut reports = run_suite(a.cases, a.seed)?;
            reports.push(check_generator(a.seed)?);
            let mut failed = 0;
            for r in &reports {
                let status = if r.passed() { "ok" } else { "FAIL" };
                failed += usize::from(!r.passed());
                println!(
                    "{:<20} {:>4} {:>6} probes  max rel err {:.2e}  {status}",
                    r.op, r.cases, r.probes, r.max_rel_error
                );
            }
            if failed > 0 {
                bail!("{failed} operations exceed relative error {FD_TOLERANCE:e}");
            }
        }
        Command::Synth(a) => {
            let src = SyntheticSource {
                scene: SceneSpec {
                    seed: a.seed,
                    height: a.size,
                    width: a.size,
                    channels: a.channels,
                    ..Default::default()
                },
                train: a.train,
                val: a.val,
            };
            let manifest = src.write(&a.out)?;
            println!(
                "wrote {} scenes and {}",
                a.train + a.val,
                manifest.display()
            );
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
