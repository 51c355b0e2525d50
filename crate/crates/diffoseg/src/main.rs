use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use diffoseg::ablate::{ablate, AblationConfig, Suite};
use diffoseg::config::{TrainConfig, SEED_ENV};
use diffoseg::dataset::{generate_splits, load_split, write_splits, SplitSizes};
use diffoseg::evaluate::{evaluate, DEFAULT_NS};
use diffoseg::sampler::{write_samples, Model};
use diffoseg::train::{train_stage1, train_stage2, TrainOutcome};
use diffoseg::{Error, Result};
use diffoseg_core::synth::default_styles;

#[derive(Parser)]
#[command(name = "diffoseg", version, about = "Two-stage diffusion segmentation from multi-rater annotations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-rater dataset with train/val/test splits.
    GenData(GenDataArgs),
    /// Train the consensus model.
    TrainStage1(TrainArgs),
    /// Fine-tune a Stage I checkpoint with expert identity.
    TrainStage2(TrainArgs),
    /// Draw masks from a checkpoint.
    Sample(SampleArgs),
    /// Score a checkpoint on a dataset split.
    Evaluate(EvaluateArgs),
    /// Train and compare all modes of an ablation suite.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 400)]
    train: usize,
    #[arg(long, default_value_t = 50)]
    val: usize,
    #[arg(long, default_value_t = 50)]
    test: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 4)]
    experts: usize,
    #[arg(long)]
    seed: Option<u64>,
}

/// Training flags. Each one overrides the same key of `--config`.
#[derive(Args, Default)]
struct TrainFlags {
    /// Plain-text `key=value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    schedule_offset: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    iterations: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// R, A or P.
    #[arg(long)]
    consensus: Option<String>,
    /// blind, concat or ours.
    #[arg(long)]
    identity: Option<String>,
    #[arg(long)]
    flip: Option<String>,
    #[arg(long)]
    rotate90: Option<String>,
    #[arg(long)]
    intensity_scale: Option<String>,
    #[arg(long)]
    base_channels: Option<String>,
    #[arg(long)]
    depth: Option<String>,
    #[arg(long)]
    time_embed_dim: Option<String>,
    #[arg(long)]
    grad_clip: Option<String>,
    #[arg(long)]
    val_every: Option<String>,
    #[arg(long)]
    val_images: Option<String>,
    #[arg(long)]
    val_samples: Option<String>,
    #[arg(long)]
    out_dir: Option<String>,
    #[arg(long)]
    resume: Option<String>,
    #[arg(long)]
    stage1_checkpoint: Option<String>,
}

impl TrainFlags {
    fn build(&self, stage: u8) -> Result<TrainConfig> {
        let mut cfg = TrainConfig { stage, ..Default::default() };
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        cfg.stage = stage;
        let flags = [
            ("steps", &self.steps),
            ("schedule_offset", &self.schedule_offset),
            ("lr", &self.lr),
            ("batch_size", &self.batch_size),
            ("iterations", &self.iterations),
            ("seed", &self.seed),
            ("consensus", &self.consensus),
            ("identity", &self.identity),
            ("flip", &self.flip),
            ("rotate90", &self.rotate90),
            ("intensity_scale", &self.intensity_scale),
            ("base_channels", &self.base_channels),
            ("depth", &self.depth),
            ("time_embed_dim", &self.time_embed_dim),
            ("grad_clip", &self.grad_clip),
            ("val_every", &self.val_every),
            ("val_images", &self.val_images),
            ("val_samples", &self.val_samples),
            ("out_dir", &self.out_dir),
            ("resume", &self.resume),
            ("stage1_checkpoint", &self.stage1_checkpoint),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root holding train/ and val/.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 1, allow_negative_numbers = true)]
    n: i64,
    /// Expert index (Stage II checkpoints with identity only).
    #[arg(long)]
    expert: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Comma-separated sample counts.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_values_t = DEFAULT_NS.map(|n| n as i64))]
    n: Vec<i64>,
    #[arg(long)]
    seed: Option<u64>,
    /// CSV report path.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// consensus or identity.
    #[arg(long)]
    suite: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_values_t = DEFAULT_NS.map(|n| n as i64))]
    n: Vec<i64>,
    /// Samples per expert and image for the identity suite.
    #[arg(long, default_value_t = 10, allow_negative_numbers = true)]
    expert_samples: i64,
    /// Iterations of the Stage I backbones trained for the identity suite.
    #[arg(long)]
    stage1_iterations: Option<usize>,
    #[command(flatten)]
    flags: TrainFlags,
}

fn env_seed(seed: Option<u64>) -> u64 {
    seed.or_else(|| std::env::var(SEED_ENV).ok().and_then(|v| v.trim().parse().ok()))
        .unwrap_or(0)
}

fn positive(values: &[i64]) -> Result<Vec<usize>> {
    if values.is_empty() {
        return Err(Error::config("at least one sample count is required"));
    }
    values
        .iter()
        .map(|&n| usize::try_from(n).ok().filter(|&n| n > 0).ok_or_else(|| Error::config(format!("sample count {n} must be positive"))))
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn report_training(out: &TrainOutcome, started: Instant) {
    println!("initial validation loss {:.6}", out.initial_val_loss);
    for v in &out.validations {
        println!("step {:>6}  val loss {:.6}  val metric {:.6}", v.step, v.loss, v.metric);
    }
    println!("final checkpoint {}", out.final_checkpoint.display());
    println!("best checkpoint {}", out.best_checkpoint.display());
    println!("elapsed {:.1}s", started.elapsed().as_secs_f64());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => {
            let sizes = SplitSizes { train: a.train, val: a.val, test: a.test };
            if sizes.train == 0 || sizes.val == 0 || sizes.test == 0 {
                return Err(Error::config("every split needs at least one sample"));
            }
            if a.experts < 2 {
                return Err(Error::config("at least two experts are required"));
            }
            let splits = generate_splits(sizes, a.height, a.width, &default_styles(a.experts), env_seed(a.seed))?;
            write_splits(&a.out, &splits)?;
            println!("wrote {} samples to {}", sizes.train + sizes.val + sizes.test, a.out.display());
        }
        Command::TrainStage1(a) => {
            let cfg = a.flags.build(1)?;
            let started = Instant::now();
            let out = train_stage1(&cfg, &load_split(&a.data, "train")?, &load_split(&a.data, "val")?)?;
            report_training(&out, started);
        }
        Command::TrainStage2(a) => {
            let cfg = a.flags.build(2)?;
            let started = Instant::now();
            let out = train_stage2(&cfg, &load_split(&a.data, "train")?, &load_split(&a.data, "val")?)?;
            report_training(&out, started);
        }
        Command::Sample(a) => {
            let n = positive(&[a.n])?[0];
            let model = Model::load(&a.checkpoint)?;
            let data = load_split(&a.data, &a.split)?;
            write_samples(&model, &data, a.expert, n, env_seed(a.seed), &a.out)?;
            println!("wrote {n} sample(s) for {} image(s) to {}", data.len(), a.out.display());
        }
        Command::Evaluate(a) => {
            let ns = positive(&a.n)?;
            let model = Model::load(&a.checkpoint)?;
            let data = load_split(&a.data, &a.split)?;
            let report = evaluate(&model, &data, &ns, env_seed(a.seed))?;
            write_text(&a.report, &report.to_csv())?;
            println!("{}", report.summary());
        }
        Command::Ablate(a) => {
            let suite: Suite = a.suite.parse()?;
            let ns = positive(&a.n)?;
            let expert_samples = positive(&[a.expert_samples])?[0];
            let base = a.flags.build(1)?;
            let cfg = AblationConfig {
                out_dir: base.out_dir.clone(),
                base,
                stage1_iterations: a.stage1_iterations,
                seeds: a.seeds,
                ns,
                expert_samples,
            };
            let data = [load_split(&a.data, "train")?, load_split(&a.data, "val")?, load_split(&a.data, "test")?];
            let table = ablate(suite, &cfg, &data[0], &data[1], &data[2])?;
            print!("{}", table.render());
            let mut failed = 0;
            for r in &table.runs {
                if let Err(e) = &r.report {
                    eprintln!("run {} seed {} failed: {e}", r.mode, r.seed);
                    failed += 1;
                }
            }
            if failed > 0 {
                return Err(Error::config(format!("{failed} of {} runs failed", table.runs.len())));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
