//! Command-line surface: dataset generation, two-stage training,
//! sampling, evaluation, and ablation sweeps.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 numeric failure.
//! Log verbosity comes from the D2C_LOG environment variable
//! (error|warn|info|debug|trace).

use clap::{Args, Parser, Subcommand};
use d2c_core::harness::checkpoint::{load_checkpoint, save_checkpoint};
use d2c_core::harness::evaluate::evaluate;
use d2c_core::harness::sweep::{run_sweep, SweepAxis, SweepContext};
use d2c_core::harness::train::{
    load_stage1, load_stage2, stage1_digest, stage2_digest, train_stage1, train_stage2, RunConfig,
};
use d2c_core::pipeline::generate_batch;
use d2c_core::stage2::FusionKind;
use d2c_core::synthetic::{
    build_world, generate_dataset, read_dataset, write_dataset, DatasetSample, SyntheticWorld,
};
use d2c_core::{D2cError, Result};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "d2c", version, about = "Two-stage discrete-to-continuous token generator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus the most common field overrides. Flags win over the
/// file; the file wins over defaults.
#[derive(Args, Debug)]
struct ConfigArgs {
    /// JSON run configuration (all fields optional via defaults).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for world, training, and generation.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Training-set size.
    #[arg(long)]
    train_samples: Option<usize>,
    /// Stage-2 fusion: cross_attention | q_former | none.
    #[arg(long)]
    fusion: Option<String>,
    /// Query tokens for the q-former path.
    #[arg(long)]
    queries: Option<usize>,
    /// Q-former architecture: decoder | encoder_decoder.
    #[arg(long)]
    qformer_arch: Option<String>,
    /// Unmasking steps at generation time.
    #[arg(long)]
    gen_steps: Option<usize>,
    /// Stage-2 guidance scale ω.
    #[arg(long)]
    cfg_scale: Option<f64>,
    /// Stage-1 guidance scale.
    #[arg(long)]
    stage1_cfg_scale: Option<f64>,
    /// Stage-1 sampling temperature τ.
    #[arg(long)]
    temperature: Option<f64>,
    /// Generated samples per class.
    #[arg(long)]
    per_class: Option<usize>,
    /// Denoising steps at inference.
    #[arg(long)]
    diffusion_steps: Option<usize>,
    /// Disable the linear guidance ramp (constant ω).
    #[arg(long)]
    no_linear_guidance: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                serde_json::from_str::<RunConfig>(&text)
                    .map_err(|e| D2cError::config(format!("bad config file: {e}")))?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.world.seed = seed;
            cfg.train.seed = seed;
            cfg.generation.seed = seed;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(b) = self.batch_size {
            cfg.train.batch_size = b;
        }
        if let Some(s) = self.train_samples {
            cfg.train.samples = s;
        }
        if let Some(f) = &self.fusion {
            cfg.stage2.fusion = match f.as_str() {
                "cross_attention" => FusionKind::CrossAttention,
                "q_former" => FusionKind::QFormer,
                "none" => FusionKind::None,
                other => {
                    return Err(D2cError::config(format!(
                        "unknown fusion {other}; expected cross_attention|q_former|none"
                    )))
                }
            };
        }
        if let Some(q) = self.queries {
            cfg.stage2.queries = q;
        }
        if let Some(a) = &self.qformer_arch {
            cfg.stage2.qformer_arch = match a.as_str() {
                "decoder" => d2c_core::stage2::QFormerArch::Decoder,
                "encoder_decoder" => d2c_core::stage2::QFormerArch::EncoderDecoder,
                other => {
                    return Err(D2cError::config(format!(
                        "unknown q-former architecture {other}"
                    )))
                }
            };
        }
        if let Some(s) = self.gen_steps {
            cfg.generation.steps = s;
        }
        if let Some(w) = self.cfg_scale {
            cfg.generation.cfg_scale = w;
        }
        if let Some(w) = self.stage1_cfg_scale {
            cfg.generation.stage1_cfg_scale = w;
        }
        if let Some(t) = self.temperature {
            cfg.generation.temperature = t;
        }
        if let Some(p) = self.per_class {
            cfg.generation.samples_per_class = p;
        }
        if let Some(d) = self.diffusion_steps {
            cfg.generation.diffusion_steps = d;
        }
        if self.no_linear_guidance {
            cfg.generation.linear_guidance = false;
        }
        let cfg = cfg.harmonized()?;
        log::info!(
            "resolved config: {}",
            serde_json::to_string(&cfg).expect("config serializes")
        );
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output dataset path.
        #[arg(long)]
        out: PathBuf,
        /// Sample count (defaults to the training-set size).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the Stage-1 discrete prior and write a checkpoint.
    TrainStage1 {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Train from an existing dataset file instead of generating.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train Stage 2 against a frozen Stage-1 checkpoint.
    TrainStage2 {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Resume from an existing Stage-2 checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample (TokenGrid, LatentGrid) pairs into a dataset-format file.
    Sample {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        stage2: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Evaluate with the EMA shadow weights instead of the raw ones.
        #[arg(long)]
        use_ema: bool,
    },
    /// Evaluate a samples file against the world oracle.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        samples: PathBuf,
        /// Also write the report as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Sweep one ablation axis and emit CSV plus plot data.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// cfg | temperature | steps | queries | qformer_arch
        #[arg(long)]
        axis: String,
        /// Comma-separated grid values (axis default if omitted).
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        stage1: PathBuf,
        /// Required for cfg/temperature/steps axes.
        #[arg(long)]
        stage2: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        use_ema: bool,
    },
}

fn load_or_generate_dataset(
    config: &RunConfig,
    world: &SyntheticWorld,
    data: &Option<PathBuf>,
) -> Result<Vec<DatasetSample>> {
    match data {
        Some(path) => {
            let (header, samples) = read_dataset(path)?;
            let w = &world.config;
            if (header.classes, header.codebook_size, header.h, header.w, header.d)
                != (
                    w.classes as u32,
                    w.codebook_size as u32,
                    w.h as u32,
                    w.w as u32,
                    w.d as u32,
                )
            {
                return Err(D2cError::config(
                    "dataset header does not match the configured world",
                ));
            }
            Ok(samples)
        }
        None => Ok(generate_dataset(world, config.train.samples)),
    }
}

fn sample_to_file(
    config: &RunConfig,
    world: &SyntheticWorld,
    stage1: &Path,
    stage2: &Path,
    out: &Path,
    use_ema: bool,
) -> Result<()> {
    let s1 = load_stage1(config, &load_checkpoint(stage1)?, use_ema)?;
    let s2 = load_stage2(config, &load_checkpoint(stage2)?, use_ema)?;
    let schedule = config.schedule()?;
    let classes: Vec<usize> = (0..config.world.classes)
        .flat_map(|c| std::iter::repeat(c).take(config.generation.samples_per_class))
        .collect();
    log::info!("sampling {} grids", classes.len());
    let generated = generate_batch(&s1, &s2, &schedule, &classes, &config.generation)?;
    let samples: Vec<DatasetSample> = generated
        .into_iter()
        .map(|(class, tokens, latents)| DatasetSample { class, tokens, latents })
        .collect();
    write_dataset(out, world, &samples)?;
    log::info!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, count } => {
            let cfg = config.resolve()?;
            let world = build_world(&cfg.world)?;
            let samples = generate_dataset(&world, count.unwrap_or(cfg.train.samples));
            write_dataset(&out, &world, &samples)?;
            println!("wrote {} samples to {}", samples.len(), out.display());
            Ok(())
        }
        Command::TrainStage1 { config, out, data } => {
            let cfg = config.resolve()?;
            let world = build_world(&cfg.world)?;
            let dataset = load_or_generate_dataset(&cfg, &world, &data)?;
            let outcome = train_stage1(&cfg, &dataset)?;
            save_checkpoint(
                &out,
                stage1_digest(&cfg),
                &outcome.model.params,
                &outcome.ema.tensors(&outcome.model.params),
            )?;
            println!(
                "stage-1 trained; final loss {:.4}; entropy floor {:.4}; checkpoint {}",
                outcome.epoch_losses.last().unwrap(),
                world.oracle_template_entropy(),
                out.display()
            );
            Ok(())
        }
        Command::TrainStage2 { config, stage1, out, data, resume } => {
            let cfg = config.resolve()?;
            let world = build_world(&cfg.world)?;
            let dataset = load_or_generate_dataset(&cfg, &world, &data)?;
            let s1 = load_stage1(&cfg, &load_checkpoint(&stage1)?, false)?;
            let resume_ckpt = resume.as_deref().map(load_checkpoint).transpose()?;
            let outcome = train_stage2(&cfg, &s1, &dataset, resume_ckpt.as_ref())?;
            save_checkpoint(
                &out,
                stage2_digest(&cfg),
                &outcome.model.params,
                &outcome.ema.tensors(&outcome.model.params),
            )?;
            println!(
                "stage-2 trained; final loss {:.4}; checkpoint {}",
                outcome.epoch_losses.last().unwrap(),
                out.display()
            );
            Ok(())
        }
        Command::Sample { config, stage1, stage2, out, use_ema } => {
            let cfg = config.resolve()?;
            let world = build_world(&cfg.world)?;
            sample_to_file(&cfg, &world, &stage1, &stage2, &out, use_ema)
        }
        Command::Eval { config, samples, csv } => {
            let cfg = config.resolve()?;
            let world = build_world(&cfg.world)?;
            let (_, loaded) = read_dataset(&samples)?;
            let report = evaluate(&loaded, &world)?;
            print!("{}", report.render_table());
            if let Some(path) = csv {
                std::fs::write(&path, report.to_csv())?;
                println!("csv written to {}", path.display());
            }
            Ok(())
        }
        Command::Sweep { config, axis, grid, stage1, stage2, data, out_dir, use_ema } => {
            let cfg = config.resolve()?;
            let world = build_world(&cfg.world)?;
            let axis = SweepAxis::parse(&axis)?;
            let grid: Vec<String> = match grid {
                Some(g) => g.split(',').map(|s| s.trim().to_string()).collect(),
                None => axis.default_grid(),
            };
            let s1 = load_stage1(&cfg, &load_checkpoint(&stage1)?, use_ema)?;
            let s2 = stage2
                .as_deref()
                .map(|p| load_stage2(&cfg, &load_checkpoint(p)?, use_ema))
                .transpose()?;
            let dataset = load_or_generate_dataset(&cfg, &world, &data)?;
            let ctx = SweepContext {
                config: &cfg,
                world: &world,
                stage1: &s1,
                stage2: s2.as_ref(),
                dataset: &dataset,
            };
            let result = run_sweep(axis, &grid, &ctx)?;
            std::fs::create_dir_all(&out_dir)?;
            let csv_path = out_dir.join(format!("sweep_{}.csv", result.axis));
            let json_path = out_dir.join(format!("sweep_{}.json", result.axis));
            std::fs::write(&csv_path, result.to_csv())?;
            std::fs::write(&json_path, result.to_plot_json())?;
            println!("{}", result.summary);
            println!("csv: {}; plot data: {}", csv_path.display(), json_path.display());
            Ok(())
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("D2C_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are successful exits; real usage errors are code 1
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e @ D2cError::Numeric(_)) => {
            eprintln!("numeric failure: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    };
    std::process::exit(code);
}
