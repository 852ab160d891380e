//! Run configuration and the two training loops.
//!
//! Stage 1 trains the discrete prior to the synthetic world's entropy
//! floor, then freezes. Stage 2 trains the masked encoder-decoder plus
//! the diffusion MLP against teacher-forced Stage-1 conditions. Both
//! loops keep an EMA shadow and abort on divergence.

use crate::autodiff::Tape;
use crate::diffusion::{make_schedule, DenoiserConfig, NoiseSchedule};
use crate::error::{D2cError, Result};
use crate::harness::checkpoint::{config_digest, Checkpoint};
use crate::harness::optim::{AdamW, Ema, OptimConfig};
use crate::pipeline::GenerationConfig;
use crate::rng::{self, tag};
use crate::stage1::{Stage1Config, Stage1Model};
use crate::stage2::{loss_stage2_tape, prepare_sample_noise, SampleNoise, Stage2Config, Stage2Model};
use crate::synthetic::{DatasetSample, WorldConfig};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    /// Synthetic samples in the training set.
    pub samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { samples: 8000, epochs: 6, batch_size: 64, seed: 0 }
    }
}

/// Every knob of a run, serializable as one JSON document. Defaults
/// reproduce the desk-scale reference setup.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub denoiser: DenoiserConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub generation: GenerationConfig,
}

impl RunConfig {
    /// Copy the world-derived dimensions into the dependent configs so a
    /// JSON file only has to state them once, then validate everything.
    pub fn harmonized(mut self) -> Result<RunConfig> {
        let w = &self.world;
        self.stage1.vocab = w.codebook_size;
        self.stage1.classes = w.classes;
        self.stage1.h = w.h;
        self.stage1.w = w.w;
        self.stage2.vocab = w.codebook_size;
        self.stage2.classes = w.classes;
        self.stage2.h = w.h;
        self.stage2.w = w.w;
        self.stage2.token_dim = w.d;
        self.stage2.stage1_width = self.stage1.width;
        self.denoiser.token_dim = w.d;
        self.stage1.validate()?;
        self.stage2.validate()?;
        if self.train.batch_size == 0 || self.train.epochs == 0 || self.train.samples == 0 {
            return Err(D2cError::config("training budget must be positive"));
        }
        self.generation.validate(w.h * w.w)?;
        Ok(self)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.denoiser.steps, self.denoiser.schedule)
    }
}

/// Per-epoch mean losses plus the final evaluation-ready model state.
pub struct TrainOutcome<M> {
    pub model: M,
    pub ema: Ema,
    pub epoch_losses: Vec<f64>,
}

fn check_finite(loss: f64, what: &str) -> Result<f64> {
    if !loss.is_finite() {
        return Err(D2cError::numeric(format!("{what} diverged (loss = {loss})")));
    }
    Ok(loss)
}

/// Train the Stage-1 prior on (class, TokenGrid) pairs.
pub fn train_stage1(config: &RunConfig, dataset: &[DatasetSample]) -> Result<TrainOutcome<Stage1Model>> {
    let mut model = Stage1Model::init(&config.stage1, config.train.seed)?;
    let mut opt = AdamW::new(&model.params, &config.optim);
    let mut ema = Ema::new(&model.params, config.optim.ema_momentum);
    let steps_per_epoch = dataset.len().div_ceil(config.train.batch_size);
    let total_steps = steps_per_epoch * config.train.epochs;
    let mut epoch_losses = Vec::with_capacity(config.train.epochs);
    let mut step_index = 0usize;

    for epoch in 0..config.train.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng::stream(config.train.seed, &[tag::TRAIN, 1, epoch as u64]));
        let mut epoch_loss = 0.0;
        for (bi, chunk) in order.chunks(config.train.batch_size).enumerate() {
            let batch: Vec<(usize, &crate::synthetic::TokenGrid)> =
                chunk.iter().map(|&i| (dataset[i].class, &dataset[i].tokens)).collect();
            let mut drop_rng =
                rng::stream(config.train.seed, &[tag::TRAIN, 2, epoch as u64, bi as u64]);
            let mut tape = Tape::new();
            let bind = model.params.bind(&mut tape);
            let loss_id = model.loss_tape(&mut tape, &bind, &batch, &mut drop_rng)?;
            let loss = check_finite(tape.value(loss_id).item()?, "stage-1")?;
            let grads = tape.backward(loss_id)?;
            let lr = config.optim.lr_at(step_index, total_steps, config.train.batch_size);
            opt.step(&mut model.params, &bind, &grads, lr)?;
            ema.update(&model.params);
            epoch_loss += loss * chunk.len() as f64;
            step_index += 1;
        }
        epoch_loss /= dataset.len() as f64;
        log::info!("stage1 epoch {epoch}: loss {epoch_loss:.4}");
        epoch_losses.push(epoch_loss);
    }
    Ok(TrainOutcome { model, ema, epoch_losses })
}

/// Train Stage 2 (encoder-decoder plus diffusion MLP) against a frozen
/// Stage-1 model. `resume` restarts from checkpointed parameters.
pub fn train_stage2(
    config: &RunConfig,
    stage1: &Stage1Model,
    dataset: &[DatasetSample],
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome<Stage2Model>> {
    if stage1.params.trainable_numel() != 0 {
        return Err(D2cError::contract("stage-1 must be frozen before stage-2 training"));
    }
    let mut model = match resume {
        Some(ckpt) => {
            ckpt.verify_digest(&(&config.stage2, &config.denoiser))?;
            Stage2Model::from_params(
                &config.stage2,
                &config.denoiser,
                ckpt.to_param_set(&["embed.frozen"]),
            )?
        }
        None => Stage2Model::init(
            &config.stage2,
            &config.denoiser,
            stage1.token_embedding_tensor(),
            config.train.seed,
        )?,
    };
    let schedule = config.schedule()?;
    let mut opt = AdamW::new(&model.params, &config.optim);
    let mut ema = Ema::new(&model.params, config.optim.ema_momentum);
    let steps_per_epoch = dataset.len().div_ceil(config.train.batch_size);
    let total_steps = steps_per_epoch * config.train.epochs;
    let mut epoch_losses = Vec::with_capacity(config.train.epochs);
    let mut step_index = 0usize;

    for epoch in 0..config.train.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng::stream(config.train.seed, &[tag::TRAIN, 3, epoch as u64]));
        let mut epoch_loss = 0.0;
        for (bi, chunk) in order.chunks(config.train.batch_size).enumerate() {
            let mut noise_rng =
                rng::stream(config.train.seed, &[tag::TRAIN, 4, epoch as u64, bi as u64]);
            let noises: Vec<SampleNoise> = chunk
                .iter()
                .map(|&i| {
                    prepare_sample_noise(
                        stage1,
                        &model,
                        &schedule,
                        dataset[i].class,
                        &dataset[i].tokens,
                        &mut noise_rng,
                    )
                })
                .collect::<Result<_>>()?;
            let batch: Vec<(usize, &crate::synthetic::LatentGrid, &SampleNoise)> = chunk
                .iter()
                .zip(&noises)
                .map(|(&i, n)| (dataset[i].class, &dataset[i].latents, n))
                .collect();
            let mut tape = Tape::new();
            let bind = model.params.bind(&mut tape);
            let loss_id = loss_stage2_tape(&mut tape, &bind, &model, &batch, &schedule)?;
            let loss = check_finite(tape.value(loss_id).item()?, "stage-2")?;
            let grads = tape.backward(loss_id)?;
            let lr = config.optim.lr_at(step_index, total_steps, config.train.batch_size);
            opt.step(&mut model.params, &bind, &grads, lr)?;
            ema.update(&model.params);
            epoch_loss += loss * chunk.len() as f64;
            step_index += 1;
        }
        epoch_loss /= dataset.len() as f64;
        log::info!("stage2 epoch {epoch}: loss {epoch_loss:.4}");
        epoch_losses.push(epoch_loss);
    }
    Ok(TrainOutcome { model, ema, epoch_losses })
}

/// Digest guarding Stage-1 checkpoints.
pub fn stage1_digest(config: &RunConfig) -> [u8; 32] {
    config_digest(&config.stage1)
}

/// Digest guarding Stage-2 checkpoints (fusion kind included).
pub fn stage2_digest(config: &RunConfig) -> [u8; 32] {
    config_digest(&(&config.stage2, &config.denoiser))
}

/// Load a frozen Stage-1 model from a checkpoint, verifying the digest.
pub fn load_stage1(config: &RunConfig, ckpt: &Checkpoint, use_ema: bool) -> Result<Stage1Model> {
    ckpt.verify_digest(&config.stage1)?;
    let params = if use_ema {
        ckpt.to_param_set_ema(&[])
    } else {
        ckpt.to_param_set(&[])
    };
    let mut model = Stage1Model::from_params(&config.stage1, params)?;
    model.freeze();
    Ok(model)
}

/// Load a Stage-2 model from a checkpoint, verifying the digest.
pub fn load_stage2(config: &RunConfig, ckpt: &Checkpoint, use_ema: bool) -> Result<Stage2Model> {
    ckpt.verify_digest(&(&config.stage2, &config.denoiser))?;
    let params = if use_ema {
        ckpt.to_param_set_ema(&["embed.frozen"])
    } else {
        ckpt.to_param_set(&["embed.frozen"])
    };
    Stage2Model::from_params(&config.stage2, &config.denoiser, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::checkpoint::{load_checkpoint, save_checkpoint};
    use crate::stage2::{FusionKind, QFormerArch};
    use crate::synthetic::{build_world, generate_dataset};

    fn tiny_run_config() -> RunConfig {
        let mut cfg = RunConfig {
            world: WorldConfig {
                seed: 3,
                classes: 2,
                codebook_size: 6,
                h: 2,
                w: 2,
                d: 2,
                corruption: 0.1,
                noise: 0.4,
            },
            ..Default::default()
        };
        cfg.stage1 = Stage1Config {
            layers: 1,
            heads: 2,
            width: 8,
            ffn_hidden: 16,
            class_drop: 0.1,
            ..cfg.stage1
        };
        cfg.stage2 = Stage2Config {
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            d_model: 8,
            ffn_hidden: 16,
            fusion: FusionKind::QFormer,
            class_prefix: 2,
            queries: 2,
            query_dim: 8,
            qformer_arch: QFormerArch::EncoderDecoder,
            ..cfg.stage2
        };
        cfg.denoiser = DenoiserConfig {
            width: 8,
            cond_dim: 8,
            blocks: 1,
            steps: 20,
            ..cfg.denoiser
        };
        cfg.train = TrainConfig { samples: 24, epochs: 2, batch_size: 8, seed: 1 };
        cfg.generation.steps = 2;
        cfg.generation.diffusion_steps = 5;
        cfg.harmonized().unwrap()
    }

    #[test]
    fn run_config_round_trips_through_json() {
        let cfg = tiny_run_config();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn harmonize_rejects_inconsistent_budget() {
        let mut cfg = tiny_run_config();
        cfg.train.epochs = 0;
        assert!(cfg.harmonized().is_err());
    }

    #[test]
    fn stage1_short_training_reduces_loss() {
        let cfg = tiny_run_config();
        let world = build_world(&cfg.world).unwrap();
        let dataset = generate_dataset(&world, cfg.train.samples);
        let out = train_stage1(&cfg, &dataset).unwrap();
        assert_eq!(out.epoch_losses.len(), 2);
        assert!(out.epoch_losses[1] < out.epoch_losses[0]);
    }

    #[test]
    fn stage2_requires_frozen_stage1() {
        let cfg = tiny_run_config();
        let world = build_world(&cfg.world).unwrap();
        let dataset = generate_dataset(&world, 8);
        let unfrozen = Stage1Model::init(&cfg.stage1, 0).unwrap();
        assert!(train_stage2(&cfg, &unfrozen, &dataset, None).is_err());
    }

    #[test]
    fn stage2_trains_and_freeze_protocol_holds() {
        let cfg = tiny_run_config();
        let world = build_world(&cfg.world).unwrap();
        let dataset = generate_dataset(&world, cfg.train.samples);
        let s1 = train_stage1(&cfg, &dataset).unwrap();
        let mut stage1 = s1.model;
        stage1.freeze();
        let before: Vec<Vec<f64>> =
            stage1.params.ids().map(|id| stage1.params.get(id).data().to_vec()).collect();
        let out = train_stage2(&cfg, &stage1, &dataset, None).unwrap();
        // stage-1 parameters bit-identical before and after
        for (id, prev) in stage1.params.ids().zip(&before) {
            assert!(stage1
                .params
                .get(id)
                .data()
                .iter()
                .zip(prev)
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        // frozen embed inside stage-2 matches stage-1 token embedding
        let frozen = out.model.params.lookup("embed.frozen").unwrap();
        assert_eq!(
            out.model.params.get(frozen).data(),
            stage1.token_embedding_tensor().data()
        );
        assert!(out.epoch_losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn checkpoint_reload_reproduces_first_loss() {
        let cfg = tiny_run_config();
        let world = build_world(&cfg.world).unwrap();
        let dataset = generate_dataset(&world, cfg.train.samples);
        let s1 = train_stage1(&cfg, &dataset).unwrap();
        let mut stage1 = s1.model;
        stage1.freeze();
        let out = train_stage2(&cfg, &stage1, &dataset, None).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s2.ckpt");
        save_checkpoint(
            &path,
            stage2_digest(&cfg),
            &out.model.params,
            &out.ema.tensors(&out.model.params),
        )
        .unwrap();
        let ckpt = load_checkpoint(&path).unwrap();

        let eval_first_loss = || -> f64 {
            let model = load_stage2(&cfg, &ckpt, false).unwrap();
            let schedule = cfg.schedule().unwrap();
            let mut noise_rng = rng::stream(99, &[123]);
            let noise = prepare_sample_noise(
                &stage1,
                &model,
                &schedule,
                dataset[0].class,
                &dataset[0].tokens,
                &mut noise_rng,
            )
            .unwrap();
            let mut tape = Tape::new();
            let bind = model.params.bind(&mut tape);
            let batch = [(dataset[0].class, &dataset[0].latents, &noise)];
            let loss = loss_stage2_tape(&mut tape, &bind, &model, &batch, &schedule).unwrap();
            tape.value(loss).item().unwrap()
        };
        assert_eq!(eval_first_loss().to_bits(), eval_first_loss().to_bits());

        // resume accepts the matching config and rejects a different fusion
        assert!(train_stage2(&cfg, &stage1, &dataset[..8], Some(&ckpt)).is_ok());
        let mut other = cfg.clone();
        other.stage2.fusion = FusionKind::CrossAttention;
        let other = other.harmonized().unwrap();
        assert!(matches!(
            train_stage2(&other, &stage1, &dataset[..8], Some(&ckpt)),
            Err(D2cError::Config(_))
        ));
    }
}
