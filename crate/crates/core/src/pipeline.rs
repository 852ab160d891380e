//! Two-stage inference: sample a discrete grid from Stage 1, then
//! iteratively unmask continuous tokens on a cosine schedule with linear
//! guidance ramping and per-token ancestral denoising.

use crate::autodiff::ParamSet;
use crate::diffusion::{ancestral_sample, cfg_noise, DenoiserMlp, NoisePredictor, NoiseSchedule};
use crate::error::{D2cError, Result};
use crate::rng::{self, tag};
use crate::stage1::Stage1Model;
use crate::stage2::{DiscreteCond, MaskPlan, Stage2Model};
use crate::synthetic::{LatentGrid, TokenGrid};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct GenerationConfig {
    /// S: unmasking steps over the grid.
    pub steps: usize,
    /// ω for the Stage-2 noise-space guidance.
    pub cfg_scale: f64,
    /// ω for the Stage-1 logit-space guidance.
    pub stage1_cfg_scale: f64,
    /// Stage-1 sampling temperature τ.
    pub temperature: f64,
    /// Ramp guidance linearly from 1 to ω as tokens are revealed.
    pub linear_guidance: bool,
    pub seed: u64,
    pub samples_per_class: usize,
    /// Denoising steps at inference; the training chain is subsampled
    /// uniformly down to this many steps.
    pub diffusion_steps: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            steps: 64,
            cfg_scale: 4.0,
            stage1_cfg_scale: 4.0,
            temperature: 0.99,
            linear_guidance: true,
            seed: 0,
            samples_per_class: 500,
            diffusion_steps: 25,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self, grid_len: usize) -> Result<()> {
        if self.steps == 0 || self.steps > grid_len {
            return Err(D2cError::config(format!(
                "steps {} outside 1..={grid_len}",
                self.steps
            )));
        }
        if self.cfg_scale < 0.0 || self.stage1_cfg_scale < 0.0 {
            return Err(D2cError::config("cfg scales must be >= 0"));
        }
        if self.temperature <= 0.0 {
            return Err(D2cError::config("temperature must be > 0"));
        }
        if self.diffusion_steps == 0 {
            return Err(D2cError::config("diffusion_steps must be >= 1"));
        }
        Ok(())
    }
}

/// Tokens still masked after step s of S, for a grid of n positions:
/// masked(0) = n, masked(s) = min(masked(s−1) − 1, ceil(n·cos(π/2·s/S))),
/// masked(S) = 0. The strict-decrease clamp guarantees every step reveals
/// at least one token; counts sum to n.
pub fn cosine_unmask_counts(steps: usize, n: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > n {
        return Err(D2cError::config(format!("steps {steps} outside 1..={n}")));
    }
    let mut counts = Vec::with_capacity(steps);
    let mut masked = n;
    for s in 1..=steps {
        let raw = if s == steps {
            0
        } else {
            let angle = std::f64::consts::FRAC_PI_2 * s as f64 / steps as f64;
            (n as f64 * angle.cos()).ceil() as usize
        };
        let next = raw.min(masked - 1);
        counts.push(masked - next);
        masked = next;
    }
    debug_assert_eq!(masked, 0);
    debug_assert_eq!(counts.iter().sum::<usize>(), n);
    Ok(counts)
}

/// Guidance ramp: ω_s = 1 + (ω − 1) · revealed/n.
pub fn linear_guidance(omega: f64, revealed: usize, n: usize) -> f64 {
    debug_assert!(revealed <= n);
    1.0 + (omega - 1.0) * revealed as f64 / n as f64
}

/// Uniformly subsample {1..t_max} down to `m` strictly decreasing steps
/// ending at 1 and starting at t_max.
pub fn subsample_steps(t_max: usize, m: usize) -> Vec<usize> {
    let m = m.clamp(1, t_max);
    if m == 1 {
        return vec![1];
    }
    let mut steps = Vec::with_capacity(m);
    for k in 0..m {
        let t = t_max as f64 - k as f64 * (t_max - 1) as f64 / (m - 1) as f64;
        let t = t.round() as usize;
        if steps.last() != Some(&t) {
            steps.push(t);
        }
    }
    steps
}

// ── Pluggable condition and denoiser sources ────────────────────────

/// Produces per-masked-position condition vectors. The unconditional
/// side must not depend on the class or the discrete tokens.
pub trait ConditionProvider {
    fn cond_dim(&self) -> usize;
    fn conditional(&self, class: usize, latents: &LatentGrid, plan: &MaskPlan) -> Result<Vec<f64>>;
    fn unconditional(&self, latents: &LatentGrid, plan: &MaskPlan) -> Result<Vec<f64>>;
}

/// Predicts noise for a batch of tokens given per-row conditions.
pub trait TokenDenoiser {
    fn predict(&self, x_t: &[f64], n: usize, t: usize, z: &[f64]) -> Result<Vec<f64>>;
}

/// The trained Stage-2 model as a condition source for a fixed grid of
/// Stage-1 tokens.
pub struct Stage2Provider<'a> {
    pub model: &'a Stage2Model,
    pub tokens: &'a TokenGrid,
}

impl ConditionProvider for Stage2Provider<'_> {
    fn cond_dim(&self) -> usize {
        self.model.denoiser_config.cond_dim
    }

    fn conditional(&self, class: usize, latents: &LatentGrid, plan: &MaskPlan) -> Result<Vec<f64>> {
        self.model
            .condition_vectors(class, latents, plan, DiscreteCond::Tokens(self.tokens))
    }

    fn unconditional(&self, latents: &LatentGrid, plan: &MaskPlan) -> Result<Vec<f64>> {
        // class argument is unused on the drop branch; pass class 0
        self.model.condition_vectors(0, latents, plan, DiscreteCond::Drop)
    }
}

pub struct MlpTokenDenoiser<'a> {
    pub mlp: &'a DenoiserMlp,
    pub params: &'a ParamSet,
}

impl TokenDenoiser for MlpTokenDenoiser<'_> {
    fn predict(&self, x_t: &[f64], n: usize, t: usize, z: &[f64]) -> Result<Vec<f64>> {
        self.mlp.predict(self.params, x_t, n, &vec![t; n], z)
    }
}

struct GuidedStep<'a> {
    denoiser: &'a dyn TokenDenoiser,
    z_cond: &'a [f64],
    z_uncond: Option<&'a [f64]>,
    omega: f64,
}

impl NoisePredictor for GuidedStep<'_> {
    fn predict(&self, x_t: &[f64], n: usize, t: usize) -> Result<Vec<f64>> {
        let cond = self.denoiser.predict(x_t, n, t, self.z_cond)?;
        match self.z_uncond {
            Some(zu) if self.omega != 1.0 => {
                let uncond = self.denoiser.predict(x_t, n, t, zu)?;
                Ok(cfg_noise(&cond, &uncond, self.omega))
            }
            _ => Ok(cond),
        }
    }
}

/// Iterative unmasking over one sample: fresh random order, cosine
/// counts, guidance ramp, batched ancestral sampling of the newly
/// revealed positions at each step. Deterministic given
/// (seed, sample_index) regardless of parallelism: every token draws
/// from its own stream keyed by (seed, sample, step, position).
#[allow(clippy::too_many_arguments)]
pub fn unmask_loop(
    provider: &dyn ConditionProvider,
    denoiser: &dyn TokenDenoiser,
    class: usize,
    h: usize,
    w: usize,
    token_dim: usize,
    config: &GenerationConfig,
    schedule: &NoiseSchedule,
    sample_index: u64,
) -> Result<LatentGrid> {
    let n = h * w;
    config.validate(n)?;
    let counts = cosine_unmask_counts(config.steps, n)?;
    let t_steps = subsample_steps(schedule.len(), config.diffusion_steps);
    let cd = provider.cond_dim();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(config.seed, &[tag::ORDER, sample_index]));

    let mut latents = LatentGrid::zeros(h, w, token_dim);
    let mut revealed = 0usize;
    for (s, &count) in counts.iter().enumerate() {
        let plan = MaskPlan::new(order.clone(), n - revealed)?;
        let omega = if config.linear_guidance {
            linear_guidance(config.cfg_scale, revealed, n)
        } else {
            config.cfg_scale
        };
        let z_cond = provider.conditional(class, &latents, &plan)?;
        let z_uncond = if omega != 1.0 {
            Some(provider.unconditional(&latents, &plan)?)
        } else {
            None
        };
        // the first `count` masked positions are this step's targets
        let targets = &order[revealed..revealed + count];
        let step = GuidedStep {
            denoiser,
            z_cond: &z_cond[..count * cd],
            z_uncond: z_uncond.as_deref().map(|z| &z[..count * cd]),
            omega,
        };
        let mut rngs: Vec<_> = targets
            .iter()
            .map(|&p| {
                rng::stream(config.seed, &[tag::TOKEN_NOISE, sample_index, s as u64, p as u64])
            })
            .collect();
        let xs = ancestral_sample(&step, count, token_dim, schedule, &t_steps, &mut rngs)?;
        for (i, &p) in targets.iter().enumerate() {
            latents
                .token_mut(p)
                .copy_from_slice(&xs[i * token_dim..(i + 1) * token_dim]);
        }
        revealed += count;
    }
    debug_assert_eq!(revealed, n);
    Ok(latents)
}

/// Full two-stage generation of one sample.
pub fn generate(
    stage1: &Stage1Model,
    stage2: &Stage2Model,
    schedule: &NoiseSchedule,
    class: usize,
    config: &GenerationConfig,
    sample_index: u64,
) -> Result<(TokenGrid, LatentGrid)> {
    let s2cfg = &stage2.config;
    if stage1.config.vocab != s2cfg.vocab
        || stage1.config.h != s2cfg.h
        || stage1.config.w != s2cfg.w
    {
        return Err(D2cError::config("stage-1/stage-2 grid or vocab mismatch"));
    }
    let mut s1_rng = rng::stream(config.seed, &[tag::STAGE1_SAMPLE, sample_index]);
    let tokens =
        stage1.sample_discrete(class, config.temperature, config.stage1_cfg_scale, &mut s1_rng)?;
    let provider = Stage2Provider { model: stage2, tokens: &tokens };
    let denoiser = MlpTokenDenoiser { mlp: &stage2.mlp, params: &stage2.params };
    let latents = unmask_loop(
        &provider,
        &denoiser,
        class,
        s2cfg.h,
        s2cfg.w,
        s2cfg.token_dim,
        config,
        schedule,
        sample_index,
    )?;
    Ok((tokens, latents))
}

/// Generate one sample per (class, sample_index) pair, in parallel.
/// Output order and content are independent of the thread count.
pub fn generate_batch(
    stage1: &Stage1Model,
    stage2: &Stage2Model,
    schedule: &NoiseSchedule,
    classes: &[usize],
    config: &GenerationConfig,
) -> Result<Vec<(usize, TokenGrid, LatentGrid)>> {
    use rayon::prelude::*;
    classes
        .par_iter()
        .enumerate()
        .map(|(i, &class)| {
            let (tokens, latents) = generate(stage1, stage2, schedule, class, config, i as u64)?;
            Ok((class, tokens, latents))
        })
        .collect()
}
