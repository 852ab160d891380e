//! Per-token denoising: noise schedule, forward noising, the small MLP
//! noise predictor, the diffusion loss, CFG combination, and ancestral
//! sampling of individual continuous tokens.

use crate::autodiff::{Binding, ParamId, ParamSet, Tape, Tensor, TensorId};
use crate::error::{D2cError, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

/// The table ᾱ_t for t ∈ {1..T}. Strictly decreasing, ᾱ_1 ≥ 0.99,
/// ᾱ_T ≤ 0.05; ᾱ_0 is defined as 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Validate and wrap an explicit ᾱ table.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(D2cError::config("schedule needs T >= 2"));
        }
        let t_max = alpha_bar.len();
        for (i, &a) in alpha_bar.iter().enumerate() {
            if !(a > 0.0 && a <= 1.0) {
                return Err(D2cError::config(format!("alpha_bar[{i}] = {a} outside (0, 1]")));
            }
            if i > 0 && a >= alpha_bar[i - 1] {
                return Err(D2cError::config("alpha_bar must be strictly decreasing"));
            }
        }
        if alpha_bar[0] < 0.99 - 1e-12 {
            return Err(D2cError::config(format!(
                "alpha_bar[1] = {} must be >= 0.99",
                alpha_bar[0]
            )));
        }
        if alpha_bar[t_max - 1] > 0.05 {
            return Err(D2cError::config(format!(
                "alpha_bar[T] = {} must be <= 0.05",
                alpha_bar[t_max - 1]
            )));
        }
        Ok(NoiseSchedule { alpha_bar })
    }

    pub fn len(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// ᾱ_t for t in 0..=T, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Per-step α_t = ᾱ_t / ᾱ_{t−1}, t in 1..=T.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha_bar(t) / self.alpha_bar(t - 1)
    }
}

/// Build a schedule of `t_max` steps.
///
/// Cosine: ᾱ_t = f(t)/f(0) with f(t) = cos²((t/T + s)/(1 + s) · π/2),
/// s = 0.008, accumulated through per-step β_t clamped at 0.999.
/// Linear: β_t interpolates 1e-4 → 0.02 over a reference length of 1000
/// steps and is rescaled by 1000/T so the endpoint contract holds at any
/// T; ᾱ_t is the running product of (1 − β_t).
pub fn make_schedule(t_max: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if t_max < 2 {
        return Err(D2cError::config("schedule needs T >= 2"));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |t: f64| {
                let x = (t / t_max as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
                x.cos().powi(2)
            };
            (1..=t_max)
                .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).min(0.999))
                .collect()
        }
        ScheduleKind::Linear => {
            let (b1, bt) = (1e-4, 0.02);
            let scale = 1000.0 / t_max as f64;
            (1..=t_max)
                .map(|t| {
                    let frac = (t - 1) as f64 / (t_max - 1) as f64;
                    (scale * (b1 + frac * (bt - b1))).min(0.999)
                })
                .collect()
        }
    };
    let mut alpha_bar = Vec::with_capacity(t_max);
    let mut prod = 1.0;
    for b in betas {
        prod *= 1.0 - b;
        alpha_bar.push(prod);
    }
    NoiseSchedule::from_alpha_bar(alpha_bar)
}

/// x_t = √ᾱ_t · x0 + √(1−ᾱ_t) · ε
pub fn add_noise(x0: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    if t < 1 || t > schedule.len() {
        return Err(D2cError::input(format!("t = {t} outside 1..={}", schedule.len())));
    }
    if x0.len() != eps.len() {
        return Err(D2cError::shape("x0 and eps length mismatch"));
    }
    let ab = schedule.alpha_bar(t);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| sa * x + sb * e).collect())
}

/// ε̂ = ε_uncond + ω · (ε_cond − ε_uncond). ω = 1 returns the
/// conditional prediction unchanged, keeping the identity exact.
pub fn cfg_noise(eps_cond: &[f64], eps_uncond: &[f64], omega: f64) -> Vec<f64> {
    debug_assert_eq!(eps_cond.len(), eps_uncond.len());
    if omega == 1.0 {
        return eps_cond.to_vec();
    }
    eps_cond
        .iter()
        .zip(eps_uncond)
        .map(|(c, u)| u + omega * (c - u))
        .collect()
}

// ── Denoiser MLP ────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DenoiserConfig {
    /// Token dimension d (input and output).
    pub token_dim: usize,
    /// Hidden width; also the timestep-embedding dimension.
    pub width: usize,
    /// Condition vector dimension.
    pub cond_dim: usize,
    /// Residual blocks.
    pub blocks: usize,
    /// Training steps T of the schedule.
    pub steps: usize,
    pub schedule: ScheduleKind,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            token_dim: 4,
            width: 64,
            cond_dim: 64,
            blocks: 3,
            steps: 100,
            schedule: ScheduleKind::Cosine,
        }
    }
}

/// Parameter handles for the noise-prediction MLP
/// ε_θ(x_t | t, z): input projection of x_t plus a condition pathway
/// (projected z plus sinusoidal timestep embedding), then residual
/// blocks of rms_norm → linear → silu → linear, then an output head.
#[derive(Debug, Clone)]
pub struct DenoiserMlp {
    pub config: DenoiserConfig,
    w_in: ParamId,
    w_cond: ParamId,
    blocks: Vec<(ParamId, ParamId, ParamId)>, // (gamma, w1, w2)
    gamma_out: ParamId,
    w_out: ParamId,
}

impl DenoiserMlp {
    pub fn init(config: &DenoiserConfig, params: &mut ParamSet, prefix: &str, rng: &mut impl Rng) -> Self {
        let (d, w, c) = (config.token_dim, config.width, config.cond_dim);
        let std = 0.02;
        let w_in = params.add(&format!("{prefix}.w_in"), Tensor::randn(vec![d, w], std, rng));
        let w_cond = params.add(&format!("{prefix}.w_cond"), Tensor::randn(vec![c, w], std, rng));
        let mut blocks = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            let gamma = params.add(&format!("{prefix}.block{i}.gamma"), Tensor::filled(vec![w], 1.0));
            let w1 = params.add(&format!("{prefix}.block{i}.w1"), Tensor::randn(vec![w, w], std, rng));
            let w2 = params.add(&format!("{prefix}.block{i}.w2"), Tensor::randn(vec![w, w], std, rng));
            blocks.push((gamma, w1, w2));
        }
        let gamma_out = params.add(&format!("{prefix}.gamma_out"), Tensor::filled(vec![w], 1.0));
        let w_out = params.add(&format!("{prefix}.w_out"), Tensor::randn(vec![w, d], std, rng));
        DenoiserMlp { config: config.clone(), w_in, w_cond, blocks, gamma_out, w_out }
    }

    /// Rebuild handles from a ParamSet that already contains the tensors
    /// (checkpoint load path).
    pub fn from_params(config: &DenoiserConfig, params: &ParamSet, prefix: &str) -> Result<Self> {
        let look = |name: String| {
            params
                .lookup(&name)
                .ok_or_else(|| D2cError::format(format!("missing parameter {name}")))
        };
        let mut blocks = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            blocks.push((
                look(format!("{prefix}.block{i}.gamma"))?,
                look(format!("{prefix}.block{i}.w1"))?,
                look(format!("{prefix}.block{i}.w2"))?,
            ));
        }
        Ok(DenoiserMlp {
            config: config.clone(),
            w_in: look(format!("{prefix}.w_in"))?,
            w_cond: look(format!("{prefix}.w_cond"))?,
            blocks,
            gamma_out: look(format!("{prefix}.gamma_out"))?,
            w_out: look(format!("{prefix}.w_out"))?,
        })
    }

    /// Predict ε for a batch of noisy tokens [n, d] at shared or per-row
    /// timesteps, conditioned on z [n, cond_dim].
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        x_t: TensorId,
        timesteps: &[usize],
        z: TensorId,
    ) -> Result<TensorId> {
        let n = tape.shape(x_t)[0];
        if timesteps.len() != n {
            return Err(D2cError::shape(format!(
                "{} timesteps for {n} rows",
                timesteps.len()
            )));
        }
        let temb = tape.constant(timestep_embedding(timesteps, self.config.width));
        let xin = tape.matmul(x_t, bind.id(self.w_in))?;
        let zin = tape.matmul(z, bind.id(self.w_cond))?;
        let cond = tape.add(zin, temb)?;
        let mut h = tape.add(xin, cond)?;
        for (gamma, w1, w2) in &self.blocks {
            let normed = tape.rms_norm(h, bind.id(*gamma), 1e-6)?;
            let a = tape.matmul(normed, bind.id(*w1))?;
            let s = tape.silu(a)?;
            let b = tape.matmul(s, bind.id(*w2))?;
            h = tape.add(h, b)?;
        }
        let normed = tape.rms_norm(h, bind.id(self.gamma_out), 1e-6)?;
        tape.matmul(normed, bind.id(self.w_out))
    }

    /// Inference-path predictor: fresh no-grad tape per call.
    pub fn predict(
        &self,
        params: &ParamSet,
        x_t: &[f64],
        n: usize,
        timesteps: &[usize],
        z: &[f64],
    ) -> Result<Vec<f64>> {
        let d = self.config.token_dim;
        let c = self.config.cond_dim;
        let mut tape = Tape::new();
        let bind = params.bind(&mut tape);
        let x = tape.constant(Tensor::from_raw(vec![n, d], x_t.to_vec()));
        let zc = tape.constant(Tensor::from_raw(vec![n, c], z.to_vec()));
        let out = self.forward(&mut tape, &bind, x, timesteps, zc)?;
        Ok(tape.value(out).data().to_vec())
    }
}

/// Sinusoidal embedding of (possibly distinct) timesteps, one row each.
pub fn timestep_embedding(timesteps: &[usize], width: usize) -> Tensor {
    let half = width / 2;
    let mut data = Vec::with_capacity(timesteps.len() * width);
    for &t in timesteps {
        for i in 0..half {
            let freq = (10_000f64).powf(-(i as f64) / half as f64);
            data.push((t as f64 * freq).sin());
        }
        for i in 0..width - half {
            let freq = (10_000f64).powf(-(i as f64) / half as f64);
            data.push((t as f64 * freq).cos());
        }
    }
    Tensor::from_raw(vec![timesteps.len(), width], data)
}

// ── Diffusion loss ──────────────────────────────────────────────────

/// Per-token noise targets drawn for a batch: t ~ U{1..T}, ε ~ N(0, I).
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub timesteps: Vec<usize>,
    pub eps: Vec<f64>,
}

pub fn draw_noise(n: usize, d: usize, t_max: usize, rng: &mut impl Rng) -> NoiseDraw {
    let timesteps = (0..n).map(|_| rng.gen_range(1..=t_max)).collect();
    let eps = (0..n * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    NoiseDraw { timesteps, eps }
}

/// Batched Eq.-style diffusion loss: mean over rows of ‖ε − ε̂‖².
///
/// `x0` and `z` are [n, d] and [n, cond_dim] tensors already on the tape
/// (`z` may carry gradients back into the producing model). The (t, ε)
/// draw is injected so tests can freeze it.
pub fn diffusion_loss(
    tape: &mut Tape,
    bind: &Binding,
    mlp: &DenoiserMlp,
    z: TensorId,
    x0: TensorId,
    draw: &NoiseDraw,
    schedule: &NoiseSchedule,
) -> Result<TensorId> {
    let shape = tape.shape(x0).to_vec();
    if shape.len() != 2 || shape[1] != mlp.config.token_dim {
        return Err(D2cError::shape(format!("x0 shape {shape:?} != [n, token_dim]")));
    }
    let (n, d) = (shape[0], shape[1]);
    if draw.timesteps.len() != n || draw.eps.len() != n * d {
        return Err(D2cError::shape("noise draw does not match batch"));
    }
    // x_t rows built outside the tape: the forward noising of x0 is an
    // affine function of constants and the (x0-valued) data; gradients
    // flow only through the predictor input, matching the ε-loss.
    let x0_host = tape.value(x0).data().to_vec();
    let mut xt = Vec::with_capacity(n * d);
    for r in 0..n {
        let row = add_noise(
            &x0_host[r * d..(r + 1) * d],
            draw.timesteps[r],
            &draw.eps[r * d..(r + 1) * d],
            schedule,
        )?;
        xt.extend_from_slice(&row);
    }
    let xt = tape.constant(Tensor::from_raw(vec![n, d], xt));
    let pred = mlp.forward(tape, bind, xt, &draw.timesteps, z)?;
    let target = tape.constant(Tensor::from_raw(vec![n, d], draw.eps.clone()));
    // mse averages over n·d entries; scale by d to get mean over rows of ‖·‖²
    let m = tape.mse(pred, target)?;
    tape.scale(m, d as f64)
}

// ── Ancestral sampling ──────────────────────────────────────────────

/// Noise predictor abstraction for sampling: maps a batch of noisy
/// tokens [n, d] at timestep t to predicted noise [n, d].
pub trait NoisePredictor {
    fn predict(&self, x_t: &[f64], n: usize, t: usize) -> Result<Vec<f64>>;
}

impl<F> NoisePredictor for F
where
    F: Fn(&[f64], usize, usize) -> Result<Vec<f64>>,
{
    fn predict(&self, x_t: &[f64], n: usize, t: usize) -> Result<Vec<f64>> {
        self(x_t, n, t)
    }
}

/// MLP-backed predictor with CFG: two conditions, one guidance scale.
pub struct GuidedMlpPredictor<'a> {
    pub mlp: &'a DenoiserMlp,
    pub params: &'a ParamSet,
    pub z_cond: Vec<f64>,
    pub z_uncond: Vec<f64>,
    pub omega: f64,
}

impl NoisePredictor for GuidedMlpPredictor<'_> {
    fn predict(&self, x_t: &[f64], n: usize, t: usize) -> Result<Vec<f64>> {
        let ts = vec![t; n];
        let cond = self.mlp.predict(self.params, x_t, n, &ts, &self.z_cond)?;
        if self.omega == 1.0 {
            return Ok(cond);
        }
        let uncond = self.mlp.predict(self.params, x_t, n, &ts, &self.z_uncond)?;
        Ok(cfg_noise(&cond, &uncond, self.omega))
    }
}

/// DDPM ancestral sampling of `n` tokens of dimension `d`, vectorized
/// across tokens (shared t per update). `steps` is a strictly decreasing
/// subsequence of {1..T} ending at 1; pass `(1..=T).rev()` for the full
/// chain. One RNG per token keeps the draw independent of batching.
pub fn ancestral_sample(
    predictor: &dyn NoisePredictor,
    n: usize,
    d: usize,
    schedule: &NoiseSchedule,
    steps: &[usize],
    rngs: &mut [impl Rng],
) -> Result<Vec<f64>> {
    if rngs.len() != n {
        return Err(D2cError::shape("one RNG stream per token required"));
    }
    if steps.is_empty() || *steps.last().unwrap() != 1 {
        return Err(D2cError::config("step subsequence must end at t = 1"));
    }
    for w in steps.windows(2) {
        if w[1] >= w[0] {
            return Err(D2cError::config("step subsequence must be strictly decreasing"));
        }
    }
    if steps[0] > schedule.len() {
        return Err(D2cError::config("step subsequence exceeds schedule length"));
    }

    let mut x: Vec<f64> = Vec::with_capacity(n * d);
    for rng in rngs.iter_mut() {
        for _ in 0..d {
            x.push(rng.sample::<f64, _>(StandardNormal));
        }
    }
    for (si, &t) in steps.iter().enumerate() {
        let t_prev = if si + 1 < steps.len() { steps[si + 1] } else { 0 };
        let eps_hat = predictor.predict(&x, n, t)?;
        let ab_t = schedule.alpha_bar(t);
        let ab_prev = schedule.alpha_bar(t_prev);
        let alpha_eff = ab_t / ab_prev;
        let coef = (1.0 - alpha_eff) / (1.0 - ab_t).sqrt();
        let inv_sqrt_a = 1.0 / alpha_eff.sqrt();
        let sigma = if t_prev == 0 {
            0.0
        } else {
            ((1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - alpha_eff)).sqrt()
        };
        for (r, rng) in rngs.iter_mut().enumerate() {
            for j in 0..d {
                let idx = r * d + j;
                let mean = inv_sqrt_a * (x[idx] - coef * eps_hat[idx]);
                let noise: f64 =
                    if sigma > 0.0 { rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
                x[idx] = mean + sigma * noise;
            }
        }
    }
    Ok(x)
}

/// Single-token convenience wrapper over [`ancestral_sample`] with the
/// full step chain and MLP-backed CFG.
pub fn sample_token<R: Rng>(
    mlp: &DenoiserMlp,
    params: &ParamSet,
    z_cond: &[f64],
    z_uncond: &[f64],
    omega: f64,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let steps: Vec<usize> = (1..=schedule.len()).rev().collect();
    let predictor = GuidedMlpPredictor {
        mlp,
        params,
        z_cond: z_cond.to_vec(),
        z_uncond: z_uncond.to_vec(),
        omega,
    };
    let mut rngs = [rng];
    ancestral_sample(&predictor, 1, mlp.config.token_dim, schedule, &steps, &mut rngs)
}
