//! Synthetic paired-tokenizer world.
//!
//! Stands in for a pretrained discrete/continuous tokenizer pair: each
//! class has a fixed template grid of codebook indices; a sample corrupts
//! the template at rate ρ and emits a continuous latent per cell whose
//! mean is the codebook embedding of the (possibly corrupted) index plus
//! a class offset. The class-conditional distribution is known in closed
//! form, so everything downstream can be checked against oracles.

use crate::error::{D2cError, Result};
use crate::rng::{self, tag};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// An h×w grid of discrete codebook indices, stored in raster order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    pub h: usize,
    pub w: usize,
    pub indices: Vec<usize>,
}

impl TokenGrid {
    pub fn new(h: usize, w: usize, indices: Vec<usize>) -> Result<Self> {
        if indices.len() != h * w {
            return Err(D2cError::shape(format!(
                "token grid {h}x{w} needs {} indices, got {}",
                h * w,
                indices.len()
            )));
        }
        Ok(TokenGrid { h, w, indices })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn cell(&self, row: usize, col: usize) -> usize {
        self.indices[row * self.w + col]
    }

    /// Rows view; `from_rows` is its exact inverse.
    pub fn rows(&self) -> Vec<Vec<usize>> {
        self.indices.chunks(self.w).map(|c| c.to_vec()).collect()
    }

    pub fn from_rows(rows: Vec<Vec<usize>>) -> Result<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != w) {
            return Err(D2cError::shape("ragged rows"));
        }
        TokenGrid::new(h, w, rows.into_iter().flatten().collect())
    }
}

/// An h×w grid of d-dimensional continuous tokens, raster order.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub values: Vec<f64>,
}

impl LatentGrid {
    pub fn new(h: usize, w: usize, d: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != h * w * d {
            return Err(D2cError::shape(format!(
                "latent grid {h}x{w}x{d} needs {} values, got {}",
                h * w * d,
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(D2cError::numeric("non-finite latent value"));
        }
        Ok(LatentGrid { h, w, d, values })
    }

    pub fn zeros(h: usize, w: usize, d: usize) -> Self {
        LatentGrid { h, w, d, values: vec![0.0; h * w * d] }
    }

    /// The d-vector at raster position `i`.
    pub fn token(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn token_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.d..(i + 1) * self.d]
    }
}

/// Parameters of the synthetic world.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct WorldConfig {
    pub seed: u64,
    /// C: number of classes.
    pub classes: usize,
    /// K: codebook size.
    pub codebook_size: usize,
    pub h: usize,
    pub w: usize,
    /// d: latent channel dimension.
    pub d: usize,
    /// ρ: per-cell probability of replacing the template index.
    pub corruption: f64,
    /// σ: latent noise scale.
    pub noise: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 0,
            classes: 4,
            codebook_size: 32,
            h: 8,
            w: 8,
            d: 4,
            corruption: 0.1,
            noise: 0.5,
        }
    }
}

/// A fully materialized synthetic world: codebook, class templates,
/// class offsets. Deterministic given the config.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    /// K×d codebook embeddings, row-major.
    pub codebook: Vec<f64>,
    /// Per class, h·w template indices.
    pub templates: Vec<Vec<usize>>,
    /// Per class, the d-dimensional offset μ_c.
    pub class_offsets: Vec<Vec<f64>>,
}

/// Exact first and second moments of a latent-cell distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    /// d×d covariance, row-major.
    pub cov: Vec<f64>,
}

pub fn build_world(config: &WorldConfig) -> Result<SyntheticWorld> {
    let c = config.classes;
    let k = config.codebook_size;
    if c < 1 {
        return Err(D2cError::config("classes must be >= 1"));
    }
    if k < 2 {
        return Err(D2cError::config("codebook_size must be >= 2"));
    }
    if !(0.0..1.0).contains(&config.corruption) {
        return Err(D2cError::config("corruption must be in [0, 1)"));
    }
    if config.noise <= 0.0 {
        return Err(D2cError::config("noise must be > 0"));
    }
    if config.h == 0 || config.w == 0 || config.d == 0 {
        return Err(D2cError::config("h, w, d must be >= 1"));
    }

    let mut cb_rng = rng::stream(config.seed, &[tag::WORLD, 0]);
    let codebook: Vec<f64> = (0..k * config.d)
        .map(|_| cb_rng.sample::<f64, _>(StandardNormal))
        .collect();

    let mut tmpl_rng = rng::stream(config.seed, &[tag::WORLD, 1]);
    let templates: Vec<Vec<usize>> = (0..c)
        .map(|_| (0..config.h * config.w).map(|_| tmpl_rng.gen_range(0..k)).collect())
        .collect();

    let mut off_rng = rng::stream(config.seed, &[tag::WORLD, 2]);
    let class_offsets: Vec<Vec<f64>> = (0..c)
        .map(|_| (0..config.d).map(|_| 0.5 * off_rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();

    Ok(SyntheticWorld { config: config.clone(), codebook, templates, class_offsets })
}

impl SyntheticWorld {
    pub fn codebook_row(&self, q: usize) -> &[f64] {
        &self.codebook[q * self.config.d..(q + 1) * self.config.d]
    }

    /// Draw one (TokenGrid, LatentGrid) pair for `class`.
    pub fn sample_pair(&self, class: usize, rng: &mut impl Rng) -> Result<(TokenGrid, LatentGrid)> {
        let cfg = &self.config;
        if class >= cfg.classes {
            return Err(D2cError::input(format!(
                "class {class} out of range (C = {})",
                cfg.classes
            )));
        }
        let n = cfg.h * cfg.w;
        let template = &self.templates[class];
        let mut indices = Vec::with_capacity(n);
        for i in 0..n {
            let corrupted = rng.gen::<f64>() < cfg.corruption;
            indices.push(if corrupted { rng.gen_range(0..cfg.codebook_size) } else { template[i] });
        }
        let mu = &self.class_offsets[class];
        let mut values = Vec::with_capacity(n * cfg.d);
        for &q in &indices {
            let cb = self.codebook_row(q);
            for j in 0..cfg.d {
                let eps: f64 = rng.sample(StandardNormal);
                values.push(cb[j] + mu[j] + cfg.noise * eps);
            }
        }
        Ok((
            TokenGrid::new(cfg.h, cfg.w, indices)?,
            LatentGrid::new(cfg.h, cfg.w, cfg.d, values)?,
        ))
    }

    /// Exact pooled mean and covariance of latent cells for one class,
    /// mixing uniformly over grid cells and over the corruption law.
    pub fn oracle_class_stats(&self, class: usize) -> Result<LatentStats> {
        let cfg = &self.config;
        if class >= cfg.classes {
            return Err(D2cError::input(format!(
                "class {class} out of range (C = {})",
                cfg.classes
            )));
        }
        let (d, k, n) = (cfg.d, cfg.codebook_size, cfg.h * cfg.w);
        let rho = cfg.corruption;
        let mu = &self.class_offsets[class];

        // shifted codebook rows e_q = codebook[q] + μ_c
        let shifted: Vec<Vec<f64>> = (0..k)
            .map(|q| self.codebook_row(q).iter().zip(mu).map(|(a, b)| a + b).collect())
            .collect();

        let mut mean_all = vec![0.0; d]; // average of e_q over the whole codebook
        let mut second_all = vec![0.0; d * d];
        for e in &shifted {
            for i in 0..d {
                mean_all[i] += e[i] / k as f64;
                for j in 0..d {
                    second_all[i * d + j] += e[i] * e[j] / k as f64;
                }
            }
        }

        let template = &self.templates[class];
        let mut mean_tmpl = vec![0.0; d]; // average of e_{t_ij} over cells
        let mut second_tmpl = vec![0.0; d * d];
        for &t in template {
            let e = &shifted[t];
            for i in 0..d {
                mean_tmpl[i] += e[i] / n as f64;
                for j in 0..d {
                    second_tmpl[i * d + j] += e[i] * e[j] / n as f64;
                }
            }
        }

        let mean: Vec<f64> = (0..d)
            .map(|i| rho * mean_all[i] + (1.0 - rho) * mean_tmpl[i])
            .collect();
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let second = rho * second_all[i * d + j] + (1.0 - rho) * second_tmpl[i * d + j];
                cov[i * d + j] = second - mean[i] * mean[j];
                if i == j {
                    cov[i * d + j] += cfg.noise * cfg.noise;
                }
            }
        }
        Ok(LatentStats { mean, cov })
    }

    /// Pooled stats mixing all classes uniformly.
    pub fn oracle_pooled_stats(&self) -> Result<LatentStats> {
        let (c, d) = (self.config.classes, self.config.d);
        let per_class: Vec<LatentStats> =
            (0..c).map(|cl| self.oracle_class_stats(cl)).collect::<Result<_>>()?;
        let mut mean = vec![0.0; d];
        for s in &per_class {
            for i in 0..d {
                mean[i] += s.mean[i] / c as f64;
            }
        }
        let mut cov = vec![0.0; d * d];
        for s in &per_class {
            for i in 0..d {
                for j in 0..d {
                    // E[zz^T] for this class, then subtract pooled mean outer product
                    cov[i * d + j] +=
                        (s.cov[i * d + j] + s.mean[i] * s.mean[j]) / c as f64;
                }
            }
        }
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] -= mean[i] * mean[j];
            }
        }
        Ok(LatentStats { mean, cov })
    }

    /// Per-cell entropy (nats) of the corrupted template distribution:
    /// the template index has probability 1−ρ+ρ/K, every other index ρ/K.
    pub fn oracle_template_entropy(&self) -> f64 {
        let k = self.config.codebook_size as f64;
        let rho = self.config.corruption;
        let p_top = 1.0 - rho + rho / k;
        let p_rest = rho / k;
        let term = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
        term(p_top) + (k - 1.0) * term(p_rest)
    }

    /// The per-cell conditional mean of z given the discrete token:
    /// codebook[q] + μ_c. This is the coarse-to-fine structure Stage 2
    /// has to learn.
    pub fn conditional_mean(&self, class: usize, q: usize) -> Vec<f64> {
        self.codebook_row(q)
            .iter()
            .zip(&self.class_offsets[class])
            .map(|(a, b)| a + b)
            .collect()
    }
}

// ── Dataset records and binary export ───────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSample {
    pub class: usize,
    pub tokens: TokenGrid,
    pub latents: LatentGrid,
}

/// Deterministically generate `count` samples; classes round-robin and
/// each sample comes from its own RNG stream keyed by (seed, index), so
/// generation parallelizes without affecting the result.
pub fn generate_dataset(world: &SyntheticWorld, count: usize) -> Vec<DatasetSample> {
    use rayon::prelude::*;
    (0..count)
        .into_par_iter()
        .map(|i| {
            let class = i % world.config.classes;
            let mut r = rng::stream(world.config.seed, &[tag::DATASET, i as u64]);
            let (tokens, latents) = world
                .sample_pair(class, &mut r)
                .expect("round-robin class is always in range");
            DatasetSample { class, tokens, latents }
        })
        .collect()
}

pub const DATASET_MAGIC: &[u8; 4] = b"D2CD";
pub const DATASET_VERSION: u32 = 1;

/// Header + samples. 32-byte header: magic, then version, C, K, h, w, d,
/// count as u32 little-endian. Records follow as (class: u32,
/// indices: h·w u32, values: h·w·d f32), all little-endian.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetHeader {
    pub version: u32,
    pub classes: u32,
    pub codebook_size: u32,
    pub h: u32,
    pub w: u32,
    pub d: u32,
    pub count: u32,
}

pub fn write_dataset(path: &Path, world: &SyntheticWorld, samples: &[DatasetSample]) -> Result<()> {
    let cfg = &world.config;
    let mut buf = Vec::with_capacity(32 + samples.len() * (4 + cfg.h * cfg.w * (4 + 4 * cfg.d)));
    buf.extend_from_slice(DATASET_MAGIC);
    for v in [
        DATASET_VERSION,
        cfg.classes as u32,
        cfg.codebook_size as u32,
        cfg.h as u32,
        cfg.w as u32,
        cfg.d as u32,
        samples.len() as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for s in samples {
        buf.extend_from_slice(&(s.class as u32).to_le_bytes());
        for &q in &s.tokens.indices {
            buf.extend_from_slice(&(q as u32).to_le_bytes());
        }
        for &v in &s.latents.values {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp)?.write_all(&buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<DatasetSample>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 32 || &bytes[..4] != DATASET_MAGIC {
        return Err(D2cError::format("bad dataset magic or truncated header"));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let header = DatasetHeader {
        version: u32_at(4),
        classes: u32_at(8),
        codebook_size: u32_at(12),
        h: u32_at(16),
        w: u32_at(20),
        d: u32_at(24),
        count: u32_at(28),
    };
    if header.version != DATASET_VERSION {
        return Err(D2cError::format(format!("unsupported dataset version {}", header.version)));
    }
    let (h, w, d) = (header.h as usize, header.w as usize, header.d as usize);
    let rec_len = 4 + h * w * 4 + h * w * d * 4;
    let expect = 32 + header.count as usize * rec_len;
    if bytes.len() != expect {
        return Err(D2cError::format(format!(
            "dataset length {} != expected {expect}",
            bytes.len()
        )));
    }
    let mut samples = Vec::with_capacity(header.count as usize);
    let mut off = 32;
    for _ in 0..header.count {
        let class = u32_at(off) as usize;
        off += 4;
        let mut indices = Vec::with_capacity(h * w);
        for _ in 0..h * w {
            let q = u32_at(off) as usize;
            if q >= header.codebook_size as usize {
                return Err(D2cError::format(format!("token index {q} out of codebook")));
            }
            indices.push(q);
            off += 4;
        }
        let mut values = Vec::with_capacity(h * w * d);
        for _ in 0..h * w * d {
            let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            values.push(v as f64);
            off += 4;
        }
        samples.push(DatasetSample {
            class,
            tokens: TokenGrid::new(h, w, indices)?,
            latents: LatentGrid::new(h, w, d, values)?,
        });
    }
    Ok((header, samples))
}
