//! Stage 1: class-conditional causal transformer over discrete token
//! grids.
//!
//! Llama-flavored blocks (RMSNorm, causal self-attention with 2D rotary
//! embeddings, SwiGLU feed-forward), a class-embedding prefix at
//! position 0, and a linear head over the codebook. Sampling walks the
//! grid in raster order with temperature and logit-space classifier-free
//! guidance.

use crate::autodiff::{Binding, ParamId, ParamSet, Tape, Tensor, TensorId};
use crate::error::{D2cError, Result};
use crate::synthetic::TokenGrid;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const ROPE_BASE: f64 = 10_000.0;
/// Additive mask value for disallowed attention slots. Finite so the
/// softmax NaN guard stays meaningful; exp(-1e30 - max) underflows to 0.
const MASK_NEG: f64 = -1e30;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct Stage1Config {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub ffn_hidden: usize,
    /// K: codebook size (vocabulary).
    pub vocab: usize,
    /// C: classes. The class-embedding table has C+1 rows; the last row
    /// is the fake class used for guidance dropout.
    pub classes: usize,
    pub h: usize,
    pub w: usize,
    /// Probability of replacing the class with the fake class per sample
    /// during training.
    pub class_drop: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            layers: 2,
            heads: 4,
            width: 64,
            ffn_hidden: 128,
            vocab: 32,
            classes: 4,
            h: 8,
            w: 8,
            class_drop: 0.1,
        }
    }
}

impl Stage1Config {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn grid_len(&self) -> usize {
        self.h * self.w
    }

    /// Row index of the fake class in the class-embedding table.
    pub fn fake_class(&self) -> usize {
        self.classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.width % self.heads != 0 {
            return Err(D2cError::config(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.head_dim() % 4 != 0 {
            return Err(D2cError::config(format!(
                "head dim {} must be divisible by 4 for 2D rotary halves",
                self.head_dim()
            )));
        }
        if self.layers == 0 || self.vocab < 2 || self.classes == 0 || self.h == 0 || self.w == 0 {
            return Err(D2cError::config("degenerate stage-1 config"));
        }
        if !(0.0..1.0).contains(&self.class_drop) {
            return Err(D2cError::config("class_drop must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct BlockIds {
    gamma1: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    gamma2: ParamId,
    w1: ParamId,
    w3: ParamId,
    w2: ParamId,
}

#[derive(Debug, Clone)]
pub struct Stage1Model {
    pub config: Stage1Config,
    pub params: ParamSet,
    token_embedding: ParamId,
    class_embedding: ParamId,
    blocks: Vec<BlockIds>,
    head: ParamId,
}

fn block_ids(params: &mut ParamSet, i: usize, cfg: &Stage1Config, rng: &mut impl Rng) -> BlockIds {
    let (w, f) = (cfg.width, cfg.ffn_hidden);
    let std = 0.02;
    BlockIds {
        gamma1: params.add(&format!("block{i}.gamma1"), Tensor::filled(vec![w], 1.0)),
        wq: params.add(&format!("block{i}.wq"), Tensor::randn(vec![w, w], std, rng)),
        wk: params.add(&format!("block{i}.wk"), Tensor::randn(vec![w, w], std, rng)),
        wv: params.add(&format!("block{i}.wv"), Tensor::randn(vec![w, w], std, rng)),
        wo: params.add(&format!("block{i}.wo"), Tensor::randn(vec![w, w], std, rng)),
        gamma2: params.add(&format!("block{i}.gamma2"), Tensor::filled(vec![w], 1.0)),
        w1: params.add(&format!("block{i}.w1"), Tensor::randn(vec![w, f], std, rng)),
        w3: params.add(&format!("block{i}.w3"), Tensor::randn(vec![w, f], std, rng)),
        w2: params.add(&format!("block{i}.w2"), Tensor::randn(vec![f, w], std, rng)),
    }
}

fn lookup_block(params: &ParamSet, i: usize) -> Result<BlockIds> {
    let look = |name: String| {
        params
            .lookup(&name)
            .ok_or_else(|| D2cError::format(format!("missing parameter {name}")))
    };
    Ok(BlockIds {
        gamma1: look(format!("block{i}.gamma1"))?,
        wq: look(format!("block{i}.wq"))?,
        wk: look(format!("block{i}.wk"))?,
        wv: look(format!("block{i}.wv"))?,
        wo: look(format!("block{i}.wo"))?,
        gamma2: look(format!("block{i}.gamma2"))?,
        w1: look(format!("block{i}.w1"))?,
        w3: look(format!("block{i}.w3"))?,
        w2: look(format!("block{i}.w2"))?,
    })
}

impl Stage1Model {
    pub fn init(config: &Stage1Config, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::rng::stream(seed, &[crate::rng::tag::INIT, 1]);
        let mut params = ParamSet::new();
        let std = 0.02;
        let token_embedding = params.add(
            "token_embedding",
            Tensor::randn(vec![config.vocab, config.width], std, &mut rng),
        );
        let class_embedding = params.add(
            "class_embedding",
            Tensor::randn(vec![config.classes + 1, config.width], std, &mut rng),
        );
        let blocks = (0..config.layers)
            .map(|i| block_ids(&mut params, i, config, &mut rng))
            .collect();
        let head = params.add("head", Tensor::randn(vec![config.width, config.vocab], std, &mut rng));
        Ok(Stage1Model { config: config.clone(), params, token_embedding, class_embedding, blocks, head })
    }

    /// Rebuild handles over a loaded ParamSet.
    pub fn from_params(config: &Stage1Config, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let look = |name: &str| {
            params
                .lookup(name)
                .ok_or_else(|| D2cError::format(format!("missing parameter {name}")))
        };
        let token_embedding = look("token_embedding")?;
        let class_embedding = look("class_embedding")?;
        let head = look("head")?;
        let blocks = (0..config.layers)
            .map(|i| lookup_block(&params, i))
            .collect::<Result<_>>()?;
        Ok(Stage1Model { config: config.clone(), params, token_embedding, class_embedding, blocks, head })
    }

    /// Freeze every parameter (post-training protocol).
    pub fn freeze(&mut self) {
        self.params.freeze_all();
    }

    pub fn token_embedding_tensor(&self) -> &Tensor {
        self.params.get(self.token_embedding)
    }

    /// Tape-level forward. `class_row` indexes the class-embedding table
    /// (the fake row included); `tokens` is a raster-order prefix. Output
    /// is [len+1, K]: row i is the next-token distribution after seeing
    /// the class and tokens < i.
    pub fn forward_logits_tape(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        class_row: usize,
        tokens: &[usize],
    ) -> Result<TensorId> {
        let cfg = &self.config;
        if class_row > cfg.classes {
            return Err(D2cError::input(format!(
                "class row {class_row} out of range (fake class is {})",
                cfg.classes
            )));
        }
        if tokens.len() > cfg.grid_len() {
            return Err(D2cError::input(format!(
                "prefix length {} exceeds grid {}",
                tokens.len(),
                cfg.grid_len()
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab) {
            return Err(D2cError::input(format!("token {bad} out of vocab {}", cfg.vocab)));
        }

        let seq = tokens.len() + 1;
        let cls = tape.gather(bind.id(self.class_embedding), &[class_row])?;
        let mut x = if tokens.is_empty() {
            cls
        } else {
            let toks = tape.gather(bind.id(self.token_embedding), tokens)?;
            tape.concat(&[cls, toks], 0)?
        };

        let mask = tape.constant(causal_mask(seq));
        let (cos_t, sin_t) = rope2d_tables(seq, cfg.h, cfg.w, cfg.head_dim());
        let cos = tape.constant(cos_t);
        let sin = tape.constant(sin_t);
        let pair = tape.constant(pair_swap_matrix(cfg.head_dim()));

        for b in &self.blocks {
            let normed = tape.rms_norm(x, bind.id(b.gamma1), 1e-6)?;
            let attn = self.attention(tape, bind, b, normed, mask, cos, sin, pair)?;
            x = tape.add(x, attn)?;
            let normed = tape.rms_norm(x, bind.id(b.gamma2), 1e-6)?;
            let ffn = tape.swiglu(normed, bind.id(b.w1), bind.id(b.w3), bind.id(b.w2))?;
            x = tape.add(x, ffn)?;
        }
        tape.matmul(x, bind.id(self.head))
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        b: &BlockIds,
        x: TensorId,
        mask: TensorId,
        cos: TensorId,
        sin: TensorId,
        pair: TensorId,
    ) -> Result<TensorId> {
        let cfg = &self.config;
        let hd = cfg.head_dim();
        let q = tape.matmul(x, bind.id(b.wq))?;
        let k = tape.matmul(x, bind.id(b.wk))?;
        let v = tape.matmul(x, bind.id(b.wv))?;
        let sizes = vec![hd; cfg.heads];
        let qs = tape.split(q, 1, &sizes)?;
        let ks = tape.split(k, 1, &sizes)?;
        let vs = tape.split(v, 1, &sizes)?;
        let mut outs = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = rope2d(tape, qs[h], cos, sin, pair)?;
            let kh = rope2d(tape, ks[h], cos, sin, pair)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scaled = tape.scale(scores, 1.0 / (hd as f64).sqrt())?;
            let masked = tape.add(scaled, mask)?;
            let attn = tape.softmax(masked, 1)?;
            outs.push(tape.matmul(attn, vs[h])?);
        }
        let merged = tape.concat(&outs, 1)?;
        tape.matmul(merged, bind.id(b.wo))
    }

    /// Standalone forward on a fresh tape; returns the logits tensor.
    pub fn forward_logits(&self, class_row: usize, tokens: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bind = self.params.bind(&mut tape);
        let out = self.forward_logits_tape(&mut tape, &bind, class_row, tokens)?;
        Ok(tape.value(out).clone())
    }

    /// Mean next-token cross-entropy over a batch of (class, grid), with
    /// per-sample class dropout at `class_drop`.
    pub fn loss_tape(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        batch: &[(usize, &TokenGrid)],
        rng: &mut impl Rng,
    ) -> Result<TensorId> {
        if batch.is_empty() {
            return Err(D2cError::contract("empty stage-1 batch"));
        }
        let cfg = &self.config;
        let n = cfg.grid_len();
        let mut parts = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len() * n);
        for &(class, grid) in batch {
            if class >= cfg.classes {
                return Err(D2cError::input(format!("class {class} out of range")));
            }
            if grid.len() != n {
                return Err(D2cError::shape("grid does not match config"));
            }
            let dropped = cfg.class_drop > 0.0 && rng.gen::<f64>() < cfg.class_drop;
            let row = if dropped { cfg.fake_class() } else { class };
            let logits = self.forward_logits_tape(tape, bind, row, &grid.indices)?;
            // rows 0..n predict tokens 0..n; the final row (beyond-grid) is unused
            let used = tape.narrow(logits, 0, 0, n)?;
            parts.push(used);
            targets.extend_from_slice(&grid.indices);
        }
        let all = tape.concat(&parts, 0)?;
        tape.cross_entropy(all, &targets)
    }

    /// Convenience wrapper: fresh tape, scalar loss value.
    pub fn loss(&self, batch: &[(usize, &TokenGrid)], rng: &mut impl Rng) -> Result<f64> {
        let mut tape = Tape::new();
        let bind = self.params.bind(&mut tape);
        let loss = self.loss_tape(&mut tape, &bind, batch, rng)?;
        tape.value(loss).item()
    }

    /// Sample a grid left-to-right with temperature and logit-space CFG:
    /// g = u + ω(c − u) against the fake-class logits u. ω = 1 skips the
    /// unconditional pass entirely, so the identity is exact.
    pub fn sample_discrete(
        &self,
        class: usize,
        temperature: f64,
        cfg_scale: f64,
        rng: &mut impl Rng,
    ) -> Result<TokenGrid> {
        let cfg = &self.config;
        if class >= cfg.classes {
            return Err(D2cError::input(format!("class {class} out of range")));
        }
        if temperature <= 0.0 {
            return Err(D2cError::config("temperature must be > 0"));
        }
        if cfg_scale < 0.0 {
            return Err(D2cError::config("cfg scale must be >= 0"));
        }
        let n = cfg.grid_len();
        let mut tokens: Vec<usize> = Vec::with_capacity(n);
        for _ in 0..n {
            let cond = self.next_logits(class, &tokens)?;
            let guided = if cfg_scale == 1.0 {
                cond
            } else {
                let uncond = self.next_logits(cfg.fake_class(), &tokens)?;
                cfg_logits(&cond, &uncond, cfg_scale)
            };
            tokens.push(multinomial(&guided, temperature, rng));
        }
        TokenGrid::new(cfg.h, cfg.w, tokens)
    }

    /// Last-row logits for the next position given a prefix.
    fn next_logits(&self, class_row: usize, tokens: &[usize]) -> Result<Vec<f64>> {
        let logits = self.forward_logits(class_row, tokens)?;
        Ok(logits.row(tokens.len()).to_vec())
    }

    /// One-step teacher-forced draws at every position: token i is
    /// sampled from p(q_i | ground-truth q_<i, class). Used to build the
    /// Stage-2 training condition.
    pub fn teacher_forced_tokens(
        &self,
        class: usize,
        grid: &TokenGrid,
        rng: &mut impl Rng,
    ) -> Result<TokenGrid> {
        let cfg = &self.config;
        if class >= cfg.classes {
            return Err(D2cError::input(format!("class {class} out of range")));
        }
        let n = cfg.grid_len();
        if grid.len() != n {
            return Err(D2cError::shape("grid does not match config"));
        }
        let logits = self.forward_logits(class, &grid.indices)?;
        let tokens = (0..n).map(|i| multinomial(logits.row(i), 1.0, rng)).collect();
        TokenGrid::new(cfg.h, cfg.w, tokens)
    }
}

/// Logit-space guidance. ω = 1 returns the conditional logits untouched.
pub fn cfg_logits(cond: &[f64], uncond: &[f64], omega: f64) -> Vec<f64> {
    if omega == 1.0 {
        return cond.to_vec();
    }
    cond.iter().zip(uncond).map(|(c, u)| u + omega * (c - u)).collect()
}

/// Multinomial draw from softmax(logits / temperature). Max subtraction
/// keeps tiny temperatures finite, degenerating to argmax as τ → 0⁺.
pub fn multinomial(logits: &[f64], temperature: f64, rng: &mut impl Rng) -> usize {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|&l| ((l - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// Strictly-lower-triangular-inclusive additive mask: slot (i, j) is 0
/// for j <= i and a large negative number above the diagonal.
pub fn causal_mask(seq: usize) -> Tensor {
    let mut data = vec![0.0; seq * seq];
    for i in 0..seq {
        for j in i + 1..seq {
            data[i * seq + j] = MASK_NEG;
        }
    }
    Tensor::from_raw(vec![seq, seq], data)
}

// ── 2D rotary embeddings ────────────────────────────────────────────

/// Angles for one grid position: the first half of the head dimension
/// rotates by row-scaled frequencies, the second half by column-scaled
/// frequencies. `head_dim` must be divisible by 4.
fn rope2d_angles(row: usize, col: usize, head_dim: usize) -> Vec<f64> {
    let quarter = head_dim / 4;
    let half = head_dim / 2;
    let mut angles = Vec::with_capacity(half);
    for j in 0..quarter {
        angles.push(row as f64 * ROPE_BASE.powf(-(2.0 * j as f64) / half as f64));
    }
    for j in 0..quarter {
        angles.push(col as f64 * ROPE_BASE.powf(-(2.0 * j as f64) / half as f64));
    }
    angles
}

/// cos/sin tables for a class-prefixed raster sequence: sequence slot 0
/// (the class prefix) gets zero angles; slot p >= 1 is grid cell p−1.
pub fn rope2d_tables(seq: usize, h: usize, w: usize, head_dim: usize) -> (Tensor, Tensor) {
    let mut cos = Vec::with_capacity(seq * head_dim);
    let mut sin = Vec::with_capacity(seq * head_dim);
    for p in 0..seq {
        let angles = if p == 0 {
            vec![0.0; head_dim / 2]
        } else {
            let cell = p - 1;
            debug_assert!(cell < h * w);
            rope2d_angles(cell / w, cell % w, head_dim)
        };
        for a in angles {
            cos.push(a.cos());
            cos.push(a.cos());
            sin.push(a.sin());
            sin.push(a.sin());
        }
    }
    (
        Tensor::from_raw(vec![seq, head_dim], cos),
        Tensor::from_raw(vec![seq, head_dim], sin),
    )
}

/// Constant matrix P with x·P mapping each adjacent pair (a, b) to
/// (−b, a); rotation is then x ⊙ cos + (x·P) ⊙ sin.
pub fn pair_swap_matrix(head_dim: usize) -> Tensor {
    let mut data = vec![0.0; head_dim * head_dim];
    for j in 0..head_dim / 2 {
        data[(2 * j + 1) * head_dim + 2 * j] = -1.0;
        data[2 * j * head_dim + 2 * j + 1] = 1.0;
    }
    Tensor::from_raw(vec![head_dim, head_dim], data)
}

/// Apply the 2D rotary map on the tape: out = x ⊙ cos + (x·P) ⊙ sin.
pub fn rope2d(
    tape: &mut Tape,
    x: TensorId,
    cos: TensorId,
    sin: TensorId,
    pair: TensorId,
) -> Result<TensorId> {
    let a = tape.mul(x, cos)?;
    let swapped = tape.matmul(x, pair)?;
    let b = tape.mul(swapped, sin)?;
    tape.add(a, b)
}

/// Plain-array reference rotation of one head vector at a grid position.
/// Test oracle and the definition `rope2d` must agree with.
pub fn rope2d_rotate(v: &[f64], row: usize, col: usize) -> Vec<f64> {
    let head_dim = v.len();
    assert_eq!(head_dim % 4, 0, "head dim must be divisible by 4");
    let angles = rope2d_angles(row, col, head_dim);
    let mut out = vec![0.0; head_dim];
    for (j, &theta) in angles.iter().enumerate() {
        let (a, b) = (v[2 * j], v[2 * j + 1]);
        out[2 * j] = a * theta.cos() - b * theta.sin();
        out[2 * j + 1] = a * theta.sin() + b * theta.cos();
    }
    out
}
