//! Stage 2: masked bidirectional encoder-decoder over continuous tokens.
//!
//! The encoder aggregates a class prefix, refined discrete-token queries
//! (q-former path) and the visible continuous tokens; the decoder
//! reinserts learnable mask tokens at masked grid slots and produces one
//! condition vector per masked position for the diffusion head. Discrete
//! tokens enter either through a q-former refiner prepended to the
//! sequence or through a single-head cross-attention inserted between
//! self-attention and the feed-forward in every block. Both paths can be
//! disabled entirely, which is the unconditional-on-discrete baseline.

use crate::autodiff::{Binding, ParamId, ParamSet, Tape, Tensor, TensorId};
use crate::diffusion::{diffusion_loss, DenoiserConfig, DenoiserMlp, NoiseDraw, NoiseSchedule};
use crate::error::{D2cError, Result};
use crate::stage1::Stage1Model;
use crate::synthetic::{LatentGrid, TokenGrid};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    CrossAttention,
    QFormer,
    /// Ablation baseline: no discrete conditioning at all.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QFormerArch {
    Decoder,
    EncoderDecoder,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct Stage2Config {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub ffn_hidden: usize,
    pub fusion: FusionKind,
    /// P: identical class tokens padded as the sequence prefix.
    pub class_prefix: usize,
    /// L: learnable query embeddings (q-former path).
    pub queries: usize,
    pub query_dim: usize,
    pub qformer_arch: QFormerArch,
    /// Mask-rate truncation bounds.
    pub mask_lo: f64,
    pub mask_hi: f64,
    /// Truncated-Gaussian parameters for the mask rate.
    pub mask_mean: f64,
    pub mask_std: f64,
    /// Probability of dropping both the class and the discrete condition.
    pub cond_drop: f64,
    pub classes: usize,
    pub vocab: usize,
    pub h: usize,
    pub w: usize,
    /// Continuous token dimension d.
    pub token_dim: usize,
    /// Width of the frozen discrete-token embedding (Stage-1 width).
    pub stage1_width: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            d_model: 64,
            ffn_hidden: 128,
            fusion: FusionKind::QFormer,
            class_prefix: 64,
            queries: 16,
            query_dim: 64,
            qformer_arch: QFormerArch::EncoderDecoder,
            mask_lo: 0.7,
            mask_hi: 1.0,
            mask_mean: 1.0,
            mask_std: 0.25,
            cond_drop: 0.1,
            classes: 4,
            vocab: 32,
            h: 8,
            w: 8,
            token_dim: 4,
            stage1_width: 64,
        }
    }
}

impl Stage2Config {
    pub fn grid_len(&self) -> usize {
        self.h * self.w
    }

    pub fn fake_class(&self) -> usize {
        self.classes
    }

    /// Prefix length of the encoder/decoder sequence.
    pub fn prefix_len(&self) -> usize {
        self.class_prefix
            + if self.fusion == FusionKind::QFormer { self.queries } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.heads != 0 {
            return Err(D2cError::config("d_model not divisible by heads"));
        }
        if self.class_prefix == 0 {
            return Err(D2cError::config("class prefix P must be >= 1"));
        }
        if self.fusion == FusionKind::QFormer && self.queries == 0 {
            return Err(D2cError::config("query count L must be >= 1"));
        }
        if !(0.0 <= self.mask_lo && self.mask_lo < self.mask_hi && self.mask_hi <= 1.0) {
            return Err(D2cError::config("mask bounds must satisfy 0 <= lo < hi <= 1"));
        }
        if !(0.0..1.0).contains(&self.cond_drop) {
            return Err(D2cError::config("cond_drop must be in [0, 1)"));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return Err(D2cError::config("encoder/decoder need at least one block"));
        }
        Ok(())
    }
}

// ── Mask plans ──────────────────────────────────────────────────────

/// A random generation order plus the visible/masked split: the masked
/// set is the last `num_masked` entries of `order`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub order: Vec<usize>,
    pub num_masked: usize,
}

impl MaskPlan {
    pub fn new(order: Vec<usize>, num_masked: usize) -> Result<Self> {
        let n = order.len();
        if num_masked > n {
            return Err(D2cError::contract("num_masked exceeds grid size"));
        }
        let mut seen = vec![false; n];
        for &p in &order {
            if p >= n || seen[p] {
                return Err(D2cError::contract("order is not a permutation"));
            }
            seen[p] = true;
        }
        Ok(MaskPlan { order, num_masked })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn visible(&self) -> &[usize] {
        &self.order[..self.order.len() - self.num_masked]
    }

    pub fn masked(&self) -> &[usize] {
        &self.order[self.order.len() - self.num_masked..]
    }

    /// Per-position mask flags.
    pub fn flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.order.len()];
        for &p in self.masked() {
            f[p] = true;
        }
        f
    }
}

/// Truncated-Gaussian mask rate, then a uniformly random order with the
/// last round(m_r·n) positions masked.
pub fn draw_mask_plan(rng: &mut impl Rng, h: usize, w: usize, config: &Stage2Config) -> MaskPlan {
    let n = h * w;
    let m_r = truncated_normal(config.mask_mean, config.mask_std, config.mask_lo, config.mask_hi, rng);
    let num_masked = (m_r * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    MaskPlan { order, num_masked: num_masked.min(n) }
}

/// Rejection-sampled truncated normal; falls back to clamping after a
/// bounded number of rejects (unreachable for the configured bounds).
pub fn truncated_normal(mean: f64, std: f64, lo: f64, hi: f64, rng: &mut impl Rng) -> f64 {
    if std <= 0.0 {
        return mean.clamp(lo, hi);
    }
    for _ in 0..10_000 {
        let x = mean + std * rng.sample::<f64, _>(StandardNormal);
        if (lo..=hi).contains(&x) {
            return x;
        }
    }
    mean.clamp(lo, hi)
}

// ── Model parameters ────────────────────────────────────────────────

#[derive(Debug, Clone)]
struct CrossIds {
    gamma: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
}

#[derive(Debug, Clone)]
struct BlockIds {
    gamma1: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    cross: Option<CrossIds>,
    gamma2: ParamId,
    w1: ParamId,
    w3: ParamId,
    w2: ParamId,
}

#[derive(Debug, Clone)]
struct QFormerIds {
    query_embed: ParamId,
    query_proj: ParamId,
    encoder: Option<BlockIds>,
    decoder: BlockIds,
}

/// The Stage-2 model bundle: MAE encoder/decoder, fusion parameters, and
/// the diffusion MLP, all in one ParamSet.
#[derive(Debug, Clone)]
pub struct Stage2Model {
    pub config: Stage2Config,
    pub denoiser_config: DenoiserConfig,
    pub params: ParamSet,
    frozen_embed: ParamId,
    fake_discrete: ParamId,
    embed_proj: ParamId,
    class_embedding: ParamId,
    enc_pos: ParamId,
    dec_pos: ParamId,
    token_in: ParamId,
    mask_token: ParamId,
    enc_blocks: Vec<BlockIds>,
    dec_blocks: Vec<BlockIds>,
    out_gamma: ParamId,
    out_proj: ParamId,
    qformer: Option<QFormerIds>,
    pub mlp: DenoiserMlp,
}

/// The discrete-token condition handed to `forward_condition`: real
/// tokens, or the learnable fake condition (guidance dropout branch).
#[derive(Debug, Clone, Copy)]
pub enum DiscreteCond<'a> {
    Tokens(&'a TokenGrid),
    Drop,
}

fn add_block(
    params: &mut ParamSet,
    prefix: &str,
    d: usize,
    f: usize,
    with_cross: bool,
    rng: &mut impl Rng,
) -> BlockIds {
    let std = 0.02;
    BlockIds {
        gamma1: params.add(&format!("{prefix}.gamma1"), Tensor::filled(vec![d], 1.0)),
        wq: params.add(&format!("{prefix}.wq"), Tensor::randn(vec![d, d], std, rng)),
        wk: params.add(&format!("{prefix}.wk"), Tensor::randn(vec![d, d], std, rng)),
        wv: params.add(&format!("{prefix}.wv"), Tensor::randn(vec![d, d], std, rng)),
        wo: params.add(&format!("{prefix}.wo"), Tensor::randn(vec![d, d], std, rng)),
        cross: with_cross.then(|| CrossIds {
            gamma: params.add(&format!("{prefix}.cross.gamma"), Tensor::filled(vec![d], 1.0)),
            wq: params.add(&format!("{prefix}.cross.wq"), Tensor::randn(vec![d, d], std, rng)),
            wk: params.add(&format!("{prefix}.cross.wk"), Tensor::randn(vec![d, d], std, rng)),
            wv: params.add(&format!("{prefix}.cross.wv"), Tensor::randn(vec![d, d], std, rng)),
        }),
        gamma2: params.add(&format!("{prefix}.gamma2"), Tensor::filled(vec![d], 1.0)),
        w1: params.add(&format!("{prefix}.w1"), Tensor::randn(vec![d, f], std, rng)),
        w3: params.add(&format!("{prefix}.w3"), Tensor::randn(vec![d, f], std, rng)),
        w2: params.add(&format!("{prefix}.w2"), Tensor::randn(vec![f, d], std, rng)),
    }
}

fn lookup_block(params: &ParamSet, prefix: &str, with_cross: bool) -> Result<BlockIds> {
    let look = |name: String| {
        params
            .lookup(&name)
            .ok_or_else(|| D2cError::format(format!("missing parameter {name}")))
    };
    Ok(BlockIds {
        gamma1: look(format!("{prefix}.gamma1"))?,
        wq: look(format!("{prefix}.wq"))?,
        wk: look(format!("{prefix}.wk"))?,
        wv: look(format!("{prefix}.wv"))?,
        wo: look(format!("{prefix}.wo"))?,
        cross: if with_cross {
            Some(CrossIds {
                gamma: look(format!("{prefix}.cross.gamma"))?,
                wq: look(format!("{prefix}.cross.wq"))?,
                wk: look(format!("{prefix}.cross.wk"))?,
                wv: look(format!("{prefix}.cross.wv"))?,
            })
        } else {
            None
        },
        gamma2: look(format!("{prefix}.gamma2"))?,
        w1: look(format!("{prefix}.w1"))?,
        w3: look(format!("{prefix}.w3"))?,
        w2: look(format!("{prefix}.w2"))?,
    })
}

impl Stage2Model {
    /// `frozen_embed` is the Stage-1 token embedding [vocab, stage1_width];
    /// it is copied in frozen, per the freeze protocol.
    pub fn init(
        config: &Stage2Config,
        denoiser_config: &DenoiserConfig,
        frozen_embed: &Tensor,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if denoiser_config.token_dim != config.token_dim {
            return Err(D2cError::config("denoiser token_dim != stage-2 token_dim"));
        }
        if frozen_embed.shape() != [config.vocab, config.stage1_width] {
            return Err(D2cError::shape(format!(
                "frozen embed shape {:?}, expected [{}, {}]",
                frozen_embed.shape(),
                config.vocab,
                config.stage1_width
            )));
        }
        let mut rng = crate::rng::stream(seed, &[crate::rng::tag::INIT, 2]);
        let mut params = ParamSet::new();
        let std = 0.02;
        let (d, f, n) = (config.d_model, config.ffn_hidden, config.grid_len());
        let with_cross = config.fusion == FusionKind::CrossAttention;

        let frozen = params.add_frozen("embed.frozen", frozen_embed.clone());
        let fake_discrete = params.add(
            "embed.fake",
            Tensor::randn(vec![1, config.stage1_width], std, &mut rng),
        );
        let embed_proj = params.add(
            "embed.proj",
            Tensor::randn(vec![config.stage1_width, d], std, &mut rng),
        );
        let class_embedding = params.add(
            "class_embedding",
            Tensor::randn(vec![config.classes + 1, d], std, &mut rng),
        );
        let enc_pos = params.add("enc_pos", Tensor::randn(vec![n, d], std, &mut rng));
        let dec_pos = params.add("dec_pos", Tensor::randn(vec![n, d], std, &mut rng));
        let token_in = params.add("token_in", Tensor::randn(vec![config.token_dim, d], std, &mut rng));
        let mask_token = params.add("mask_token", Tensor::randn(vec![1, d], std, &mut rng));

        let enc_blocks = (0..config.encoder_layers)
            .map(|i| add_block(&mut params, &format!("enc{i}"), d, f, with_cross, &mut rng))
            .collect();
        let dec_blocks = (0..config.decoder_layers)
            .map(|i| add_block(&mut params, &format!("dec{i}"), d, f, with_cross, &mut rng))
            .collect();

        let qformer = (config.fusion == FusionKind::QFormer).then(|| QFormerIds {
            query_embed: params.add(
                "qformer.query_embed",
                Tensor::randn(vec![config.queries, config.query_dim], std, &mut rng),
            ),
            query_proj: params.add(
                "qformer.query_proj",
                Tensor::randn(vec![config.query_dim, d], std, &mut rng),
            ),
            encoder: (config.qformer_arch == QFormerArch::EncoderDecoder)
                .then(|| add_block(&mut params, "qformer.enc", d, f, false, &mut rng)),
            decoder: add_block(&mut params, "qformer.dec", d, f, true, &mut rng),
        });

        let out_gamma = params.add("out.gamma", Tensor::filled(vec![d], 1.0));
        let out_proj = params.add(
            "out.proj",
            Tensor::randn(vec![d, denoiser_config.cond_dim], std, &mut rng),
        );
        let mlp = DenoiserMlp::init(denoiser_config, &mut params, "mlp", &mut rng);

        Ok(Stage2Model {
            config: config.clone(),
            denoiser_config: denoiser_config.clone(),
            params,
            frozen_embed: frozen,
            fake_discrete,
            embed_proj,
            class_embedding,
            enc_pos,
            dec_pos,
            token_in,
            mask_token,
            enc_blocks,
            dec_blocks,
            out_gamma,
            out_proj,
            qformer,
            mlp,
        })
    }

    /// Rebuild handles over a loaded ParamSet (checkpoint path).
    pub fn from_params(
        config: &Stage2Config,
        denoiser_config: &DenoiserConfig,
        params: ParamSet,
    ) -> Result<Self> {
        config.validate()?;
        let with_cross = config.fusion == FusionKind::CrossAttention;
        let look = |name: &str| {
            params
                .lookup(name)
                .ok_or_else(|| D2cError::format(format!("missing parameter {name}")))
        };
        let enc_blocks = (0..config.encoder_layers)
            .map(|i| lookup_block(&params, &format!("enc{i}"), with_cross))
            .collect::<Result<_>>()?;
        let dec_blocks = (0..config.decoder_layers)
            .map(|i| lookup_block(&params, &format!("dec{i}"), with_cross))
            .collect::<Result<_>>()?;
        let qformer = if config.fusion == FusionKind::QFormer {
            Some(QFormerIds {
                query_embed: look("qformer.query_embed")?,
                query_proj: look("qformer.query_proj")?,
                encoder: if config.qformer_arch == QFormerArch::EncoderDecoder {
                    Some(lookup_block(&params, "qformer.enc", false)?)
                } else {
                    None
                },
                decoder: lookup_block(&params, "qformer.dec", true)?,
            })
        } else {
            None
        };
        let mlp = DenoiserMlp::from_params(denoiser_config, &params, "mlp")?;
        Ok(Stage2Model {
            config: config.clone(),
            denoiser_config: denoiser_config.clone(),
            frozen_embed: look("embed.frozen")?,
            fake_discrete: look("embed.fake")?,
            embed_proj: look("embed.proj")?,
            class_embedding: look("class_embedding")?,
            enc_pos: look("enc_pos")?,
            dec_pos: look("dec_pos")?,
            token_in: look("token_in")?,
            mask_token: look("mask_token")?,
            enc_blocks,
            dec_blocks,
            out_gamma: look("out.gamma")?,
            out_proj: look("out.proj")?,
            qformer,
            mlp,
            params,
        })
    }

    /// Frozen lookup then trainable projection: h_q rows for a grid (or
    /// the learnable fake rows under guidance dropout).
    pub fn embed_discrete(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        cond: DiscreteCond,
    ) -> Result<TensorId> {
        let n = self.config.grid_len();
        let rows = match cond {
            DiscreteCond::Tokens(grid) => {
                if grid.len() != n {
                    return Err(D2cError::shape("token grid does not match config"));
                }
                tape.gather(bind.id(self.frozen_embed), &grid.indices)?
            }
            DiscreteCond::Drop => tape.gather(bind.id(self.fake_discrete), &vec![0; n])?,
        };
        tape.matmul(rows, bind.id(self.embed_proj))
    }

    fn self_attention(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        b: &BlockIds,
        x: TensorId,
    ) -> Result<TensorId> {
        let d = self.config.d_model;
        let heads = self.config.heads;
        let hd = d / heads;
        let q = tape.matmul(x, bind.id(b.wq))?;
        let k = tape.matmul(x, bind.id(b.wk))?;
        let v = tape.matmul(x, bind.id(b.wv))?;
        let sizes = vec![hd; heads];
        let qs = tape.split(q, 1, &sizes)?;
        let ks = tape.split(k, 1, &sizes)?;
        let vs = tape.split(v, 1, &sizes)?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let kt = tape.transpose(ks[h])?;
            let scores = tape.matmul(qs[h], kt)?;
            let scaled = tape.scale(scores, 1.0 / (hd as f64).sqrt())?;
            let attn = tape.softmax(scaled, 1)?;
            outs.push(tape.matmul(attn, vs[h])?);
        }
        let merged = tape.concat(&outs, 1)?;
        tape.matmul(merged, bind.id(b.wo))
    }

    /// One pre-norm block: self-attention, optional cross-attention into
    /// `hq` between attention and feed-forward, then SwiGLU.
    fn run_block(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        b: &BlockIds,
        mut x: TensorId,
        hq: Option<TensorId>,
    ) -> Result<TensorId> {
        let normed = tape.rms_norm(x, bind.id(b.gamma1), 1e-6)?;
        let attn = self.self_attention(tape, bind, b, normed)?;
        x = tape.add(x, attn)?;
        if let (Some(cross), Some(hq)) = (&b.cross, hq) {
            let normed = tape.rms_norm(x, bind.id(cross.gamma), 1e-6)?;
            let (out, _) = cross_attention(
                tape,
                normed,
                hq,
                bind.id(cross.wq),
                bind.id(cross.wk),
                bind.id(cross.wv),
            )?;
            x = tape.add(x, out)?;
        }
        let normed = tape.rms_norm(x, bind.id(b.gamma2), 1e-6)?;
        let ffn = tape.swiglu(normed, bind.id(b.w1), bind.id(b.w3), bind.id(b.w2))?;
        tape.add(x, ffn)
    }

    /// Refine L learnable queries against the discrete-token features.
    /// Self-attention over queries, cross-attention into the (optionally
    /// encoded) features, feed-forward. Output is [L, d_model].
    pub fn qformer_refine(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        feats: TensorId,
    ) -> Result<TensorId> {
        let qf = self
            .qformer
            .as_ref()
            .ok_or_else(|| D2cError::contract("qformer_refine on a non-q-former model"))?;
        let encoded = match &qf.encoder {
            Some(enc) => self.run_block(tape, bind, enc, feats, None)?,
            None => feats,
        };
        let queries = tape.matmul(bind.id(qf.query_embed), bind.id(qf.query_proj))?;
        self.run_block(tape, bind, &qf.decoder, queries, Some(encoded))
    }

    /// Assemble the encoder input sequence:
    /// [P class rows ∥ L refined queries (q-former) ∥ visible tokens].
    pub(crate) fn build_encoder_input(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        class_row: usize,
        latents: &LatentGrid,
        plan: &MaskPlan,
        hq: Option<TensorId>,
    ) -> Result<TensorId> {
        let cfg = &self.config;
        let mut parts = Vec::with_capacity(3);
        let class_rows =
            tape.gather(bind.id(self.class_embedding), &vec![class_row; cfg.class_prefix])?;
        parts.push(class_rows);
        if cfg.fusion == FusionKind::QFormer {
            let feats = hq.ok_or_else(|| D2cError::contract("q-former path needs features"))?;
            parts.push(self.qformer_refine(tape, bind, feats)?);
        }
        let visible = plan.visible();
        if !visible.is_empty() {
            let mut vals = Vec::with_capacity(visible.len() * cfg.token_dim);
            for &p in visible {
                vals.extend_from_slice(latents.token(p));
            }
            let raw = tape.constant(Tensor::from_raw(vec![visible.len(), cfg.token_dim], vals));
            let proj = tape.matmul(raw, bind.id(self.token_in))?;
            let pos = tape.gather(bind.id(self.enc_pos), visible)?;
            parts.push(tape.add(proj, pos)?);
        }
        tape.concat(&parts, 0)
    }

    /// Full conditioning pass. Returns one condition vector per masked
    /// position, ordered like `plan.masked()`, shape [num_masked, cond_dim].
    ///
    /// `class` must be a real class; under `DiscreteCond::Drop` the fake
    /// class row is used and neither `class` nor any real token grid is
    /// read at all.
    pub fn forward_condition(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        class: usize,
        latents: &LatentGrid,
        plan: &MaskPlan,
        cond: DiscreteCond,
    ) -> Result<TensorId> {
        let cfg = &self.config;
        let n = cfg.grid_len();
        if plan.len() != n {
            return Err(D2cError::contract("mask plan does not match grid"));
        }
        if plan.num_masked == 0 {
            return Err(D2cError::contract("no masked positions: loss/condition undefined"));
        }
        if latents.h != cfg.h || latents.w != cfg.w || latents.d != cfg.token_dim {
            return Err(D2cError::shape("latent grid does not match config"));
        }
        let class_row = match cond {
            DiscreteCond::Drop => cfg.fake_class(),
            DiscreteCond::Tokens(_) => {
                if class >= cfg.classes {
                    return Err(D2cError::input(format!("class {class} out of range")));
                }
                class
            }
        };

        let hq = match (cfg.fusion, cond) {
            (FusionKind::None, _) => None,
            (_, c) => Some(self.embed_discrete(tape, bind, c)?),
        };

        let mut x = self.build_encoder_input(tape, bind, class_row, latents, plan, hq)?;
        for b in &self.enc_blocks {
            x = self.run_block(tape, bind, b, x, hq)?;
        }

        // Decoder sequence: carried prefix, then every grid slot in raster
        // order; visible slots take their encoder output, masked slots the
        // learnable mask token, and all grid slots get decoder positions.
        let prefix_len = cfg.prefix_len();
        let n_vis = plan.visible().len();
        let prefix = tape.narrow(x, 0, 0, prefix_len)?;
        let grid_unordered = if n_vis > 0 {
            let vis_rows = tape.narrow(x, 0, prefix_len, n_vis)?;
            let mask_rows = tape.gather(bind.id(self.mask_token), &vec![0; n - n_vis])?;
            tape.concat(&[vis_rows, mask_rows], 0)?
        } else {
            tape.gather(bind.id(self.mask_token), &vec![0; n])?
        };
        // row index of each grid position inside grid_unordered
        let mut slot = vec![0usize; n];
        for (i, &p) in plan.visible().iter().enumerate() {
            slot[p] = i;
        }
        for (i, &p) in plan.masked().iter().enumerate() {
            slot[p] = n_vis + i;
        }
        let grid_ordered = tape.gather(grid_unordered, &slot)?;
        let grid_in = tape.add(grid_ordered, bind.id(self.dec_pos))?;
        let mut y = tape.concat(&[prefix, grid_in], 0)?;
        for b in &self.dec_blocks {
            y = self.run_block(tape, bind, b, y, hq)?;
        }

        let masked_rows: Vec<usize> = plan.masked().iter().map(|&p| prefix_len + p).collect();
        let picked = tape.gather(y, &masked_rows)?;
        let normed = tape.rms_norm(picked, bind.id(self.out_gamma), 1e-6)?;
        tape.matmul(normed, bind.id(self.out_proj))
    }

    /// No-tape convenience: flattened [num_masked × cond_dim] vectors.
    pub fn condition_vectors(
        &self,
        class: usize,
        latents: &LatentGrid,
        plan: &MaskPlan,
        cond: DiscreteCond,
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bind = self.params.bind(&mut tape);
        let z = self.forward_condition(&mut tape, &bind, class, latents, plan, cond)?;
        Ok(tape.value(z).data().to_vec())
    }

    /// Count of q-former parameters (the part whose size must not depend
    /// on the grid).
    pub fn qformer_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(name, _)| name.starts_with("qformer."))
            .map(|(_, t)| t.numel())
            .sum()
    }
}

/// Single-head cross-attention, Q from `hc`, K/V from `hq`:
/// softmax(QKᵀ/√d)·V. Returns (output, attention weights).
pub fn cross_attention(
    tape: &mut Tape,
    hc: TensorId,
    hq: TensorId,
    wq: TensorId,
    wk: TensorId,
    wv: TensorId,
) -> Result<(TensorId, TensorId)> {
    let d = tape.shape(hc)[1];
    if tape.shape(hq)[1] != d {
        return Err(D2cError::shape("cross-attention width mismatch"));
    }
    let q = tape.matmul(hc, wq)?;
    let k = tape.matmul(hq, wk)?;
    let v = tape.matmul(hq, wv)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let attn = tape.softmax(scaled, 1)?;
    let out = tape.matmul(attn, v)?;
    Ok((out, attn))
}

// ── Training loss ───────────────────────────────────────────────────

/// Everything random a Stage-2 training sample needs, drawn up front so
/// the loss itself is a deterministic function of (params, batch, noise).
#[derive(Debug, Clone)]
pub struct SampleNoise {
    pub plan: MaskPlan,
    pub draw: NoiseDraw,
    pub drop: bool,
    /// Teacher-forced Stage-1 tokens conditioning this sample.
    pub cond_tokens: TokenGrid,
}

/// Draw the per-sample randomness: teacher-forced condition tokens from
/// the frozen Stage-1 model, a mask plan, the diffusion (t, ε), and the
/// condition-drop coin.
pub fn prepare_sample_noise(
    stage1: &Stage1Model,
    model: &Stage2Model,
    schedule: &NoiseSchedule,
    class: usize,
    tokens: &TokenGrid,
    rng: &mut impl Rng,
) -> Result<SampleNoise> {
    let cfg = &model.config;
    let cond_tokens = stage1.teacher_forced_tokens(class, tokens, rng)?;
    let plan = draw_mask_plan(rng, cfg.h, cfg.w, cfg);
    let draw = crate::diffusion::draw_noise(plan.num_masked, cfg.token_dim, schedule.len(), rng);
    let drop = cfg.cond_drop > 0.0 && rng.gen::<f64>() < cfg.cond_drop;
    Ok(SampleNoise { plan, draw, drop, cond_tokens })
}

/// Batched Stage-2 loss on an existing tape: mean over samples of the
/// per-masked-token diffusion loss.
pub fn loss_stage2_tape(
    tape: &mut Tape,
    bind: &Binding,
    model: &Stage2Model,
    batch: &[(usize, &LatentGrid, &SampleNoise)],
    schedule: &NoiseSchedule,
) -> Result<TensorId> {
    if batch.is_empty() {
        return Err(D2cError::contract("empty stage-2 batch"));
    }
    let cfg = &model.config;
    let mut total: Option<TensorId> = None;
    for &(class, latents, noise) in batch {
        if noise.plan.num_masked == 0 {
            return Err(D2cError::contract("no masked positions: loss undefined"));
        }
        let cond = if noise.drop {
            DiscreteCond::Drop
        } else {
            DiscreteCond::Tokens(&noise.cond_tokens)
        };
        let z = model.forward_condition(tape, bind, class, latents, &noise.plan, cond)?;
        let mut x0 = Vec::with_capacity(noise.plan.num_masked * cfg.token_dim);
        for &p in noise.plan.masked() {
            x0.extend_from_slice(latents.token(p));
        }
        let x0 = tape.constant(Tensor::from_raw(vec![noise.plan.num_masked, cfg.token_dim], x0));
        let li = diffusion_loss(tape, bind, &model.mlp, z, x0, &noise.draw, schedule)?;
        total = Some(match total {
            Some(t) => tape.add(t, li)?,
            None => li,
        });
    }
    tape.scale(total.unwrap(), 1.0 / batch.len() as f64)
}

/// Fresh-tape convenience returning the scalar loss, drawing all
/// randomness internally.
pub fn loss_stage2(
    model: &Stage2Model,
    stage1: &Stage1Model,
    schedule: &NoiseSchedule,
    batch: &[(usize, &TokenGrid, &LatentGrid)],
    rng: &mut impl Rng,
) -> Result<f64> {
    let noises: Vec<SampleNoise> = batch
        .iter()
        .map(|&(class, tokens, _)| {
            prepare_sample_noise(stage1, model, schedule, class, tokens, rng)
        })
        .collect::<Result<_>>()?;
    let with_noise: Vec<(usize, &LatentGrid, &SampleNoise)> = batch
        .iter()
        .zip(&noises)
        .map(|(&(class, _, latents), noise)| (class, latents, noise))
        .collect();
    let mut tape = Tape::new();
    let bind = model.params.bind(&mut tape);
    let loss = loss_stage2_tape(&mut tape, &bind, model, &with_noise, schedule)?;
    tape.value(loss).item()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::diffusion::{make_schedule, ScheduleKind};
    use crate::rng;
    use crate::stage1::Stage1Config;

    fn tiny_config(fusion: FusionKind) -> Stage2Config {
        Stage2Config {
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            d_model: 8,
            ffn_hidden: 16,
            fusion,
            class_prefix: 2,
            queries: 2,
            query_dim: 8,
            qformer_arch: QFormerArch::EncoderDecoder,
            mask_lo: 0.7,
            mask_hi: 1.0,
            mask_mean: 1.0,
            mask_std: 0.25,
            cond_drop: 0.1,
            classes: 3,
            vocab: 5,
            h: 2,
            w: 2,
            token_dim: 2,
            stage1_width: 8,
        }
    }

    fn tiny_denoiser(cfg: &Stage2Config) -> DenoiserConfig {
        DenoiserConfig {
            token_dim: cfg.token_dim,
            width: 8,
            cond_dim: 8,
            blocks: 1,
            steps: 20,
            schedule: ScheduleKind::Cosine,
        }
    }

    fn tiny_model(fusion: FusionKind, seed: u64) -> Stage2Model {
        let cfg = tiny_config(fusion);
        let dn = tiny_denoiser(&cfg);
        let mut r = rng::stream(seed, &[rng::tag::INIT, 77]);
        let embed = Tensor::randn(vec![cfg.vocab, cfg.stage1_width], 0.5, &mut r);
        Stage2Model::init(&cfg, &dn, &embed, seed).unwrap()
    }

    fn tiny_latents(cfg: &Stage2Config, seed: u64) -> LatentGrid {
        let mut r = rng::stream(seed, &[1000]);
        let vals = (0..cfg.grid_len() * cfg.token_dim)
            .map(|_| r.sample::<f64, _>(StandardNormal))
            .collect();
        LatentGrid::new(cfg.h, cfg.w, cfg.token_dim, vals).unwrap()
    }

    fn tiny_stage1(cfg: &Stage2Config, seed: u64) -> Stage1Model {
        let s1 = Stage1Config {
            layers: 1,
            heads: 2,
            width: cfg.stage1_width,
            ffn_hidden: 16,
            vocab: cfg.vocab,
            classes: cfg.classes,
            h: cfg.h,
            w: cfg.w,
            class_drop: 0.1,
        };
        let mut m = Stage1Model::init(&s1, seed).unwrap();
        m.freeze();
        m
    }

    #[test]
    fn mask_rates_stay_in_bounds() {
        let cfg = tiny_config(FusionKind::None);
        let mut r = rng::stream(1, &[70]);
        for _ in 0..10_000 {
            let m = truncated_normal(cfg.mask_mean, cfg.mask_std, cfg.mask_lo, cfg.mask_hi, &mut r);
            assert!((0.7..=1.0).contains(&m), "mask rate {m} out of bounds");
        }
    }

    #[test]
    fn full_mask_rate_masks_everything() {
        let cfg = tiny_config(FusionKind::None);
        // forced m_r = 1.0
        let n = cfg.grid_len();
        let plan = MaskPlan::new((0..n).collect(), n).unwrap();
        assert_eq!(plan.masked().len(), n);
        assert!(plan.visible().is_empty());
        assert!(plan.flags().iter().all(|&f| f));
    }

    #[test]
    fn order_is_uniform_over_ranks() {
        let cfg = tiny_config(FusionKind::None);
        let n = cfg.grid_len();
        let trials = 10_000;
        let mut counts = vec![vec![0usize; n]; n]; // [rank][position]
        let mut r = rng::stream(2, &[71]);
        for _ in 0..trials {
            let plan = draw_mask_plan(&mut r, cfg.h, cfg.w, &cfg);
            for (rank, &p) in plan.order.iter().enumerate() {
                counts[rank][p] += 1;
            }
        }
        let expect = trials as f64 / n as f64;
        let se = (trials as f64 * (1.0 / n as f64) * (1.0 - 1.0 / n as f64)).sqrt();
        for rank in 0..n {
            for p in 0..n {
                let c = counts[rank][p] as f64;
                assert!(
                    (c - expect).abs() < 4.0 * se,
                    "rank {rank} pos {p}: {c} vs {expect} (se {se})"
                );
            }
        }
    }

    #[test]
    fn mask_plan_validation() {
        assert!(MaskPlan::new(vec![0, 1, 1], 1).is_err());
        assert!(MaskPlan::new(vec![0, 1, 2], 4).is_err());
        assert!(MaskPlan::new(vec![2, 0, 1], 2).is_ok());
    }

    #[test]
    fn embed_discrete_is_a_function_of_tokens() {
        let model = tiny_model(FusionKind::CrossAttention, 3);
        let grid = TokenGrid::new(2, 2, vec![1, 4, 0, 2]).unwrap();
        let mut tape = Tape::new();
        let bind = model.params.bind(&mut tape);
        let a = model.embed_discrete(&mut tape, &bind, DiscreteCond::Tokens(&grid)).unwrap();
        let b = model.embed_discrete(&mut tape, &bind, DiscreteCond::Tokens(&grid)).unwrap();
        assert_eq!(tape.value(a).data(), tape.value(b).data());
    }

    #[test]
    fn embed_discrete_freeze_contract() {
        // gradient reaches the projection, never the frozen table
        let model = tiny_model(FusionKind::CrossAttention, 5);
        let grid = TokenGrid::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        let mut tape = Tape::new();
        let bind = model.params.bind(&mut tape);
        let hq = model.embed_discrete(&mut tape, &bind, DiscreteCond::Tokens(&grid)).unwrap();
        let loss = tape.mean(hq).unwrap();
        let grads = tape.backward(loss).unwrap();
        let frozen = model.params.lookup("embed.frozen").unwrap();
        let proj = model.params.lookup("embed.proj").unwrap();
        assert!(grads.get(bind.id(frozen)).is_none(), "frozen table received gradient");
        let pg = grads.get(bind.id(proj)).expect("projection should get gradient");
        assert!(pg.data().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn embed_discrete_hand_evaluation() {
        let mut model = tiny_model(FusionKind::CrossAttention, 7);
        let frozen = model.params.lookup("embed.frozen").unwrap();
        let proj = model.params.lookup("embed.proj").unwrap();
        // hand-set: embed row q = q repeated, proj = identity-ish
        let sw = model.config.stage1_width;
        let d = model.config.d_model;
        for q in 0..model.config.vocab {
            for j in 0..sw {
                model.params.get_mut(frozen).data_mut()[q * sw + j] = q as f64;
            }
        }
        model.params.get_mut(proj).data_mut().fill(0.0);
        for i in 0..sw.min(d) {
            model.params.get_mut(proj).data_mut()[i * d + i] = 1.0;
        }
        let grid = TokenGrid::new(2, 2, vec![3, 0, 1, 2]).unwrap();
        let mut tape = Tape::new();
        let bind = model.params.bind(&mut tape);
        let hq = model.embed_discrete(&mut tape, &bind, DiscreteCond::Tokens(&grid)).unwrap();
        for (i, &q) in grid.indices.iter().enumerate() {
            for j in 0..d {
                assert_eq!(tape.value(hq).row(i)[j], q as f64, "row {i} col {j}");
            }
        }
    }

    #[test]
    fn cross_attention_single_key_passes_value_through() {
        // one key/value row: attention weights are all 1, every output row
        // equals W_v h_q regardless of the query
        let mut r = rng::stream(8, &[72]);
        let mut tape = Tape::new();
        let hc = tape.constant(Tensor::randn(vec![3, 4], 1.0, &mut r));
        let hq = tape.constant(Tensor::randn(vec![1, 4], 1.0, &mut r));
        let wq = tape.constant(Tensor::randn(vec![4, 4], 1.0, &mut r));
        let wk = tape.constant(Tensor::randn(vec![4, 4], 1.0, &mut r));
        let wv = tape.constant(Tensor::randn(vec![4, 4], 1.0, &mut r));
        let (out, attn) = cross_attention(&mut tape, hc, hq, wq, wk, wv).unwrap();
        let vrow = {
            let v = tape.matmul(hq, wv).unwrap();
            tape.value(v).data().to_vec()
        };
        for i in 0..3 {
            assert_eq!(tape.value(attn).row(i), &[1.0]);
            for (a, b) in tape.value(out).row(i).iter().zip(&vrow) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn cross_attention_rows_sum_to_one() {
        let mut r = rng::stream(9, &[73]);
        let mut tape = Tape::new();
        let hc = tape.constant(Tensor::randn(vec![5, 6], 1.0, &mut r));
        let hq = tape.constant(Tensor::randn(vec![7, 6], 1.0, &mut r));
        let wq = tape.constant(Tensor::randn(vec![6, 6], 1.0, &mut r));
        let wk = tape.constant(Tensor::randn(vec![6, 6], 1.0, &mut r));
        let wv = tape.constant(Tensor::randn(vec![6, 6], 1.0, &mut r));
        let (_, attn) = cross_attention(&mut tape, hc, hq, wq, wk, wv).unwrap();
        for i in 0..5 {
            let s: f64 = tape.value(attn).row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_encoder_output_dominates_qformer_cross() {
        // all K/V rows equal: every cross-attention output row is the same
        // transformed value whatever the attention weights are
        let mut r = rng::stream(10, &[74]);
        let mut tape = Tape::new();
        let shared: Vec<f64> = (0..4).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        let mut rows = Vec::new();
        for _ in 0..6 {
            rows.extend_from_slice(&shared);
        }
        let hq = tape.constant(Tensor::from_raw(vec![6, 4], rows));
        let hc = tape.constant(Tensor::randn(vec![2, 4], 1.0, &mut r));
        let wq = tape.constant(Tensor::randn(vec![4, 4], 1.0, &mut r));
        let wk = tape.constant(Tensor::randn(vec![4, 4], 1.0, &mut r));
        let wv = tape.constant(Tensor::randn(vec![4, 4], 1.0, &mut r));
        let (out, _) = cross_attention(&mut tape, hc, hq, wq, wk, wv).unwrap();
        let expect = {
            let one = tape.constant(Tensor::from_raw(vec![1, 4], shared));
            let v = tape.matmul(one, wv).unwrap();
            tape.value(v).data().to_vec()
        };
        for i in 0..2 {
            for (a, b) in tape.value(out).row(i).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn qformer_output_shape_and_latent_invariance() {
        let model = tiny_model(FusionKind::QFormer, 11);
        let cfg = &model.config;
        let grid = TokenGrid::new(cfg.h, cfg.w, vec![0, 1, 2, 3]).unwrap();
        let mut tape = Tape::new();
        let bind = model.params.bind(&mut tape);
        let feats = model.embed_discrete(&mut tape, &bind, DiscreteCond::Tokens(&grid)).unwrap();
        let out = model.qformer_refine(&mut tape, &bind, feats).unwrap();
        assert_eq!(tape.shape(out), &[cfg.queries, cfg.d_model]);
        // structural: queries never see the continuous tokens, so two
        // different latent grids cannot change them (nothing to vary here;
        // the refine path simply has no latent input)
    }

    #[test]
    fn all_masked_encoder_is_prefix_only() {
        let model = tiny_model(FusionKind::QFormer, 13);
        let cfg = &model.config;
        let n = cfg.grid_len();
        let plan = MaskPlan::new((0..n).collect(), n).unwrap();
        let latents = tiny_latents(cfg, 1);
        let grid = TokenGrid::new(cfg.h, cfg.w, vec![1, 2, 3, 4]).unwrap();
        let mut tape = Tape::new();
        let bind = model.params.bind(&mut tape);
        let feats = model
            .embed_discrete(&mut tape, &bind, DiscreteCond::Tokens(&grid))
            .unwrap();
        let enc_in = model
            .build_encoder_input(&mut tape, &bind, 0, &latents, &plan, Some(feats))
            .unwrap();
        assert_eq!(tape.shape(enc_in), &[cfg.class_prefix + cfg.queries, cfg.d_model]);
    }

    #[test]
    fn visible_order_does_not_change_condition() {
        // permuting two visible tokens (with their positions attached)
        // leaves outputs unchanged up to float reassociation
        let model = tiny_model(FusionKind::None, 17);
        let cfg = &model.config;
        let latents = tiny_latents(cfg, 2);
        let plan_a = MaskPlan::new(vec![0, 3, 1, 2], 2).unwrap();
        let plan_b = MaskPlan::new(vec![3, 0, 1, 2], 2).unwrap();
        let za = model
            .condition_vectors(1, &latents, &plan_a, DiscreteCond::Drop)
            .unwrap();
        let zb = model
            .condition_vectors(1, &latents, &plan_b, DiscreteCond::Drop)
            .unwrap();
        for (a, b) in za.iter().zip(&zb) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn drop_branch_ignores_class_and_tokens() {
        for fusion in [FusionKind::CrossAttention, FusionKind::QFormer, FusionKind::None] {
            let model = tiny_model(fusion, 19);
            let cfg = &model.config;
            let latents = tiny_latents(cfg, 3);
            let plan = MaskPlan::new(vec![2, 0, 3, 1], 3).unwrap();
            let a = model
                .condition_vectors(0, &latents, &plan, DiscreteCond::Drop)
                .unwrap();
            let b = model
                .condition_vectors(2, &latents, &plan, DiscreteCond::Drop)
                .unwrap();
            assert!(
                a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()),
                "drop branch read the class ({fusion:?})"
            );
        }
    }

    #[test]
    fn fusion_none_ignores_discrete_tokens() {
        let model = tiny_model(FusionKind::None, 23);
        let cfg = &model.config;
        let latents = tiny_latents(cfg, 4);
        let plan = MaskPlan::new(vec![1, 2, 0, 3], 2).unwrap();
        let g1 = TokenGrid::new(cfg.h, cfg.w, vec![0, 0, 0, 0]).unwrap();
        let g2 = TokenGrid::new(cfg.h, cfg.w, vec![4, 4, 4, 4]).unwrap();
        let a = model.condition_vectors(1, &latents, &plan, DiscreteCond::Tokens(&g1)).unwrap();
        let b = model.condition_vectors(1, &latents, &plan, DiscreteCond::Tokens(&g2)).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn conditioned_paths_feel_the_discrete_tokens() {
        for fusion in [FusionKind::CrossAttention, FusionKind::QFormer] {
            let model = tiny_model(fusion, 29);
            let cfg = &model.config;
            let latents = tiny_latents(cfg, 5);
            let plan = MaskPlan::new(vec![1, 2, 0, 3], 2).unwrap();
            let g1 = TokenGrid::new(cfg.h, cfg.w, vec![0, 1, 2, 3]).unwrap();
            let g2 = TokenGrid::new(cfg.h, cfg.w, vec![4, 3, 2, 1]).unwrap();
            let a = model.condition_vectors(1, &latents, &plan, DiscreteCond::Tokens(&g1)).unwrap();
            let b = model.condition_vectors(1, &latents, &plan, DiscreteCond::Tokens(&g2)).unwrap();
            assert!(a.iter().zip(&b).any(|(x, y)| x != y), "{fusion:?} condition is dead");
        }
    }

    #[test]
    fn bidirectional_attention_witness() {
        // perturbing a visible token changes outputs: no causal mask here
        let model = tiny_model(FusionKind::None, 31);
        let cfg = &model.config;
        let mut latents = tiny_latents(cfg, 6);
        let plan = MaskPlan::new(vec![0, 1, 2, 3], 2).unwrap(); // visible 0,1; masked 2,3
        let a = model.condition_vectors(0, &latents, &plan, DiscreteCond::Drop).unwrap();
        latents.token_mut(1)[0] += 0.5;
        let b = model.condition_vectors(0, &latents, &plan, DiscreteCond::Drop).unwrap();
        assert!(a.iter().zip(&b).any(|(x, y)| x != y));
    }

    #[test]
    fn empty_mask_is_a_contract_error() {
        let model = tiny_model(FusionKind::None, 37);
        let cfg = &model.config;
        let latents = tiny_latents(cfg, 7);
        let plan = MaskPlan::new(vec![0, 1, 2, 3], 0).unwrap();
        let err = model
            .condition_vectors(0, &latents, &plan, DiscreteCond::Drop)
            .unwrap_err();
        assert!(matches!(err, D2cError::Contract(_)));
    }

    #[test]
    fn qformer_param_count_independent_of_grid() {
        let mut small = tiny_config(FusionKind::QFormer);
        let mut big = tiny_config(FusionKind::QFormer);
        big.h = 4;
        big.w = 4;
        let dn_s = tiny_denoiser(&small);
        let dn_b = tiny_denoiser(&big);
        small.classes = big.classes;
        let mut r = rng::stream(1, &[75]);
        let emb_s = Tensor::randn(vec![small.vocab, small.stage1_width], 0.5, &mut r);
        let emb_b = Tensor::randn(vec![big.vocab, big.stage1_width], 0.5, &mut r);
        let a = Stage2Model::init(&small, &dn_s, &emb_s, 1).unwrap();
        let b = Stage2Model::init(&big, &dn_b, &emb_b, 1).unwrap();
        assert_eq!(a.qformer_param_count(), b.qformer_param_count());
    }

    #[test]
    fn stage2_loss_deterministic_with_frozen_noise_and_grad_ok() {
        for fusion in [FusionKind::CrossAttention, FusionKind::QFormer, FusionKind::None] {
            let model = tiny_model(fusion, 41);
            let cfg = model.config.clone();
            let stage1 = tiny_stage1(&cfg, 43);
            let schedule = make_schedule(model.denoiser_config.steps, model.denoiser_config.schedule).unwrap();
            let latents = tiny_latents(&cfg, 8);
            let tokens = TokenGrid::new(cfg.h, cfg.w, vec![1, 0, 3, 2]).unwrap();
            let mut r = rng::stream(44, &[76]);
            let noise =
                prepare_sample_noise(&stage1, &model, &schedule, 1, &tokens, &mut r).unwrap();

            let eval = |m: &Stage2Model| -> f64 {
                let mut tape = Tape::new();
                let bind = m.params.bind(&mut tape);
                let batch = [(1usize, &latents, &noise)];
                let loss = loss_stage2_tape(&mut tape, &bind, m, &batch, &schedule).unwrap();
                tape.value(loss).item().unwrap()
            };
            assert_eq!(eval(&model).to_bits(), eval(&model).to_bits(), "{fusion:?}");

            let err = grad_check(&model.params, 1e-5, |tape, bind| {
                let batch = [(1usize, &latents, &noise)];
                loss_stage2_tape(tape, bind, &model, &batch, &schedule)
            })
            .unwrap();
            assert!(err < 1e-4, "{fusion:?} stage-2 grad err {err}");
        }
    }

    #[test]
    fn teacher_forcing_vs_ground_truth_changes_loss() {
        let model = tiny_model(FusionKind::CrossAttention, 47);
        let cfg = model.config.clone();
        let stage1 = tiny_stage1(&cfg, 49);
        let schedule = make_schedule(model.denoiser_config.steps, model.denoiser_config.schedule).unwrap();
        let latents = tiny_latents(&cfg, 9);
        let tokens = TokenGrid::new(cfg.h, cfg.w, vec![1, 0, 3, 2]).unwrap();
        let mut r = rng::stream(50, &[77]);
        let mut noise = prepare_sample_noise(&stage1, &model, &schedule, 1, &tokens, &mut r).unwrap();
        noise.drop = false;
        // ensure the teacher-forced draw differs from ground truth
        noise.cond_tokens = TokenGrid::new(cfg.h, cfg.w, vec![4, 4, 4, 4]).unwrap();

        let eval = |cond_tokens: &TokenGrid| -> f64 {
            let mut n2 = noise.clone();
            n2.cond_tokens = cond_tokens.clone();
            let mut tape = Tape::new();
            let bind = model.params.bind(&mut tape);
            let batch = [(1usize, &latents, &n2)];
            let loss = loss_stage2_tape(&mut tape, &bind, &model, &batch, &schedule).unwrap();
            tape.value(loss).item().unwrap()
        };
        let teacher = eval(&noise.cond_tokens);
        let ground = eval(&tokens);
        assert_ne!(teacher.to_bits(), ground.to_bits(), "condition is not live");
    }

    #[test]
    fn loss_over_masked_positions_only() {
        // noise injected at an unmasked slot never changes the loss target
        // set: freezing (plan, t, ε) and editing a visible latent entry
        // changes conditioning but the contributing positions stay fixed,
        // so editing a MASKED latent entry changes the target while editing
        // a visible one only moves the condition pathway.
        let model = tiny_model(FusionKind::None, 53);
        let cfg = model.config.clone();
        let stage1 = tiny_stage1(&cfg, 54);
        let schedule = make_schedule(model.denoiser_config.steps, model.denoiser_config.schedule).unwrap();
        let latents = tiny_latents(&cfg, 10);
        let tokens = TokenGrid::new(cfg.h, cfg.w, vec![0, 1, 2, 3]).unwrap();
        let mut r = rng::stream(55, &[78]);
        let mut noise = prepare_sample_noise(&stage1, &model, &schedule, 0, &tokens, &mut r).unwrap();
        noise.drop = true;
        noise.plan = MaskPlan::new(vec![0, 1, 2, 3], 2).unwrap(); // masked = {2, 3}
        noise.draw = crate::diffusion::draw_noise(2, cfg.token_dim, schedule.len(), &mut r);

        let eval = |latents: &LatentGrid| -> f64 {
            let mut tape = Tape::new();
            let bind = model.params.bind(&mut tape);
            let batch = [(0usize, latents, &noise)];
            let loss = loss_stage2_tape(&mut tape, &bind, &model, &batch, &schedule).unwrap();
            tape.value(loss).item().unwrap()
        };
        let base = eval(&latents);
        // editing the masked target z changes the loss directly
        let mut masked_edit = latents.clone();
        masked_edit.token_mut(3)[0] += 1.0;
        assert_ne!(base.to_bits(), eval(&masked_edit).to_bits());
    }
}
