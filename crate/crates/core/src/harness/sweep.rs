//! Sweep runner over the ablation axes: generation-time knobs (cfg
//! scale, Stage-1 temperature, unmasking steps) reuse trained
//! checkpoints; architecture knobs (query count, q-former architecture)
//! retrain Stage 2 per grid point under the same budget.

use crate::error::{D2cError, Result};
use crate::harness::evaluate::{evaluate, fmt_sig, EvalReport};
use crate::harness::train::{train_stage2, RunConfig};
use crate::pipeline::generate_batch;
use crate::stage1::Stage1Model;
use crate::stage2::{FusionKind, QFormerArch, Stage2Model};
use crate::synthetic::{DatasetSample, SyntheticWorld, TokenGrid};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Cfg,
    Temperature,
    Steps,
    Queries,
    QformerArch,
}

impl SweepAxis {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "cfg" => Ok(SweepAxis::Cfg),
            "temperature" => Ok(SweepAxis::Temperature),
            "steps" => Ok(SweepAxis::Steps),
            "queries" => Ok(SweepAxis::Queries),
            "qformer_arch" => Ok(SweepAxis::QformerArch),
            other => Err(D2cError::config(format!(
                "unknown sweep axis {other}; expected cfg|temperature|steps|queries|qformer_arch"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Cfg => "cfg",
            SweepAxis::Temperature => "temperature",
            SweepAxis::Steps => "steps",
            SweepAxis::Queries => "queries",
            SweepAxis::QformerArch => "qformer_arch",
        }
    }

    /// Default grid mirroring the reference operating points.
    pub fn default_grid(&self) -> Vec<String> {
        let strs = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        match self {
            SweepAxis::Cfg => strs(&["1.0", "2.0", "4.0", "6.0"]),
            SweepAxis::Temperature => strs(&["0.9", "0.95", "0.99", "1.0"]),
            SweepAxis::Steps => strs(&["8", "16", "32", "64"]),
            SweepAxis::Queries => strs(&["16", "32", "64"]),
            SweepAxis::QformerArch => strs(&["decoder", "encoder_decoder"]),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub label: String,
    pub pooled_proxy: f64,
    pub token_match_rate: f64,
    #[serde(skip)]
    pub report: EvalReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepResult {
    pub axis: String,
    pub points: Vec<SweepPoint>,
    pub summary: String,
}

pub struct SweepContext<'a> {
    pub config: &'a RunConfig,
    pub world: &'a SyntheticWorld,
    pub stage1: &'a Stage1Model,
    /// Trained model for generation-axis sweeps.
    pub stage2: Option<&'a Stage2Model>,
    /// Training set for axes that retrain per point.
    pub dataset: &'a [DatasetSample],
}

fn eval_generation(
    ctx: &SweepContext,
    stage2: &Stage2Model,
    config: &RunConfig,
) -> Result<EvalReport> {
    let classes: Vec<usize> = (0..config.world.classes)
        .flat_map(|c| std::iter::repeat(c).take(config.generation.samples_per_class))
        .collect();
    let schedule = config.schedule()?;
    let generated = generate_batch(ctx.stage1, stage2, &schedule, &classes, &config.generation)?;
    let samples: Vec<DatasetSample> = generated
        .into_iter()
        .map(|(class, tokens, latents)| DatasetSample { class, tokens, latents })
        .collect();
    evaluate(&samples, ctx.world)
}

pub fn run_sweep(axis: SweepAxis, grid: &[String], ctx: &SweepContext) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(D2cError::config("empty sweep grid"));
    }
    let mut points = Vec::with_capacity(grid.len());
    for value in grid {
        log::info!("sweep {} = {value}", axis.name());
        let report = match axis {
            SweepAxis::Cfg | SweepAxis::Temperature | SweepAxis::Steps => {
                let stage2 = ctx
                    .stage2
                    .ok_or_else(|| D2cError::config("this axis needs a trained stage-2 model"))?;
                let mut cfg = ctx.config.clone();
                match axis {
                    SweepAxis::Cfg => {
                        cfg.generation.cfg_scale = value
                            .parse()
                            .map_err(|_| D2cError::config(format!("bad cfg value {value}")))?;
                    }
                    SweepAxis::Temperature => {
                        cfg.generation.temperature = value
                            .parse()
                            .map_err(|_| D2cError::config(format!("bad temperature {value}")))?;
                    }
                    SweepAxis::Steps => {
                        cfg.generation.steps = value
                            .parse()
                            .map_err(|_| D2cError::config(format!("bad step count {value}")))?;
                    }
                    _ => unreachable!(),
                }
                cfg.generation.validate(cfg.world.h * cfg.world.w)?;
                eval_generation(ctx, stage2, &cfg)?
            }
            SweepAxis::Queries => {
                let mut cfg = ctx.config.clone();
                cfg.stage2.fusion = FusionKind::QFormer;
                cfg.stage2.queries = value
                    .parse()
                    .map_err(|_| D2cError::config(format!("bad query count {value}")))?;
                let cfg = cfg.harmonized()?;
                let out = train_stage2(&cfg, ctx.stage1, ctx.dataset, None)?;
                eval_generation(ctx, &out.model, &cfg)?
            }
            SweepAxis::QformerArch => {
                let mut cfg = ctx.config.clone();
                cfg.stage2.fusion = FusionKind::QFormer;
                cfg.stage2.qformer_arch = match value.as_str() {
                    "decoder" => QFormerArch::Decoder,
                    "encoder_decoder" => QFormerArch::EncoderDecoder,
                    other => {
                        return Err(D2cError::config(format!(
                            "bad q-former architecture {other}"
                        )))
                    }
                };
                let cfg = cfg.harmonized()?;
                let out = train_stage2(&cfg, ctx.stage1, ctx.dataset, None)?;
                eval_generation(ctx, &out.model, &cfg)?
            }
        };
        points.push(SweepPoint {
            label: value.clone(),
            pooled_proxy: report.pooled_proxy,
            token_match_rate: report.token_match_rate,
            report,
        });
    }
    let summary = summarize(axis, &points);
    Ok(SweepResult { axis: axis.name().to_string(), points, summary })
}

/// Argmin position and qualitative shape over the grid.
fn summarize(axis: SweepAxis, points: &[SweepPoint]) -> String {
    let (best, _) = points
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.pooled_proxy.partial_cmp(&b.1.pooled_proxy).unwrap())
        .unwrap();
    let shape = if points.len() < 3 {
        "n/a"
    } else if best == 0 {
        "minimum at grid start"
    } else if best == points.len() - 1 {
        "minimum at grid end"
    } else {
        "interior minimum"
    };
    format!(
        "axis {}: best {} = {} (proxy {}), shape: {shape}",
        axis.name(),
        axis.name(),
        points[best].label,
        fmt_sig(points[best].pooled_proxy)
    )
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{},pooled_proxy,token_match\n", self.axis);
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{}\n",
                p.label,
                fmt_sig(p.pooled_proxy),
                fmt_sig(p.token_match_rate)
            ));
        }
        out
    }

    /// Plot-ready JSON: labels and series arrays.
    pub fn to_plot_json(&self) -> String {
        #[derive(Serialize)]
        struct Plot<'a> {
            axis: &'a str,
            labels: Vec<&'a str>,
            pooled_proxy: Vec<f64>,
            token_match: Vec<f64>,
            summary: &'a str,
        }
        serde_json::to_string_pretty(&Plot {
            axis: &self.axis,
            labels: self.points.iter().map(|p| p.label.as_str()).collect(),
            pooled_proxy: self.points.iter().map(|p| p.pooled_proxy).collect(),
            token_match: self.points.iter().map(|p| p.token_match_rate).collect(),
            summary: &self.summary,
        })
        .expect("plot serialization cannot fail")
    }
}

/// Token-match rate a perfectly trained Stage-1 sampler would reach at
/// temperature 1 without guidance: 1 − ρ(1 − 1/K).
pub fn expected_token_match(world: &SyntheticWorld) -> f64 {
    let k = world.config.codebook_size as f64;
    1.0 - world.config.corruption * (1.0 - 1.0 / k)
}

/// Convenience for tests: token-match rate of a set of sampled grids.
pub fn token_match_rate(world: &SyntheticWorld, grids: &[(usize, TokenGrid)]) -> f64 {
    let mut matches = 0usize;
    let mut total = 0usize;
    for (class, grid) in grids {
        let template = &world.templates[*class];
        matches += grid.indices.iter().zip(template).filter(|(a, b)| a == b).count();
        total += grid.len();
    }
    matches as f64 / total as f64
}
