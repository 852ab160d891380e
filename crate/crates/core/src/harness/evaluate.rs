//! Evaluation of generated samples against the synthetic world's exact
//! statistics: per-class and pooled Fréchet proxies over flattened
//! per-cell latents, plus the Stage-1 token-match rate against class
//! templates.

use crate::error::Result;
use crate::harness::frechet::frechet_proxy;
use crate::synthetic::{DatasetSample, LatentStats, SyntheticWorld};

/// Minimum per-class sample count below which covariance estimates get a
/// warning in the report.
pub const MIN_SAMPLES_PER_CLASS: usize = 500;

/// Gaussian fit of `n` stacked d-vectors (population covariance, 1/N).
pub fn fit_gaussian(vectors: &[f64], n: usize, d: usize) -> LatentStats {
    assert_eq!(vectors.len(), n * d);
    assert!(n > 0);
    let mut mean = vec![0.0; d];
    for row in vectors.chunks(d) {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x / n as f64;
        }
    }
    let mut cov = vec![0.0; d * d];
    for row in vectors.chunks(d) {
        for i in 0..d {
            let di = row[i] - mean[i];
            for j in 0..d {
                cov[i * d + j] += di * (row[j] - mean[j]) / n as f64;
            }
        }
    }
    LatentStats { mean, cov }
}

#[derive(Debug, Clone)]
pub struct ClassEval {
    pub class: usize,
    pub samples: usize,
    pub proxy: f64,
    pub token_match_rate: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub per_class: Vec<ClassEval>,
    pub pooled_proxy: f64,
    pub token_match_rate: f64,
    pub warnings: Vec<String>,
}

/// Compare a sample set against the world oracle. The reference side is
/// exact (closed-form class stats), so the reported distance is entirely
/// the sample side's deviation.
pub fn evaluate(samples: &[DatasetSample], world: &SyntheticWorld) -> Result<EvalReport> {
    let cfg = &world.config;
    let (d, cells) = (cfg.d, cfg.h * cfg.w);
    let mut warnings = Vec::new();
    let mut per_class = Vec::with_capacity(cfg.classes);
    let mut pooled: Vec<f64> = Vec::new();
    let mut match_total = 0usize;
    let mut cell_total = 0usize;

    for class in 0..cfg.classes {
        let class_samples: Vec<&DatasetSample> =
            samples.iter().filter(|s| s.class == class).collect();
        if class_samples.len() < MIN_SAMPLES_PER_CLASS {
            warnings.push(format!(
                "class {class}: {} samples < {MIN_SAMPLES_PER_CLASS}; proxy confidence is widened",
                class_samples.len()
            ));
        }
        let mut cells_flat = Vec::with_capacity(class_samples.len() * cells * d);
        let mut matches = 0usize;
        let template = &world.templates[class];
        for s in &class_samples {
            cells_flat.extend_from_slice(&s.latents.values);
            matches += s
                .tokens
                .indices
                .iter()
                .zip(template)
                .filter(|(a, b)| a == b)
                .count();
        }
        match_total += matches;
        cell_total += class_samples.len() * cells;
        pooled.extend_from_slice(&cells_flat);

        let proxy = if class_samples.is_empty() {
            f64::NAN
        } else {
            let fitted = fit_gaussian(&cells_flat, class_samples.len() * cells, d);
            frechet_proxy(&fitted, &world.oracle_class_stats(class)?)?
        };
        per_class.push(ClassEval {
            class,
            samples: class_samples.len(),
            proxy,
            token_match_rate: if class_samples.is_empty() {
                f64::NAN
            } else {
                matches as f64 / (class_samples.len() * cells) as f64
            },
        });
    }

    let pooled_proxy = if pooled.is_empty() {
        f64::NAN
    } else {
        let fitted = fit_gaussian(&pooled, pooled.len() / d, d);
        frechet_proxy(&fitted, &world.oracle_pooled_stats()?)?
    };
    Ok(EvalReport {
        per_class,
        pooled_proxy,
        token_match_rate: if cell_total == 0 {
            f64::NAN
        } else {
            match_total as f64 / cell_total as f64
        },
        warnings,
    })
}

/// Fixed 6-significant-digit scientific formatting; '.' decimal point,
/// bit-stable across platforms.
pub fn fmt_sig(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else {
        format!("{x:.5e}")
    }
}

impl EvalReport {
    /// Column-aligned text table.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:>6} {:>9} {:>14} {:>12}\n",
            "class", "samples", "proxy", "token_match"
        ));
        for c in &self.per_class {
            out.push_str(&format!(
                "{:>6} {:>9} {:>14} {:>12}\n",
                c.class,
                c.samples,
                fmt_sig(c.proxy),
                fmt_sig(c.token_match_rate)
            ));
        }
        out.push_str(&format!(
            "{:>6} {:>9} {:>14} {:>12}\n",
            "pooled",
            self.per_class.iter().map(|c| c.samples).sum::<usize>(),
            fmt_sig(self.pooled_proxy),
            fmt_sig(self.token_match_rate)
        ));
        for w in &self.warnings {
            out.push_str(&format!("warning: {w}\n"));
        }
        out
    }

    /// Machine-readable CSV with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,samples,proxy,token_match\n");
        for c in &self.per_class {
            out.push_str(&format!(
                "{},{},{},{}\n",
                c.class,
                c.samples,
                fmt_sig(c.proxy),
                fmt_sig(c.token_match_rate)
            ));
        }
        out.push_str(&format!(
            "pooled,{},{},{}\n",
            self.per_class.iter().map(|c| c.samples).sum::<usize>(),
            fmt_sig(self.pooled_proxy),
            fmt_sig(self.token_match_rate)
        ));
        out
    }
}
