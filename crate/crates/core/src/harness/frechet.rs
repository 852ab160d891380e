//! Fréchet distance between Gaussian fits:
//! d² = ‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2·(Σ₁Σ₂)^{1/2}),
//! with the matrix square root taken through symmetric Jacobi
//! eigendecompositions (Tr((Σ₁Σ₂)^{1/2}) = Tr((Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2})).

use crate::error::{D2cError, Result};
use crate::synthetic::LatentStats;

const SYMMETRY_TOL: f64 = 1e-9;
const PSD_TOL: f64 = 1e-8;
const JACOBI_EPS: f64 = 1e-14;
const JACOBI_MAX_SWEEPS: usize = 64;

/// Cyclic Jacobi eigendecomposition of a symmetric d×d matrix.
/// Returns (eigenvalues, eigenvectors as columns of V, row-major):
/// A = V · diag(λ) · Vᵀ.
pub fn jacobi_eigh(mat: &[f64], d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if mat.len() != d * d {
        return Err(D2cError::shape("eigh expects a square matrix"));
    }
    let scale = mat.iter().map(|x| x.abs()).fold(0.0f64, f64::max).max(1e-300);
    for i in 0..d {
        for j in 0..d {
            if (mat[i * d + j] - mat[j * d + i]).abs() > SYMMETRY_TOL * scale {
                return Err(D2cError::numeric("matrix is not symmetric"));
            }
        }
    }
    let mut a = mat.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..d)
            .flat_map(|i| (i + 1..d).map(move |j| (i, j)))
            .map(|(i, j)| a[i * d + j] * a[i * d + j])
            .sum();
        if off.sqrt() <= JACOBI_EPS * scale {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq.abs() <= JACOBI_EPS * scale {
                    continue;
                }
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig = (0..d).map(|i| a[i * d + i]).collect();
    Ok((eig, v))
}

fn matmul_sq(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    crate::autodiff::matmul_dense(a, b, d, d, d)
}

/// Symmetric PSD square root via eigendecomposition; small negative
/// eigenvalues (round-off) clamp to zero, larger ones are an error.
pub fn sqrt_psd(mat: &[f64], d: usize) -> Result<Vec<f64>> {
    let (eig, v) = jacobi_eigh(mat, d)?;
    let scale = eig.iter().map(|x| x.abs()).fold(0.0f64, f64::max).max(1e-300);
    let mut root = vec![0.0; d * d];
    for (k, &lam) in eig.iter().enumerate() {
        if lam < -PSD_TOL * scale {
            return Err(D2cError::numeric(format!(
                "matrix is not PSD (eigenvalue {lam})"
            )));
        }
        let s = lam.max(0.0).sqrt();
        for i in 0..d {
            for j in 0..d {
                root[i * d + j] += s * v[i * d + k] * v[j * d + k];
            }
        }
    }
    Ok(root)
}

/// Squared Fréchet distance between two Gaussian summaries, clamped at 0
/// against negative round-off.
pub fn frechet_proxy(a: &LatentStats, b: &LatentStats) -> Result<f64> {
    let d = a.mean.len();
    if b.mean.len() != d || a.cov.len() != d * d || b.cov.len() != d * d {
        return Err(D2cError::shape("stat dimensions disagree"));
    }
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let s1h = sqrt_psd(&a.cov, d)?;
    let inner = matmul_sq(&matmul_sq(&s1h, &b.cov, d), &s1h, d);
    // inner is symmetric up to round-off; symmetrize before eigh
    let mut sym = inner.clone();
    for i in 0..d {
        for j in 0..d {
            sym[i * d + j] = 0.5 * (inner[i * d + j] + inner[j * d + i]);
        }
    }
    let (eig, _) = jacobi_eigh(&sym, d)?;
    let trace_root: f64 = eig.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let tr_a: f64 = (0..d).map(|i| a.cov[i * d + i]).sum();
    let tr_b: f64 = (0..d).map(|i| b.cov[i * d + i]).sum();
    Ok((mean_term + tr_a + tr_b - 2.0 * trace_root).max(0.0))
}
