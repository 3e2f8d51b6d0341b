//! Evaluation metrics: Fréchet distance, pose error, identity consistency
//! and throughput.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalues down to `-EIG_TOLERANCE * max(1, largest |eigenvalue|)` are
/// treated as rounding noise and clipped to zero.
pub const EIG_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

/// Sample mean and unbiased covariance.
pub fn gaussian_stats(features: &[Vec<f64>]) -> Result<GaussianStats> {
    let n = features.len();
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 feature vectors, got {n}")));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(Error::invalid("feature vectors must share one non-zero dimension"));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("features contain non-finite values".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok(GaussianStats { mean, cov, count: n })
}

fn check_psd(name: &str, eig: &DVector<f64>) -> Result<()> {
    let scale = eig.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let min = eig.min();
    if min < -EIG_TOLERANCE * scale {
        return Err(Error::Numeric(format!(
            "{name} is not positive semi-definite: smallest eigenvalue {min:e}, largest {:e}",
            eig.max()
        )));
    }
    Ok(())
}

/// `sqrt` of a symmetric PSD matrix by eigendecomposition.
fn sqrtm_psd(name: &str, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    check_psd(name, &eig.eigenvalues)?;
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose())
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
///
/// The trace of the cross term is computed as `tr((S_a^(1/2) S_b S_a^(1/2))^(1/2))`,
/// which has the same eigenvalues but stays symmetric.
pub fn frechet_distance(
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d || cov_a.shape() != (d, d) || cov_b.shape() != (d, d) {
        return Err(Error::invalid("Gaussian parameters have mismatched dimensions"));
    }
    let ra = sqrtm_psd("first covariance", cov_a)?;
    check_psd("second covariance", &SymmetricEigen::new((cov_b + cov_b.transpose()) * 0.5).eigenvalues)?;
    let inner = &ra * cov_b * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner).eigenvalues;
    check_psd("covariance product", &eig)?;
    let cross: f64 = eig.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = mu_a - mu_b;
    let value = diff.norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    // Exact cancellation can leave a tiny negative residue.
    Ok(value.max(0.0))
}

pub fn fid(features_a: &[Vec<f64>], features_b: &[Vec<f64>]) -> Result<f64> {
    let a = gaussian_stats(features_a)?;
    let b = gaussian_stats(features_b)?;
    if a.mean.len() != b.mean.len() {
        return Err(Error::invalid(format!(
            "feature dimensions differ: {} vs {}",
            a.mean.len(),
            b.mean.len()
        )));
    }
    frechet_distance(&a.mean, &a.cov, &b.mean, &b.cov)
}

/// Mean absolute difference over pitch and yaw, in radians.
pub fn pose_error(targets: &[(f64, f64)], estimates: &[(f64, f64)]) -> Result<f64> {
    if targets.len() != estimates.len() || targets.is_empty() {
        return Err(Error::invalid(format!(
            "pose lists must be equal and non-empty ({} vs {})",
            targets.len(),
            estimates.len()
        )));
    }
    let total: f64 = targets
        .iter()
        .zip(estimates)
        .map(|(t, e)| (t.0 - e.0).abs() + (t.1 - e.1).abs())
        .sum();
    Ok(total / (2 * targets.len()) as f64)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdConsistency {
    pub per_view: Vec<f64>,
    pub mean: f64,
}

/// Cosine similarity between the canonical embedding and each rotated one.
pub fn id_consistency(canonical: &[f64], rotated: &[Vec<f64>]) -> Result<IdConsistency> {
    if rotated.is_empty() {
        return Err(Error::invalid("id consistency needs at least one rotated view"));
    }
    let per_view: Vec<f64> = rotated.iter().map(|r| cosine_similarity(canonical, r)).collect();
    let mean = per_view.iter().sum::<f64>() / per_view.len() as f64;
    Ok(IdConsistency { per_view, mean })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    /// Median over trials.
    pub fps: f64,
    pub trials: usize,
    pub seconds: Vec<f64>,
    pub hardware: String,
}

pub fn hardware_tag() -> String {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{}-{} ({threads} threads)", std::env::consts::ARCH, std::env::consts::OS)
}

/// Times `trials` calls after one warm-up call.
pub fn throughput(mut frame: impl FnMut() -> Result<()>, trials: usize) -> Result<Throughput> {
    if trials == 0 {
        return Err(Error::invalid("throughput needs at least one trial"));
    }
    frame()?;
    let mut seconds = Vec::with_capacity(trials);
    for _ in 0..trials {
        let t = Instant::now();
        frame()?;
        seconds.push(t.elapsed().as_secs_f64());
    }
    let mut sorted = seconds.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 0 {
        0.5 * (sorted[mid - 1] + sorted[mid])
    } else {
        sorted[mid]
    };
    Ok(Throughput {
        fps: 1.0 / median.max(1e-9),
        trials,
        seconds,
        hardware: hardware_tag(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub samples: Vec<usize>,
    pub config_hash: String,
    /// Feature extractor behind the value; mock values are not comparable to published ones.
    pub extractor: Option<String>,
    #[serde(default)]
    pub breakdown: Vec<(String, f64)>,
    /// Set for timing metrics.
    #[serde(default)]
    pub hardware: Option<String>,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        if !self.value.is_finite() || self.breakdown.iter().any(|(_, v)| !v.is_finite()) {
            return Err(Error::Numeric(format!("metric {} is not finite", self.metric)));
        }
        Ok(())
    }
}
