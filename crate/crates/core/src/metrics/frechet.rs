use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Ridge added to both covariances when a set has too few samples for a
/// full-rank estimate.
pub const FRECHET_RIDGE: f64 = 1e-6;

/// Mean and covariance of a Gaussian fit.
#[derive(Clone, Debug)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    /// Sample mean and unbiased covariance of `samples` (each of length `d`).
    pub fn fit(samples: &[Vec<f64>]) -> Result<Self> {
        let n = samples.len();
        let d = samples.first().map_or(0, Vec::len);
        if n < 2 || d == 0 {
            return Err(Error::Metric(format!(
                "frechet: need at least 2 non-empty feature vectors, got {n}"
            )));
        }
        if samples.iter().any(|s| s.len() != d) {
            return Err(Error::Metric("frechet: ragged feature vectors".into()));
        }
        let mut mean = DVector::zeros(d);
        for s in samples {
            mean += DVector::from_column_slice(s);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for s in samples {
            let c = DVector::from_column_slice(s) - &mean;
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
        Ok(GaussianStats { mean, cov })
    }
}

fn sym_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    // Symmetrize against round-off before decomposing.
    let s = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(s)
}

fn check_psd(which: &str, eig: &DVector<f64>, scale: f64) -> Result<()> {
    let tol = 1e-9 * scale.max(1.0);
    if let Some(v) = eig.iter().find(|&&v| v < -tol) {
        return Err(Error::Metric(format!(
            "frechet: covariance {which} is not positive semi-definite (eigenvalue {v})"
        )));
    }
    Ok(())
}

/// Fréchet distance between two Gaussians:
/// `|μa − μb|² + tr(Σa + Σb − 2(Σa^½ Σb Σa^½)^½)`.
pub fn frechet_gaussian(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    let d = a.mean.len();
    if b.mean.len() != d || a.cov.shape() != (d, d) || b.cov.shape() != (d, d) {
        return Err(Error::Metric("frechet: dimension mismatch".into()));
    }
    let ea = sym_eigen(&a.cov);
    check_psd("a", &ea.eigenvalues, a.cov.trace().abs())?;
    let eb = sym_eigen(&b.cov);
    check_psd("b", &eb.eigenvalues, b.cov.trace().abs())?;
    let root = DVector::from_iterator(d, ea.eigenvalues.iter().map(|v| v.max(0.0).sqrt()));
    let sqrt_a = &ea.eigenvectors * DMatrix::from_diagonal(&root) * ea.eigenvectors.transpose();
    let inner = &sqrt_a * &b.cov * &sqrt_a;
    let ei = sym_eigen(&inner);
    let tr_sqrt: f64 = ei.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let dm = &a.mean - &b.mean;
    Ok(dm.dot(&dm) + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt)
}

/// Fréchet distance between Gaussian fits of two feature sets. Sets with
/// no more samples than dimensions get a small ridge on both covariances.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let mut sa = GaussianStats::fit(a)?;
    let mut sb = GaussianStats::fit(b)?;
    if sa.mean.len() != sb.mean.len() {
        return Err(Error::Metric(format!(
            "frechet: feature dimensions differ ({} vs {})",
            sa.mean.len(),
            sb.mean.len()
        )));
    }
    let d = sa.mean.len();
    if a.len() <= d || b.len() <= d {
        for i in 0..d {
            sa.cov[(i, i)] += FRECHET_RIDGE;
            sb.cov[(i, i)] += FRECHET_RIDGE;
        }
    }
    frechet_gaussian(&sa, &sb)
}
