//! Fréchet distance between Gaussian fits of image feature statistics.
//!
//! The feature extractor is a fixed handcrafted 72-dimensional descriptor,
//! so distances are only comparable with other distances computed here.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::image::Image;

pub const FEATURE_DIM: usize = 72;
const GRID: usize = 8;
/// Upper edges of the first five gradient-magnitude bins; the sixth is open.
const GRADIENT_EDGES: [f64; 5] = [0.02, 0.05, 0.1, 0.2, 0.4];

/// Descriptor: 8×8 area-averaged intensities, global mean and standard
/// deviation, and a normalized 6-bin histogram of central-difference
/// gradient magnitudes.
pub fn features(image: &Image) -> Vec<f64> {
    let (w, h) = (image.width(), image.height());
    let mut out = Vec::with_capacity(FEATURE_DIM);
    let mut sums = [[0.0f64; GRID]; GRID];
    let mut counts = [[0usize; GRID]; GRID];
    for y in 0..h {
        let gy = y * GRID / h;
        for x in 0..w {
            let gx = x * GRID / w;
            sums[gy][gx] += image.get(x, y);
            counts[gy][gx] += 1;
        }
    }
    for gy in 0..GRID {
        for gx in 0..GRID {
            out.push(if counts[gy][gx] > 0 {
                sums[gy][gx] / counts[gy][gx] as f64
            } else {
                0.0
            });
        }
    }
    let n = image.data().len() as f64;
    let mean = image.data().iter().sum::<f64>() / n;
    let var = image.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    out.push(mean);
    out.push(var.sqrt());
    let mut hist = [0.0f64; 6];
    for y in 0..h {
        for x in 0..w {
            let gx = (image.get((x + 1).min(w - 1), y) - image.get(x.saturating_sub(1), y)) / 2.0;
            let gy = (image.get(x, (y + 1).min(h - 1)) - image.get(x, y.saturating_sub(1))) / 2.0;
            let mag = (gx * gx + gy * gy).sqrt();
            let bin = GRADIENT_EDGES.iter().position(|&e| mag < e).unwrap_or(5);
            hist[bin] += 1.0;
        }
    }
    out.extend(hist.iter().map(|c| c / n));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub n: usize,
}

/// Mean and unbiased covariance of a set of feature vectors.
pub fn stats_from_features(rows: &[Vec<f64>]) -> Result<FeatureStats> {
    if rows.len() < 2 {
        return Err(Error::Size(format!("need at least 2 samples, got {}", rows.len())));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("feature vectors differ in length".into()));
    }
    let n = rows.len();
    let mut mu = DVector::zeros(d);
    for r in rows {
        for (m, v) in mu.iter_mut().zip(r) {
            *m += v;
        }
    }
    mu /= n as f64;
    let mut sigma = DMatrix::zeros(d, d);
    for r in rows {
        let c = DVector::from_iterator(d, r.iter().zip(mu.iter()).map(|(v, m)| v - m));
        sigma += &c * c.transpose();
    }
    sigma /= (n - 1) as f64;
    Ok(FeatureStats { mu, sigma, n })
}

pub fn gaussian_stats(images: &[Image]) -> Result<FeatureStats> {
    if images.len() < 2 {
        return Err(Error::Size(format!("need at least 2 images, got {}", images.len())));
    }
    let rows: Vec<Vec<f64>> = images.iter().map(features).collect();
    stats_from_features(&rows)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖mu_a − mu_b‖² + tr(Σa + Σb − 2 (Σa Σb)^½)`, clamped at zero.
///
/// The trace of the product root is taken as `tr((Σa^½ Σb Σa^½)^½)`, which
/// has the same value and only needs symmetric eigendecompositions.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.mu.len() != b.mu.len() {
        return Err(Error::Shape(format!(
            "feature dimensions differ: {} vs {}",
            a.mu.len(),
            b.mu.len()
        )));
    }
    let diff = (&a.mu - &b.mu).norm_squared();
    let root_a = sym_sqrt(&a.sigma);
    let inner = &root_a * &b.sigma * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    Ok((diff + a.sigma.trace() + b.sigma.trace() - 2.0 * tr_cross).max(0.0))
}

/// Convenience: FID between two image sets.
pub fn fid(set_a: &[Image], set_b: &[Image]) -> Result<f64> {
    frechet_distance(&gaussian_stats(set_a)?, &gaussian_stats(set_b)?)
}
