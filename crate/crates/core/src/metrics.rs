//! Image-quality metrics: MAE, PSNR and SSIM over full patches or masked
//! regions, and the Fréchet distance between Gaussian feature fits.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
#[allow(unused_imports)] // inherent float methods shadow it when std is linked
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::batch::images_to_tensor;
use crate::error::{Error, Result};
use crate::extractor::FeatureExtractor;
use crate::grid::{BinaryMask, Image};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    FullPatch,
    MaskedRegion,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelMetrics {
    pub mae: f64,
    /// `f64::INFINITY` for identical inputs.
    pub psnr: f64,
    pub ssim: f64,
}

fn check_dims(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::SizeMismatch {
            expected: a,
            got: b,
        });
    }
    Ok(())
}

/// PSNR in dB for peak 1.0.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// MAE, PSNR and SSIM of `b` against `a` (both in `[0, 1]`).
///
/// With a region, MAE and PSNR use the foreground pixels only. SSIM is
/// computed on the region's bounding box with `b`'s pixels outside the region
/// replaced by `a`'s, and averaged over the foreground, so differences
/// outside the region never contribute.
pub fn pixel_metrics(a: &Image, b: &Image, region: Option<&BinaryMask>) -> Result<PixelMetrics> {
    check_dims(a.dims(), b.dims())?;
    let Some(region) = region else {
        let n = a.as_slice().len() as f64;
        let (mut abs, mut sq) = (0.0, 0.0);
        for (&p, &q) in a.as_slice().iter().zip(b.as_slice()) {
            let d = p as f64 - q as f64;
            abs += d.abs();
            sq += d * d;
        }
        let (h, w) = a.dims();
        let weights = vec![1.0; h * w];
        let ssim = ssim_weighted(a.as_slice(), b.as_slice(), h, w, &weights);
        return Ok(PixelMetrics {
            mae: abs / n,
            psnr: psnr_from_mse(sq / n),
            ssim,
        });
    };
    check_dims(a.dims(), region.dims())?;
    let bb = region.bounds().ok_or(Error::EmptyMask)?;
    let (mut abs, mut sq) = (0.0, 0.0);
    for (y, x) in region.foreground() {
        let d = a.get(y, x) as f64 - b.get(y, x) as f64;
        abs += d.abs();
        sq += d * d;
    }
    let n = region.count() as f64;
    let (h, w) = (bb.y_max - bb.y_min + 1, bb.x_max - bb.x_min + 1);
    let mut ca = Vec::with_capacity(h * w);
    let mut cb = Vec::with_capacity(h * w);
    let mut weights = Vec::with_capacity(h * w);
    for y in bb.y_min..=bb.y_max {
        for x in bb.x_min..=bb.x_max {
            let inside = region.get(y, x);
            ca.push(a.get(y, x));
            cb.push(if inside { b.get(y, x) } else { a.get(y, x) });
            weights.push(if inside { 1.0 } else { 0.0 });
        }
    }
    Ok(PixelMetrics {
        mae: abs / n,
        psnr: psnr_from_mse(sq / n),
        ssim: ssim_weighted(&ca, &cb, h, w, &weights),
    })
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian filter; the window is truncated at the borders and
/// renormalized, so images smaller than the window are handled.
fn gaussian_filter(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = gaussian_kernel();
    let r = (SSIM_WINDOW / 2) as isize;
    let pass = |src: &[f64], along_x: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (j, &kv) in k.iter().enumerate() {
                    let o = j as isize - r;
                    let (yy, xx) = if along_x {
                        (y as isize, x as isize + o)
                    } else {
                        (y as isize + o, x as isize)
                    };
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    acc += kv * src[yy as usize * w + xx as usize];
                    norm += kv;
                }
                out[y * w + x] = acc / norm;
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

/// Weighted mean of the SSIM map.
fn ssim_weighted(a: &[f32], b: &[f32], h: usize, w: usize, weights: &[f64]) -> f64 {
    let a: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
    let mu_a = gaussian_filter(&a, h, w);
    let mu_b = gaussian_filter(&b, h, w);
    let saa = gaussian_filter(&prod(&a, &a), h, w);
    let sbb = gaussian_filter(&prod(&b, &b), h, w);
    let sab = gaussian_filter(&prod(&a, &b), h, w);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let (mut acc, mut total) = (0.0, 0.0);
    for i in 0..h * w {
        if weights[i] == 0.0 {
            continue;
        }
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = saa[i] - ma * ma;
        let vb = sbb[i] - mb * mb;
        let cov = sab[i] - ma * mb;
        let s =
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        acc += weights[i] * s;
        total += weights[i];
    }
    acc / total
}

/// Symmetric PSD square root by eigendecomposition, negative eigenvalues
/// clipped to zero.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `‖μ1 − μ2‖² + Tr(Σ1 + Σ2 − 2 (Σ1 Σ2)^{1/2})`.
///
/// The trace of `(Σ1 Σ2)^{1/2}` is taken as the trace of the symmetric
/// `(√Σ1 Σ2 √Σ1)^{1/2}`, which has the same eigenvalues.
pub fn frechet_distance(
    mu1: &[f64],
    sigma1: &DMatrix<f64>,
    mu2: &[f64],
    sigma2: &DMatrix<f64>,
) -> Result<f64> {
    let d = mu1.len();
    for other in [
        mu2.len(),
        sigma1.nrows(),
        sigma1.ncols(),
        sigma2.nrows(),
        sigma2.ncols(),
    ] {
        if other != d {
            return Err(Error::DimensionMismatch(d, other));
        }
    }
    let diff: f64 = mu1.iter().zip(mu2).map(|(a, b)| (a - b) * (a - b)).sum();
    let s1 = sqrtm_psd(sigma1);
    let inner = &s1 * sigma2 * &s1;
    let cross = sqrtm_psd(&inner).trace();
    Ok(diff + sigma1.trace() + sigma2.trace() - 2.0 * cross)
}

/// Sample mean and unbiased covariance of row feature vectors.
pub fn feature_statistics(features: &[Vec<f64>]) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = features.len();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let d = features[0].len();
    if let Some(f) = features.iter().find(|f| f.len() != d) {
        return Err(Error::DimensionMismatch(d, f.len()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mu: DVector<f64> = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mu.iter().copied().collect(), cov))
}

/// FID between two image sets (`[0, 1]` intensities) using the pooled pool3
/// features of `extractor`.
pub fn fid_score(a: &[&Image], b: &[&Image], extractor: &FeatureExtractor<f32>) -> Result<f64> {
    for set in [a, b] {
        if set.len() < 2 {
            return Err(Error::TooFewSamples {
                needed: 2,
                got: set.len(),
            });
        }
    }
    let feats = |set: &[&Image]| -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(set.len());
        for chunk in set.chunks(8) {
            let signed: Vec<Image> = chunk
                .iter()
                .map(|im| im.map(crate::grid::to_signed))
                .collect();
            let refs: Vec<&Image> = signed.iter().collect();
            out.extend(extractor.pooled_features(&images_to_tensor(&refs)?));
        }
        Ok(out)
    };
    let (mu1, s1) = feature_statistics(&feats(a)?)?;
    let (mu2, s2) = feature_statistics(&feats(b)?)?;
    frechet_distance(&mu1, &s1, &mu2, &s2)
}

/// Full-patch and masked-region metrics in one report.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scope: Scope,
    pub mae: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub fid: Option<f64>,
}

/// Mean pixel metrics over paired sets, plus FID when an extractor is given.
pub fn evaluate_pairs(
    reference: &[&Image],
    generated: &[&Image],
    regions: &[&BinaryMask],
    extractor: Option<&FeatureExtractor<f32>>,
) -> Result<[MetricReport; 2]> {
    if reference.len() != generated.len() || reference.len() != regions.len() {
        return Err(Error::InvalidArgument(
            "reference, generated and region counts differ".into(),
        ));
    }
    if reference.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let fid = match extractor {
        Some(e) => Some(fid_score(reference, generated, e)?),
        None => None,
    };
    let n = reference.len() as f64;
    let mut out = [Scope::FullPatch, Scope::MaskedRegion].map(|scope| MetricReport {
        scope,
        mae: 0.0,
        psnr: 0.0,
        ssim: 0.0,
        fid,
    });
    for i in 0..reference.len() {
        let full = pixel_metrics(reference[i], generated[i], None)?;
        let masked = pixel_metrics(reference[i], generated[i], Some(regions[i]))?;
        for (r, m) in out.iter_mut().zip([full, masked]) {
            r.mae += m.mae / n;
            r.psnr += m.psnr / n;
            r.ssim += m.ssim / n;
        }
    }
    Ok(out)
}
