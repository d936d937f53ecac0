//! Full-reference image quality metrics (PSNR, SSIM, GMSD, DSS), metric
//! aggregation with CSV/JSON export, and a 1-D Wasserstein distance for
//! residual-distribution comparisons.
//!
//! All metrics compute in `f64`, are symmetric in their two image arguments,
//! and reach their ideal value (PSNR cap, SSIM 1, GMSD 0, DSS 0) on
//! identical inputs.

use crate::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

/// PSNR value reported when the MSE is numerically zero.
pub const PSNR_CAP_DB: f64 = 100.0;
/// MSE below this threshold is treated as an exact match.
pub const PSNR_MSE_FLOOR: f64 = 1e-12;
/// SSIM window side length.
pub const SSIM_WINDOW: usize = 11;
/// SSIM Gaussian window standard deviation.
pub const SSIM_SIGMA: f64 = 1.5;
/// GMSD stability constant on the canonical 255 intensity scale.
pub const GMSD_C: f64 = 170.0;
/// DSS block side length.
pub const DSS_BLOCK: usize = 8;
/// Weight of the low-frequency sub-band in DSS.
pub const DSS_LOW_WEIGHT: f64 = 1.0;
/// Weight of the high-frequency sub-band in DSS.
pub const DSS_HIGH_WEIGHT: f64 = 0.25;
/// DSS per-band stability constant.
pub const DSS_EPS: f64 = 1e-4;

/// Converts an `f32` image to the `f64` domain the metrics operate in.
pub fn to_f64(img: &Array2<f32>) -> Array2<f64> {
    img.mapv(f64::from)
}

fn check_same_shape(op: &'static str, a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB: `10·log10(peak² / MSE)`, capped at
/// [`PSNR_CAP_DB`] when the MSE falls below [`PSNR_MSE_FLOOR`].
pub fn psnr(reference: &Array2<f64>, test: &Array2<f64>, peak: f64) -> Result<f64> {
    check_same_shape("psnr", reference, test)?;
    if peak <= 0.0 {
        return Err(Error::InvalidArg(format!("peak must be positive, got {peak}")));
    }
    let n = reference.len() as f64;
    let mse = reference
        .iter()
        .zip(test.iter())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse < PSNR_MSE_FLOOR {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable valid-mode filtering with a 1-D kernel applied along both axes.
fn separable_filter_valid(img: &Array2<f64>, kernel: &[f64]) -> Array2<f64> {
    let k = kernel.len();
    let (h, w) = img.dim();
    let mut rows = Array2::zeros((h, w - k + 1));
    for r in 0..h {
        for c in 0..w - k + 1 {
            let mut acc = 0.0;
            for (i, &kv) in kernel.iter().enumerate() {
                acc += kv * img[[r, c + i]];
            }
            rows[[r, c]] = acc;
        }
    }
    let mut out = Array2::zeros((h - k + 1, w - k + 1));
    for r in 0..h - k + 1 {
        for c in 0..w - k + 1 {
            let mut acc = 0.0;
            for (i, &kv) in kernel.iter().enumerate() {
                acc += kv * rows[[r + i, c]];
            }
            out[[r, c]] = acc;
        }
    }
    out
}

/// Mean structural similarity with an 11×11 Gaussian window (σ = 1.5),
/// `c1 = (0.01·peak)²`, `c2 = (0.03·peak)²`, evaluated in valid mode (no
/// padding).
pub fn ssim(reference: &Array2<f64>, test: &Array2<f64>, peak: f64) -> Result<f64> {
    check_same_shape("ssim", reference, test)?;
    if peak <= 0.0 {
        return Err(Error::InvalidArg(format!("peak must be positive, got {peak}")));
    }
    let (h, w) = reference.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArg(format!(
            "ssim needs at least {SSIM_WINDOW}×{SSIM_WINDOW} images, got {h}×{w}"
        )));
    }
    let g = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let mu_x = separable_filter_valid(reference, &g);
    let mu_y = separable_filter_valid(test, &g);
    let xx = separable_filter_valid(&(reference * reference), &g);
    let yy = separable_filter_valid(&(test * test), &g);
    let xy = separable_filter_valid(&(reference * test), &g);
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let mut acc = 0.0;
    for (((( &mx, &my), &sxx), &syy), &sxy) in mu_x
        .iter()
        .zip(mu_y.iter())
        .zip(xx.iter())
        .zip(yy.iter())
        .zip(xy.iter())
    {
        let var_x = sxx - mx * mx;
        let var_y = syy - my * my;
        let cov = sxy - mx * my;
        let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
        let den = (mx * mx + my * my + c1) * (var_x + var_y + c2);
        acc += num / den;
    }
    Ok(acc / mu_x.len() as f64)
}

/// Valid-mode 3×3 Prewitt gradient magnitude.
fn prewitt_magnitude(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let mut out = Array2::zeros((h - 2, w - 2));
    for r in 0..h - 2 {
        for c in 0..w - 2 {
            let mut gx = 0.0;
            let mut gy = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    let v = img[[r + i, c + j]];
                    // Prewitt: columns weighted [1, 0, −1] / 3 horizontally,
                    // rows likewise vertically.
                    gx += v * [1.0, 0.0, -1.0][j] / 3.0;
                    gy += v * [1.0, 0.0, -1.0][i] / 3.0;
                }
            }
            out[[r, c]] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Gradient magnitude similarity deviation. Inputs are rescaled by
/// `255 / peak` to the canonical intensity range, gradients use 3×3 Prewitt
/// kernels in valid mode, and the result is the population standard
/// deviation of the per-pixel similarity map
/// `(2·g_r·g_t + c) / (g_r² + g_t² + c)` with `c =` [`GMSD_C`].
pub fn gmsd(reference: &Array2<f64>, test: &Array2<f64>, peak: f64) -> Result<f64> {
    check_same_shape("gmsd", reference, test)?;
    if peak <= 0.0 {
        return Err(Error::InvalidArg(format!("peak must be positive, got {peak}")));
    }
    let (h, w) = reference.dim();
    if h < 3 || w < 3 {
        return Err(Error::InvalidArg(format!(
            "gmsd needs at least 3×3 images, got {h}×{w}"
        )));
    }
    let scale = 255.0 / peak;
    let gm_r = prewitt_magnitude(&reference.mapv(|v| v * scale));
    let gm_t = prewitt_magnitude(&test.mapv(|v| v * scale));
    let n = gm_r.len() as f64;
    let mut sims = Vec::with_capacity(gm_r.len());
    for (&a, &b) in gm_r.iter().zip(gm_t.iter()) {
        sims.push((2.0 * a * b + GMSD_C) / (a * a + b * b + GMSD_C));
    }
    let mean = sims.iter().sum::<f64>() / n;
    let var = sims.iter().map(|&s| (s - mean) * (s - mean)).sum::<f64>() / n;
    Ok(var.sqrt())
}

/// Orthonormal 8×8 DCT-II basis matrix.
fn dct_matrix() -> Array2<f64> {
    let n = DSS_BLOCK;
    let mut d = Array2::zeros((n, n));
    for u in 0..n {
        let a = if u == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for x in 0..n {
            d[[u, x]] =
                a * (std::f64::consts::PI * (2.0 * x as f64 + 1.0) * u as f64 / (2.0 * n as f64))
                    .cos();
        }
    }
    d
}

/// DCT sub-band similarity result: the reported distance (`1 − similarity`)
/// together with the raw similarity it was derived from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DssScore {
    pub dss: f64,
    pub similarity: f64,
}

/// DCT sub-band similarity. Each non-overlapping 8×8 block is transformed
/// with the orthonormal DCT; AC coefficients split into a low-frequency band
/// (`u + v ≤ 3`) and a high-frequency band (the rest). Per block and band a
/// similarity `(2·⟨r,t⟩ + ε) / (‖r‖² + ‖t‖² + ε)` is computed and the bands
/// are combined with weights 1.0 (low) and 0.25 (high). The reported score
/// is `1 − similarity`, so 0 means identical.
pub fn dss(reference: &Array2<f64>, test: &Array2<f64>) -> Result<DssScore> {
    check_same_shape("dss", reference, test)?;
    let (h, w) = reference.dim();
    if h < DSS_BLOCK || w < DSS_BLOCK {
        return Err(Error::InvalidArg(format!(
            "dss needs at least {DSS_BLOCK}×{DSS_BLOCK} images, got {h}×{w}"
        )));
    }
    let d = dct_matrix();
    let dt = d.t().to_owned();
    let blocks_r = h / DSS_BLOCK;
    let blocks_c = w / DSS_BLOCK;
    let mut acc = 0.0;
    for br in 0..blocks_r {
        for bc in 0..blocks_c {
            let slice = ndarray::s![
                br * DSS_BLOCK..(br + 1) * DSS_BLOCK,
                bc * DSS_BLOCK..(bc + 1) * DSS_BLOCK
            ];
            let cr = d.dot(&reference.slice(slice)).dot(&dt);
            let ct = d.dot(&test.slice(slice)).dot(&dt);
            let mut dot = [0.0f64; 2];
            let mut nr = [0.0f64; 2];
            let mut nt = [0.0f64; 2];
            for u in 0..DSS_BLOCK {
                for v in 0..DSS_BLOCK {
                    if u == 0 && v == 0 {
                        continue; // DC carries no structure
                    }
                    let band = usize::from(u + v > 3);
                    dot[band] += cr[[u, v]] * ct[[u, v]];
                    nr[band] += cr[[u, v] ] * cr[[u, v]];
                    nt[band] += ct[[u, v]] * ct[[u, v]];
                }
            }
            let sim_band =
                |i: usize| (2.0 * dot[i] + DSS_EPS) / (nr[i] + nt[i] + DSS_EPS);
            acc += (DSS_LOW_WEIGHT * sim_band(0) + DSS_HIGH_WEIGHT * sim_band(1))
                / (DSS_LOW_WEIGHT + DSS_HIGH_WEIGHT);
        }
    }
    let similarity = acc / (blocks_r * blocks_c) as f64;
    Ok(DssScore {
        dss: 1.0 - similarity,
        similarity,
    })
}

/// All four metric values for one image pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricScores {
    pub psnr: f64,
    pub ssim: f64,
    pub gmsd: f64,
    pub dss: f64,
    pub dss_similarity: f64,
}

/// Evaluates all metrics for one (reference, test) pair.
pub fn evaluate_pair(
    reference: &Array2<f64>,
    test: &Array2<f64>,
    peak: f64,
) -> Result<MetricScores> {
    let dss_score = dss(reference, test)?;
    Ok(MetricScores {
        psnr: psnr(reference, test, peak)?,
        ssim: ssim(reference, test, peak)?,
        gmsd: gmsd(reference, test, peak)?,
        dss: dss_score.dss,
        dss_similarity: dss_score.similarity,
    })
}

/// Mean and sample standard deviation of one metric over a set of images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> MeanStd {
    let n = values.clone().count() as f64;
    if n == 0.0 {
        return MeanStd { mean: 0.0, std: 0.0 };
    }
    let mean = values.clone().sum::<f64>() / n;
    let std = if n < 2.0 {
        0.0
    } else {
        (values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    MeanStd { mean, std }
}

/// Aggregate statistics over a set of per-image scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricAggregate {
    pub n: usize,
    pub psnr: MeanStd,
    pub ssim: MeanStd,
    pub gmsd: MeanStd,
    pub dss: MeanStd,
}

/// Computes mean ± std of every metric.
pub fn aggregate(scores: &[MetricScores]) -> MetricAggregate {
    MetricAggregate {
        n: scores.len(),
        psnr: mean_std(scores.iter().map(|s| s.psnr)),
        ssim: mean_std(scores.iter().map(|s| s.ssim)),
        gmsd: mean_std(scores.iter().map(|s| s.gmsd)),
        dss: mean_std(scores.iter().map(|s| s.dss)),
    }
}

/// Renders per-image scores as CSV (header + one row per image).
pub fn metrics_csv(scores: &[MetricScores]) -> String {
    let mut out = String::from("index,psnr,ssim,gmsd,dss,dss_similarity\n");
    for (i, s) in scores.iter().enumerate() {
        // Unwrap: writing to a String cannot fail.
        writeln!(
            out,
            "{i},{:.9},{:.9},{:.9},{:.9},{:.9}",
            s.psnr, s.ssim, s.gmsd, s.dss, s.dss_similarity
        )
        .unwrap();
    }
    out
}

/// Writes per-image CSV and aggregate JSON next to each other.
pub fn write_metric_report(
    csv_path: &Path,
    json_path: &Path,
    scores: &[MetricScores],
) -> Result<MetricAggregate> {
    std::fs::write(csv_path, metrics_csv(scores)).map_err(|source| Error::Io {
        path: csv_path.to_path_buf(),
        source,
    })?;
    let agg = aggregate(scores);
    let json = serde_json::to_string_pretty(&agg).map_err(|source| Error::Json {
        path: json_path.to_path_buf(),
        source,
    })?;
    std::fs::write(json_path, json).map_err(|source| Error::Io {
        path: json_path.to_path_buf(),
        source,
    })?;
    Ok(agg)
}

/// 1-D Wasserstein-1 distance between two empirical distributions given as
/// unweighted samples: the integral of `|F_a(x) − F_b(x)|` over the merged
/// support.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArg(
            "wasserstein1 requires non-empty samples".into(),
        ));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArg(
            "wasserstein1 requires finite samples".into(),
        ));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let mut merged: Vec<f64> = sa.iter().chain(sb.iter()).copied().collect();
    merged.sort_by(|x, y| x.partial_cmp(y).unwrap());
    merged.dedup();
    let (mut i, mut j, mut dist) = (0usize, 0usize, 0.0f64);
    for win in merged.windows(2) {
        let (x0, x1) = (win[0], win[1]);
        while i < sa.len() && sa[i] <= x0 {
            i += 1;
        }
        while j < sb.len() && sb[j] <= x0 {
            j += 1;
        }
        let fa = i as f64 / sa.len() as f64;
        let fb = j as f64 / sb.len() as f64;
        dist += (fa - fb).abs() * (x1 - x0);
    }
    Ok(dist)
}
