//! Evaluation utilities: Monte-Carlo mean predictions, per-slice metrics and
//! residuals, pixelwise predictive uncertainty, and the source/target
//! embedding-covariance discrepancy.

use crate::bnua::{bnua_loss, mc_covariance, squeeze, McCovariance};
use crate::data::SlicePair;
use crate::metrics::{evaluate_pair, to_f64, MetricScores};
use crate::model::{McEmbeddingStack, ReconModel};
use crate::{Error, Result};
use ndarray::{Array2, ArrayD, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn to_patch(img: &Array2<f32>) -> ArrayD<f32> {
    img.clone().insert_axis(Axis(0)).into_dyn()
}

fn to_image(patch: &ArrayD<f32>) -> Array2<f32> {
    patch
        .index_axis(Axis(0), 0)
        .to_owned()
        .into_dimensionality()
        .expect("[1, H, W] patch")
}

/// Monte-Carlo mean prediction for one slice, together with the embedding
/// sample stack used for uncertainty statistics.
pub fn predict_mean<R: Rng>(
    model: &ReconModel<f32>,
    ldct: &Array2<f32>,
    m: usize,
    rng: &mut R,
) -> Result<(Array2<f32>, McEmbeddingStack<f32>)>
where
    StandardNormal: Distribution<f32>,
{
    let (pred, stack) = model.mc_forward(&to_patch(ldct), m, rng)?;
    Ok((to_image(&pred), stack))
}

/// Pixelwise predictive standard deviation over `k` fully stochastic
/// forward passes (fresh encoder and decoder weight draws each pass).
pub fn predictive_std<R: Rng>(
    model: &ReconModel<f32>,
    ldct: &Array2<f32>,
    k: usize,
    rng: &mut R,
) -> Result<Array2<f32>>
where
    StandardNormal: Distribution<f32>,
{
    if k < 2 {
        return Err(Error::InvalidArg(format!(
            "predictive_std needs at least 2 passes, got {k}"
        )));
    }
    let x = to_patch(ldct);
    let preds: Vec<Array2<f32>> = (0..k)
        .map(|_| {
            let enc = model.encode(&x, rng)?;
            Ok(to_image(&model.decode(&enc, rng)?))
        })
        .collect::<Result<_>>()?;
    let (h, w) = ldct.dim();
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mean = preds.iter().map(|p| f64::from(p[[r, c]])).sum::<f64>() / k as f64;
            let var = preds
                .iter()
                .map(|p| (f64::from(p[[r, c]]) - mean).powi(2))
                .sum::<f64>()
                / (k - 1) as f64;
            out[[r, c]] = var.sqrt() as f32;
        }
    }
    Ok(out)
}

/// Per-slice evaluation artifacts.
#[derive(Debug, Clone)]
pub struct SliceEval {
    pub scores: MetricScores,
    pub prediction: Array2<f32>,
    /// `ldct − prediction`, the noise the model removed.
    pub residual: Array2<f32>,
}

/// Evaluates a model on aligned pairs: metrics against the clean image plus
/// the predicted residual map.
pub fn evaluate_slices<R: Rng>(
    model: &ReconModel<f32>,
    pairs: &[SlicePair],
    m: usize,
    rng: &mut R,
) -> Result<Vec<SliceEval>>
where
    StandardNormal: Distribution<f32>,
{
    pairs
        .iter()
        .map(|pair| {
            let (prediction, _) = predict_mean(model, &pair.ldct, m, rng)?;
            let scores = evaluate_pair(&to_f64(&pair.ndct), &to_f64(&prediction), 1.0)?;
            let residual = &pair.ldct - &prediction;
            Ok(SliceEval {
                scores,
                prediction,
                residual,
            })
        })
        .collect()
}

fn covariances<R: Rng>(
    model: &ReconModel<f32>,
    slices: &[Array2<f32>],
    m: usize,
    rng: &mut R,
) -> Result<Vec<McCovariance<f32>>>
where
    StandardNormal: Distribution<f32>,
{
    slices
        .iter()
        .map(|s| {
            let (_, stack) = predict_mean(model, s, m, rng)?;
            mc_covariance(&squeeze(&stack)?)
        })
        .collect()
}

/// Mean pairwise Frobenius discrepancy between the Monte-Carlo embedding
/// covariances of source and target slices — the quantity the alignment
/// loss drives down, measured on held-out data.
pub fn bnua_discrepancy<R: Rng>(
    model: &ReconModel<f32>,
    source_ldct: &[Array2<f32>],
    target_ldct: &[Array2<f32>],
    m: usize,
    rng: &mut R,
) -> Result<f64>
where
    StandardNormal: Distribution<f32>,
{
    let covs_s = covariances(model, source_ldct, m, rng)?;
    let covs_t = covariances(model, target_ldct, m, rng)?;
    let loss = bnua_loss(&covs_s, &covs_t)?;
    Ok(f64::from(loss))
}
