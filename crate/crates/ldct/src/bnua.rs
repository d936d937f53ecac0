//! Noise-uncertainty alignment in latent space: squeeze every Monte-Carlo
//! embedding to per-channel means, form the covariance of those means across
//! the MC samples of one input, and penalize the squared Frobenius distance
//! between all cross-domain pairs of covariance matrices.
//!
//! Because the covariance is taken across weight samples of the *same*
//! input, it measures stochasticity (noise uncertainty) rather than content:
//! with zero weight variance it vanishes identically.

use crate::autodiff::{Elem, Tape, Var};
use crate::model::McEmbeddingStack;
use crate::{Error, Result};

/// Channel statistics of one embedding stack: row `j` holds the
/// spatially averaged channels of MC sample `j`.
#[derive(Debug, Clone)]
pub struct CompactEmbedding<E: Elem> {
    pub u: ndarray::Array2<E>,
}

/// Covariance of the compact embedding rows across MC samples.
#[derive(Debug, Clone)]
pub struct McCovariance<E: Elem> {
    pub cmat: ndarray::Array2<E>,
}

/// Global average pooling of every sample in the stack (each `[C, H, W]`)
/// into an `M×C` matrix.
pub fn squeeze<E: Elem>(stack: &McEmbeddingStack<E>) -> Result<CompactEmbedding<E>> {
    let first = &stack.samples()[0];
    if first.ndim() != 3 {
        return Err(Error::shape(
            "squeeze",
            format!("expected CxHxW samples, got {:?}", first.shape()),
        ));
    }
    let (c, h, w) = (first.shape()[0], first.shape()[1], first.shape()[2]);
    let denom = E::cast_usize(h * w);
    let mut u = ndarray::Array2::<E>::zeros((stack.m(), c));
    for (j, z) in stack.samples().iter().enumerate() {
        for ch in 0..c {
            u[[j, ch]] = z.index_axis(ndarray::Axis(0), ch).sum() / denom;
        }
    }
    Ok(CompactEmbedding { u })
}

/// Unbiased covariance `C = 1/(M−1) Σ_j (u_j − ū)ᵀ(u_j − ū)` of the rows.
pub fn mc_covariance<E: Elem>(embedding: &CompactEmbedding<E>) -> Result<McCovariance<E>> {
    let u = &embedding.u;
    let m = u.nrows();
    if m < 2 {
        return Err(Error::InvalidArg(format!(
            "mc_covariance needs at least 2 samples, got {m}"
        )));
    }
    // Identical rows have exactly zero covariance; computing it numerically
    // would leave rounding residue from the mean subtraction (the frozen
    // sampling path relies on this identity holding exactly).
    let first = u.row(0);
    if u.rows().into_iter().all(|r| r == first) {
        return Ok(McCovariance {
            cmat: ndarray::Array2::zeros((u.ncols(), u.ncols())),
        });
    }
    let mean = u.mean_axis(ndarray::Axis(0)).expect("nonempty rows");
    let centered = u - &mean;
    let cmat = centered.t().dot(&centered) / E::cast_usize(m - 1);
    Ok(McCovariance { cmat })
}

/// Mean squared Frobenius distance over all `B×B` cross-domain pairs:
/// `(1/B²) Σ_i Σ_j ‖C_i^S − C_j^T‖_F²`.
pub fn bnua_loss<E: Elem>(
    source_covs: &[McCovariance<E>],
    target_covs: &[McCovariance<E>],
) -> Result<E> {
    if source_covs.is_empty() || target_covs.is_empty() {
        return Err(Error::InvalidArg(
            "bnua_loss: covariance lists must be nonempty".into(),
        ));
    }
    let dim = source_covs[0].cmat.raw_dim();
    for c in source_covs.iter().chain(target_covs.iter()) {
        if c.cmat.raw_dim() != dim {
            return Err(Error::shape(
                "bnua_loss",
                format!("{:?} vs {:?}", c.cmat.shape(), dim),
            ));
        }
    }
    let mut total = E::zero();
    for s in source_covs {
        for t in target_covs {
            let d = &s.cmat - &t.cmat;
            total = total + d.iter().map(|&v| v * v).fold(E::zero(), |a, b| a + b);
        }
    }
    let b2 = E::cast_usize(source_covs.len()) * E::cast_usize(target_covs.len());
    Ok(total / b2)
}

/// Tape-side squeeze of batched embedding samples: `M` vars of shape
/// `[N, C, H, W]` become one `[M, N, C]` stack of channel means.
pub fn squeeze_on_tape<E: Elem>(tape: &mut Tape<E>, z_samples: &[Var]) -> Result<Var> {
    if z_samples.len() < 2 {
        return Err(Error::InvalidArg(format!(
            "squeeze needs at least 2 samples, got {}",
            z_samples.len()
        )));
    }
    let gaps = z_samples
        .iter()
        .map(|&z| tape.spatial_mean(z))
        .collect::<Result<Vec<_>>>()?;
    tape.stack0(&gaps)
}

/// Tape-side covariance of batch element `i` from a `[M, N, C]` squeezed
/// stack, as produced by [`squeeze_on_tape`].
pub fn mc_covariance_on_tape<E: Elem>(tape: &mut Tape<E>, squeezed: Var, i: usize) -> Result<Var> {
    let shape = tape.value(squeezed).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::shape(
            "mc_covariance",
            format!("expected [M, N, C], got {shape:?}"),
        ));
    }
    let m = shape[0];
    if m < 2 {
        return Err(Error::InvalidArg(format!(
            "mc_covariance needs at least 2 samples, got {m}"
        )));
    }
    let u = tape.select_axis1(squeezed, i)?; // [M, C]
    let mean = tape.row_mean(u)?;
    let centered = tape.sub_row(u, mean)?;
    let outer = tape.matmul_tn(centered, centered)?;
    Ok(tape.mul_scalar(outer, E::one() / E::cast_usize(m - 1)))
}

/// Tape-side alignment loss between per-sample covariance nodes.
pub fn bnua_loss_on_tape<E: Elem>(
    tape: &mut Tape<E>,
    source_covs: &[Var],
    target_covs: &[Var],
) -> Result<Var> {
    if source_covs.is_empty() || target_covs.is_empty() {
        return Err(Error::InvalidArg(
            "bnua_loss: covariance lists must be nonempty".into(),
        ));
    }
    let mut acc: Option<Var> = None;
    for &s in source_covs {
        for &t in target_covs {
            let d = tape.sub(s, t)?;
            let sq = tape.sqr(d);
            let fro = tape.sum_all(sq);
            acc = Some(match acc {
                Some(a) => tape.add(a, fro)?,
                None => fro,
            });
        }
    }
    let b2 = E::cast_usize(source_covs.len()) * E::cast_usize(target_covs.len());
    Ok(tape.mul_scalar(acc.expect("nonempty lists"), E::one() / b2))
}

/// Convenience: squeeze + covariance + loss for two batched sample lists
/// (each `M` vars of `[N, C, H, W]`), covering every batch element.
pub fn bnua_loss_from_samples_on_tape<E: Elem>(
    tape: &mut Tape<E>,
    source_samples: &[Var],
    target_samples: &[Var],
) -> Result<Var> {
    let s = squeeze_on_tape(tape, source_samples)?;
    let t = squeeze_on_tape(tape, target_samples)?;
    let ns = tape.value(s).shape()[1];
    let nt = tape.value(t).shape()[1];
    let s_covs = (0..ns)
        .map(|i| mc_covariance_on_tape(tape, s, i))
        .collect::<Result<Vec<_>>>()?;
    let t_covs = (0..nt)
        .map(|i| mc_covariance_on_tape(tape, t, i))
        .collect::<Result<Vec<_>>>()?;
    bnua_loss_on_tape(tape, &s_covs, &t_covs)
}
