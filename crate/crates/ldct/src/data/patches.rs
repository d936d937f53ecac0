//! Co-located random patch extraction from aligned slice pairs.

use super::SlicePair;
use crate::model::ImagePatch;
use crate::{Error, Result};
use ndarray::{s, Array2};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

/// Default number of patches sampled per slice.
pub const DEFAULT_PATCHES: usize = 8;
/// Default square patch side length in pixels.
pub const DEFAULT_PATCH_SIZE: usize = 64;

fn crop_to_patch(img: &Array2<f32>, r0: usize, c0: usize, size: usize) -> Result<ImagePatch<f32>> {
    let view = img.slice(s![r0..r0 + size, c0..c0 + size]);
    ImagePatch::new(
        view.to_owned()
            .insert_axis(ndarray::Axis(0))
            .into_dyn(),
    )
}

/// Extracts `n` random `size × size` patches from a single (unpaired) slice,
/// e.g. target-domain LDCT images that have no clean counterpart.
pub fn extract_unpaired_patches(
    img: &Array2<f32>,
    n: usize,
    size: usize,
    rng: &mut ChaCha20Rng,
) -> Result<Vec<ImagePatch<f32>>> {
    let (h, w) = img.dim();
    if size == 0 || size > h || size > w {
        return Err(Error::InvalidArg(format!(
            "patch size {size} invalid for {h}×{w} slice"
        )));
    }
    (0..n)
        .map(|_| {
            let r0 = rng.gen_range(0..=h - size);
            let c0 = rng.gen_range(0..=w - size);
            crop_to_patch(img, r0, c0, size)
        })
        .collect()
}

/// Extracts `n` random co-located `size × size` (LDCT, NDCT) patch pairs.
///
/// Both patches of a pair come from the same spatial location, so they stay
/// pixel-aligned. Sampling is uniform over all valid top-left corners and is
/// fully determined by the RNG stream.
pub fn extract_patches(
    pair: &SlicePair,
    n: usize,
    size: usize,
    rng: &mut ChaCha20Rng,
) -> Result<Vec<(ImagePatch<f32>, ImagePatch<f32>)>> {
    let (h, w) = pair.ldct.dim();
    if pair.ndct.dim() != (h, w) {
        return Err(Error::shape(
            "extract_patches",
            format!("ldct {:?} vs ndct {:?}", pair.ldct.dim(), pair.ndct.dim()),
        ));
    }
    if size == 0 || size > h || size > w {
        return Err(Error::InvalidArg(format!(
            "patch size {size} invalid for {h}×{w} slice"
        )));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let r0 = rng.gen_range(0..=h - size);
        let c0 = rng.gen_range(0..=w - size);
        let x = crop_to_patch(&pair.ldct, r0, c0, size)?;
        let y = crop_to_patch(&pair.ndct, r0, c0, size)?;
        out.push((x, y));
    }
    Ok(out)
}
