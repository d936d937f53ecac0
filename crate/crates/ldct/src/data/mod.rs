//! Synthetic two-domain CT data: randomized ellipse phantoms, anatomical
//! display windowing, a dose-dependent noise model with per-slice exposure
//! jitter, patch extraction, and bit-exact slice file I/O with a JSON
//! manifest.
//!
//! Two stylized anatomies are provided. Their default noise levels differ by
//! construction (the abdomen sigma is 2.5× the head sigma), so the two
//! domains exhibit a genuine residual-distribution shift.

pub mod dataset;
pub mod noise;
pub mod patches;
pub mod phantom;
pub mod window;

pub use dataset::{
    build_dataset, read_slice, write_slice, Dataset, DatasetConfig, DomainKind, Manifest,
    SliceEntry, Split, SplitCounts,
};
pub use noise::apply_low_dose_noise;
pub use patches::{
    extract_patches, extract_unpaired_patches, DEFAULT_PATCHES, DEFAULT_PATCH_SIZE,
};
pub use phantom::generate_phantom;
pub use window::window_normalize;

use crate::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Anatomy family of a synthetic phantom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomStyle {
    AbdomenLike,
    HeadLike,
}

/// Everything that defines one domain: anatomy, noise model, display window.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub phantom_style: PhantomStyle,
    /// Std of the Gaussian noise component in normalized display units.
    pub noise_sigma_base: f64,
    /// Mean detected photon count at zero attenuation; `inf` disables the
    /// Poisson component.
    pub photon_count_base: f64,
    /// Amplitude of the per-slice multiplicative noise-level jitter
    /// (emulating exposure/mAs variation); must lie in `[0, 1)`.
    pub mas_jitter_pct: f64,
    /// Display window level in HU.
    pub window_level: f64,
    /// Display window width in HU.
    pub window_width: f64,
}

impl DomainSpec {
    /// Head-style domain: narrow brain window, low noise.
    pub fn head_like() -> Self {
        DomainSpec {
            name: "head".into(),
            phantom_style: PhantomStyle::HeadLike,
            noise_sigma_base: 0.02,
            // High photon budget: the narrow 90 HU head window amplifies
            // photon noise in display units, so the head domain needs a
            // generous dose for its Gaussian component to dominate.
            photon_count_base: 4e6,
            mas_jitter_pct: 0.2,
            window_level: 35.0,
            window_width: 90.0,
        }
    }

    /// Abdomen-style domain: wide soft-tissue window, noise 2.5× the head's.
    pub fn abdomen_like() -> Self {
        DomainSpec {
            name: "abdomen".into(),
            phantom_style: PhantomStyle::AbdomenLike,
            noise_sigma_base: 0.05,
            photon_count_base: 5e4,
            mas_jitter_pct: 0.2,
            window_level: 40.0,
            window_width: 400.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise_sigma_base <= 0.0 {
            return Err(Error::Config(format!(
                "domain {}: noise_sigma_base must be positive",
                self.name
            )));
        }
        if self.photon_count_base <= 0.0 {
            return Err(Error::Config(format!(
                "domain {}: photon_count_base must be positive",
                self.name
            )));
        }
        if !(0.0..1.0).contains(&self.mas_jitter_pct) {
            return Err(Error::Config(format!(
                "domain {}: mas_jitter_pct must lie in [0, 1)",
                self.name
            )));
        }
        if self.window_width <= 0.0 {
            return Err(Error::Config(format!(
                "domain {}: window_width must be positive",
                self.name
            )));
        }
        Ok(())
    }
}

/// One aligned LDCT/NDCT slice pair in normalized display units.
#[derive(Debug, Clone)]
pub struct SlicePair {
    pub ndct: Array2<f32>,
    pub ldct: Array2<f32>,
    /// Name of the generating domain.
    pub domain: String,
    /// Realized per-slice jitter multiplier on the noise level.
    pub slice_noise_scale: f32,
}

impl SlicePair {
    pub fn validate(&self) -> Result<()> {
        if self.ndct.dim() != self.ldct.dim() {
            return Err(Error::shape(
                "slice_pair",
                format!("{:?} vs {:?}", self.ndct.dim(), self.ldct.dim()),
            ));
        }
        let in_unit = |a: &Array2<f32>| a.iter().all(|&v| (0.0..=1.0).contains(&v));
        if !in_unit(&self.ndct) || !in_unit(&self.ldct) {
            return Err(Error::Data("slice values must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Boolean mask of pixels whose 3×3 neighborhood in the reference image is
/// constant (to `tol`) and whose value stays away from the window bounds —
/// the "flat regions" used for residual-noise statistics.
pub fn flat_region_mask(ndct: &Array2<f32>, tol: f32) -> Array2<bool> {
    let (h, w) = ndct.dim();
    let mut mask = Array2::from_elem((h, w), false);
    for r in 1..h.saturating_sub(1) {
        for c in 1..w.saturating_sub(1) {
            let v = ndct[[r, c]];
            if !(0.05..=0.95).contains(&v) {
                continue;
            }
            let mut lo = v;
            let mut hi = v;
            for dr in 0..3 {
                for dc in 0..3 {
                    let n = ndct[[r + dr - 1, c + dc - 1]];
                    lo = lo.min(n);
                    hi = hi.max(n);
                }
            }
            mask[[r, c]] = hi - lo <= tol;
        }
    }
    mask
}

/// Residual samples `ldct − ndct` restricted to flat regions of the pair.
pub fn flat_region_residuals(pair: &SlicePair, tol: f32) -> Vec<f32> {
    let mask = flat_region_mask(&pair.ndct, tol);
    let mut out = Vec::new();
    for ((idx, &m), (&l, &n)) in mask
        .indexed_iter()
        .zip(pair.ldct.iter().zip(pair.ndct.iter()))
    {
        let _ = idx;
        if m {
            out.push(l - n);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn domain_spec_validation() {
        assert!(DomainSpec::head_like().validate().is_ok());
        assert!(DomainSpec::abdomen_like().validate().is_ok());
        let mut bad = DomainSpec::head_like();
        bad.noise_sigma_base = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = DomainSpec::head_like();
        bad.mas_jitter_pct = 1.0;
        assert!(bad.validate().is_err());
        let mut bad = DomainSpec::abdomen_like();
        bad.window_width = -1.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn default_abdomen_noise_is_2_5x_head() {
        let head = DomainSpec::head_like();
        let abdomen = DomainSpec::abdomen_like();
        let ratio = abdomen.noise_sigma_base / head.noise_sigma_base;
        assert!((ratio - 2.5).abs() < 1e-12);
    }

    #[test]
    fn flat_mask_finds_constant_interior_only() {
        let mut img = Array2::<f32>::from_elem((8, 8), 0.5);
        img[[4, 4]] = 0.9; // a hard edge
        let mask = flat_region_mask(&img, 1e-6);
        assert!(!mask[[0, 0]], "borders excluded");
        assert!(mask[[1, 1]]);
        assert!(!mask[[4, 4]], "edge pixel is not flat");
        assert!(!mask[[3, 3]], "edge neighborhood is not flat");
    }
}
