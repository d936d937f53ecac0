//! Low-dose noise synthesis: per-slice exposure jitter, photon-count
//! (Poisson) fluctuation in pre-window intensity space, and additive Gaussian
//! noise in display units.

use super::{window_normalize, DomainSpec, SlicePair};
use crate::{Error, Result};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

/// Synthesizes an aligned LDCT/NDCT pair from a clean HU slice.
///
/// The NDCT image is the windowed clean slice. The LDCT image is produced by
/// 1. drawing one noise-level multiplier `scale ~ U[1−j, 1+j]` for the slice,
/// 2. passing the clean slice through a photon-count model — transmission
///    `t = exp(−a)` with `a = max(0, (hu + 1000)/1000)`, detected counts
///    `Poisson(n0·t)` with `n0 = photon_count_base / scale`, log-converted
///    back to HU — skipped entirely when `photon_count_base` is infinite,
/// 3. windowing the noisy slice and adding Gaussian noise with std
///    `noise_sigma_base · scale` in display units (skipped when the sigma is
///    zero), then clamping back to `[0, 1]`.
///
/// Larger `scale` therefore means fewer photons *and* stronger Gaussian
/// noise, emulating a lower-dose exposure.
pub fn apply_low_dose_noise(
    clean_hu: &Array2<f32>,
    spec: &DomainSpec,
    rng: &mut ChaCha20Rng,
) -> Result<SlicePair> {
    if !(0.0..1.0).contains(&spec.mas_jitter_pct) {
        return Err(Error::Config(format!(
            "domain {}: mas_jitter_pct must lie in [0, 1)",
            spec.name
        )));
    }
    if spec.photon_count_base <= 0.0 {
        return Err(Error::Config(format!(
            "domain {}: photon_count_base must be positive",
            spec.name
        )));
    }

    let ndct = window_normalize(clean_hu, spec.window_level, spec.window_width)?;

    let j = spec.mas_jitter_pct;
    let scale = if j == 0.0 {
        1.0
    } else {
        rng.gen_range(1.0 - j..1.0 + j)
    };

    // Photon-count fluctuation in pre-window intensity space.
    let noisy_hu = if spec.photon_count_base.is_finite() {
        let n0 = spec.photon_count_base / scale;
        let mut out = clean_hu.clone();
        for v in out.iter_mut() {
            let a = ((f64::from(*v) + 1000.0) / 1000.0).max(0.0);
            let lambda = n0 * (-a).exp();
            let counts: f64 = Poisson::new(lambda)
                .map_err(|e| Error::Data(format!("invalid Poisson intensity {lambda}: {e}")))?
                .sample(rng);
            let a_meas = -(counts.max(0.5) / n0).ln();
            *v = (a_meas * 1000.0 - 1000.0) as f32;
        }
        out
    } else {
        clean_hu.clone()
    };

    let mut ldct = window_normalize(&noisy_hu, spec.window_level, spec.window_width)?;

    let sigma_eff = spec.noise_sigma_base * scale;
    if sigma_eff > 0.0 {
        for v in ldct.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v = (f64::from(*v) + z * sigma_eff).clamp(0.0, 1.0) as f32;
        }
    }

    let pair = SlicePair {
        ndct,
        ldct,
        domain: spec.name.clone(),
        slice_noise_scale: scale as f32,
    };
    pair.validate()?;
    Ok(pair)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{flat_region_residuals, generate_phantom};
    use crate::rng::derive;

    fn noiseless_spec() -> DomainSpec {
        DomainSpec {
            noise_sigma_base: 0.0,
            photon_count_base: f64::INFINITY,
            mas_jitter_pct: 0.0,
            ..DomainSpec::abdomen_like()
        }
    }

    /// Two-sample Kolmogorov–Smirnov statistic.
    fn ks_statistic(a: &[f32], b: &[f32]) -> f64 {
        let mut a: Vec<f32> = a.to_vec();
        let mut b: Vec<f32> = b.to_vec();
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let (mut i, mut j, mut ks) = (0usize, 0usize, 0.0f64);
        while i < a.len() && j < b.len() {
            if a[i] <= b[j] {
                i += 1;
            } else {
                j += 1;
            }
            let fa = i as f64 / a.len() as f64;
            let fb = j as f64 / b.len() as f64;
            ks = ks.max((fa - fb).abs());
        }
        ks
    }

    #[test]
    fn noiseless_limit_is_exact() {
        let spec = noiseless_spec();
        let clean = generate_phantom(&spec, 64, &mut derive(1, "noise-limit", 0));
        let pair = apply_low_dose_noise(&clean, &spec, &mut derive(1, "noise-limit", 1)).unwrap();
        assert_eq!(pair.ldct, pair.ndct, "sigma → 0, photons → ∞ must be exact");
        assert_eq!(pair.slice_noise_scale, 1.0);
    }

    #[test]
    fn flat_region_std_matches_configured_sigma() {
        let spec = DomainSpec {
            noise_sigma_base: 0.05,
            photon_count_base: f64::INFINITY,
            mas_jitter_pct: 0.0,
            ..DomainSpec::abdomen_like()
        };
        let mut residuals = Vec::new();
        for salt in 0..4 {
            let clean = generate_phantom(&spec, 128, &mut derive(2, "noise-std", salt));
            let pair =
                apply_low_dose_noise(&clean, &spec, &mut derive(2, "noise-std-n", salt)).unwrap();
            residuals.extend(flat_region_residuals(&pair, 1e-6));
        }
        assert!(residuals.len() > 2000, "need a large flat-region sample");
        let n = residuals.len() as f64;
        let mean = residuals.iter().map(|&r| f64::from(r)).sum::<f64>() / n;
        let var = residuals
            .iter()
            .map(|&r| (f64::from(r) - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0);
        let std = var.sqrt();
        assert!(
            (std - 0.05).abs() / 0.05 < 0.10,
            "flat-region std {std:.5} deviates more than 10% from 0.05"
        );
        // Zero-mean noise: |mean| within 3 standard errors.
        let se = std / n.sqrt();
        assert!(mean.abs() < 3.0 * se, "residual mean {mean:.2e} vs SE {se:.2e}");
    }

    #[test]
    fn domains_have_distinguishable_residual_distributions() {
        let head = DomainSpec::head_like();
        let abdomen = DomainSpec::abdomen_like();
        let mut res_head = Vec::new();
        let mut res_abd = Vec::new();
        for salt in 0..3 {
            let clean_h = generate_phantom(&head, 128, &mut derive(3, "noise-ks-h", salt));
            let pair_h =
                apply_low_dose_noise(&clean_h, &head, &mut derive(3, "noise-ks-hn", salt)).unwrap();
            res_head.extend(flat_region_residuals(&pair_h, 1e-6));
            let clean_a = generate_phantom(&abdomen, 128, &mut derive(3, "noise-ks-a", salt));
            let pair_a =
                apply_low_dose_noise(&clean_a, &abdomen, &mut derive(3, "noise-ks-an", salt))
                    .unwrap();
            res_abd.extend(flat_region_residuals(&pair_a, 1e-6));
        }
        assert!(res_head.len() > 1000 && res_abd.len() > 1000);
        let ks = ks_statistic(&res_head, &res_abd);
        assert!(
            ks > 0.1,
            "KS {ks:.3} too small: domains should have shifted noise distributions"
        );
    }

    #[test]
    fn jitter_scale_stays_in_band_and_varies() {
        let spec = DomainSpec {
            mas_jitter_pct: 0.2,
            ..DomainSpec::head_like()
        };
        let clean = generate_phantom(&spec, 32, &mut derive(4, "noise-jitter", 0));
        let mut scales = Vec::new();
        for salt in 0..32 {
            let pair =
                apply_low_dose_noise(&clean, &spec, &mut derive(4, "noise-jitter-n", salt)).unwrap();
            assert!((0.8..1.2).contains(&f64::from(pair.slice_noise_scale)));
            scales.push(pair.slice_noise_scale);
        }
        let distinct = scales.windows(2).any(|w| w[0] != w[1]);
        assert!(distinct, "jitter should vary across slices");
    }

    #[test]
    fn same_stream_reproduces_pair_bitwise() {
        let spec = DomainSpec::abdomen_like();
        let clean = generate_phantom(&spec, 64, &mut derive(5, "noise-det", 0));
        let a = apply_low_dose_noise(&clean, &spec, &mut derive(5, "noise-det-n", 0)).unwrap();
        let b = apply_low_dose_noise(&clean, &spec, &mut derive(5, "noise-det-n", 0)).unwrap();
        assert_eq!(a.ldct, b.ldct);
        assert_eq!(a.ndct, b.ndct);
        assert_eq!(a.slice_noise_scale, b.slice_noise_scale);
    }

    #[test]
    fn poisson_component_adds_structure_dependent_noise() {
        // With Gaussian off and photons finite, residuals must be nonzero and
        // larger in high-attenuation (low-transmission) tissue than in air.
        let spec = DomainSpec {
            noise_sigma_base: 0.0,
            photon_count_base: 2e4,
            mas_jitter_pct: 0.0,
            window_level: 40.0,
            window_width: 400.0,
            ..DomainSpec::abdomen_like()
        };
        let clean = generate_phantom(&spec, 128, &mut derive(6, "noise-poisson", 0));
        let pair = apply_low_dose_noise(&clean, &spec, &mut derive(6, "noise-poisson-n", 0)).unwrap();
        let res = flat_region_residuals(&pair, 1e-6);
        assert!(res.len() > 500);
        let rms = (res.iter().map(|&r| f64::from(r).powi(2)).sum::<f64>() / res.len() as f64)
            .sqrt();
        assert!(rms > 1e-4, "Poisson noise should be visible, rms {rms:.2e}");
    }

    #[test]
    fn rejects_bad_spec() {
        let clean = Array2::<f32>::zeros((8, 8));
        let mut bad = DomainSpec::head_like();
        bad.mas_jitter_pct = 1.5;
        assert!(apply_low_dose_noise(&clean, &bad, &mut derive(7, "noise-bad", 0)).is_err());
        let mut bad = DomainSpec::head_like();
        bad.photon_count_base = 0.0;
        assert!(apply_low_dose_noise(&clean, &bad, &mut derive(7, "noise-bad", 1)).is_err());
    }
}
