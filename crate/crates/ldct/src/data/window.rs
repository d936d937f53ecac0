//! Display windowing: affine HU → [0, 1] normalization with clamping.

use crate::{Error, Result};
use ndarray::Array2;

/// Maps HU values through a display window: `(hu − (level − width/2)) /
/// width`, clamped to `[0, 1]`. The window level maps to 0.5 and the window
/// spans `[level − width/2, level + width/2]`.
pub fn window_normalize(hu: &Array2<f32>, level: f64, width: f64) -> Result<Array2<f32>> {
    if width <= 0.0 {
        return Err(Error::InvalidArg(format!(
            "window width must be positive, got {width}"
        )));
    }
    let lo = (level - width / 2.0) as f32;
    let w = width as f32;
    Ok(hu.mapv(|v| ((v - lo) / w).clamp(0.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn one(hu: f32, level: f64, width: f64) -> f32 {
        window_normalize(&array![[hu]], level, width).unwrap()[[0, 0]]
    }

    #[test]
    fn level_maps_to_half() {
        assert!((one(40.0, 40.0, 400.0) - 0.5).abs() < 1e-7);
        assert!((one(35.0, 35.0, 90.0) - 0.5).abs() < 1e-7);
    }

    #[test]
    fn window_top_maps_to_one() {
        // level + width/2 = 240 for the (40, 400) window.
        assert_eq!(one(240.0, 40.0, 400.0), 1.0);
        assert_eq!(one(5000.0, 40.0, 400.0), 1.0, "clamped above");
    }

    #[test]
    fn head_window_floor() {
        // level − width/2 = −10 for the (35, 90) head window.
        assert_eq!(one(-10.0, 35.0, 90.0), 0.0);
        assert_eq!(one(-1000.0, 35.0, 90.0), 0.0, "clamped below");
    }

    #[test]
    fn monotone_in_hu() {
        let mut rng = crate::rng::derive(21, "window-mono", 0);
        for _ in 0..500 {
            let a = rng.gen_range(-1200.0f32..1200.0);
            let b = rng.gen_range(-1200.0f32..1200.0);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let level = rng.gen_range(-100.0..100.0);
            let width = rng.gen_range(10.0..500.0);
            assert!(one(lo, level, width) <= one(hi, level, width));
        }
    }

    #[test]
    fn rejects_bad_width() {
        assert!(window_normalize(&array![[0.0]], 40.0, 0.0).is_err());
        assert!(window_normalize(&array![[0.0]], 40.0, -5.0).is_err());
    }

    #[test]
    fn output_in_unit_interval() {
        let mut rng = crate::rng::derive(22, "window-range", 0);
        let hu = Array2::from_shape_fn((16, 16), |_| rng.gen_range(-2000.0f32..2000.0));
        let w = window_normalize(&hu, 35.0, 90.0).unwrap();
        assert!(w.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
