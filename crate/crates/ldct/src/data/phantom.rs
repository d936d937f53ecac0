//! Randomized piecewise-constant ellipse phantoms in Hounsfield units.

use super::{DomainSpec, PhantomStyle};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha20Rng;

const AIR_HU: f32 = -1000.0;

/// Axis-aligned ellipse in pixel coordinates.
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    hu: f32,
}

impl Ellipse {
    fn contains(&self, r: usize, c: usize) -> bool {
        let dy = (r as f64 - self.cy) / self.ry;
        let dx = (c as f64 - self.cx) / self.rx;
        dy * dy + dx * dx <= 1.0
    }
}

fn paint(canvas: &mut Array2<f32>, e: &Ellipse) {
    let (h, w) = canvas.dim();
    let r0 = (e.cy - e.ry).floor().max(0.0) as usize;
    let r1 = ((e.cy + e.ry).ceil() as usize).min(h.saturating_sub(1));
    let c0 = (e.cx - e.rx).floor().max(0.0) as usize;
    let c1 = ((e.cx + e.rx).ceil() as usize).min(w.saturating_sub(1));
    for r in r0..=r1 {
        for c in c0..=c1 {
            if e.contains(r, c) {
                canvas[[r, c]] = e.hu;
            }
        }
    }
}

/// One pass of a 3×3 box blur with clamped edges. Constant neighborhoods are
/// preserved exactly (in particular the air background at the corners).
fn box_blur(img: &Array2<f32>) -> Array2<f32> {
    let (h, w) = img.dim();
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0f32;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let rr = (r as i64 + dr).clamp(0, h as i64 - 1) as usize;
                    let cc = (c as i64 + dc).clamp(0, w as i64 - 1) as usize;
                    acc += img[[rr, cc]];
                }
            }
            out[[r, c]] = acc / 9.0;
        }
    }
    out
}

/// Generates one `size × size` phantom slice in HU for the given domain.
///
/// * `abdomen_like`: a large soft-tissue body ellipse (≈ 40 HU) on an air
///   background, containing 3–8 randomized organ/lesion ellipses in
///   −100…300 HU.
/// * `head_like`: a high-density skull annulus (≈ 1000 HU) around uniform
///   brain tissue (≈ 35 HU) with a few low-contrast ±10 HU structures.
///
/// A mild 3×3 box smoothing is applied so tissue boundaries are not perfectly
/// sharp. The same `(spec, size, rng)` always produces the same slice.
pub fn generate_phantom(spec: &DomainSpec, size: usize, rng: &mut ChaCha20Rng) -> Array2<f32> {
    assert!(size >= 16, "phantom size must be at least 16 pixels");
    let mut img = Array2::from_elem((size, size), AIR_HU);
    let s = size as f64;
    let center = (s - 1.0) / 2.0;

    match spec.phantom_style {
        PhantomStyle::AbdomenLike => {
            let body_hu = 40.0 + rng.gen_range(-3.0f32..3.0);
            let body = Ellipse {
                cy: center + rng.gen_range(-0.02 * s..0.02 * s),
                cx: center + rng.gen_range(-0.02 * s..0.02 * s),
                ry: rng.gen_range(0.30 * s..0.38 * s),
                rx: rng.gen_range(0.34 * s..0.42 * s),
                hu: body_hu,
            };
            paint(&mut img, &body);
            let organs = rng.gen_range(3..=8);
            for _ in 0..organs {
                // Place the organ center well inside the body so the whole
                // ellipse stays in soft tissue.
                let ang = rng.gen_range(0.0..std::f64::consts::TAU);
                let rad = rng.gen_range(0.0..0.55);
                let organ = Ellipse {
                    cy: body.cy + ang.sin() * rad * body.ry,
                    cx: body.cx + ang.cos() * rad * body.rx,
                    ry: rng.gen_range(0.04 * s..0.12 * s),
                    rx: rng.gen_range(0.04 * s..0.12 * s),
                    hu: rng.gen_range(-100.0f32..300.0),
                };
                paint(&mut img, &organ);
            }
        }
        PhantomStyle::HeadLike => {
            let skull_outer = Ellipse {
                cy: center,
                cx: center,
                ry: rng.gen_range(0.36 * s..0.42 * s),
                rx: rng.gen_range(0.32 * s..0.38 * s),
                hu: 1000.0 + rng.gen_range(-30.0f32..30.0),
            };
            let thickness = rng.gen_range(0.04..0.06) * s;
            let brain_hu = 35.0 + rng.gen_range(-2.0f32..2.0);
            let brain = Ellipse {
                cy: skull_outer.cy,
                cx: skull_outer.cx,
                ry: skull_outer.ry - thickness,
                rx: skull_outer.rx - thickness,
                hu: brain_hu,
            };
            paint(&mut img, &skull_outer);
            paint(&mut img, &brain);
            let structures = rng.gen_range(3..=6);
            for _ in 0..structures {
                let ang = rng.gen_range(0.0..std::f64::consts::TAU);
                let rad = rng.gen_range(0.25..0.6);
                let structure = Ellipse {
                    cy: brain.cy + ang.sin() * rad * brain.ry,
                    cx: brain.cx + ang.cos() * rad * brain.rx,
                    ry: rng.gen_range(0.03 * s..0.08 * s),
                    rx: rng.gen_range(0.03 * s..0.08 * s),
                    hu: brain_hu + rng.gen_range(-10.0f32..10.0),
                };
                paint(&mut img, &structure);
            }
        }
    }

    box_blur(&img)
}
