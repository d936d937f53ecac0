//! Static chart rendering with a graceful fallback when no system font is
//! available (series are still drawn, text is omitted).

use anyhow::Context;
use plotters::prelude::*;
use std::path::Path;
use std::sync::OnceLock;

const FONT_CANDIDATES: &[&str] = &[
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
];

/// Registers a sans-serif font once; returns whether text can be rendered.
pub fn fonts_available() -> bool {
    static FONTS: OnceLock<bool> = OnceLock::new();
    *FONTS.get_or_init(|| {
        for candidate in FONT_CANDIDATES {
            if let Ok(bytes) = std::fs::read(candidate) {
                let leaked: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font(
                    "sans-serif",
                    plotters::style::FontStyle::Normal,
                    leaked,
                )
                .is_ok()
                {
                    return true;
                }
            }
        }
        eprintln!("note: no usable font found; charts will be drawn without text");
        false
    })
}

/// A named series of `(x, y)` points.
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: &[RGBColor] = &[
    RGBColor(214, 69, 65),
    RGBColor(31, 119, 180),
    RGBColor(44, 160, 44),
    RGBColor(148, 103, 189),
    RGBColor(255, 127, 14),
    RGBColor(23, 190, 207),
    RGBColor(90, 90, 90),
];

fn bounds(series: &[Series]) -> ((f64, f64), (f64, f64)) {
    let mut xs = (f64::INFINITY, f64::NEG_INFINITY);
    let mut ys = (f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        for &(x, y) in &s.points {
            xs = (xs.0.min(x), xs.1.max(x));
            ys = (ys.0.min(y), ys.1.max(y));
        }
    }
    let pad = |(lo, hi): (f64, f64)| {
        if !lo.is_finite() || !hi.is_finite() {
            (0.0, 1.0)
        } else if lo == hi {
            (lo - 0.5, hi + 0.5)
        } else {
            let m = (hi - lo) * 0.05;
            (lo - m, hi + m)
        }
    };
    (pad(xs), pad(ys))
}

enum Mark {
    Line,
    Point,
}

fn render(path: &Path, title: &str, series: &[Series], mark: Mark) -> anyhow::Result<()> {
    let text = fonts_available();
    let root = BitMapBackend::new(path, (960, 640)).into_drawing_area();
    root.fill(&WHITE)
        .with_context(|| format!("filling chart canvas for {}", path.display()))?;
    let ((x0, x1), (y0, y1)) = bounds(series);
    let mut builder = ChartBuilder::on(&root);
    builder
        .margin(14)
        .x_label_area_size(if text { 42 } else { 10 })
        .y_label_area_size(if text { 64 } else { 10 });
    if text {
        builder.caption(title, ("sans-serif", 26));
    }
    let mut chart = builder
        .build_cartesian_2d(x0..x1, y0..y1)
        .with_context(|| format!("building chart {}", path.display()))?;
    {
        let mut mesh = chart.configure_mesh();
        if !text {
            mesh.x_labels(0).y_labels(0);
        }
        mesh.draw()
            .with_context(|| format!("drawing mesh for {}", path.display()))?;
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        match mark {
            Mark::Line => {
                let drawn = chart
                    .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
                    .with_context(|| format!("drawing series `{}`", s.label))?;
                if text {
                    drawn
                        .label(s.label.clone())
                        .legend(move |(x, y)| {
                            PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2))
                        });
                }
            }
            Mark::Point => {
                let drawn = chart
                    .draw_series(
                        s.points
                            .iter()
                            .map(|&(x, y)| Circle::new((x, y), 4, color.filled())),
                    )
                    .with_context(|| format!("drawing series `{}`", s.label))?;
                if text {
                    drawn
                        .label(s.label.clone())
                        .legend(move |(x, y)| Circle::new((x + 9, y), 4, color.filled()));
                }
            }
        }
    }
    if text && series.len() > 1 {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.85))
            .border_style(BLACK)
            .draw()
            .with_context(|| format!("drawing legend for {}", path.display()))?;
    }
    root.present()
        .with_context(|| format!("writing chart image {}", path.display()))?;
    Ok(())
}

/// Renders connected line series into a PNG.
pub fn line_chart(path: &Path, title: &str, series: &[Series]) -> anyhow::Result<()> {
    render(path, title, series, Mark::Line)
}

/// Renders point clouds into a PNG.
pub fn scatter_chart(path: &Path, title: &str, series: &[Series]) -> anyhow::Result<()> {
    render(path, title, series, Mark::Point)
}
