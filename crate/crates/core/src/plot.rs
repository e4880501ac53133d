//! Self-contained SVG line charts with error bars.
//!
//! No raster dependencies: the output is plain SVG text with coordinates
//! formatted to fixed precision, so identical input produces
//! byte-identical files.

use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("plot needs at least one curve with at least one point")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One plotted series.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub label: String,
    /// `(x, y, err)` triples; `err` draws a symmetric vertical bar.
    pub points: Vec<(f64, f64, f64)>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 440.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_TOP: f64 = 30.0;
const MARGIN_BOTTOM: f64 = 60.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// Renders curves to SVG text. `meta`, when nonempty, is embedded as a
/// leading comment for provenance.
pub fn render_chart(
    curves: &[Curve],
    x_label: &str,
    y_label: &str,
    meta: &str,
) -> Result<String, PlotError> {
    if curves.is_empty() || curves.iter().all(|c| c.points.is_empty()) {
        return Err(PlotError::Empty);
    }
    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for c in curves {
        for &(x, y, err) in &c.points {
            x_min = x_min.min(x);
            x_max = x_max.max(x);
            y_min = y_min.min(y - err);
            y_max = y_max.max(y + err);
        }
    }
    if x_min == x_max {
        x_min -= 1.0;
        x_max += 1.0;
    }
    if y_min == y_max {
        y_min -= 0.1;
        y_max += 0.1;
    }
    let y_pad = 0.05 * (y_max - y_min);
    y_min -= y_pad;
    y_max += y_pad;

    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let sx = |x: f64| MARGIN_LEFT + (x - x_min) / (x_max - x_min) * plot_w;
    let sy = |y: f64| MARGIN_TOP + (y_max - y) / (y_max - y_min) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    if !meta.is_empty() {
        let _ = writeln!(svg, "<!-- {meta} -->");
    }
    let _ = writeln!(
        svg,
        r##"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>"##
    );

    // Axes.
    let (x0, y0) = (MARGIN_LEFT, MARGIN_TOP + plot_h);
    let _ = writeln!(
        svg,
        r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#000000" stroke-width="1"/>"##,
        x0,
        y0,
        x0 + plot_w,
        y0
    );
    let _ = writeln!(
        svg,
        r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#000000" stroke-width="1"/>"##,
        x0, MARGIN_TOP, x0, y0
    );

    // Ticks and grid.
    for t in 0..=4 {
        let frac = t as f64 / 4.0;
        let xv = x_min + frac * (x_max - x_min);
        let yv = y_min + frac * (y_max - y_min);
        let xp = sx(xv);
        let yp = sy(yv);
        let _ = writeln!(
            svg,
            r##"<line x1="{xp:.2}" y1="{y0:.2}" x2="{xp:.2}" y2="{:.2}" stroke="#000000" stroke-width="1"/>"##,
            y0 + 6.0
        );
        let _ = writeln!(
            svg,
            r##"<text x="{xp:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="middle">{xv:.1}</text>"##,
            y0 + 20.0
        );
        let _ = writeln!(
            svg,
            r##"<line x1="{:.2}" y1="{yp:.2}" x2="{x0:.2}" y2="{yp:.2}" stroke="#000000" stroke-width="1"/>"##,
            x0 - 6.0
        );
        let _ = writeln!(
            svg,
            r##"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{yv:.3}</text>"##,
            x0 - 10.0,
            yp + 4.0
        );
    }

    // Axis labels.
    let _ = writeln!(
        svg,
        r##"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="13" text-anchor="middle">{x_label}</text>"##,
        x0 + plot_w / 2.0,
        HEIGHT - 15.0
    );
    let _ = writeln!(
        svg,
        r##"<text x="18" y="{:.2}" font-family="sans-serif" font-size="13" text-anchor="middle" transform="rotate(-90 18 {:.2})">{y_label}</text>"##,
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0
    );

    for (i, curve) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        // Error bars under the polyline.
        for &(x, y, err) in &curve.points {
            if err > 0.0 {
                let xp = sx(x);
                let (lo, hi) = (sy(y - err), sy(y + err));
                let _ = writeln!(
                    svg,
                    r#"<line x1="{xp:.2}" y1="{lo:.2}" x2="{xp:.2}" y2="{hi:.2}" stroke="{color}" stroke-width="1"/>"#
                );
                for end in [lo, hi] {
                    let _ = writeln!(
                        svg,
                        r#"<line x1="{:.2}" y1="{end:.2}" x2="{:.2}" y2="{end:.2}" stroke="{color}" stroke-width="1"/>"#,
                        xp - 4.0,
                        xp + 4.0
                    );
                }
            }
        }
        let mut points = String::new();
        for &(x, y, _) in &curve.points {
            let _ = write!(points, "{:.2},{:.2} ", sx(x), sy(y));
        }
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            points.trim_end()
        );
        for &(x, y, _) in &curve.points {
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                sx(x),
                sy(y)
            );
        }
        // Legend entry.
        let ly = MARGIN_TOP + 14.0 + 18.0 * i as f64;
        let lx = WIDTH - MARGIN_RIGHT + 16.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#,
            lx + 22.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12">{}</text>"#,
            lx + 28.0,
            ly + 4.0,
            curve.label
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Renders and writes the chart to `path`.
pub fn emit_plot(
    curves: &[Curve],
    x_label: &str,
    y_label: &str,
    meta: &str,
    path: &std::path::Path,
) -> Result<(), PlotError> {
    let svg = render_chart(curves, x_label, y_label, meta)?;
    std::fs::write(path, svg)?;
    Ok(())
}
