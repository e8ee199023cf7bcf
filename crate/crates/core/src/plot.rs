//! Minimal self-contained SVG line charts for training trajectories.
//!
//! No templating or plotting dependency: the trainer emits standalone SVG
//! text with axes, ticks, polylines, and a legend. Output is a pure
//! function of the inputs, so identical runs produce identical files.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub color: &'static str,
}

/// Color cycle for multi-series charts.
pub const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

const WIDTH: f64 = 860.0;
const HEIGHT: f64 = 480.0;
const MARGIN_LEFT: f64 = 72.0;
const MARGIN_RIGHT: f64 = 180.0;
const MARGIN_TOP: f64 = 48.0;
const MARGIN_BOTTOM: f64 = 56.0;

fn nice_num(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if (1e-3..1e5).contains(&a) {
        let s = format!("{v:.4}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        s.to_string()
    } else {
        format!("{v:.2e}")
    }
}

pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;

    let all_points = series.iter().flat_map(|s| s.points.iter());
    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all_points {
        if x.is_finite() && y.is_finite() {
            x_min = x_min.min(x);
            x_max = x_max.max(x);
            y_min = y_min.min(y);
            y_max = y_max.max(y);
        }
    }
    if !x_min.is_finite() {
        x_min = 0.0;
        x_max = 1.0;
        y_min = 0.0;
        y_max = 1.0;
    }
    if x_max == x_min {
        x_max = x_min + 1.0;
    }
    if y_max == y_min {
        y_max = y_min + 1.0;
    }
    // headroom so lines don't hug the frame
    let y_pad = 0.05 * (y_max - y_min);
    let (y_lo, y_hi) = (y_min - y_pad, y_max + y_pad);

    let sx = |x: f64| MARGIN_LEFT + (x - x_min) / (x_max - x_min) * plot_w;
    let sy = |y: f64| MARGIN_TOP + (1.0 - (y - y_lo) / (y_hi - y_lo)) * plot_h;

    let mut svg = String::new();
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = write!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = write!(
        svg,
        r#"<text x="{:.1}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        title
    );

    // frame
    let _ = write!(
        svg,
        r##"<rect x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#444" stroke-width="1"/>"##
    );

    // ticks and grid lines
    for i in 0..=5 {
        let t = i as f64 / 5.0;
        let x = x_min + t * (x_max - x_min);
        let px = sx(x);
        let _ = write!(
            svg,
            r##"<line x1="{px:.1}" y1="{MARGIN_TOP}" x2="{px:.1}" y2="{:.1}" stroke="#ddd" stroke-width="0.5"/>"##,
            MARGIN_TOP + plot_h
        );
        let _ = write!(
            svg,
            r#"<text x="{px:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#,
            MARGIN_TOP + plot_h + 16.0,
            nice_num(x)
        );
        let y = y_lo + t * (y_hi - y_lo);
        let py = sy(y);
        let _ = write!(
            svg,
            r##"<line x1="{MARGIN_LEFT}" y1="{py:.1}" x2="{:.1}" y2="{py:.1}" stroke="#ddd" stroke-width="0.5"/>"##,
            MARGIN_LEFT + plot_w
        );
        let _ = write!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="end">{}</text>"#,
            MARGIN_LEFT - 6.0,
            py + 4.0,
            nice_num(y)
        );
    }

    // axis labels
    let _ = write!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="13" text-anchor="middle">{}</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 12.0,
        x_label
    );
    let _ = write!(
        svg,
        r#"<text x="18" y="{:.1}" font-family="sans-serif" font-size="13" text-anchor="middle" transform="rotate(-90 18 {:.1})">{}</text>"#,
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0,
        y_label
    );

    // series
    for s in series {
        if s.points.is_empty() {
            continue;
        }
        let mut path = String::new();
        for (i, &(x, y)) in s.points.iter().enumerate() {
            let _ = write!(path, "{}{:.2},{:.2}", if i == 0 { "M" } else { " L" }, sx(x), sy(y));
        }
        let _ = write!(
            svg,
            r#"<path d="{path}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
            s.color
        );
    }

    // legend
    for (i, s) in series.iter().enumerate() {
        let y = MARGIN_TOP + 14.0 + i as f64 * 18.0;
        let x = WIDTH - MARGIN_RIGHT + 12.0;
        let _ = write!(
            svg,
            r#"<line x1="{x:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="{}" stroke-width="2"/>"#,
            x + 18.0,
            s.color
        );
        let _ = write!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12">{}</text>"#,
            x + 24.0,
            y + 4.0,
            s.label
        );
    }

    svg.push_str("</svg>\n");
    svg
}

pub fn write_line_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> io::Result<()> {
    std::fs::write(path, line_chart(title, x_label, y_label, series))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_is_valid_svg_with_all_series() {
        let series = [
            Series {
                label: "alpha".to_string(),
                points: vec![(0.0, 0.5), (1.0, 0.48), (2.0, 0.51)],
                color: PALETTE[0],
            },
            Series { label: "loss".to_string(), points: vec![(0.0, 1.0), (2.0, 0.2)], color: PALETTE[1] },
        ];
        let svg = line_chart("test", "step", "value", &series);
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>\n"));
        assert!(svg.contains("alpha") && svg.contains("loss"));
        assert_eq!(svg.matches("<path").count(), 2);
    }

    #[test]
    fn chart_is_deterministic() {
        let series = [Series {
            label: "x".to_string(),
            points: vec![(0.0, 0.1), (1.0, 0.2)],
            color: PALETTE[0],
        }];
        assert_eq!(
            line_chart("t", "x", "y", &series),
            line_chart("t", "x", "y", &series)
        );
    }

    #[test]
    fn degenerate_inputs_do_not_panic() {
        let svg = line_chart("empty", "x", "y", &[]);
        assert!(svg.contains("</svg>"));
        let one = [Series { label: "p".to_string(), points: vec![(1.0, 1.0)], color: PALETTE[0] }];
        assert!(line_chart("one", "x", "y", &one).contains("</svg>"));
    }
}
