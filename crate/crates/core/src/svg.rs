//! Minimal SVG line charts and heatmaps.

use std::fmt::Write as _;

use nalgebra::DMatrix;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;

/// Polyline chart of one or more named series sharing the x axis.
/// Non-finite points are skipped.
pub fn line_chart(title: &str, x_label: &str, series: &[(&str, Vec<(f64, f64)>)]) -> String {
    let points = series.iter().flat_map(|(_, s)| s.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut out = header();
    let _ = writeln!(out, r#"<text x="{}" y="25" text-anchor="middle" font-size="16">{}</text>"#, WIDTH / 2.0, escape(title));
    let _ = writeln!(
        out,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        WIDTH - 2.0 * MARGIN,
        HEIGHT - 2.0 * MARGIN
    );
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#, WIDTH / 2.0, HEIGHT - 10.0, escape(x_label));
    for (value, y) in [(y0, HEIGHT - MARGIN), (y1, MARGIN)] {
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end" font-size="10">{value:.3e}</text>"#, MARGIN - 4.0, y + 4.0);
    }
    for (value, x) in [(x0, MARGIN), (x1, WIDTH - MARGIN)] {
        let _ = writeln!(out, r#"<text x="{x}" y="{}" text-anchor="middle" font-size="10">{value}</text>"#, HEIGHT - MARGIN + 14.0);
    }
    const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    for (i, (name, data)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = data
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="12" fill="{color}">{}</text>"#,
            WIDTH - MARGIN - 120.0,
            MARGIN + 16.0 * (i + 1) as f64,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Grayscale heatmap of a matrix with values in `[0, 1]`; darker is larger.
pub fn heatmap(title: &str, grid: &DMatrix<f64>) -> String {
    let (rows, cols) = grid.shape();
    let cell = ((HEIGHT - 2.0 * MARGIN) / rows.max(cols).max(1) as f64).floor();
    let mut out = header();
    let _ = writeln!(out, r#"<text x="{}" y="25" text-anchor="middle" font-size="16">{}</text>"#, WIDTH / 2.0, escape(title));
    for r in 0..rows {
        for c in 0..cols {
            let v = grid[(r, c)].clamp(0.0, 1.0);
            let shade = (255.0 * (1.0 - v)).round() as u8;
            let _ = writeln!(
                out,
                r#"<rect x="{}" y="{}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},{shade})"><title>S[{}, {}] = {}</title></rect>"#,
                MARGIN + c as f64 * cell,
                MARGIN + r as f64 * cell,
                r + 1,
                c + 1,
                grid[(r, c)]
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

fn header() -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
