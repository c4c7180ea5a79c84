use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::report::MetricsReport;
use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;

/// Line chart of base, new and overall mIoU against the step index.
pub fn plot_svg(reports: &[MetricsReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::Invalid("nothing to plot".into()));
    }
    let first = reports.iter().map(|r| r.step).min().unwrap_or(0) as f64;
    let last = reports.iter().map(|r| r.step).max().unwrap_or(0) as f64;
    let span = (last - first).max(1.0);
    let (pw, ph) = (WIDTH - 2.0 * MARGIN, HEIGHT - 2.0 * MARGIN);
    let x = |step: usize| MARGIN + (step as f64 - first) / span * pw;
    let y = |v: f64| MARGIN + (1.0 - v.clamp(0.0, 1.0)) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN, MARGIN);
    let _ = writeln!(
        svg,
        r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#
    );
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"#,
            x0 - 6.0,
            y(v) + 4.0
        );
    }
    let mut steps: Vec<usize> = reports.iter().map(|r| r.step).collect();
    steps.dedup();
    for s in steps {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{s}</text>"#,
            x(s),
            y0 + 18.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">step</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.1}" transform="rotate(-90 16 {:.1})" text-anchor="middle">mIoU</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );

    let series: [(&str, &str, fn(&MetricsReport) -> Option<f64>); 3] = [
        ("base", "#1f77b4", |r| Some(r.miou_base)),
        ("new", "#d62728", |r| r.miou_new),
        ("all", "#2ca02c", |r| Some(r.miou_all)),
    ];
    for (i, (name, color, get)) in series.iter().enumerate() {
        let points: Vec<String> = reports
            .iter()
            .filter_map(|r| get(r).map(|v| format!("{:.2},{:.2}", x(r.step), y(v))))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline class="{name}" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
        let ly = MARGIN + 16.0 * i as f64;
        let lx = WIDTH - MARGIN - 70.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            lx + 18.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}">{name}</text>"#,
            lx + 24.0,
            ly + 4.0
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn write_plot(reports: &[MetricsReport], out: &Path) -> Result<()> {
    let svg = plot_svg(reports)?;
    fs::write(out, svg).map_err(|e| Error::io(out, e))
}
