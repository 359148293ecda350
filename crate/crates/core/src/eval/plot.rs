use std::fmt::Write;

use super::MetricsReport;
use crate::phase::Phase;

const WIDTH: f64 = 860.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 70.0;
const COLORS: [&str; 6] = [
    "#d62728", "#1f1f1f", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e",
];

/// Static SVG line plot of per-bus phase MAE for one phase, one series per
/// report. Buses are in canonical order; a bus missing from a report breaks
/// that series' line.
pub fn feature_mae_svg(reports: &[MetricsReport], phase: Phase, title: &str) -> String {
    let mut buses: Vec<&str> = vec![];
    for r in reports {
        for f in r.features.iter().filter(|f| f.phase == phase) {
            if !buses.contains(&f.bus.as_str()) {
                buses.push(&f.bus);
            }
        }
    }
    let ymax = reports
        .iter()
        .flat_map(|r| {
            r.features
                .iter()
                .filter(|f| f.phase == phase)
                .map(|f| f.phase_mae_deg)
        })
        .filter(|v| v.is_finite())
        .fold(0.0_f64, f64::max)
        .max(1e-6)
        * 1.1;
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let x_of = |i: usize| {
        LEFT + if buses.len() > 1 {
            plot_w * i as f64 / (buses.len() - 1) as f64
        } else {
            plot_w / 2.0
        }
    };
    let y_of = |v: f64| TOP + plot_h * (1.0 - v / ymax);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{LEFT}" y="20" font-size="13">{title}</text>"#
    );
    let _ = writeln!(
        s,
        r##"<rect x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#444"/>"##
    );
    for k in 0..=4 {
        let v = ymax * k as f64 / 4.0;
        let y = y_of(v);
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"##,
            LEFT + plot_w,
            LEFT - 5.0,
            y + 3.0
        );
    }
    for (i, b) in buses.iter().enumerate() {
        let x = x_of(i);
        let y = TOP + plot_h + 10.0;
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{y:.1}" text-anchor="end" transform="rotate(-60 {x:.1} {y:.1})">{b}</text>"#
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.1}" transform="rotate(-90 18 {:.1})" text-anchor="middle">MAE [degrees]</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );
    for (ri, r) in reports.iter().enumerate() {
        let color = COLORS[ri % COLORS.len()];
        let mut segments: Vec<Vec<(f64, f64)>> = vec![vec![]];
        for (i, b) in buses.iter().enumerate() {
            match r.features.iter().find(|f| f.phase == phase && f.bus == *b) {
                Some(f) if f.phase_mae_deg.is_finite() => segments
                    .last_mut()
                    .expect("non-empty")
                    .push((x_of(i), y_of(f.phase_mae_deg))),
                _ => segments.push(vec![]),
            }
        }
        for seg in segments.iter().filter(|seg| !seg.is_empty()) {
            let pts: Vec<String> = seg.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                pts.join(" ")
            );
            for (x, y) in seg {
                let _ = writeln!(
                    s,
                    r#"<circle cx="{x:.1}" cy="{y:.1}" r="2.5" fill="{color}"/>"#
                );
            }
        }
        let ly = TOP + 14.0 + 16.0 * ri as f64;
        let lx = WIDTH - RIGHT + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{ly:.1}">{} ({:.3})</text>"#,
            ly - 3.0,
            lx + 18.0,
            ly - 3.0,
            lx + 24.0,
            r.run,
            r.phase_mae_where(|f| f.phase == phase)
        );
    }
    s.push_str("</svg>\n");
    s
}
