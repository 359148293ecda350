use std::fmt::Write;

use super::CorrelationMatrix;

const CELL: usize = 14;
const MARGIN: usize = 70;

fn color(rho: f64) -> String {
    if !rho.is_finite() {
        return "#bbbbbb".into();
    }
    // White at 0, red toward +1, blue toward −1.
    let t = rho.clamp(-1.0, 1.0);
    let fade = |x: f64| (255.0 * (1.0 - x)).round() as u8;
    let (r, g, b) = if t >= 0.0 {
        (255, fade(t), fade(t))
    } else {
        (fade(-t), fade(-t), 255)
    };
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// Static SVG heatmap of a correlation matrix with row and column labels.
pub fn heatmap_svg(corr: &CorrelationMatrix, title: &str) -> String {
    let n = corr.labels.len();
    let size = MARGIN + n * CELL + 10;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{}" font-family="sans-serif" font-size="9">"#,
        size + 20
    );
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN}" y="14" font-size="12">{title}</text>"#
    );
    let top = MARGIN + 20;
    for (i, label) in corr.labels.iter().enumerate() {
        let y = top + i * CELL + CELL * 3 / 4;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{y}" text-anchor="end">{label}</text>"#,
            MARGIN - 4
        );
        let x = MARGIN + i * CELL + CELL * 3 / 4;
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{}" text-anchor="start" transform="rotate(-90 {x} {})">{label}</text>"#,
            top - 4,
            top - 4
        );
        for j in 0..n {
            let rho = corr.get(i, j);
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{}" width="{CELL}" height="{CELL}" fill="{}"><title>{} / {}: {:.3}</title></rect>"#,
                MARGIN + j * CELL,
                top + i * CELL,
                color(rho),
                corr.labels[i],
                corr.labels[j],
                rho
            );
        }
    }
    s.push_str("</svg>\n");
    s
}
