//! Deterministic, self-contained SVG heatmaps of influence matrices.
//!
//! Significant cells are filled on a diverging ramp by normalized influence
//! (blue for positive, red for negative). Non-significant cells are a flat
//! neutral gray. Every cell prints its influence in points.

use std::fmt::Write as _;

use crate::influence::{normalize_matrix, significance_mask, InfluenceMatrix};

pub const POSITIVE_COLOR: (u8, u8, u8) = (0x21, 0x66, 0xac);
pub const NEGATIVE_COLOR: (u8, u8, u8) = (0xb2, 0x18, 0x2b);
pub const NEUTRAL_COLOR: &str = "#e0e0e0";
const RAMP_ORIGIN: (u8, u8, u8) = (0xf7, 0xf7, 0xf7);

const CELL_W: usize = 84;
const CELL_H: usize = 34;
const LABEL_W: usize = 120;
const HEADER_H: usize = 110;
const TITLE_H: usize = 28;

fn hex(c: (u8, u8, u8)) -> String {
    format!("#{:02x}{:02x}{:02x}", c.0, c.1, c.2)
}

/// Fill for a significant cell with normalized value `v` in [−1, 1].
pub fn ramp_color(v: f64) -> String {
    let target = if v >= 0.0 { POSITIVE_COLOR } else { NEGATIVE_COLOR };
    let t = v.abs().clamp(0.0, 1.0);
    let mix = |a: u8, b: u8| (a as f64 + (b as f64 - a as f64) * t).round() as u8;
    hex((
        mix(RAMP_ORIGIN.0, target.0),
        mix(RAMP_ORIGIN.1, target.1),
        mix(RAMP_ORIGIN.2, target.2),
    ))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Renders rows × columns of influence values; `significant` selects colored cells.
pub fn render_heatmap(
    title: &str,
    rows: &[String],
    columns: &[String],
    influence: &[Vec<f64>],
    significant: &[Vec<bool>],
) -> String {
    let normalized = normalize_matrix(influence).values;
    let width = LABEL_W + CELL_W * columns.len() + 10;
    let height = TITLE_H + HEADER_H + CELL_H * rows.len() + 10;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r##"<rect width="{width}" height="{height}" fill="#ffffff"/>"##);
    let _ = writeln!(svg, r#"<text x="8" y="19" font-size="14" font-weight="bold">{}</text>"#, escape(title));
    for (j, col) in columns.iter().enumerate() {
        let x = LABEL_W + CELL_W * j + CELL_W / 2;
        let y = TITLE_H + HEADER_H - 6;
        let _ = writeln!(
            svg,
            r#"<text x="{x}" y="{y}" transform="rotate(-40 {x} {y})">{}</text>"#,
            escape(col)
        );
    }
    for (i, row) in rows.iter().enumerate() {
        let y0 = TITLE_H + HEADER_H + CELL_H * i;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            LABEL_W - 6,
            y0 + CELL_H / 2 + 4,
            escape(row)
        );
        for (j, _) in columns.iter().enumerate() {
            let x0 = LABEL_W + CELL_W * j;
            let value = influence[i][j];
            let sig = significant[i][j];
            let (fill, class) = if sig {
                (ramp_color(normalized[i][j]), if value >= 0.0 { "pos" } else { "neg" })
            } else {
                (NEUTRAL_COLOR.to_string(), "ns")
            };
            let text_fill = if sig && normalized[i][j].abs() > 0.6 { "#ffffff" } else { "#222222" };
            let _ = writeln!(
                svg,
                r##"<rect class="cell {class}" data-row="{i}" data-col="{j}" x="{x0}" y="{y0}" width="{CELL_W}" height="{CELL_H}" fill="{fill}" stroke="#ffffff"/>"##
            );
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" text-anchor="middle" fill="{text_fill}">{value:.2}</text>"#,
                x0 + CELL_W / 2,
                y0 + CELL_H / 2 + 4
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Heatmap of a computed influence matrix at significance level `alpha`.
pub fn render_influence(title: &str, matrix: &InfluenceMatrix, alpha: f64) -> String {
    let rows: Vec<String> = matrix.categories.iter().map(|c| c.to_string()).collect();
    render_heatmap(
        title,
        &rows,
        &matrix.metrics,
        &matrix.influences(),
        &significance_mask(&matrix.p_values(), alpha),
    )
}

/// Number of colored (significant) cells in an SVG produced here.
pub fn colored_cells(svg: &str) -> usize {
    svg.matches(r#"class="cell pos""#).count() + svg.matches(r#"class="cell neg""#).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signs_map_to_ramps() {
        let svg = render_heatmap(
            "t",
            &["a".into()],
            &["m1".into(), "m2".into()],
            &[vec![1.0, -1.0]],
            &[vec![true, true]],
        );
        assert!(svg.contains(r##"class="cell pos" data-row="0" data-col="0""##));
        assert!(svg.contains(&format!(r#"fill="{}""#, hex(POSITIVE_COLOR))));
        assert!(svg.contains(&format!(r#"fill="{}""#, hex(NEGATIVE_COLOR))));
        assert_eq!(colored_cells(&svg), 2);
    }

    #[test]
    fn insignificant_cells_are_neutral_with_value() {
        let svg = render_heatmap("t", &["a".into()], &["m".into()], &[vec![0.4321]], &[vec![false]]);
        assert!(svg.contains(r#"class="cell ns""#));
        assert!(svg.contains(NEUTRAL_COLOR));
        assert!(svg.contains(">0.43<"));
        assert_eq!(colored_cells(&svg), 0);
        assert!(!svg.contains("href"));
    }

    #[test]
    fn labels_are_escaped() {
        let svg = render_heatmap("a<b", &["r&d".into()], &["m".into()], &[vec![0.0]], &[vec![false]]);
        assert!(svg.contains("a&lt;b") && svg.contains("r&amp;d"));
    }
}
