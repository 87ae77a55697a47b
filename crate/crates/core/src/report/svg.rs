//! Dependency-free SVG rendering for RR heatmaps and layer curves.
//!
//! Color scale: diverging, with RR 0 at [`COLOR_AT_ZERO`], RR 0.5 at
//! [`COLOR_AT_HALF`] and RR 1 at [`COLOR_AT_ONE`]. Values outside `[0, 1]`
//! are painted with the nearest endpoint color and carry an overflow marker
//! (`▲` above 1, `▼` below 0, element class `overflow`).

use std::fmt::Write;

use crate::error::{Error, Result};

pub const COLOR_AT_ZERO: &str = "#2166ac";
pub const COLOR_AT_HALF: &str = "#f7f7f7";
pub const COLOR_AT_ONE: &str = "#b2182b";

const ZERO_RGB: [f64; 3] = [33.0, 102.0, 172.0];
const HALF_RGB: [f64; 3] = [247.0, 247.0, 247.0];
const ONE_RGB: [f64; 3] = [178.0, 24.0, 43.0];

/// Scale color for an RR value (clamped to `[0, 1]`).
pub fn color_for(value: f64) -> String {
    let t = value.clamp(0.0, 1.0);
    let (from, to, u) = if t <= 0.5 {
        (ZERO_RGB, HALF_RGB, t / 0.5)
    } else {
        (HALF_RGB, ONE_RGB, (t - 0.5) / 0.5)
    };
    let c: Vec<u8> = (0..3)
        .map(|i| (from[i] + (to[i] - from[i]) * u).round() as u8)
        .collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Heatmap input. `values[r][c]` is drawn at row label `rows[r]`, column
/// label `cols[c]`; row 0 is drawn at the bottom.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

const CELL: f64 = 36.0;
const MARGIN_LEFT: f64 = 90.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 110.0;
const LEGEND_WIDTH: f64 = 110.0;

pub fn render_heatmap(map: &Heatmap) -> Result<String> {
    let n_rows = map.values.len();
    let n_cols = map.values.first().map_or(0, Vec::len);
    if n_rows == 0 || n_cols == 0 {
        return Err(Error::Empty { op: "render_heatmap" });
    }
    if map.rows.len() != n_rows
        || map.cols.len() != n_cols
        || map.values.iter().any(|r| r.len() != n_cols)
    {
        return Err(Error::Shape {
            op: "render_heatmap",
            left: (n_rows, n_cols),
            right: (map.rows.len(), map.cols.len()),
        });
    }
    if map.values.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Config("heatmap values must be finite".into()));
    }

    let grid_w = CELL * n_cols as f64;
    let grid_h = CELL * n_rows as f64;
    let width = MARGIN_LEFT + grid_w + LEGEND_WIDTH;
    let height = MARGIN_TOP + grid_h + MARGIN_BOTTOM;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<text class="title" x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        MARGIN_LEFT + grid_w / 2.0,
        escape(&map.title)
    );

    let _ = writeln!(s, r#"<g class="cells">"#);
    for (r, row) in map.values.iter().enumerate() {
        let y = MARGIN_TOP + grid_h - CELL * (r + 1) as f64;
        for (c, &v) in row.iter().enumerate() {
            let x = MARGIN_LEFT + CELL * c as f64;
            let _ = writeln!(
                s,
                r##"<rect class="cell" x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{}" stroke="#ffffff" stroke-width="0.5"><title>{} / {}: {v}</title></rect>"##,
                color_for(v),
                escape(&map.rows[r]),
                escape(&map.cols[c]),
            );
            let marker = if v > 1.0 {
                Some("▲")
            } else if v < 0.0 {
                Some("▼")
            } else {
                None
            };
            if let Some(m) = marker {
                let _ = writeln!(
                    s,
                    r##"<text class="overflow" x="{}" y="{}" text-anchor="middle" fill="#000000">{m}</text>"##,
                    x + CELL / 2.0,
                    y + CELL / 2.0 + 4.0
                );
            }
        }
    }
    let _ = writeln!(s, "</g>");

    // axes
    let x0 = MARGIN_LEFT;
    let y0 = MARGIN_TOP + grid_h;
    let _ = writeln!(s, r##"<g class="axes" stroke="#000000">"##);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{}" y2="{y0}"/>"#, x0 + grid_w);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{MARGIN_TOP}" x2="{x0}" y2="{y0}"/>"#);
    let _ = writeln!(s, "</g>");
    for (r, label) in map.rows.iter().enumerate() {
        let y = MARGIN_TOP + grid_h - CELL * r as f64 - CELL / 2.0 + 4.0;
        let _ = writeln!(
            s,
            r#"<text class="row-label" x="{}" y="{y}" text-anchor="end">{}</text>"#,
            x0 - 6.0,
            escape(label)
        );
    }
    for (c, label) in map.cols.iter().enumerate() {
        let x = x0 + CELL * c as f64 + CELL / 2.0;
        let y = y0 + 10.0;
        let _ = writeln!(
            s,
            r#"<text class="col-label" x="{x}" y="{y}" text-anchor="end" transform="rotate(-45 {x} {y})">{}</text>"#,
            escape(label)
        );
    }
    let _ = writeln!(
        s,
        r#"<text class="x-label" x="{}" y="{}" text-anchor="middle">{}</text>"#,
        x0 + grid_w / 2.0,
        height - 10.0,
        escape(&map.x_label)
    );
    let _ = writeln!(
        s,
        r#"<text class="y-label" x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        MARGIN_TOP + grid_h / 2.0,
        MARGIN_TOP + grid_h / 2.0,
        escape(&map.y_label)
    );

    write_legend(&mut s, x0 + grid_w + 30.0, MARGIN_TOP);
    s.push_str("</svg>\n");
    Ok(s)
}

fn write_legend(s: &mut String, x: f64, y: f64) {
    const STEPS: usize = 10;
    const H: f64 = 12.0;
    let _ = writeln!(s, r#"<g class="legend">"#);
    let _ = writeln!(s, r#"<text x="{x}" y="{}">RR</text>"#, y - 4.0);
    for i in 0..=STEPS {
        let v = 1.0 - i as f64 / STEPS as f64;
        let _ = writeln!(
            s,
            r#"<rect class="legend-swatch" x="{x}" y="{}" width="16" height="{H}" fill="{}"/>"#,
            y + H * i as f64,
            color_for(v)
        );
    }
    for (label, i) in [("1.0", 0usize), ("0.5", STEPS / 2), ("0.0", STEPS)] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}">{label}</text>"#,
            x + 22.0,
            y + H * i as f64 + 10.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{x}" y="{}">▲ &gt; 1</text>"#,
        y + H * (STEPS + 1) as f64 + 16.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{x}" y="{}">▼ &lt; 0</text>"#,
        y + H * (STEPS + 1) as f64 + 30.0
    );
    let _ = writeln!(s, "</g>");
}

/// Mean RR against site index.
pub fn render_line_plot(title: &str, points: &[(usize, f64)]) -> Result<String> {
    if points.is_empty() {
        return Err(Error::Empty { op: "render_line_plot" });
    }
    if points.iter().any(|(_, v)| !v.is_finite()) {
        return Err(Error::Config("plot values must be finite".into()));
    }
    let (w, h) = (480.0, 300.0);
    let (left, right, top, bottom) = (60.0, 20.0, 40.0, 50.0);
    let lo = points.iter().map(|p| p.1).fold(0.0, f64::min);
    let hi = points.iter().map(|p| p.1).fold(1.0, f64::max);
    let max_site = points.iter().map(|p| p.0).max().unwrap_or(0).max(1) as f64;
    let px = |site: usize| left + (w - left - right) * site as f64 / max_site;
    let py = |v: f64| top + (h - top - bottom) * (hi - v) / (hi - lo);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<text class="title" x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    let _ = writeln!(s, r##"<g class="axes" stroke="#000000">"##);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{}" x2="{}" y2="{}"/>"#, h - bottom, w - right, h - bottom);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}"/>"#, h - bottom);
    let _ = writeln!(s, "</g>");
    for v in [0.0, 0.5, 1.0] {
        let _ = writeln!(
            s,
            r##"<line class="grid" x1="{left}" y1="{y}" x2="{}" y2="{y}" stroke="#cccccc" stroke-dasharray="3,3"/>"##,
            w - right,
            y = py(v)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{v:.1}</text>"#,
            left - 6.0,
            py(v) + 4.0
        );
    }
    for &(site, _) in points {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{site}</text>"#,
            px(site),
            h - bottom + 16.0
        );
    }
    let path: Vec<String> = points.iter().map(|&(site, v)| format!("{},{}", px(site), py(v))).collect();
    let _ = writeln!(
        s,
        r##"<polyline class="series" fill="none" stroke="#b2182b" stroke-width="2" points="{}"/>"##,
        path.join(" ")
    );
    for &(site, v) in points {
        let _ = writeln!(
            s,
            r##"<circle class="point" cx="{}" cy="{}" r="3" fill="#b2182b"><title>site {site}: {v}</title></circle>"##,
            px(site),
            py(v)
        );
    }
    let _ = writeln!(
        s,
        r#"<text class="x-label" x="{}" y="{}" text-anchor="middle">site (0 = embeddings)</text>"#,
        (left + w - right) / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text class="y-label" x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">mean recovery rate</text>"#,
        (top + h - bottom) / 2.0,
        (top + h - bottom) / 2.0
    );
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(values: Vec<Vec<f64>>) -> Heatmap {
        Heatmap {
            title: "t <&>".into(),
            x_label: "position".into(),
            y_label: "site".into(),
            rows: (0..values.len()).map(|i| i.to_string()).collect(),
            cols: (0..values[0].len()).map(|i| format!("p{i}")).collect(),
            values,
        }
    }

    #[test]
    fn two_by_two_structure() {
        let svg = render_heatmap(&map(vec![vec![0.0, 0.5], vec![1.0, 0.25]])).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let cells = doc
            .descendants()
            .filter(|n| n.attribute("class") == Some("cell"))
            .count();
        assert_eq!(cells, 4);
        for class in ["axes", "legend", "row-label", "col-label"] {
            assert!(doc.descendants().any(|n| n.attribute("class") == Some(class)), "{class}");
        }
        assert!(!doc.descendants().any(|n| n.attribute("class") == Some("overflow")));
    }

    #[test]
    fn color_anchors() {
        assert_eq!(color_for(0.0), COLOR_AT_ZERO);
        assert_eq!(color_for(0.5), COLOR_AT_HALF);
        assert_eq!(color_for(1.0), COLOR_AT_ONE);
        assert_eq!(color_for(-3.0), COLOR_AT_ZERO);
        assert_eq!(color_for(7.0), COLOR_AT_ONE);
    }

    #[test]
    fn out_of_range_gets_marker() {
        let svg = render_heatmap(&map(vec![vec![-0.5, 1.5, 0.5]])).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let markers: Vec<_> = doc
            .descendants()
            .filter(|n| n.attribute("class") == Some("overflow"))
            .map(|n| n.text().unwrap().to_string())
            .collect();
        assert_eq!(markers, vec!["▼", "▲"]);
    }

    #[test]
    fn rejects_empty_and_non_finite() {
        let empty = Heatmap {
            title: String::new(),
            x_label: String::new(),
            y_label: String::new(),
            rows: vec![],
            cols: vec![],
            values: vec![],
        };
        assert!(render_heatmap(&empty).is_err());
        assert!(render_heatmap(&map(vec![vec![f64::NAN]])).is_err());
        assert!(render_line_plot("x", &[]).is_err());
    }

    #[test]
    fn line_plot_parses() {
        let svg = render_line_plot("layers", &[(0, 0.0), (1, 0.0), (2, 1.0)]).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        assert_eq!(
            doc.descendants()
                .filter(|n| n.attribute("class") == Some("point"))
                .count(),
            3
        );
    }
}
