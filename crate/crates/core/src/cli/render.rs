use std::f64::consts::PI;
use std::fmt::Write as _;

use crate::data::AnnotationRecord;

/// Hue from the undirected orientation of a segment, so that opposite
/// directions share a color.
fn orientation_color(du: f64, dv: f64) -> String {
    let theta = dv.atan2(du).rem_euclid(PI);
    format!("hsl({:.0},85%,50%)", theta / PI * 360.0)
}

/// SVG drawing of one record; `underlay` is drawn first in grey.
pub fn render_svg(rec: &AnnotationRecord, underlay: Option<&AnnotationRecord>, cell_size: Option<usize>, scale: f64) -> String {
    let (w, h) = (rec.image.w as f64 * scale, rec.image.h as f64 * scale);
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="black"/>"#);
    if let Some(cs) = cell_size.filter(|&c| c > 0) {
        let step = cs as f64 * scale;
        let mut x = step;
        while x < w {
            let _ = writeln!(out, r##"<line x1="{x}" y1="0" x2="{x}" y2="{h}" stroke="#333" stroke-width="1"/>"##);
            x += step;
        }
        let mut y = step;
        while y < h {
            let _ = writeln!(out, r##"<line x1="0" y1="{y}" x2="{w}" y2="{y}" stroke="#333" stroke-width="1"/>"##);
            y += step;
        }
    }
    if let Some(u) = underlay {
        for p in &u.polylines {
            let pts: Vec<String> = p.points.iter().map(|q| format!("{},{}", q[0] * scale, q[1] * scale)).collect();
            let _ = writeln!(
                out,
                r##"<polyline points="{}" fill="none" stroke="#888" stroke-width="{}" stroke-opacity="0.6"/>"##,
                pts.join(" "),
                scale * 1.5
            );
        }
    }
    for p in &rec.polylines {
        let opacity = p.confidence.unwrap_or(1.0).clamp(0.2, 1.0);
        for pair in p.points.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let _ = writeln!(
                out,
                r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="{}" stroke-width="{}" stroke-opacity="{opacity:.2}" stroke-linecap="round"/>"#,
                a[0] * scale,
                a[1] * scale,
                b[0] * scale,
                b[1] * scale,
                orientation_color(b[0] - a[0], b[1] - a[1]),
                scale * 0.5
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ImageSize, PolylineRecord};

    #[test]
    fn opposite_directions_share_a_color() {
        assert_eq!(orientation_color(1.0, 2.0), orientation_color(-1.0, -2.0));
        assert_ne!(orientation_color(1.0, 0.0), orientation_color(0.0, 1.0));
    }

    #[test]
    fn one_line_element_per_edge() {
        let rec = AnnotationRecord {
            image: ImageSize { w: 16, h: 16 },
            polylines: vec![PolylineRecord {
                label: Some(0),
                points: vec![[0.0, 0.0], [8.0, 8.0], [8.0, 16.0]],
                confidence: None,
                cell: None,
                predictor: None,
                label_probs: None,
            }],
        };
        let svg = render_svg(&rec, None, None, 4.0);
        assert_eq!(svg.matches("<line").count(), 2);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }
}
