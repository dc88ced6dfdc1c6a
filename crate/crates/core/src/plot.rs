//! Bird's-eye-view SVG of one frame: ego at the center, x up, y to the left.

use std::fmt::Write;

use crate::scene::{Box3D, Point3};

pub const CANVAS: f64 = 800.0;

#[derive(Clone, Debug)]
pub struct BevLayer<'a> {
    pub boxes: &'a [Box3D],
    pub stroke: &'a str,
}

/// Renders points and box layers within `range` meters of the ego.
pub fn render_bev(points: &[Point3], layers: &[BevLayer<'_>], range: f64) -> String {
    let half = CANVAS / 2.0;
    let scale = half / range.max(1.0);
    let to_screen = |x: f64, y: f64| (half - y * scale, half - x * scale);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{0}" height="{0}" viewBox="0 0 {0} {0}">"#,
        CANVAS
    );
    let _ = writeln!(svg, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    let _ = writeln!(
        svg,
        r##"<line x1="{half}" y1="{half}" x2="{half}" y2="{:.2}" stroke="#d62728" stroke-width="2"/>"##,
        half - 2.0 * scale
    );
    let _ = writeln!(
        svg,
        r##"<line x1="{half}" y1="{half}" x2="{:.2}" y2="{half}" stroke="#2ca02c" stroke-width="2"/>"##,
        half - 2.0 * scale
    );
    for p in points {
        if p.x.abs() > range || p.y.abs() > range {
            continue;
        }
        let (sx, sy) = to_screen(p.x, p.y);
        let _ = writeln!(svg, r##"<circle cx="{sx:.2}" cy="{sy:.2}" r="0.8" fill="#7f7f7f"/>"##);
    }
    for layer in layers {
        for b in layer.boxes {
            let poly: Vec<String> = b
                .corners_xy()
                .iter()
                .map(|c| {
                    let (sx, sy) = to_screen(c.x, c.y);
                    format!("{sx:.2},{sy:.2}")
                })
                .collect();
            let _ = writeln!(
                svg,
                r#"<polygon points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
                poly.join(" "),
                layer.stroke
            );
            let c = b.center_xy();
            let tip = c + b.length_axis() * (b.length() / 2.0);
            let (x1, y1) = to_screen(c.x, c.y);
            let (x2, y2) = to_screen(tip.x, tip.y);
            let _ = writeln!(
                svg,
                r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{}" stroke-width="1.5"/>"#,
                layer.stroke
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}
