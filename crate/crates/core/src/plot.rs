//! Static BEV renderings: SVG scatter plots with boxes and binary PGM heatmap dumps.

use std::fmt::Write as _;

use crate::boxes::OrientedBox;
use crate::error::{shape_err, Result};
use crate::pillar::{GridConfig, PointCloud};
use crate::tensor::GridTensor;

/// SVG pixels per meter.
pub const SVG_SCALE: f64 = 32.0;

/// Points shaded by intensity, ground truth in green, detections in red with a heading tick
/// from the center to the front face. North (+y) is up.
pub fn bev_svg(cloud: &PointCloud, gt: &[OrientedBox], dets: &[OrientedBox], grid: &GridConfig) -> String {
    let (x0, x1) = grid.x_range;
    let (y0, y1) = grid.y_range;
    let (w, h) = ((x1 - x0) * SVG_SCALE, (y1 - y0) * SVG_SCALE);
    let px = |x: f64, y: f64| ((x - x0) * SVG_SCALE, (y1 - y) * SVG_SCALE);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.2} {h:.2}">"#);
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="#101418"/>"##);
    for p in cloud.points.iter().filter(|p| grid.in_xy_range(p.x, p.y)) {
        let (u, v) = px(p.x, p.y);
        let g = (60.0 + 195.0 * p.intensity.clamp(0.0, 1.0)).round() as u8;
        let _ = writeln!(s, r##"<circle cx="{u:.2}" cy="{v:.2}" r="1.2" fill="#{g:02x}{g:02x}{g:02x}"/>"##);
    }
    let mut draw = |b: &OrientedBox, color: &str, tick: bool| {
        let pts: Vec<String> = b.corners_bev().iter().map(|&(x, y)| {
            let (u, v) = px(x, y);
            format!("{u:.2},{v:.2}")
        }).collect();
        let _ = writeln!(s, r#"<polygon points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, pts.join(" "));
        if tick {
            let (c, sn) = b.heading();
            let (u0, v0) = px(b.center[0], b.center[1]);
            let half = 0.5 * b.size[1];
            let (u1, v1) = px(b.center[0] + half * c, b.center[1] + half * sn);
            let _ = writeln!(s, r#"<line x1="{u0:.2}" y1="{v0:.2}" x2="{u1:.2}" y2="{v1:.2}" stroke="{color}" stroke-width="1.5"/>"#);
            let _ = writeln!(s, r#"<text x="{u0:.2}" y="{:.2}" fill="{color}" font-size="9">{:.2}</text>"#, v0 - 4.0, b.score);
        }
    };
    for b in gt {
        draw(b, "#3ccf4e", false);
    }
    for b in dets {
        draw(b, "#ff4d4d", true);
    }
    s.push_str("</svg>\n");
    s
}

/// Binary PGM of channel `c` of item `b` of a `[B, C, H, W]` map, values clamped to `[0, 1]`.
/// The top image row is the largest grid row, so +y points up as in [`bev_svg`].
pub fn heatmap_pgm(map: &GridTensor, b: usize, c: usize) -> Result<Vec<u8>> {
    if map.rank() != 4 || b >= map.dim(0) || c >= map.dim(1) {
        return shape_err(format!("heatmap_pgm: item {b} channel {c} of {:?}", map.shape()));
    }
    let (h, w) = (map.dim(2), map.dim(3));
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for row in (0..h).rev() {
        for col in 0..w {
            out.push((map.get(&[b, c, row, col]).clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}
