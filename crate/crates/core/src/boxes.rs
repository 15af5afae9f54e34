//! Oriented 3D boxes on the ground plane.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut r = theta - TAU * ((theta + PI) / TAU).floor();
    if r >= PI {
        r -= TAU;
    }
    if r < -PI {
        r += TAU;
    }
    r
}

/// Box with center `(x, y, z)`, size `(w, l, h)` and heading `yaw` (radians, counter-clockwise
/// from +x). The length `l` runs along the heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub class_id: usize,
    pub score: f64,
}

impl OrientedBox {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64, class_id: usize, score: f64) -> Result<Self> {
        if size.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Invalid(format!("box size must be positive, got {size:?}")));
        }
        if center.iter().any(|c| !c.is_finite()) || !yaw.is_finite() || !score.is_finite() {
            return Err(Error::NonFinite("box field".into()));
        }
        Ok(Self { center, size, yaw: wrap_angle(yaw), class_id, score })
    }

    pub fn heading(&self) -> (f64, f64) {
        (self.yaw.cos(), self.yaw.sin())
    }

    /// BEV corners, counter-clockwise starting at front-left.
    pub fn corners_bev(&self) -> [(f64, f64); 4] {
        let (c, s) = self.heading();
        let (hl, hw) = (0.5 * self.size[1], 0.5 * self.size[0]);
        let [x, y, _] = self.center;
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(a, b)| (x + a * c - b * s, y + a * s + b * c))
    }

    /// Whether `(x, y)` lies inside the footprint grown by `margin` on every side.
    pub fn contains_bev(&self, x: f64, y: f64, margin: f64) -> bool {
        let (c, s) = self.heading();
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let along = dx * c + dy * s;
        let across = -dx * s + dy * c;
        along.abs() <= 0.5 * self.size[1] + margin && across.abs() <= 0.5 * self.size[0] + margin
    }

    /// Whether the point lies inside the box grown by `margin` in every direction.
    pub fn contains(&self, p: [f64; 3], margin: f64) -> bool {
        self.contains_bev(p[0], p[1], margin) && (p[2] - self.center[2]).abs() <= 0.5 * self.size[2] + margin
    }

    pub fn bev_distance(&self, other: &Self) -> f64 {
        (self.center[0] - other.center[0]).hypot(self.center[1] - other.center[1])
    }

    /// Rotation about a vertical axis through `pivot`; `z` and size are unchanged.
    pub fn rotated_about(&self, (cx, cy): (f64, f64), cos: f64, sin: f64, angle: f64) -> Self {
        let (dx, dy) = (self.center[0] - cx, self.center[1] - cy);
        Self {
            center: [cx + dx * cos - dy * sin, cy + dx * sin + dy * cos, self.center[2]],
            yaw: wrap_angle(self.yaw + angle),
            ..*self
        }
    }
}

/// Whether two footprints are separated by at least `gap` (separating-axis test).
pub fn bev_separated(a: &OrientedBox, b: &OrientedBox, gap: f64) -> bool {
    let (ca, cb) = (a.corners_bev(), b.corners_bev());
    for bx in [a, b] {
        let (c, s) = bx.heading();
        for axis in [(c, s), (-s, c)] {
            let proj = |pts: &[(f64, f64); 4]| {
                let v = pts.map(|(x, y)| x * axis.0 + y * axis.1);
                (v.iter().cloned().fold(f64::INFINITY, f64::min), v.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            };
            let ((a0, a1), (b0, b1)) = (proj(&ca), proj(&cb));
            if a1 + gap <= b0 || b1 + gap <= a0 {
                return true;
            }
        }
    }
    false
}
