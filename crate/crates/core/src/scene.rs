//! Deterministic synthetic scenes: boxes sampled on the ground, their visible surfaces
//! sampled as lidar-like points, plus ground clutter.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use crate::boxes::{bev_separated, OrientedBox};
use crate::error::{Error, Result};
use crate::pillar::{GridConfig, Point, PointCloud};
use crate::rng::Rng;

pub const CLASS_NAMES: [&str; 3] = ["car", "pedestrian", "cyclist"];

/// Nominal `(w, l, h)` per class, meters.
pub const CLASS_SIZES: [[f64; 3]; 3] = [[1.9, 4.5, 1.6], [0.6, 0.6, 1.7], [0.6, 1.8, 1.4]];

/// Generation cap on box placement attempts per scene.
pub const MAX_ATTEMPTS: usize = 10_000;

/// Minimum number of points that must land on each box.
pub const MIN_POINTS_PER_BOX: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    /// Inclusive range of box counts.
    pub n_boxes: (usize, usize),
    pub class_weights: [f64; 3],
    pub class_sizes: [[f64; 3]; 3],
    /// Relative size jitter, uniform in `[1 - j, 1 + j]` per dimension.
    pub size_jitter: f64,
    /// Surface points per square meter.
    pub point_density: f64,
    /// Ground clutter points per square meter of the placement disk.
    pub clutter_density: f64,
    pub noise_sigma: f64,
    /// Minimum BEV gap between boxes, meters.
    pub min_gap: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_boxes: (2, 5),
            class_weights: [1.0, 1.0, 1.0],
            class_sizes: CLASS_SIZES,
            size_jitter: 0.15,
            point_density: 15.0,
            clutter_density: 0.3,
            noise_sigma: 0.02,
            min_gap: 0.5,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_boxes.0 > self.n_boxes.1 {
            return bad(format!("n_boxes range {:?} is empty", self.n_boxes));
        }
        if self.class_weights.iter().any(|w| !(*w >= 0.0)) || self.class_weights.iter().sum::<f64>() <= 0.0 {
            return bad(format!("class weights {:?}", self.class_weights));
        }
        if self.class_sizes.iter().flatten().any(|s| !(*s > 0.0)) {
            return bad("class sizes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.size_jitter) {
            return bad(format!("size jitter {} not in [0, 1)", self.size_jitter));
        }
        for (name, v) in [("point_density", self.point_density), ("clutter_density", self.clutter_density), ("noise_sigma", self.noise_sigma), ("min_gap", self.min_gap)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        Ok(())
    }

    fn max_half_diagonal(&self) -> f64 {
        self.class_sizes
            .iter()
            .zip(&self.class_weights)
            .filter(|(_, w)| **w > 0.0)
            .map(|(s, _)| s)
            .map(|s| 0.5 * (1.0 + self.size_jitter) * s[0].hypot(s[1]))
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub cloud: PointCloud,
    pub gt: Vec<OrientedBox>,
}

impl Scene {
    /// Number of box centers outside the grid.
    pub fn out_of_range(&self, cfg: &GridConfig) -> usize {
        self.gt.iter().filter(|b| !cfg.in_xy_range(b.center[0], b.center[1])).count()
    }
}

fn pick_class(weights: &[f64; 3], rng: &mut Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.uniform() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Samples points on the four vertical faces and the top of a box. The front face
/// (at `+l/2` along the heading) returns high intensity, the rest low.
fn sample_surface(b: &OrientedBox, density: f64, sigma: f64, rng: &mut Rng) -> Vec<Point> {
    let [w, l, h] = b.size;
    // (area, kind): 0 front, 1 back, 2 left, 3 right, 4 top
    let areas = [w * h, w * h, l * h, l * h, w * l];
    let total: f64 = areas.iter().sum();
    let count = (density * total).round() as usize;
    let (c, s) = b.heading();
    let mut pts = Vec::with_capacity(count);
    for _ in 0..count {
        let mut u = rng.uniform() * total;
        let mut face = 4;
        for (i, a) in areas.iter().enumerate() {
            if u < *a {
                face = i;
                break;
            }
            u -= a;
        }
        let (a, t) = (rng.uniform() - 0.5, rng.uniform() - 0.5);
        // local (along, across, up) relative to the box center
        let (along, across, up) = match face {
            0 => (0.5 * l, a * w, t * h),
            1 => (-0.5 * l, a * w, t * h),
            2 => (a * l, 0.5 * w, t * h),
            3 => (a * l, -0.5 * w, t * h),
            _ => (a * l, t * w, 0.5 * h),
        };
        let intensity = if face == 0 { rng.range(0.8, 1.0) } else { rng.range(0.1, 0.4) };
        let x = b.center[0] + along * c - across * s + sigma * rng.normal();
        let y = b.center[1] + along * s + across * c + sigma * rng.normal();
        let z = b.center[2] + up + sigma * rng.normal();
        pts.push(Point::new(x, y, z, intensity));
    }
    pts
}

/// Generates a scene as a pure function of `(spec, cfg)`. Box centers lie in a disk about
/// the grid center small enough that every box stays inside the grid under any rotation.
pub fn generate_scene(spec: &SceneSpec, cfg: &GridConfig) -> Result<Scene> {
    spec.validate()?;
    cfg.validate()?;
    let mut rng = Rng::new(spec.seed);
    let (gx, gy) = cfg.center();
    let reach = spec.max_half_diagonal() + 4.0 * spec.noise_sigma + 0.05;
    let disk = cfg.inscribed_radius() - reach;
    if spec.n_boxes.1 > 0 && disk <= 0.0 {
        return Err(Error::Config(format!("grid radius {} too small for boxes of reach {reach}", cfg.inscribed_radius())));
    }
    let n_boxes = spec.n_boxes.0 + rng.below(spec.n_boxes.1 - spec.n_boxes.0 + 1);
    let mut gt: Vec<OrientedBox> = Vec::with_capacity(n_boxes);
    let mut points = Vec::new();
    let mut attempts = 0;
    while gt.len() < n_boxes {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(Error::Invalid(format!("placed {} of {n_boxes} boxes after {MAX_ATTEMPTS} attempts", gt.len())));
        }
        let class = pick_class(&spec.class_weights, &mut rng);
        let size = spec.class_sizes[class].map(|v| v * rng.range(1.0 - spec.size_jitter, 1.0 + spec.size_jitter));
        let (r, phi) = (disk * rng.uniform().sqrt(), rng.range(-PI, PI));
        let yaw = rng.range(-PI, PI);
        let b = OrientedBox::new([gx + r * phi.cos(), gy + r * phi.sin(), 0.5 * size[2]], size, yaw, class, 1.0)?;
        if !gt.iter().all(|o| bev_separated(o, &b, spec.min_gap)) {
            continue;
        }
        let pts = sample_surface(&b, spec.point_density, spec.noise_sigma, &mut rng);
        let margin = 4.0 * spec.noise_sigma + 1e-9;
        if pts.iter().filter(|p| b.contains([p.x, p.y, p.z], margin)).count() < MIN_POINTS_PER_BOX {
            continue;
        }
        gt.push(b);
        points.extend(pts);
    }
    let full_disk = cfg.inscribed_radius() - 0.05;
    let n_clutter = (spec.clutter_density * PI * full_disk * full_disk).round() as usize;
    for _ in 0..n_clutter {
        let (r, phi) = (full_disk * rng.uniform().sqrt(), rng.range(-PI, PI));
        let z = (spec.noise_sigma * rng.normal()).abs();
        points.push(Point::new(gx + r * phi.cos(), gy + r * phi.sin(), z, rng.range(0.0, 0.3)));
    }
    Ok(Scene { cloud: PointCloud::new(points), gt })
}

/// `(cos, sin)` that are exact at multiples of a quarter turn.
pub fn exact_cos_sin(angle: f64) -> (f64, f64) {
    let q = angle / FRAC_PI_2;
    if (q - q.round()).abs() < 1e-12 {
        match (q.round() as i64).rem_euclid(4) {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    } else {
        (angle.cos(), angle.sin())
    }
}

/// Rotates points and boxes counter-clockwise by `angle` about the vertical axis through
/// `pivot`. Heights and sizes are unchanged.
pub fn rotate_scene(s: &Scene, angle: f64, pivot: (f64, f64)) -> Scene {
    let (c, sn) = exact_cos_sin(angle);
    if (c, sn) == (1.0, 0.0) {
        return s.clone();
    }
    let (px, py) = pivot;
    let points = s
        .cloud
        .points
        .iter()
        .map(|p| {
            let (dx, dy) = (p.x - px, p.y - py);
            Point::new(px + dx * c - dy * sn, py + dx * sn + dy * c, p.z, p.intensity)
        })
        .collect();
    let gt = s.gt.iter().map(|b| b.rotated_about(pivot, c, sn, angle % TAU)).collect();
    Scene { cloud: PointCloud::new(points), gt }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::{rotate_planar, SCENE_QUARTER_TURN};
    use crate::pillar::pillarize;

    #[test]
    fn same_seed_same_scene() {
        let spec = SceneSpec { seed: 42, ..Default::default() };
        let cfg = GridConfig::default();
        let a = generate_scene(&spec, &cfg).unwrap();
        let b = generate_scene(&spec, &cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&SceneSpec { seed: 43, ..spec }, &cfg).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn empty_spec_gives_empty_cloud() {
        let spec = SceneSpec { n_boxes: (0, 0), clutter_density: 0.0, ..Default::default() };
        let s = generate_scene(&spec, &GridConfig::default()).unwrap();
        assert!(s.cloud.is_empty() && s.gt.is_empty());
    }

    #[test]
    fn every_box_holds_enough_points() {
        let cfg = GridConfig::default();
        for seed in 0..20 {
            let spec = SceneSpec { seed, point_density: 2.0, ..Default::default() };
            let s = generate_scene(&spec, &cfg).unwrap();
            assert!(s.gt.len() >= 2 && s.gt.len() <= 5);
            for b in &s.gt {
                let inside = s.cloud.points.iter().filter(|p| b.contains([p.x, p.y, p.z], 4.0 * spec.noise_sigma)).count();
                assert!(inside >= MIN_POINTS_PER_BOX);
                assert!(cfg.in_xy_range(b.center[0], b.center[1]));
            }
            for (i, a) in s.gt.iter().enumerate() {
                for b in &s.gt[i + 1..] {
                    assert!(bev_separated(a, b, spec.min_gap));
                }
            }
            assert!(s.cloud.points.iter().all(|p| cfg.in_xy_range(p.x, p.y)));
        }
    }

    #[test]
    fn impossible_packing_fails() {
        let spec = SceneSpec { n_boxes: (60, 60), class_weights: [1.0, 0.0, 0.0], ..Default::default() };
        assert!(generate_scene(&spec, &GridConfig::default()).is_err());
        assert!(SceneSpec { n_boxes: (3, 2), ..Default::default() }.validate().is_err());
    }

    #[test]
    fn rotation_examples() {
        let cfg = GridConfig::default();
        let s = generate_scene(&SceneSpec { seed: 5, ..Default::default() }, &cfg).unwrap();
        assert_eq!(rotate_scene(&s, 0.0, (0.3, -0.2)), s);
        let twice = rotate_scene(&rotate_scene(&s, PI, (0.3, -0.2)), PI, (0.3, -0.2));
        for (a, b) in twice.cloud.points.iter().zip(&s.cloud.points) {
            assert!((a.x - b.x).abs() < 1e-12 && (a.y - b.y).abs() < 1e-12 && a.z == b.z);
        }
        for (a, b) in twice.gt.iter().zip(&s.gt) {
            assert!(a.bev_distance(b) < 1e-12 && (a.yaw - b.yaw).abs() < 1e-12 && a.size == b.size);
        }
    }

    #[test]
    fn rotation_preserves_distances() {
        let s = generate_scene(&SceneSpec { seed: 9, ..Default::default() }, &GridConfig::default()).unwrap();
        let r = rotate_scene(&s, 0.7, (1.0, 2.0));
        let d = |a: &Point, b: &Point| ((a.x - b.x).powi(2) + (a.y - b.y).powi(2) + (a.z - b.z).powi(2)).sqrt();
        let p = &s.cloud.points;
        let q = &r.cloud.points;
        for i in (0..p.len()).step_by(7) {
            for j in (0..p.len()).step_by(11) {
                assert!((d(&p[i], &p[j]) - d(&q[i], &q[j])).abs() < 1e-12);
            }
        }
        for (a, b) in s.gt.iter().zip(&r.gt) {
            assert_eq!(a.size, b.size);
        }
    }

    #[test]
    fn quarter_turn_rotates_occupancy() {
        let cfg = GridConfig::default();
        let s = generate_scene(&SceneSpec { seed: 2, ..Default::default() }, &cfg).unwrap();
        let r = rotate_scene(&s, FRAC_PI_2, cfg.center());
        let a = pillarize(&r.cloud, &cfg).occupancy();
        let b = rotate_planar(&pillarize(&s.cloud, &cfg).occupancy(), SCENE_QUARTER_TURN).unwrap();
        assert_eq!(a, b);
    }
}
