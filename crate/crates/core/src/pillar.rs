//! Point clouds, BEV grid geometry, and point-to-pillar assignment.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::GridTensor;

/// Cap on points kept per pillar; the encoder is quadratic in this count.
pub const MAX_POINTS_PER_PILLAR: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Self { x, y, z, intensity }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.intensity.is_finite()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Square BEV grid over `x_range x y_range`, cells of `pillar_size` meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridConfig {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    pub pillar_size: f64,
    pub grid_cells: usize,
}

impl Default for GridConfig {
    /// 65 x 65 cells of 0.25 m over [-8.125, 8.125] m.
    fn default() -> Self {
        Self::centered(8.125, 0.25, (-3.0, 3.0)).expect("default grid is valid")
    }
}

impl GridConfig {
    /// Grid centered on the origin with half-extent `half` meters.
    pub fn centered(half: f64, pillar_size: f64, z_range: (f64, f64)) -> Result<Self> {
        let cells = (2.0 * half / pillar_size).round() as usize;
        let cfg = Self { x_range: (-half, half), y_range: (-half, half), z_range, pillar_size, grid_cells: cells };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Coarse 33 x 33 grid of 0.5 m cells used for quick training runs.
    pub fn coarse() -> Self {
        Self::centered(8.25, 0.5, (-3.0, 3.0)).expect("coarse grid is valid")
    }

    pub fn validate(&self) -> Result<()> {
        let sx = self.x_range.1 - self.x_range.0;
        let sy = self.y_range.1 - self.y_range.0;
        if !(self.pillar_size > 0.0) || !(sx > 0.0) || !(sy > 0.0) || !(self.z_range.1 > self.z_range.0) {
            return Err(Error::Config(format!("degenerate grid {self:?}")));
        }
        if self.grid_cells == 0 {
            return Err(Error::Config("grid_cells must be positive".into()));
        }
        for span in [sx, sy] {
            if ((span / self.pillar_size) - self.grid_cells as f64).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "span {span} / pillar_size {} != grid_cells {}",
                    self.pillar_size, self.grid_cells
                )));
            }
        }
        Ok(())
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_range.0 + self.x_range.1), 0.5 * (self.y_range.0 + self.y_range.1))
    }

    /// Radius of the disk inscribed in the grid, measured from the center.
    pub fn inscribed_radius(&self) -> f64 {
        0.5 * (self.x_range.1 - self.x_range.0).min(self.y_range.1 - self.y_range.0)
    }

    pub fn in_xy_range(&self, x: f64, y: f64) -> bool {
        x >= self.x_range.0 && x < self.x_range.1 && y >= self.y_range.0 && y < self.y_range.1
    }

    /// `(row, col)` of the half-open cell holding `(x, y)`, if inside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !self.in_xy_range(x, y) {
            return None;
        }
        let col = ((x - self.x_range.0) / self.pillar_size).floor() as usize;
        let row = ((y - self.y_range.0) / self.pillar_size).floor() as usize;
        Some((row.min(self.grid_cells - 1), col.min(self.grid_cells - 1)))
    }

    /// World coordinates of the center of cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x_range.0 + (col as f64 + 0.5) * self.pillar_size,
            self.y_range.0 + (row as f64 + 0.5) * self.pillar_size,
        )
    }
}

/// Points of one occupied cell, kept in ascending point-index order.
#[derive(Debug, Clone, PartialEq)]
pub struct Pillar {
    pub indices: Vec<usize>,
    /// `(dx, dy)` of each kept point from the cell center, meters.
    pub offsets: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PillarGrid {
    pub grid_cells: usize,
    pub cells: BTreeMap<(usize, usize), Pillar>,
}

impl PillarGrid {
    pub fn occupancy(&self) -> GridTensor {
        let n = self.grid_cells;
        let mut occ = GridTensor::zeros(&[n, n]);
        for &(r, c) in self.cells.keys() {
            occ.set(&[r, c], 1.0);
        }
        occ
    }

    pub fn points_of<'a>(&'a self, cloud: &'a PointCloud, key: (usize, usize)) -> impl Iterator<Item = &'a Point> + 'a {
        self.cells.get(&key).into_iter().flat_map(move |p| p.indices.iter().map(move |&i| &cloud.points[i]))
    }
}

/// Assigns in-range points to half-open BEV cells. Points outside `x/y/z` ranges or with
/// non-finite coordinates are dropped. Cells over the cap keep the points closest to the
/// cell center (ties by lower index).
pub fn pillarize(cloud: &PointCloud, cfg: &GridConfig) -> PillarGrid {
    let mut buckets: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.points.iter().enumerate() {
        if !p.is_finite() || p.z < cfg.z_range.0 || p.z > cfg.z_range.1 {
            continue;
        }
        if let Some(cell) = cfg.cell_of(p.x, p.y) {
            buckets.entry(cell).or_default().push(i);
        }
    }
    let cells = buckets
        .into_iter()
        .map(|((row, col), mut idx)| {
            let (cx, cy) = cfg.cell_center(row, col);
            let d2 = |i: usize| {
                let p = &cloud.points[i];
                (p.x - cx).powi(2) + (p.y - cy).powi(2)
            };
            if idx.len() > MAX_POINTS_PER_PILLAR {
                idx.sort_by(|&a, &b| d2(a).total_cmp(&d2(b)).then(a.cmp(&b)));
                idx.truncate(MAX_POINTS_PER_PILLAR);
                idx.sort_unstable();
            }
            let offsets = idx.iter().map(|&i| [cloud.points[i].x - cx, cloud.points[i].y - cy]).collect();
            ((row, col), Pillar { indices: idx, offsets })
        })
        .collect();
    PillarGrid { grid_cells: cfg.grid_cells, cells }
}

/// Writes per-cell feature vectors into slot `batch` of a `[B, beta, N, N]` map.
pub fn scatter_into(
    out: &mut GridTensor,
    batch: usize,
    grid: &PillarGrid,
    features: &BTreeMap<(usize, usize), Vec<f64>>,
) -> Result<()> {
    let n = grid.grid_cells;
    if out.rank() != 4 || out.dim(2) != n || out.dim(3) != n || batch >= out.dim(0) {
        return Err(Error::Shape(format!("scatter target {:?} for {n}x{n} grid", out.shape())));
    }
    let beta = out.dim(1);
    if features.len() != grid.cells.len() {
        return Err(Error::Invalid(format!(
            "{} features for {} occupied cells",
            features.len(),
            grid.cells.len()
        )));
    }
    for (&(row, col), f) in features {
        if !grid.cells.contains_key(&(row, col)) {
            return Err(Error::Invalid(format!("feature for empty cell ({row}, {col})")));
        }
        if f.len() != beta {
            return Err(Error::Shape(format!("feature of length {} for {beta} channels", f.len())));
        }
        for (c, &v) in f.iter().enumerate() {
            out.set(&[batch, c, row, col], v);
        }
    }
    Ok(())
}

/// Pseudo feature map `[1, beta, N, N]`: occupied cells carry their features, the rest is zero.
pub fn scatter_to_bev(
    grid: &PillarGrid,
    features: &BTreeMap<(usize, usize), Vec<f64>>,
    beta: usize,
    cfg: &GridConfig,
) -> Result<GridTensor> {
    if grid.grid_cells != cfg.grid_cells {
        return Err(Error::Shape("pillar grid does not match grid config".into()));
    }
    let mut out = GridTensor::zeros(&[1, beta, cfg.grid_cells, cfg.grid_cells]);
    scatter_into(&mut out, 0, grid, features)?;
    Ok(out)
}

/// Adjoint of [`scatter_into`]: reads the per-cell gradient vectors of batch slot `batch`.
pub fn gather_from(grad: &GridTensor, batch: usize, grid: &PillarGrid) -> BTreeMap<(usize, usize), Vec<f64>> {
    let beta = grad.dim(1);
    grid.cells
        .keys()
        .map(|&(row, col)| ((row, col), (0..beta).map(|c| grad.get(&[batch, c, row, col])).collect()))
        .collect()
}
