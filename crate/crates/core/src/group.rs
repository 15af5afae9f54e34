//! The rotation group C4, the roto-translation group P4, and their actions on grids.
//!
//! Index convention: a spatial index is `(y, x)` = `(row, col)`, and the generator
//! `r = 1` sends `(y, x)` to `(W-1-x, y)`. Rows of a BEV grid grow with world `y`, so
//! on the ground plane this generator is a quarter turn by -90 degrees.
//! [`SCENE_QUARTER_TURN`] names the grid rotation that matches a +90 degree
//! (counter-clockwise) scene rotation; every module uses it for that correspondence.

use std::f64::consts::FRAC_PI_2;
use std::ops::Mul;

use crate::error::{Error, Result};
use crate::tensor::GridTensor;

/// Element of C4: `r` quarter turns of the grid generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct RotationC4(u8);

/// Grid rotation equal to rotating the scene by +90 degrees about the grid center.
pub const SCENE_QUARTER_TURN: RotationC4 = RotationC4(3);

impl RotationC4 {
    pub const IDENTITY: Self = Self(0);

    pub fn new(r: i64) -> Self {
        Self(r.rem_euclid(4) as u8)
    }

    pub fn all() -> [Self; 4] {
        [Self(0), Self(1), Self(2), Self(3)]
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn inverse(self) -> Self {
        Self((4 - self.0) % 4)
    }

    /// Scene rotation angle (radians, counter-clockwise) that this grid rotation realises.
    pub fn scene_angle(self) -> f64 {
        -(self.0 as f64) * FRAC_PI_2
    }

    /// Grid rotation for a scene rotation of `quarter_turns * 90` degrees.
    pub fn from_scene_quarter_turns(quarter_turns: i64) -> Self {
        Self::new(-quarter_turns)
    }

    /// Rotation of a centered index-space vector `(dy, dx)`.
    pub fn rotate_vector(self, (dy, dx): (i64, i64)) -> (i64, i64) {
        match self.0 {
            0 => (dy, dx),
            1 => (-dx, dy),
            2 => (-dy, -dx),
            _ => (dx, -dy),
        }
    }
}

impl Mul for RotationC4 {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        Self((self.0 + rhs.0) % 4)
    }
}

/// Element `(t, r)` of P4 acting on `Z^2` as `p -> r p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct GroupElementP4 {
    pub t: (i64, i64),
    pub r: RotationC4,
}

impl GroupElementP4 {
    pub const IDENTITY: Self = Self { t: (0, 0), r: RotationC4::IDENTITY };

    pub fn new(t: (i64, i64), r: RotationC4) -> Self {
        Self { t, r }
    }

    pub fn inverse(self) -> Self {
        let ri = self.r.inverse();
        let (ty, tx) = ri.rotate_vector(self.t);
        Self { t: (-ty, -tx), r: ri }
    }

    pub fn act(self, p: (i64, i64)) -> (i64, i64) {
        let (y, x) = self.r.rotate_vector(p);
        (y + self.t.0, x + self.t.1)
    }
}

impl Mul for GroupElementP4 {
    type Output = Self;
    /// Semidirect product `(t1, r1)(t2, r2) = (t1 + r1 t2, r1 r2)`.
    fn mul(self, rhs: Self) -> Self {
        let (y, x) = self.r.rotate_vector(rhs.t);
        Self { t: (self.t.0 + y, self.t.1 + x), r: self.r * rhs.r }
    }
}

/// Image of grid index `(y, x)` under `r` on an `H x W` grid (requires `H == W`).
pub fn act_on_index(r: RotationC4, (y, x): (usize, usize), (h, w): (usize, usize)) -> Result<(usize, usize)> {
    if h != w {
        return Err(Error::NonSquare(h, w));
    }
    if y >= h || x >= w {
        return Err(Error::Invalid(format!("index ({y}, {x}) outside {h}x{w}")));
    }
    Ok(act_unchecked(r, y, x, w))
}

#[inline]
fn act_unchecked(r: RotationC4, y: usize, x: usize, n: usize) -> (usize, usize) {
    match r.0 {
        0 => (y, x),
        1 => (n - 1 - x, y),
        2 => (n - 1 - y, n - 1 - x),
        _ => (x, n - 1 - y),
    }
}

fn square_extent(x: &GridTensor, min_rank: usize) -> Result<usize> {
    if x.rank() < min_rank {
        return Err(Error::Shape(format!("rank {} < {min_rank}", x.rank())));
    }
    let (h, w) = (x.dim(x.rank() - 2), x.dim(x.rank() - 1));
    if h != w {
        return Err(Error::NonSquare(h, w));
    }
    Ok(h)
}

pub(crate) fn rotate_plane(src: &[f64], dst: &mut [f64], n: usize, r: RotationC4) {
    for y in 0..n {
        for x in 0..n {
            let (yy, xx) = act_unchecked(r, y, x, n);
            dst[yy * n + xx] = src[y * n + x];
        }
    }
}

/// Rotates the two trailing (spatial) axes: `out[.., act(r, (y, x))] = in[.., (y, x)]`.
pub fn rotate_planar(x: &GridTensor, r: RotationC4) -> Result<GridTensor> {
    let n = square_extent(x, 2)?;
    let mut out = GridTensor::zeros(x.shape());
    for (src, dst) in x.data().chunks(n * n).zip(out.data_mut().chunks_mut(n * n)) {
        rotate_plane(src, dst, n, r);
    }
    Ok(out)
}

/// Action on P4 features `[.., S=4, Y, X]`: rotate each slice and shift the group axis,
/// `out[.., s, act(r, p)] = in[.., s - r, p]`.
pub fn rotate_p4(x: &GridTensor, r: RotationC4) -> Result<GridTensor> {
    let n = square_extent(x, 3)?;
    let s_axis = x.rank() - 3;
    if x.dim(s_axis) != 4 {
        return Err(Error::Shape(format!("group axis has length {}, expected 4", x.dim(s_axis))));
    }
    let plane = n * n;
    let mut out = GridTensor::zeros(x.shape());
    for (src, dst) in x.data().chunks(4 * plane).zip(out.data_mut().chunks_mut(4 * plane)) {
        for s in 0..4 {
            let from = (s + 4 - r.index()) % 4;
            rotate_plane(&src[from * plane..(from + 1) * plane], &mut dst[s * plane..(s + 1) * plane], n, r);
        }
    }
    Ok(out)
}

/// Rotates the spatial `K x K` footprint of a kernel about its center (`K` odd).
pub fn rotate_kernel(k: &GridTensor, r: RotationC4) -> Result<GridTensor> {
    let n = square_extent(k, 2)?;
    if n % 2 == 0 {
        return Err(Error::EvenKernel(n));
    }
    rotate_planar(k, r)
}
