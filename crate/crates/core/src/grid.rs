//! Grid descriptors and lexicographic index arithmetic.
//!
//! Linear index `i = x + y*m_x + z*m_x*m_y`, 0-based. Neighbor lookups clamp
//! at the domain boundary, which realizes homogeneous Neumann conditions for
//! every finite-difference stencil built on top of them.

use crate::{Error, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GridKind {
    /// Points at cell centers `((x+1/2)h_x, ...)`; used for images.
    CellCentered,
    /// Points at cell corners `(x*h_x, ...)`; used for the deformation.
    Nodal,
}

/// Axis direction used by the 7-point stencils.
///
/// Discriminants follow the order `-z, -y, -x, 0, +x, +y, +z`, so
/// `Dir::ALL[d as usize] == d` and the opposite direction of `d` is `6 - d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Dir {
    MinusZ = 0,
    MinusY = 1,
    MinusX = 2,
    Center = 3,
    PlusX = 4,
    PlusY = 5,
    PlusZ = 6,
}

impl Dir {
    pub const ALL: [Dir; 7] = [
        Dir::MinusZ,
        Dir::MinusY,
        Dir::MinusX,
        Dir::Center,
        Dir::PlusX,
        Dir::PlusY,
        Dir::PlusZ,
    ];

    /// The six non-center directions.
    pub const AXES: [Dir; 6] = [
        Dir::MinusZ,
        Dir::MinusY,
        Dir::MinusX,
        Dir::PlusX,
        Dir::PlusY,
        Dir::PlusZ,
    ];

    #[inline]
    pub fn opposite(self) -> Dir {
        Dir::ALL[6 - self as usize]
    }

    /// Axis (0 = x, 1 = y, 2 = z), `None` for the center.
    #[inline]
    pub fn axis(self) -> Option<usize> {
        match self {
            Dir::MinusX | Dir::PlusX => Some(0),
            Dir::MinusY | Dir::PlusY => Some(1),
            Dir::MinusZ | Dir::PlusZ => Some(2),
            Dir::Center => None,
        }
    }

    /// +1 for forward, -1 for backward, 0 for the center.
    #[inline]
    pub fn sign(self) -> i64 {
        (self as i64 - 3).signum()
    }

    /// Slot of this direction in a six-vector `(backward x,y,z, forward x,y,z)`.
    #[inline]
    pub fn gradient_slot(self) -> Option<usize> {
        let axis = self.axis()?;
        Some(if self.sign() < 0 { axis } else { 3 + axis })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridDesc<S> {
    pub m: [usize; 3],
    pub h: [S; 3],
    pub kind: GridKind,
}

impl<S: Real> GridDesc<S> {
    pub fn new(m: [usize; 3], h: [S; 3], kind: GridKind) -> Result<Self> {
        if m.contains(&0) {
            return Err(Error::InvalidGrid(format!("point counts must be >= 1, got {m:?}")));
        }
        if h.iter().any(|&s| !(s > S::zero()) || !s.is_finite()) {
            return Err(Error::InvalidGrid(format!("spacings must be positive, got {h:?}")));
        }
        Ok(Self { m, h, kind })
    }

    pub fn cell_centered(m: [usize; 3], h: [S; 3]) -> Result<Self> {
        Self::new(m, h, GridKind::CellCentered)
    }

    /// Nodal grid with `points` nodes per axis spanning `extent`.
    pub fn nodal_with_extent(points: [usize; 3], extent: [S; 3]) -> Result<Self> {
        if points.iter().any(|&n| n < 2) {
            return Err(Error::InvalidGrid(format!(
                "nodal grids need at least 2 points per axis, got {points:?}"
            )));
        }
        let h = [0, 1, 2].map(|k| extent[k] / S::from_usize_lossy(points[k] - 1));
        Self::new(points, h, GridKind::Nodal)
    }

    /// Nodal deformation grid covering the same extent as this image grid.
    ///
    /// Enforces `points_k - 1 <= m_k` so the image grid is at least as fine.
    pub fn nodal_for_image(&self, points: [usize; 3]) -> Result<Self> {
        if self.kind != GridKind::CellCentered {
            return Err(Error::InvalidGrid("image grid must be cell-centered".into()));
        }
        for k in 0..3 {
            if points[k] < 2 || points[k] - 1 > self.m[k] {
                return Err(Error::InvalidGrid(format!(
                    "deformation grid {points:?} incompatible with image grid {:?}",
                    self.m
                )));
            }
        }
        Self::nodal_with_extent(points, self.extent())
    }

    /// Total number of points `m_x*m_y*m_z`.
    #[inline]
    pub fn len(&self) -> usize {
        self.m[0] * self.m[1] * self.m[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn cell_volume(&self) -> S {
        self.h[0] * self.h[1] * self.h[2]
    }

    /// Physical extent of the domain per axis.
    pub fn extent(&self) -> [S; 3] {
        [0, 1, 2].map(|k| match self.kind {
            GridKind::CellCentered => S::from_usize_lossy(self.m[k]) * self.h[k],
            GridKind::Nodal => S::from_usize_lossy(self.m[k] - 1) * self.h[k],
        })
    }

    #[inline]
    pub fn min_spacing(&self) -> S {
        self.h[0].min(self.h[1]).min(self.h[2])
    }

    /// Linear stride of one step along each axis.
    #[inline]
    pub fn strides(&self) -> [usize; 3] {
        [1, self.m[0], self.m[0] * self.m[1]]
    }

    #[inline]
    pub fn linearize(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.m[0] && y < self.m[1] && z < self.m[2]);
        x + self.m[0] * (y + self.m[1] * z)
    }

    #[inline]
    pub fn decompose(&self, i: usize) -> [usize; 3] {
        debug_assert!(i < self.len());
        let x = i % self.m[0];
        let yz = i / self.m[0];
        [x, yz % self.m[1], yz / self.m[1]]
    }

    /// Clamped neighbor of `i` in direction `dir`.
    #[inline]
    pub fn neighbor(&self, i: usize, dir: Dir) -> usize {
        let Some(axis) = dir.axis() else {
            return i;
        };
        let c = self.decompose(i)[axis];
        let stride = self.strides()[axis];
        if dir.sign() < 0 {
            if c == 0 {
                i
            } else {
                i - stride
            }
        } else if c + 1 == self.m[axis] {
            i
        } else {
            i + stride
        }
    }

    /// Signed linear offset of a direction, without clamping.
    #[inline]
    pub fn offset(&self, dir: Dir) -> isize {
        match dir.axis() {
            None => 0,
            Some(axis) => dir.sign() as isize * self.strides()[axis] as isize,
        }
    }

    /// Physical coordinate of grid point `idx` along `axis`.
    #[inline]
    pub fn coord(&self, axis: usize, idx: usize) -> S {
        let n = S::from_usize_lossy(idx);
        match self.kind {
            GridKind::CellCentered => (n + S::lit(0.5)) * self.h[axis],
            GridKind::Nodal => n * self.h[axis],
        }
    }

    pub fn point_coords(&self, i: usize) -> [S; 3] {
        let c = self.decompose(i);
        [0, 1, 2].map(|k| self.coord(k, c[k]))
    }

    /// All point coordinates in component-major layout (all x, all y, all z).
    pub fn coordinates(&self) -> Vec<S> {
        let n = self.len();
        let mut out = vec![S::zero(); 3 * n];
        for i in 0..n {
            let p = self.point_coords(i);
            for d in 0..3 {
                out[d * n + i] = p[d];
            }
        }
        out
    }

    /// True when both grids describe the same physical box within `rel_tol`.
    pub fn same_extent(&self, other: &GridDesc<S>, rel_tol: S) -> bool {
        let a = self.extent();
        let b = other.extent();
        (0..3).all(|k| (a[k] - b[k]).abs() <= rel_tol * a[k].abs().max(b[k].abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn g322() -> GridDesc<f64> {
        GridDesc::cell_centered([3, 2, 2], [1.0; 3]).unwrap()
    }

    #[test]
    fn neighbor_examples() {
        let g = g322();
        assert_eq!(g.neighbor(0, Dir::MinusX), 0);
        assert_eq!(g.linearize(2, 1, 1), 11);
        assert_eq!(g.neighbor(11, Dir::PlusX), 11);
        assert_eq!(g.neighbor(1, Dir::PlusY), 4);
        assert_eq!(g.neighbor(7, Dir::Center), 7);
    }

    #[test]
    fn point_coord_examples() {
        let g = GridDesc::cell_centered([2, 2, 2], [1.0; 3]).unwrap();
        assert_eq!(g.point_coords(0), [0.5; 3]);
        assert_eq!(g.point_coords(7), [1.5; 3]);
        let n = GridDesc::new([3, 3, 3], [2.0; 3], GridKind::Nodal).unwrap();
        assert_eq!(n.point_coords(n.linearize(1, 0, 0)), [2.0, 0.0, 0.0]);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(GridDesc::<f64>::cell_centered([0, 2, 2], [1.0; 3]).is_err());
        assert!(GridDesc::<f64>::cell_centered([2, 2, 2], [1.0, -1.0, 1.0]).is_err());
        let img = GridDesc::<f64>::cell_centered([4, 4, 4], [1.0; 3]).unwrap();
        assert!(img.nodal_for_image([6, 3, 3]).is_err());
        assert!(img.nodal_for_image([1, 3, 3]).is_err());
        let nod = img.nodal_for_image([5, 3, 2]).unwrap();
        assert_eq!(nod.h, [1.0, 2.0, 4.0]);
        assert!(nod.same_extent(&img, 1e-12));
    }

    #[test]
    fn dir_helpers() {
        for d in Dir::ALL {
            assert_eq!(d.opposite().opposite(), d);
        }
        assert_eq!(Dir::MinusX.gradient_slot(), Some(0));
        assert_eq!(Dir::PlusZ.gradient_slot(), Some(5));
        assert_eq!(Dir::Center.gradient_slot(), None);
        let g = g322();
        assert_eq!(g.offset(Dir::MinusZ), -6);
        assert_eq!(g.offset(Dir::PlusY), 3);
    }

    proptest! {
        #[test]
        fn roundtrip_and_interior_offsets(mx in 1usize..6, my in 1usize..6, mz in 1usize..6, seed in 0usize..1000) {
            let g = GridDesc::<f64>::cell_centered([mx, my, mz], [1.0; 3]).unwrap();
            let i = seed % g.len();
            let [x, y, z] = g.decompose(i);
            prop_assert_eq!(g.linearize(x, y, z), i);
            for d in Dir::ALL {
                let n = g.neighbor(i, d);
                // clamping is idempotent at the boundary
                if n == i {
                    prop_assert_eq!(g.neighbor(n, d), n);
                } else {
                    prop_assert_eq!(n as isize - i as isize, g.offset(d));
                }
            }
            if x > 0 && x + 1 < mx { prop_assert_eq!(g.neighbor(i, Dir::PlusX) - i, 1); }
            if y > 0 && y + 1 < my { prop_assert_eq!(g.neighbor(i, Dir::PlusY) - i, mx); }
            if z > 0 && z + 1 < mz { prop_assert_eq!(g.neighbor(i, Dir::PlusZ) - i, mx * my); }
        }
    }
}
