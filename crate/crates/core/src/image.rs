//! Image volumes, trilinear sampling and short finite differences.

use rayon::prelude::*;

use crate::grid::{Dir, GridDesc, GridKind};
use crate::{Error, Real, Result};

/// Scalar intensities on a cell-centered grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<S> {
    grid: GridDesc<S>,
    data: Vec<S>,
}

impl<S: Real> Volume<S> {
    pub fn new(grid: GridDesc<S>, data: Vec<S>) -> Result<Self> {
        if grid.kind != GridKind::CellCentered {
            return Err(Error::InvalidGrid("volumes live on cell-centered grids".into()));
        }
        if data.len() != grid.len() {
            return Err(Error::LengthMismatch {
                expected: grid.len(),
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { grid, data })
    }

    pub fn from_fn(grid: GridDesc<S>, f: impl Fn([S; 3]) -> S) -> Result<Self> {
        let data = (0..grid.len()).map(|i| f(grid.point_coords(i))).collect();
        Self::new(grid, data)
    }

    #[inline]
    pub fn grid(&self) -> &GridDesc<S> {
        &self.grid
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn mean(&self) -> S {
        self.data.iter().copied().sum::<S>() / S::from_usize_lossy(self.data.len())
    }

    /// Trilinear interpolation at a physical point with zero (Dirichlet)
    /// extension outside the sampled region.
    ///
    /// Returns the value and its exact gradient with respect to the point.
    /// The gradient is piecewise constant per cell; on a cell face the lower
    /// cell is used.
    pub fn interpolate(&self, p: [S; 3]) -> (S, [S; 3]) {
        let zero = (S::zero(), [S::zero(); 3]);
        let m = self.grid.m;
        let mut base = [0i64; 3];
        let mut t = [S::zero(); 3];
        for k in 0..3 {
            let s = p[k] / self.grid.h[k] - S::lit(0.5);
            if !s.is_finite() || s <= S::lit(-1.0) || s > S::from_usize_lossy(m[k]) {
                return zero;
            }
            let f = s.ceil() - S::one();
            base[k] = f.to_i64().unwrap_or(-2);
            t[k] = s - f;
        }

        let sample = |dx: i64, dy: i64, dz: i64| -> S {
            let x = base[0] + dx;
            let y = base[1] + dy;
            let z = base[2] + dz;
            if x < 0 || y < 0 || z < 0 {
                return S::zero();
            }
            let (x, y, z) = (x as usize, y as usize, z as usize);
            if x >= m[0] || y >= m[1] || z >= m[2] {
                return S::zero();
            }
            self.data[x + m[0] * (y + m[1] * z)]
        };

        let v000 = sample(0, 0, 0);
        let v100 = sample(1, 0, 0);
        let v010 = sample(0, 1, 0);
        let v110 = sample(1, 1, 0);
        let v001 = sample(0, 0, 1);
        let v101 = sample(1, 0, 1);
        let v011 = sample(0, 1, 1);
        let v111 = sample(1, 1, 1);

        let [tx, ty, tz] = t;
        let one = S::one();
        let (sx, sy, sz) = (one - tx, one - ty, one - tz);

        // Edge interpolants along x, then y, then z.
        let e00 = sx * v000 + tx * v100;
        let e10 = sx * v010 + tx * v110;
        let e01 = sx * v001 + tx * v101;
        let e11 = sx * v011 + tx * v111;
        let f0 = sy * e00 + ty * e10;
        let f1 = sy * e01 + ty * e11;
        let value = sz * f0 + tz * f1;

        let dx = sy * sz * (v100 - v000)
            + ty * sz * (v110 - v010)
            + sy * tz * (v101 - v001)
            + ty * tz * (v111 - v011);
        let dy = sz * (e10 - e00) + tz * (e11 - e01);
        let dz = f1 - f0;

        let h = self.grid.h;
        (value, [dx / h[0], dy / h[1], dz / h[2]])
    }

    /// Samples the volume at `points` (component-major, length `3n`).
    pub fn sample_deformed(&self, points: &[S]) -> SampledTemplate<S> {
        assert_eq!(points.len() % 3, 0, "points must hold 3 components");
        let n = points.len() / 3;
        let mut out = SampledTemplate::zeros(n);
        let [px, py, pz] = &mut out.partials;
        (
            out.values.par_iter_mut(),
            px.par_iter_mut(),
            py.par_iter_mut(),
            pz.par_iter_mut(),
        )
            .into_par_iter()
            .enumerate()
            .with_min_len(1024)
            .for_each(|(i, (v, gx, gy, gz))| {
                let (val, g) = self.interpolate([points[i], points[n + i], points[2 * n + i]]);
                *v = val;
                *gx = g[0];
                *gy = g[1];
                *gz = g[2];
            });
        out
    }

    /// Backward and forward differences at voxel `i`.
    pub fn discrete_gradient(&self, i: usize) -> [S; 6] {
        discrete_gradient(&self.data, &self.grid, i)
    }

    /// Halves every axis by block averaging (odd axes keep a one-cell block
    /// at the upper edge). The physical extent is preserved exactly.
    pub fn downsample(&self) -> Result<Self> {
        let m = self.grid.m;
        if m.iter().any(|&n| n < 2) {
            return Err(Error::Downsample(format!("every axis needs >= 2 cells, got {m:?}")));
        }
        let mc = m.map(|n| n.div_ceil(2));
        let ext = self.grid.extent();
        let hc = [0, 1, 2].map(|k| ext[k] / S::from_usize_lossy(mc[k]));
        let coarse = GridDesc::cell_centered(mc, hc)?;
        let mut data = vec![S::zero(); coarse.len()];
        for (ci, out) in data.iter_mut().enumerate() {
            let [cx, cy, cz] = coarse.decompose(ci);
            let mut acc = S::zero();
            let mut count = 0usize;
            for z in 2 * cz..(2 * cz + 2).min(m[2]) {
                for y in 2 * cy..(2 * cy + 2).min(m[1]) {
                    for x in 2 * cx..(2 * cx + 2).min(m[0]) {
                        acc += self.data[self.grid.linearize(x, y, z)];
                        count += 1;
                    }
                }
            }
            *out = acc / S::from_usize_lossy(count);
        }
        Self::new(coarse, data)
    }
}

/// Template values and interpolation partials at deformed grid points.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledTemplate<S> {
    pub values: Vec<S>,
    /// Derivative of each sample with respect to the x, y, z point coordinate.
    pub partials: [Vec<S>; 3],
}

impl<S: Real> SampledTemplate<S> {
    pub fn zeros(n: usize) -> Self {
        Self {
            values: vec![S::zero(); n],
            partials: [vec![S::zero(); n], vec![S::zero(); n], vec![S::zero(); n]],
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Six-vector `(backward x, y, z, forward x, y, z)` of clamped differences.
#[inline]
pub fn discrete_gradient<S: Real>(data: &[S], grid: &GridDesc<S>, i: usize) -> [S; 6] {
    let v = data[i];
    let h = grid.h;
    [
        (v - data[grid.neighbor(i, Dir::MinusX)]) / h[0],
        (v - data[grid.neighbor(i, Dir::MinusY)]) / h[1],
        (v - data[grid.neighbor(i, Dir::MinusZ)]) / h[2],
        (data[grid.neighbor(i, Dir::PlusX)] - v) / h[0],
        (data[grid.neighbor(i, Dir::PlusY)] - v) / h[1],
        (data[grid.neighbor(i, Dir::PlusZ)] - v) / h[2],
    ]
}

/// `sqrt(<g, g>/2 + eps^2)`, the averaged smoothed gradient norm.
#[inline]
pub fn eps_norm<S: Real>(g: &[S; 6], eps: S) -> S {
    let sq = g.iter().fold(S::zero(), |acc, &x| acc + x * x);
    (S::lit(0.5) * sq + eps * eps).sqrt()
}
