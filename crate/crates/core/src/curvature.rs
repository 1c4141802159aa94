//! Curvature regularizer `S(u) = hbar_y * sum |Lap u|^2` on the nodal grid.
//!
//! The clamped 7-point Laplacian is symmetric, so the gradient and the exact
//! Hessian-vector product are two Laplacian passes: `2 hbar_y Lap(Lap p)`.

use rayon::prelude::*;

use crate::grid::{Dir, GridDesc, GridKind};
use crate::parallel::chunked_sum;
use crate::{Error, Real, Result};

const MIN_PAR_LEN: usize = 1024;

/// Deformation `y` (component-major, `3 m_y` long) on a nodal grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField<S> {
    grid: GridDesc<S>,
    y: Vec<S>,
}

impl<S: Real> DeformationField<S> {
    pub fn new(grid: GridDesc<S>, y: Vec<S>) -> Result<Self> {
        if grid.kind != GridKind::Nodal {
            return Err(Error::InvalidGrid("deformation grid must be nodal".into()));
        }
        if y.len() != 3 * grid.len() {
            return Err(Error::LengthMismatch {
                expected: 3 * grid.len(),
                actual: y.len(),
            });
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { grid, y })
    }

    pub fn identity(grid: GridDesc<S>) -> Result<Self> {
        let y = grid.coordinates();
        Self::new(grid, y)
    }

    pub fn from_displacement(grid: GridDesc<S>, u: &Displacement<S>) -> Result<Self> {
        let mut y = grid.coordinates();
        if u.u.len() != y.len() {
            return Err(Error::LengthMismatch {
                expected: y.len(),
                actual: u.u.len(),
            });
        }
        for (yi, &ui) in y.iter_mut().zip(&u.u) {
            *yi += ui;
        }
        Self::new(grid, y)
    }

    pub fn grid(&self) -> &GridDesc<S> {
        &self.grid
    }

    pub fn y(&self) -> &[S] {
        &self.y
    }

    pub fn into_y(self) -> Vec<S> {
        self.y
    }

    /// `phi(p)` by trilinear interpolation of `y`; points outside the box
    /// use the nearest boundary cell (linear extrapolation).
    pub fn evaluate(&self, p: [S; 3]) -> [S; 3] {
        let g = &self.grid;
        let n = g.len();
        let mut base = [0usize; 3];
        let mut frac = [S::zero(); 3];
        for l in 0..3 {
            let t = p[l] / g.h[l];
            let top = g.m[l].saturating_sub(2);
            let b = t.floor().max(S::zero()).to_usize().unwrap_or(0).min(top);
            base[l] = b;
            frac[l] = if g.m[l] == 1 { S::zero() } else { t - S::from_usize_lossy(b) };
        }
        let mut out = [S::zero(); 3];
        for c in 0..8 {
            let o = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
            if (0..3).any(|l| o[l] == 1 && g.m[l] == 1) {
                continue;
            }
            let w = (0..3).fold(S::one(), |acc, l| {
                acc * if o[l] == 1 { frac[l] } else { S::one() - frac[l] }
            });
            let j = g.linearize(base[0] + o[0], base[1] + o[1], base[2] + o[2]);
            for d in 0..3 {
                out[d] += w * self.y[d * n + j];
            }
        }
        out
    }

    pub fn displacement(&self) -> Displacement<S> {
        let x = self.grid.coordinates();
        Displacement {
            u: self.y.iter().zip(&x).map(|(&a, &b)| a - b).collect(),
        }
    }
}

/// `u = y - x_y`.
#[derive(Debug, Clone, PartialEq)]
pub struct Displacement<S> {
    pub u: Vec<S>,
}

/// Clamped 7-point Laplacian of one component at node `i`.
#[inline]
pub fn laplacian<S: Real>(u: &[S], g: &GridDesc<S>, i: usize) -> S {
    let inv_h2 = g.h.map(|h| S::one() / (h * h));
    laplacian_at(u, g, i, &inv_h2)
}

#[inline(always)]
fn laplacian_at<S: Real>(u: &[S], g: &GridDesc<S>, i: usize, inv_h2: &[S; 3]) -> S {
    let c = u[i];
    let two = S::lit(2.0);
    let mut acc = S::zero();
    for (axis, (lo, hi)) in [
        (Dir::MinusX, Dir::PlusX),
        (Dir::MinusY, Dir::PlusY),
        (Dir::MinusZ, Dir::PlusZ),
    ]
    .into_iter()
    .enumerate()
    {
        let a = u[g.neighbor(i, lo)];
        let b = u[g.neighbor(i, hi)];
        acc += (a - two * c + b) * inv_h2[axis];
    }
    acc
}

/// Laplacian of every component of `u` (length `3 m_y`) into `out`.
pub fn laplacian_all<S: Real>(u: &[S], g: &GridDesc<S>, out: &mut [S]) {
    let n = g.len();
    assert_eq!(u.len(), 3 * n);
    assert_eq!(out.len(), 3 * n);
    let inv_h2 = g.h.map(|h| S::one() / (h * h));
    out.par_chunks_mut(n).zip(u.par_chunks(n)).for_each(|(o, c)| {
        o.par_iter_mut()
            .with_min_len(MIN_PAR_LEN)
            .enumerate()
            .for_each(|(i, v)| *v = laplacian_at(c, g, i, &inv_h2));
    });
}

/// `hbar_y * sum_i sum_d (Lap u)^2`.
pub fn curvature_value<S: Real>(u: &[S], g: &GridDesc<S>) -> S {
    let mut lap = vec![S::zero(); u.len()];
    laplacian_all(u, g, &mut lap);
    g.cell_volume() * chunked_sum(lap.len(), |i| lap[i] * lap[i])
}

/// `2 hbar_y Lap(Lap p)` into `out`, using `tmp` (length `3 m_y`) as scratch.
pub fn curvature_hessian_vec_into<S: Real>(p: &[S], g: &GridDesc<S>, tmp: &mut [S], out: &mut [S]) {
    laplacian_all(p, g, tmp);
    laplacian_all(tmp, g, out);
    let s = S::lit(2.0) * g.cell_volume();
    out.par_iter_mut().with_min_len(MIN_PAR_LEN).for_each(|v| *v *= s);
}

pub fn curvature_hessian_vec<S: Real>(p: &[S], g: &GridDesc<S>) -> Vec<S> {
    let mut tmp = vec![S::zero(); p.len()];
    let mut out = vec![S::zero(); p.len()];
    curvature_hessian_vec_into(p, g, &mut tmp, &mut out);
    out
}

/// The regularizer is quadratic, so its gradient is the Hessian applied to `u`.
pub fn curvature_gradient<S: Real>(u: &[S], g: &GridDesc<S>) -> Vec<S> {
    curvature_hessian_vec(u, g)
}
