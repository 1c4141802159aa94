//! Reference implementation of every derivative by explicit sparse matrices.
//!
//! This is the assembled-matrix route: the Jacobian factors of the chain
//! `psi(r(T(P y)))` are stored and multiplied. It shares no coefficient code
//! with the matrix-free kernels: the residual Jacobian is built from its own
//! difference stencils and the transfer weights from physical coordinates.
//! Single-threaded on purpose.

use crate::grid::{GridDesc, GridKind};
use crate::image::{SampledTemplate, Volume};
use crate::ngf::NgfParams;
use crate::{instrument, Error, Real, Result};

/// Sorted, duplicate-free coordinate triplets with a row index.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix<S> {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<S>,
}

impl<S: Real> SparseMatrix<S> {
    /// Sorts the triplets and sums duplicates.
    pub fn from_triplets(nrows: usize, ncols: usize, mut trips: Vec<(usize, usize, S)>) -> Self {
        trips.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; nrows + 1];
        let mut cols = Vec::with_capacity(trips.len());
        let mut vals: Vec<S> = Vec::with_capacity(trips.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in trips {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) out of range");
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..nrows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self {
            nrows,
            ncols,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nrows, self.ncols)
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row_nnz(&self, r: usize) -> usize {
        self.row_ptr[r + 1] - self.row_ptr[r]
    }

    /// `(col, value)` entries of row `r`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, S)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.cols[span.clone()].iter().copied().zip(self.vals[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> S {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        match self.cols[span.clone()].binary_search(&c) {
            Ok(k) => self.vals[span.start + k],
            Err(_) => S::zero(),
        }
    }

    pub fn triplets(&self) -> Vec<(usize, usize, S)> {
        (0..self.nrows)
            .flat_map(|r| self.row(r).map(move |(c, v)| (r, c, v)))
            .collect()
    }

    pub fn transpose(&self) -> Self {
        let t = self.triplets().into_iter().map(|(r, c, v)| (c, r, v)).collect();
        Self::from_triplets(self.ncols, self.nrows, t)
    }

    pub fn matvec(&self, x: &[S]) -> Vec<S> {
        assert_eq!(x.len(), self.ncols);
        (0..self.nrows)
            .map(|r| self.row(r).fold(S::zero(), |acc, (c, v)| acc + v * x[c]))
            .collect()
    }

    /// `self * other`, row by row with a dense accumulator.
    pub fn matmul(&self, other: &SparseMatrix<S>) -> Self {
        assert_eq!(self.ncols, other.nrows);
        let mut acc = vec![S::zero(); other.ncols];
        let mut seen = vec![false; other.ncols];
        let mut touched = Vec::new();
        let mut row_ptr = vec![0usize; self.nrows + 1];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for r in 0..self.nrows {
            for (k, a) in self.row(r) {
                for (c, b) in other.row(k) {
                    if !seen[c] {
                        seen[c] = true;
                        touched.push(c);
                    }
                    acc[c] += a * b;
                }
            }
            touched.sort_unstable();
            for &c in &touched {
                cols.push(c);
                vals.push(acc[c]);
                acc[c] = S::zero();
                seen[c] = false;
            }
            touched.clear();
            row_ptr[r + 1] = cols.len();
        }
        Self {
            nrows: self.nrows,
            ncols: other.ncols,
            row_ptr,
            cols,
            vals,
        }
    }

    /// `diag(A, A, A)`.
    pub fn block_diag3(&self) -> Self {
        let (n, m) = (self.nrows, self.ncols);
        let mut t = Vec::with_capacity(3 * self.nnz());
        for b in 0..3 {
            t.extend(self.triplets().into_iter().map(|(r, c, v)| (r + b * n, c + b * m, v)));
        }
        Self::from_triplets(3 * n, 3 * m, t)
    }

    /// Bytes held by the index and value arrays.
    pub fn heap_bytes(&self) -> usize {
        (self.row_ptr.len() + self.cols.len()) * std::mem::size_of::<usize>()
            + self.vals.len() * std::mem::size_of::<S>()
    }
}

/// Clamped neighbor of `c` along `axis` by `step` (+-1), computed from
/// coordinates.
fn clamp_step(m: [usize; 3], c: [usize; 3], axis: usize, step: isize) -> usize {
    let mut n = c;
    let v = c[axis] as isize + step;
    n[axis] = v.clamp(0, m[axis] as isize - 1) as usize;
    n[0] + m[0] * (n[1] + m[1] * n[2])
}

fn coords(m: [usize; 3], i: usize) -> [usize; 3] {
    [i % m[0], (i / m[0]) % m[1], i / (m[0] * m[1])]
}

/// Six difference rows at voxel `i`: `(backward x,y,z, forward x,y,z)`, each
/// as `(column, weight)` pairs `[(center, _), (neighbor, _)]`.
fn difference_stencil<S: Real>(g: &GridDesc<S>, i: usize) -> [[(usize, S); 2]; 6] {
    let c = coords(g.m, i);
    let mut out = [[(0, S::zero()); 2]; 6];
    for axis in 0..3 {
        let ih = S::one() / g.h[axis];
        out[axis] = [(i, ih), (clamp_step(g.m, c, axis, -1), -ih)];
        out[3 + axis] = [(i, -ih), (clamp_step(g.m, c, axis, 1), ih)];
    }
    out
}

fn differences<S: Real>(data: &[S], g: &GridDesc<S>, i: usize) -> [S; 6] {
    difference_stencil(g, i).map(|row| row.iter().fold(S::zero(), |a, &(j, w)| a + w * data[j]))
}

/// Residuals `r_i` from their definition.
pub fn residuals<S: Real>(reference: &Volume<S>, template: &[S], params: &NgfParams<S>) -> Vec<S> {
    let g = reference.grid();
    (0..g.len())
        .map(|i| {
            let gr = differences(reference.data(), g, i);
            let gt = differences(template, g, i);
            let half = S::lit(0.5);
            let dot: S = (0..6).map(|s| gt[s] * gr[s]).sum();
            let nt = (half * (0..6).map(|s| gt[s] * gt[s]).sum::<S>() + params.tau * params.tau).sqrt();
            let nr = (half * (0..6).map(|s| gr[s] * gr[s]).sum::<S>() + params.rho * params.rho).sqrt();
            (half * dot + params.tau * params.rho) / (nt * nr)
        })
        .collect()
}

/// `dr/dT` (`m x m`).
///
/// With `r = r1/(nT nR)` and `nT = sqrt(|gT|^2/2 + tau^2)`, the derivative
/// is `<c_i, d gT_i / dT>` with `c_i = (gR/(nT nR) - r1 gT/(nT^3 nR))/2`,
/// contracted against the six difference rows. Clamped columns merge.
pub fn assemble_dr<S: Real>(reference: &Volume<S>, template: &[S], params: &NgfParams<S>) -> SparseMatrix<S> {
    let g = reference.grid();
    let n = g.len();
    assert_eq!(template.len(), n);
    let half = S::lit(0.5);
    let mut trips = Vec::with_capacity(12 * n);
    for i in 0..n {
        let gr = differences(reference.data(), g, i);
        let gt = differences(template, g, i);
        let r1 = half * (0..6).map(|s| gt[s] * gr[s]).sum::<S>() + params.tau * params.rho;
        let nt = (half * (0..6).map(|s| gt[s] * gt[s]).sum::<S>() + params.tau * params.tau).sqrt();
        let nr = (half * (0..6).map(|s| gr[s] * gr[s]).sum::<S>() + params.rho * params.rho).sqrt();
        let stencil = difference_stencil(g, i);
        for s in 0..6 {
            let c = half * (gr[s] / (nt * nr) - r1 * gt[s] / (nt * nt * nt * nr));
            for &(j, w) in &stencil[s] {
                trips.push((i, j, c * w));
            }
        }
    }
    let m = SparseMatrix::from_triplets(n, n, trips);
    instrument::add_stores(m.nnz() as u64);
    m
}

/// `dT/dP` (`m x 3m`): three diagonal blocks of template partials.
pub fn assemble_dt<S: Real>(sampled: &SampledTemplate<S>) -> SparseMatrix<S> {
    let n = sampled.len();
    let mut trips = Vec::with_capacity(3 * n);
    for d in 0..3 {
        for i in 0..n {
            trips.push((i, d * n + i, sampled.partials[d][i]));
        }
    }
    let m = SparseMatrix::from_triplets(n, 3 * n, trips);
    instrument::add_stores(m.nnz() as u64);
    m
}

/// One `m x m_y` block of the transfer, weights from physical positions.
pub fn assemble_p_block<S: Real>(def: &GridDesc<S>, img: &GridDesc<S>) -> Result<SparseMatrix<S>> {
    if def.kind != GridKind::Nodal || img.kind != GridKind::CellCentered {
        return Err(Error::Coverage("expected nodal source and cell-centered target".into()));
    }
    let (ms, n) = (def.m, img.len());
    let mut trips = Vec::with_capacity(8 * n);
    for i in 0..n {
        let x = img.point_coords(i);
        let mut lo = [0usize; 3];
        let mut fr = [S::zero(); 3];
        for l in 0..3 {
            let t = x[l] / def.h[l];
            let b = t.floor().to_usize().unwrap_or(0).min(ms[l].saturating_sub(2));
            if ms[l] < 2 || t < S::zero() || t > S::from_usize_lossy(ms[l] - 1) {
                return Err(Error::Coverage(format!("image point {i} outside deformation grid")));
            }
            lo[l] = b;
            fr[l] = t - S::from_usize_lossy(b);
        }
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let w = [dx, dy, dz]
                        .iter()
                        .zip(&fr)
                        .fold(S::one(), |a, (&o, &f)| a * if o == 1 { f } else { S::one() - f });
                    let j = (lo[0] + dx) + ms[0] * ((lo[1] + dy) + ms[1] * (lo[2] + dz));
                    trips.push((i, j, w));
                }
            }
        }
    }
    let m = SparseMatrix::from_triplets(n, def.len(), trips);
    instrument::add_stores(m.nnz() as u64);
    Ok(m)
}

/// Full `3m x 3m_y` transfer matrix.
pub fn assemble_p<S: Real>(def: &GridDesc<S>, img: &GridDesc<S>) -> Result<SparseMatrix<S>> {
    Ok(assemble_p_block(def, img)?.block_diag3())
}

/// Clamped 7-point Laplacian on a nodal grid (`m_y x m_y`).
pub fn assemble_laplacian<S: Real>(g: &GridDesc<S>) -> SparseMatrix<S> {
    let n = g.len();
    let mut trips = Vec::with_capacity(7 * n);
    for i in 0..n {
        let c = coords(g.m, i);
        for axis in 0..3 {
            let ih2 = S::one() / (g.h[axis] * g.h[axis]);
            trips.push((i, clamp_step(g.m, c, axis, -1), ih2));
            trips.push((i, i, -S::lit(2.0) * ih2));
            trips.push((i, clamp_step(g.m, c, axis, 1), ih2));
        }
    }
    let m = SparseMatrix::from_triplets(n, n, trips);
    instrument::add_stores(m.nnz() as u64);
    m
}

/// Assembled factors of the registration objective at one iterate.
#[derive(Debug, Clone)]
pub struct OracleSystem<S> {
    pub dr: SparseMatrix<S>,
    pub dt: SparseMatrix<S>,
    /// One of the three identical transfer blocks.
    pub p_block: SparseMatrix<S>,
    pub laplacian: SparseMatrix<S>,
    /// `dpsi/dr = -2 hbar r`.
    pub dpsi: Vec<S>,
    pub residuals: Vec<S>,
    hbar: S,
    hbar_y: S,
    alpha: S,
}

impl<S: Real> OracleSystem<S> {
    /// `sampled` must be the template sampled at `P y` on the reference grid.
    pub fn assemble(
        reference: &Volume<S>,
        sampled: &SampledTemplate<S>,
        params: &NgfParams<S>,
        def: &GridDesc<S>,
        alpha: S,
    ) -> Result<Self> {
        let img = reference.grid();
        let residuals = residuals(reference, &sampled.values, params);
        let hbar = img.cell_volume();
        let dpsi: Vec<S> = residuals.iter().map(|&r| -S::lit(2.0) * hbar * r).collect();
        instrument::add_stores(dpsi.len() as u64);
        Ok(Self {
            dr: assemble_dr(reference, &sampled.values, params),
            dt: assemble_dt(sampled),
            p_block: assemble_p_block(def, img)?,
            laplacian: assemble_laplacian(def),
            dpsi,
            residuals,
            hbar,
            hbar_y: def.cell_volume(),
            alpha,
        })
    }

    pub fn ngf_value(&self) -> S {
        self.hbar * self.residuals.iter().map(|&r| S::one() - r * r).sum::<S>()
    }

    /// `P y`, per component.
    pub fn transfer(&self, y: &[S]) -> Vec<S> {
        per_component(&self.p_block, y)
    }

    /// `P^T w`, per component.
    pub fn transfer_transpose(&self, w: &[S]) -> Vec<S> {
        per_component(&self.p_block.transpose(), w)
    }

    /// `dD/dP = dT^T dr^T dpsi` on the image grid.
    pub fn ngf_gradient(&self) -> Vec<S> {
        self.dt.transpose().matvec(&self.dr.transpose().matvec(&self.dpsi))
    }

    /// `2 hbar dT^T (dr^T dr) dT p` on the image grid, forming `dr^T dr`.
    pub fn ngf_hvp(&self, p: &[S]) -> Vec<S> {
        let drtdr = self.dr.transpose().matmul(&self.dr);
        let v = drtdr.matvec(&self.dt.matvec(p));
        let two_h = S::lit(2.0) * self.hbar;
        self.dt.transpose().matvec(&v).into_iter().map(|x| two_h * x).collect()
    }

    /// `2 hbar_y B^T B u`, per component.
    pub fn curvature_hvp(&self, u: &[S]) -> Vec<S> {
        let bt = self.laplacian.transpose();
        let two_h = S::lit(2.0) * self.hbar_y;
        per_component(&bt, &per_component(&self.laplacian, u))
            .into_iter()
            .map(|x| two_h * x)
            .collect()
    }

    /// Gradient of `D + alpha S` with respect to `y`, where `u = y - x_y`.
    pub fn gradient(&self, u: &[S]) -> Vec<S> {
        let mut g = self.transfer_transpose(&self.ngf_gradient());
        for (gi, ri) in g.iter_mut().zip(self.curvature_hvp(u)) {
            *gi += self.alpha * ri;
        }
        g
    }

    /// Gauss-Newton Hessian of `D + alpha S` applied to `p`.
    pub fn hvp(&self, p: &[S]) -> Vec<S> {
        let mut q = self.transfer_transpose(&self.ngf_hvp(&self.transfer(p)));
        for (qi, ri) in q.iter_mut().zip(self.curvature_hvp(p)) {
            *qi += self.alpha * ri;
        }
        q
    }
}

fn per_component<S: Real>(block: &SparseMatrix<S>, x: &[S]) -> Vec<S> {
    let n = block.shape().1;
    assert_eq!(x.len(), 3 * n);
    x.chunks(n).flat_map(|c| block.matvec(c)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense(m: &SparseMatrix<f64>) -> Vec<Vec<f64>> {
        let (r, c) = m.shape();
        let mut d = vec![vec![0.0; c]; r];
        for (i, j, v) in m.triplets() {
            d[i][j] = v;
        }
        d
    }

    fn random_sparse(r: usize, c: usize, seed: u64) -> SparseMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = (0..3 * r)
            .map(|_| (rng.gen_range(0..r), rng.gen_range(0..c), rng.gen_range(-1.0..1.0)))
            .collect();
        SparseMatrix::from_triplets(r, c, t)
    }

    #[test]
    fn triplets_merge_and_sort() {
        let m = SparseMatrix::from_triplets(2, 3, vec![(1, 2, 1.0), (0, 1, 2.0), (1, 2, 3.0), (1, 0, -1.0)]);
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.get(1, 2), 4.0);
        assert_eq!(m.get(0, 0), 0.0);
        assert_eq!(m.triplets(), vec![(0, 1, 2.0), (1, 0, -1.0), (1, 2, 4.0)]);
        assert_eq!(m.matvec(&[1.0, 1.0, 1.0]), vec![2.0, 3.0]);
    }

    #[test]
    fn products_match_dense_arithmetic() {
        let a = random_sparse(5, 4, 1);
        let b = random_sparse(4, 6, 2);
        let (da, db) = (dense(&a), dense(&b));
        let c = dense(&a.matmul(&b));
        for i in 0..5 {
            for j in 0..6 {
                let want: f64 = (0..4).map(|k| da[i][k] * db[k][j]).sum();
                assert!((c[i][j] - want).abs() < 1e-14);
            }
        }
        let t = dense(&a.transpose());
        for i in 0..5 {
            for j in 0..4 {
                assert_eq!(t[j][i], da[i][j]);
            }
        }
        let bd = a.block_diag3();
        assert_eq!(bd.shape(), (15, 12));
        assert_eq!(bd.get(7, 5), a.get(2, 1));
        assert_eq!(bd.get(7, 1), 0.0);
    }

    #[test]
    fn laplacian_structure() {
        let g = GridDesc::new([5, 5, 6], [1.0, 0.5, 2.0], GridKind::Nodal).unwrap();
        let b = assemble_laplacian(&g);
        assert!(b.matvec(&vec![3.0f64; g.len()]).iter().all(|v| v.abs() < 1e-12));
        assert_eq!(b.transpose(), b);
        let btb = b.transpose().matmul(&b);
        assert!((0..g.len()).all(|r| btb.row_nnz(r) <= 25));
        assert!((0..g.len()).any(|r| btb.row_nnz(r) == 25));
    }

    #[test]
    fn transfer_rows_sum_to_one() {
        let img = GridDesc::cell_centered([6, 5, 4], [1.0, 1.2, 0.8]).unwrap();
        let def = img.nodal_for_image([4, 3, 3]).unwrap();
        let p = assemble_p(&def, &img).unwrap();
        assert_eq!(p.shape(), (3 * img.len(), 3 * def.len()));
        for r in 0..p.shape().0 {
            assert_eq!(p.row_nnz(r), 8);
            let s: f64 = p.row(r).map(|(_, v)| v).sum();
            assert!((s - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn constant_images_have_zero_jacobian() {
        let g = GridDesc::cell_centered([4, 4, 4], [1.0; 3]).unwrap();
        let r = Volume::new(g.clone(), vec![2.0; 64]).unwrap();
        let p = NgfParams::new(1.0, 1.0).unwrap();
        let dr = assemble_dr(&r, &[5.0; 64], &p);
        assert!(dr.triplets().iter().all(|t| t.2 == 0.0));
        assert!((0..64).all(|i| dr.row_nnz(i) <= 7));
    }

    #[test]
    fn dr_matches_finite_differences() {
        let g = GridDesc::cell_centered([4, 3, 3], [1.0, 0.8, 1.3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = Volume::new(g.clone(), (0..g.len()).map(|_| rng.gen_range(0.0..5.0)).collect()).unwrap();
        let t: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(0.0..5.0)).collect();
        let p = NgfParams::new(0.7, 1.1).unwrap();
        let dr = assemble_dr(&r, &t, &p);
        let eps = 1e-6;
        for j in [0, 5, 17, g.len() - 1] {
            let mut tp = t.clone();
            tp[j] += eps;
            let mut tm = t.clone();
            tm[j] -= eps;
            let (rp, rm) = (residuals(&r, &tp, &p), residuals(&r, &tm, &p));
            for i in 0..g.len() {
                let fd = (rp[i] - rm[i]) / (2.0 * eps);
                assert!((fd - dr.get(i, j)).abs() < 1e-8, "({i},{j}) fd {fd} vs {}", dr.get(i, j));
            }
        }
    }
}
