//! Normalized gradient fields distance: value, matrix-free gradient and
//! matrix-free Gauss-Newton Hessian-vector product on the image grid.
//!
//! Per voxel the residual is
//!
//! ```text
//! r_i = (<gT_i, gR_i>/2 + tau*rho) / (|gT_i|_tau * |gR_i|_rho)
//! ```
//!
//! with six-vector short differences `g` and the averaged smoothed norm from
//! [`eps_norm`]. The distance is `hbar * sum(1 - r_i^2)`.
//!
//! Row `i` of the residual Jacobian `dr = dr/dT` has seven entries: column
//! `neighbor(i, k)` holds `rho_hat_i(k)` for `k` in `-z..+z`. Both derivative
//! kernels evaluate these coefficients on the fly from the per-voxel
//! differences, norms and residuals held in [`NgfWorkspace`]; nothing of size
//! `O(m)` is allocated apart from the caller's output.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::grid::{Dir, GridDesc};
use crate::image::{discrete_gradient, eps_norm, SampledTemplate, Volume};
use crate::parallel::chunked_sum;
use crate::{instrument, Error, Real, Result};

const MIN_PAR_LEN: usize = 512;

/// Edge parameters: `tau` for the template, `rho` for the reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NgfParams<S> {
    pub tau: S,
    pub rho: S,
}

impl<S: Real> NgfParams<S> {
    pub fn new(tau: S, rho: S) -> Result<Self> {
        if !(tau > S::zero()) || !(rho > S::zero()) || !tau.is_finite() || !rho.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "edge parameters must be positive, got tau={tau}, rho={rho}"
            )));
        }
        Ok(Self { tau, rho })
    }
}

/// Reference-image data that only changes with the reference or `rho`.
#[derive(Debug, Clone)]
pub struct NgfPrecomp<S> {
    pub ref_grads: Vec<[S; 6]>,
    pub ref_norms: Vec<S>,
    /// `sum_s slot_scale[s] * ref_grads[s]`, the gradient part of the
    /// center coefficient.
    pub ref_center: Vec<S>,
}

impl<S: Real> NgfPrecomp<S> {
    pub fn new(reference: &Volume<S>, params: &NgfParams<S>) -> Self {
        let grid = reference.grid();
        let data = reference.data();
        let ref_grads: Vec<[S; 6]> = (0..grid.len())
            .into_par_iter()
            .with_min_len(MIN_PAR_LEN)
            .map(|i| discrete_gradient(data, grid, i))
            .collect();
        let ref_norms = ref_grads
            .par_iter()
            .with_min_len(MIN_PAR_LEN)
            .map(|g| eps_norm(g, params.rho))
            .collect();
        let ref_center = center_sums(&ref_grads, grid);
        Self {
            ref_grads,
            ref_norms,
            ref_center,
        }
    }
}

/// Everything the derivative kernels need at one deformation iterate.
#[derive(Debug, Clone)]
pub struct NgfWorkspace<S> {
    pub sampled: SampledTemplate<S>,
    pub tpl_grads: Vec<[S; 6]>,
    pub tpl_norms: Vec<S>,
    pub residuals: Vec<S>,
    /// Per-voxel factors of the coefficients: `1/(nT nR)`, `r/nT^2` and the
    /// template counterpart of `ref_center`.
    pub inv_norm_prod: Vec<S>,
    pub scaled_residuals: Vec<S>,
    pub tpl_center: Vec<S>,
}

impl<S: Real> NgfWorkspace<S> {
    /// Samples `template` at `points` (component-major, `3m` long) and
    /// evaluates residuals on `grid`.
    pub fn evaluate(
        template: &Volume<S>,
        points: &[S],
        grid: &GridDesc<S>,
        pre: &NgfPrecomp<S>,
        params: &NgfParams<S>,
    ) -> Self {
        Self::from_sampled(template.sample_deformed(points), grid, pre, params)
    }

    pub fn from_sampled(
        sampled: SampledTemplate<S>,
        grid: &GridDesc<S>,
        pre: &NgfPrecomp<S>,
        params: &NgfParams<S>,
    ) -> Self {
        assert_eq!(sampled.len(), grid.len());
        assert_eq!(pre.ref_grads.len(), grid.len());
        let values = &sampled.values;
        let tpl_grads: Vec<[S; 6]> = (0..grid.len())
            .into_par_iter()
            .with_min_len(MIN_PAR_LEN)
            .map(|i| discrete_gradient(values, grid, i))
            .collect();
        let tpl_norms: Vec<S> = tpl_grads
            .par_iter()
            .with_min_len(MIN_PAR_LEN)
            .map(|g| eps_norm(g, params.tau))
            .collect();
        let shift = params.tau * params.rho;
        let residuals = (0..grid.len())
            .into_par_iter()
            .with_min_len(MIN_PAR_LEN)
            .map(|i| {
                let dot = tpl_grads[i]
                    .iter()
                    .zip(&pre.ref_grads[i])
                    .fold(S::zero(), |acc, (&a, &b)| acc + a * b);
                (S::lit(0.5) * dot + shift) / (tpl_norms[i] * pre.ref_norms[i])
            })
            .collect::<Vec<S>>();
        let inv_norm_prod: Vec<S> = tpl_norms
            .par_iter()
            .zip(&pre.ref_norms)
            .with_min_len(MIN_PAR_LEN)
            .map(|(&nt, &nr)| S::one() / (nt * nr))
            .collect();
        let scaled_residuals = (0..grid.len())
            .into_par_iter()
            .with_min_len(MIN_PAR_LEN)
            .map(|i| {
                let inv_nt = inv_norm_prod[i] * pre.ref_norms[i];
                residuals[i] * inv_nt * inv_nt
            })
            .collect();
        let tpl_center = center_sums(&tpl_grads, grid);
        Self {
            sampled,
            tpl_grads,
            tpl_norms,
            residuals,
            inv_norm_prod,
            scaled_residuals,
            tpl_center,
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.residuals.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.residuals.is_empty()
    }
}

/// `r_i` for voxel `i`.
#[inline]
pub fn ngf_residual<S: Real>(i: usize, ws: &NgfWorkspace<S>) -> S {
    ws.residuals[i]
}

/// `hbar * sum_i (1 - r_i^2)`; bit-identical for any thread count.
pub fn ngf_value<S: Real>(ws: &NgfWorkspace<S>, grid: &GridDesc<S>) -> S {
    let r = &ws.residuals;
    grid.cell_volume() * chunked_sum(r.len(), |i| S::one() - r[i] * r[i])
}

/// Borrowed view that evaluates `rho_hat` coefficients.
struct Coeffs<'a, S> {
    ws: &'a NgfWorkspace<S>,
    pre: &'a NgfPrecomp<S>,
    /// `sign / (2 h_axis)` per six-vector slot.
    slot_scale: [S; 6],
}

impl<'a, S: Real> Coeffs<'a, S> {
    fn new(ws: &'a NgfWorkspace<S>, pre: &'a NgfPrecomp<S>, grid: &GridDesc<S>) -> Self {
        Self {
            ws,
            pre,
            slot_scale: slot_scale(grid),
        }
    }

    #[inline(always)]
    fn row(&self, r: usize) -> Row<'a, S> {
        Row {
            gt: &self.ws.tpl_grads[r],
            gr: &self.pre.ref_grads[r],
            inv_nn: self.ws.inv_norm_prod[r],
            rt: self.ws.scaled_residuals[r],
            ct: self.ws.tpl_center[r],
            cr: self.pre.ref_center[r],
        }
    }

    /// `rho_hat_r(dir)` with the direction given by its gradient slot (6 for
    /// the center).
    ///
    /// For an axis direction the neighbor difference of `R` (resp. `T`) is
    /// `+-h` times the matching short difference, so the coefficient reduces
    /// to a scaled combination of the stored six-vectors; the center is minus
    /// the sum of the six. Clamped directions have zero differences and yield
    /// exactly zero.
    #[inline(always)]
    fn rho_slot(&self, row: &Row<'_, S>, slot: u8) -> S {
        if slot < 6 {
            let s = slot as usize;
            self.slot_scale[s] * (row.gr[s] * row.inv_nn - row.rt * row.gt[s])
        } else {
            row.rt * row.ct - row.cr * row.inv_nn
        }
    }

    /// [`Self::rho_slot`] of row `r` without bounds checks.
    ///
    /// # Safety
    /// `r` must be a voxel index and `slot <= 6`.
    #[inline(always)]
    unsafe fn rho_unchecked(&self, r: usize, slot: u8) -> S {
        let inv_nn = *self.ws.inv_norm_prod.get_unchecked(r);
        let rt = *self.ws.scaled_residuals.get_unchecked(r);
        if slot < 6 {
            let s = slot as usize;
            let gr = *self.pre.ref_grads.get_unchecked(r).get_unchecked(s);
            let gt = *self.ws.tpl_grads.get_unchecked(r).get_unchecked(s);
            *self.slot_scale.get_unchecked(s) * (gr * inv_nn - rt * gt)
        } else {
            rt * *self.ws.tpl_center.get_unchecked(r) - *self.pre.ref_center.get_unchecked(r) * inv_nn
        }
    }

    #[inline(always)]
    fn rho_hat(&self, r: usize, dir: Dir) -> S {
        self.rho_slot(&self.row(r), OPP_SLOT[dir.opposite() as usize])
    }
}

struct Row<'a, S> {
    gt: &'a [S; 6],
    gr: &'a [S; 6],
    inv_nn: S,
    rt: S,
    ct: S,
    cr: S,
}

/// `sign / (2 h_axis)` per six-vector slot.
fn slot_scale<S: Real>(grid: &GridDesc<S>) -> [S; 6] {
    let half = S::lit(0.5);
    let h = grid.h;
    [-half / h[0], -half / h[1], -half / h[2], half / h[0], half / h[1], half / h[2]]
}

fn center_sums<S: Real>(grads: &[[S; 6]], grid: &GridDesc<S>) -> Vec<S> {
    let sc = slot_scale(grid);
    grads
        .par_iter()
        .with_min_len(MIN_PAR_LEN)
        .map(|g| (0..6).fold(S::zero(), |acc, s| acc + sc[s] * g[s]))
        .collect()
}

/// `rho_hat_i(k)`: the entry of row `i` of `dr/dT` belonging to direction `k`
/// (the center entry excludes clamped duplicates, which are zero).
pub fn ngf_rho<S: Real>(
    i: usize,
    k: Dir,
    ws: &NgfWorkspace<S>,
    pre: &NgfPrecomp<S>,
    grid: &GridDesc<S>,
) -> S {
    Coeffs::new(ws, pre, grid).rho_hat(i, k)
}

#[inline(always)]
fn shifted(i: usize, off: isize, n: usize) -> Option<usize> {
    let j = i as isize + off;
    (j >= 0 && (j as usize) < n).then_some(j as usize)
}

/// Partial gradient `dD/dP` (length `3m`) into `out`.
///
/// `out[i + d*m] = -2 hbar (sum_k r_{i+k} rho_hat_{i+k}(-k)) dT_i/dP_d`
/// where `i+k` is the plain linear offset; rows that wrap around a grid edge
/// carry a zero coefficient in direction `-k` and drop out.
pub fn ngf_gradient_into<S: Real>(
    ws: &NgfWorkspace<S>,
    pre: &NgfPrecomp<S>,
    grid: &GridDesc<S>,
    out: &mut [S],
) {
    let n = grid.len();
    assert_eq!(out.len(), 3 * n);
    assert_eq!(ws.len(), n);
    let coeffs = Coeffs::new(ws, pre, grid);
    let offsets = Dir::ALL.map(|d| grid.offset(d));
    let scale = -S::lit(2.0) * grid.cell_volume();
    let [px, py, pz] = &ws.sampled.partials;
    let (gx, rest) = out.split_at_mut(n);
    let (gy, gz) = rest.split_at_mut(n);

    gx.par_chunks_mut(MIN_PAR_LEN)
        .zip(gy.par_chunks_mut(MIN_PAR_LEN))
        .zip(gz.par_chunks_mut(MIN_PAR_LEN))
        .enumerate()
        .for_each(|(c, ((ox, oy), oz))| {
            let lo = c * MIN_PAR_LEN;
            let mut rho_evals = 0u64;
            for (t, i) in (lo..lo + ox.len()).enumerate() {
                let mut sum = S::zero();
                for (kk, &dir) in Dir::ALL.iter().enumerate() {
                    rho_evals += 1;
                    if let Some(j) = shifted(i, offsets[kk], n) {
                        sum += ws.residuals[j] * coeffs.rho_hat(j, dir.opposite());
                    }
                }
                let s = scale * sum;
                ox[t] = s * px[i];
                oy[t] = s * py[i];
                oz[t] = s * pz[i];
            }
            instrument::add_rho(rho_evals);
            instrument::add_grad_dt(ox.len() as u64);
        });
}

pub fn ngf_gradient<S: Real>(ws: &NgfWorkspace<S>, pre: &NgfPrecomp<S>, grid: &GridDesc<S>) -> Vec<S> {
    let mut out = vec![S::zero(); 3 * grid.len()];
    ngf_gradient_into(ws, pre, grid, &mut out);
    out
}

/// Step vector of a direction as `(dx, dy, dz)`.
fn steps(d: Dir) -> [i8; 3] {
    let mut s = [0i8; 3];
    if let Some(axis) = d.axis() {
        s[axis] = d.sign() as i8;
    }
    s
}

/// One nonzero diagonal of `dr^T dr`: column offset `kappa = a - b` and the
/// direction pairs `(a, b)` whose rows contribute to it.
///
/// For column `i` and pair `(a, b)` the shared row is `i + a`; it contributes
/// `rho_hat_{i+a}(-a) * rho_hat_{i+a}(-b)` to `(dr^T dr)_{i, i+kappa}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OffsetEntry {
    /// Symbolic offset in axis steps `(dx, dy, dz)`.
    pub steps: [i8; 3],
    pub pairs: Vec<(Dir, Dir)>,
}

impl OffsetEntry {
    pub fn linear_offset<S: Real>(&self, grid: &GridDesc<S>) -> isize {
        let st = grid.strides();
        (0..3).map(|k| self.steps[k] as isize * st[k] as isize).sum()
    }
}

/// Nonzero diagonals of `dr^T dr` in Hessian-kernel order, from the
/// brute-force pairwise differences of the 7-point stencil offsets.
pub fn offset_table() -> Vec<OffsetEntry> {
    let mut map: BTreeMap<[i8; 3], Vec<(Dir, Dir)>> = BTreeMap::new();
    for a in Dir::ALL {
        for b in Dir::ALL {
            let (sa, sb) = (steps(a), steps(b));
            let key = [sa[0] - sb[0], sa[1] - sb[1], sa[2] - sb[2]];
            map.entry(key).or_default().push((a, b));
        }
    }
    let mut entries: Vec<OffsetEntry> = map
        .into_iter()
        .map(|(steps, pairs)| OffsetEntry { steps, pairs })
        .collect();
    // order of the linear offsets on a large grid: z, then y, then x
    entries.sort_by_key(|e| (e.steps[2], e.steps[1], e.steps[0]));
    entries
}

/// The 25 offsets as `(dx, dy, dz)`, written out by hand.
pub const OFFSETS_REFERENCE: [[i8; 3]; 25] = [
    [0, 0, -2],
    [0, -1, -1],
    [-1, 0, -1],
    [0, 0, -1],
    [1, 0, -1],
    [0, 1, -1],
    [0, -2, 0],
    [-1, -1, 0],
    [0, -1, 0],
    [1, -1, 0],
    [-2, 0, 0],
    [-1, 0, 0],
    [0, 0, 0],
    [1, 0, 0],
    [2, 0, 0],
    [-1, 1, 0],
    [0, 1, 0],
    [1, 1, 0],
    [0, 2, 0],
    [0, -1, 1],
    [-1, 0, 1],
    [0, 0, 1],
    [1, 0, 1],
    [0, 1, 1],
    [0, 0, 2],
];

/// Axis steps of `Dir::ALL`.
const DIR_STEPS: [[i8; 3]; 7] = [[0, 0, -1], [0, -1, 0], [-1, 0, 0], [0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]];

/// Gradient slot of the opposite of each `Dir::ALL` entry (6: center).
const OPP_SLOT: [u8; 7] = [5, 4, 3, 6, 0, 1, 2];

/// [`offset_table`] at compile time: the offsets and, per pair, `(entry,
/// a, b)` as `Dir::ALL` indices, in the same order.
const fn canonical_table() -> ([[i8; 3]; 25], [(u8, u8, u8); 49]) {
    let mut steps = [[0i8; 3]; 25];
    let mut pairs = [(0u8, 0u8, 0u8); 49];
    let (mut e, mut k) = (0usize, 0usize);
    let mut z = -2i8;
    while z <= 2 {
        let mut y = -2i8;
        while y <= 2 {
            let mut x = -2i8;
            while x <= 2 {
                let mut found = false;
                let mut a = 0;
                while a < 7 {
                    let mut b = 0;
                    while b < 7 {
                        let (sa, sb) = (DIR_STEPS[a], DIR_STEPS[b]);
                        if sa[0] - sb[0] == x && sa[1] - sb[1] == y && sa[2] - sb[2] == z {
                            pairs[k] = (e as u8, a as u8, b as u8);
                            k += 1;
                            found = true;
                        }
                        b += 1;
                    }
                    a += 1;
                }
                if found {
                    steps[e] = [x, y, z];
                    e += 1;
                }
                x += 1;
            }
            y += 1;
        }
        z += 1;
    }
    (steps, pairs)
}

const CANONICAL: ([[i8; 3]; 25], [(u8, u8, u8); 49]) = canonical_table();

fn is_canonical(table: &[OffsetEntry]) -> bool {
    let mut flat = CANONICAL.1.iter();
    table.len() == 25
        && table.iter().enumerate().all(|(e, entry)| {
            entry.steps == CANONICAL.0[e]
                && entry.pairs.iter().all(|&(a, b)| {
                    flat.next()
                        .is_some_and(|&(pe, pa, pb)| pe as usize == e && pa == a as u8 && pb == b as u8)
                })
        })
        && flat.next().is_none()
}

/// Matrix-free `q = 2 hbar (dT/dP)^T dr^T dr (dT/dP) p` on the image grid
/// (`p`, `q` of length `3m`). Positive semi-definite.
///
/// For every column `i` and every pair `(a, b)` of the table entry with
/// offset `kappa = a - b`, both coefficients of the shared row `i + a` are
/// evaluated; pairs whose row or column falls off the grid are skipped after
/// counting. Voxels far enough from the ends of the index range take an
/// unrolled path when `table` is [`offset_table`].
pub fn ngf_hessian_vec_into<S: Real>(
    p: &[S],
    ws: &NgfWorkspace<S>,
    pre: &NgfPrecomp<S>,
    grid: &GridDesc<S>,
    table: &[OffsetEntry],
    out: &mut [S],
) {
    let n = grid.len();
    assert_eq!(p.len(), 3 * n);
    assert_eq!(out.len(), 3 * n);
    assert_eq!(ws.len(), n);
    let coeffs = Coeffs::new(ws, pre, grid);
    let dir_off = Dir::ALL.map(|d| grid.offset(d));
    let n_pairs: usize = table.iter().map(|e| e.pairs.len()).sum();
    let kappas: Vec<isize> = table.iter().map(|e| e.linear_offset(grid)).collect();
    let fast = is_canonical(table);
    // voxels in reach..n-reach see every row and column offset in range
    let reach = kappas
        .iter()
        .chain(&dir_off)
        .map(|o| o.unsigned_abs())
        .max()
        .unwrap_or(0);
    let scale = S::lit(2.0) * grid.cell_volume();
    let [px, py, pz] = &ws.sampled.partials;
    let (p0, rest) = p.split_at(n);
    let (p1, p2) = rest.split_at(n);
    let (qx, rest) = out.split_at_mut(n);
    let (qy, qz) = rest.split_at_mut(n);
    let w_at = |j: usize| px[j] * p0[j] + py[j] * p1[j] + pz[j] * p2[j];

    qx.par_chunks_mut(MIN_PAR_LEN)
        .zip(qy.par_chunks_mut(MIN_PAR_LEN))
        .zip(qz.par_chunks_mut(MIN_PAR_LEN))
        .enumerate()
        .for_each(|(c, ((ox, oy), oz))| {
            let lo = c * MIN_PAR_LEN;
            let mut rho_evals = 0u64;
            let mut dt_loads = 0u64;
            for (t, i) in (lo..lo + ox.len()).enumerate() {
                let acc = if fast && i >= reach && i + reach < n {
                    dt_loads += kappas.len() as u64;
                    rho_evals += 2 * n_pairs as u64;
                    // SAFETY: every row offset and kappa is at most `reach`
                    // in magnitude and reach <= i < n - reach.
                    unsafe { interior_column(i, &coeffs, &dir_off, &kappas, &w_at) }
                } else {
                    let mut acc = S::zero();
                    for (entry, &kappa) in table.iter().zip(&kappas) {
                        dt_loads += 1;
                        rho_evals += 2 * entry.pairs.len() as u64;
                        let Some(j) = shifted(i, kappa, n) else {
                            continue;
                        };
                        let mut drdr = S::zero();
                        for &(a, b) in &entry.pairs {
                            if let Some(r) = shifted(i, dir_off[a as usize], n) {
                                let row = coeffs.row(r);
                                drdr += coeffs.rho_slot(&row, OPP_SLOT[a as usize])
                                    * coeffs.rho_slot(&row, OPP_SLOT[b as usize]);
                            }
                        }
                        acc += drdr * w_at(j);
                    }
                    acc
                };
                let s = scale * acc;
                ox[t] = s * px[i];
                oy[t] = s * py[i];
                oz[t] = s * pz[i];
            }
            instrument::add_rho(rho_evals);
            instrument::add_hvp_dt(dt_loads);
        });
}

/// Unrolled column sum over the canonical table; all slots are constants.
///
/// # Safety
/// `i + dir_off[a]` and `i + kappas[e]` must be voxel indices for every
/// direction and entry.
#[inline(always)]
unsafe fn interior_column<S: Real>(
    i: usize,
    coeffs: &Coeffs<'_, S>,
    dir_off: &[isize; 7],
    kappas: &[isize],
    w_at: &impl Fn(usize) -> S,
) -> S {
    let mut drdr = [S::zero(); 25];
    seq_macro::seq!(K in 0..49 {
        {
            const P: (u8, u8, u8) = CANONICAL.1[K];
            let r = i.wrapping_add_signed(*dir_off.get_unchecked(P.1 as usize));
            drdr[P.0 as usize] += coeffs.rho_unchecked(r, OPP_SLOT[P.1 as usize])
                * coeffs.rho_unchecked(r, OPP_SLOT[P.2 as usize]);
        }
    });
    let mut acc = S::zero();
    seq_macro::seq!(E in 0..25 {
        acc += drdr[E] * w_at(i.wrapping_add_signed(*kappas.get_unchecked(E)));
    });
    acc
}

pub fn ngf_hessian_vec<S: Real>(
    p: &[S],
    ws: &NgfWorkspace<S>,
    pre: &NgfPrecomp<S>,
    grid: &GridDesc<S>,
) -> Vec<S> {
    let table = offset_table();
    let mut out = vec![S::zero(); p.len()];
    ngf_hessian_vec_into(p, ws, pre, grid, &table, &mut out);
    out
}
