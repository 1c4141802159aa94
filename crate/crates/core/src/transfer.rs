//! Trilinear transfer `P` from the nodal deformation grid to the
//! cell-centered image grid, and its transpose.
//!
//! Both grids span the same box, so image index `k` along an axis sits at
//! continuous nodal index `c(k) = (k + 1/2)(m_y - 1)/m`. Every image point
//! lies strictly inside a deformation cell and touches its 8 corners.
//!
//! The transpose scatters into nodes. To keep it race-free without atomics,
//! z-slabs of deformation cells are processed in two phases (odd slabs, then
//! even slabs); slabs within one phase share no node plane.

use rayon::prelude::*;

use crate::grid::{GridDesc, GridKind};
use crate::{Error, Real, Result};

const MIN_PAR_LEN: usize = 1024;

#[derive(Debug, Clone)]
pub struct TransferPlan<S> {
    source: GridDesc<S>,
    target: GridDesc<S>,
    /// Lower corner node per target index, per axis.
    base: [Vec<usize>; 3],
    /// Fractional position inside the cell, in `[0, 1)`.
    rem: [Vec<S>; 3],
    /// Image z-range `[lo, hi)` falling into each deformation z-slab.
    slab_ranges: Vec<(usize, usize)>,
}

impl<S: Real> TransferPlan<S> {
    pub fn new(source: &GridDesc<S>, target: &GridDesc<S>) -> Result<Self> {
        if source.kind != GridKind::Nodal || target.kind != GridKind::CellCentered {
            return Err(Error::Coverage(
                "source must be nodal and target cell-centered".into(),
            ));
        }
        if !source.same_extent(target, S::lit(1e-9)) {
            return Err(Error::ExtentMismatch(format!(
                "deformation extent {:?} vs image extent {:?}",
                source.extent(),
                target.extent()
            )));
        }
        let mut base: [Vec<usize>; 3] = Default::default();
        let mut rem: [Vec<S>; 3] = Default::default();
        for l in 0..3 {
            let (ms, mt) = (source.m[l], target.m[l]);
            if ms < 2 || ms - 1 > mt {
                return Err(Error::Coverage(format!(
                    "axis {l}: {ms} nodes cannot cover {mt} image points"
                )));
            }
            let ratio = S::from_usize_lossy(ms - 1) / S::from_usize_lossy(mt);
            for k in 0..mt {
                let c = (S::from_usize_lossy(k) + S::lit(0.5)) * ratio;
                let b = c.floor().to_usize().unwrap_or(0).min(ms - 2);
                let r = c - S::from_usize_lossy(b);
                if !(r >= S::zero() && r < S::one()) {
                    return Err(Error::Coverage(format!("axis {l}, index {k}: weight {r}")));
                }
                base[l].push(b);
                rem[l].push(r);
            }
        }
        let slabs = source.m[2] - 1;
        let mut slab_ranges = vec![(0, 0); slabs];
        for (k, &b) in base[2].iter().enumerate() {
            let e = &mut slab_ranges[b];
            if e.1 == 0 {
                *e = (k, k + 1);
            } else {
                e.1 = k + 1;
            }
        }
        Ok(Self {
            source: source.clone(),
            target: target.clone(),
            base,
            rem,
            slab_ranges,
        })
    }

    pub fn source(&self) -> &GridDesc<S> {
        &self.source
    }

    pub fn target(&self) -> &GridDesc<S> {
        &self.target
    }

    /// Lower corner and fractional offsets of image point `(x, y, z)`.
    #[inline]
    pub fn cell_of(&self, c: [usize; 3]) -> ([usize; 3], [S; 3]) {
        (
            [self.base[0][c[0]], self.base[1][c[1]], self.base[2][c[2]]],
            [self.rem[0][c[0]], self.rem[1][c[1]], self.rem[2][c[2]]],
        )
    }

    /// The 8 `(node, weight)` pairs of image point `i`, corners in
    /// `x`-fastest order.
    pub fn stencil(&self, i: usize) -> [(usize, S); 8] {
        let (b, r) = self.cell_of(self.target.decompose(i));
        let ms = self.source.m;
        let mut out = [(0, S::zero()); 8];
        for (c, slot) in out.iter_mut().enumerate() {
            let (ox, oy, oz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
            let w = axis_weight(r[0], ox) * axis_weight(r[1], oy) * axis_weight(r[2], oz);
            *slot = (b[0] + ox + ms[0] * (b[1] + oy + ms[1] * (b[2] + oz)), w);
        }
        out
    }

    /// `P y` into `out` (`3 m_y` in, `3 m` out).
    pub fn apply_into(&self, y: &[S], out: &mut [S]) {
        let (ns, nt) = (self.source.len(), self.target.len());
        assert_eq!(y.len(), 3 * ns);
        assert_eq!(out.len(), 3 * nt);
        out.par_chunks_mut(nt).zip(y.par_chunks(ns)).for_each(|(o, comp)| {
            o.par_iter_mut()
                .with_min_len(MIN_PAR_LEN)
                .enumerate()
                .for_each(|(i, v)| {
                    *v = self
                        .stencil(i)
                        .iter()
                        .fold(S::zero(), |acc, &(j, w)| acc + w * comp[j]);
                });
        });
    }

    pub fn apply(&self, y: &[S]) -> Vec<S> {
        let mut out = vec![S::zero(); 3 * self.target.len()];
        self.apply_into(y, &mut out);
        out
    }

    /// `P^T w` into `out` (`3 m` in, `3 m_y` out), red-black over z-slabs.
    pub fn apply_transpose_into(&self, w: &[S], out: &mut [S]) {
        let (ns, nt) = (self.source.len(), self.target.len());
        assert_eq!(w.len(), 3 * nt);
        assert_eq!(out.len(), 3 * ns);
        out.par_iter_mut().with_min_len(MIN_PAR_LEN).for_each(|v| *v = S::zero());
        let plane = self.source.m[0] * self.source.m[1];
        for parity in [1, 0] {
            // planes of every component, handed out two at a time per slab
            let mut planes: Vec<Vec<Option<&mut [S]>>> = out
                .chunks_mut(ns)
                .map(|c| c.chunks_mut(plane).map(Some).collect())
                .collect();
            let mut tasks = Vec::new();
            for s in (parity..self.slab_ranges.len()).step_by(2) {
                let mut lo = Vec::with_capacity(3);
                let mut hi = Vec::with_capacity(3);
                for comp in planes.iter_mut() {
                    lo.push(comp[s].take().expect("slab planes are disjoint"));
                    hi.push(comp[s + 1].take().expect("slab planes are disjoint"));
                }
                tasks.push((s, lo, hi));
            }
            tasks.into_par_iter().for_each(|(s, mut lo, mut hi)| {
                self.scatter_slab(s, w, &mut lo, &mut hi);
            });
        }
    }

    fn scatter_slab(&self, s: usize, w: &[S], lo: &mut [&mut [S]], hi: &mut [&mut [S]]) {
        let (z0, z1) = self.slab_ranges[s];
        let [mx, my, _] = self.target.m;
        let msx = self.source.m[0];
        let nt = self.target.len();
        for z in z0..z1 {
            let rz = self.rem[2][z];
            for yy in 0..my {
                let (by, ry) = (self.base[1][yy], self.rem[1][yy]);
                for x in 0..mx {
                    let (bx, rx) = (self.base[0][x], self.rem[0][x]);
                    let i = x + mx * (yy + my * z);
                    let wxy = [
                        (S::one() - rx) * (S::one() - ry),
                        rx * (S::one() - ry),
                        (S::one() - rx) * ry,
                        rx * ry,
                    ];
                    let nodes = [
                        bx + msx * by,
                        bx + 1 + msx * by,
                        bx + msx * (by + 1),
                        bx + 1 + msx * (by + 1),
                    ];
                    for d in 0..3 {
                        let v = w[d * nt + i];
                        let (vl, vh) = ((S::one() - rz) * v, rz * v);
                        for c in 0..4 {
                            lo[d][nodes[c]] += wxy[c] * vl;
                            hi[d][nodes[c]] += wxy[c] * vh;
                        }
                    }
                }
            }
        }
    }

    pub fn apply_transpose(&self, w: &[S]) -> Vec<S> {
        let mut out = vec![S::zero(); 3 * self.source.len()];
        self.apply_transpose_into(w, &mut out);
        out
    }
}

#[inline(always)]
fn axis_weight<S: Real>(r: S, upper: usize) -> S {
    if upper == 1 {
        r
    } else {
        S::one() - r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plan(m: [usize; 3], my: [usize; 3], h: [f64; 3]) -> TransferPlan<f64> {
        let img = GridDesc::cell_centered(m, h).unwrap();
        let def = img.nodal_for_image(my).unwrap();
        TransferPlan::new(&def, &img).unwrap()
    }

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn constant_is_preserved() {
        let p = plan([5, 4, 7], [3, 2, 4], [1.0, 2.0, 0.5]);
        let n = p.source().len();
        let y: Vec<f64> = (0..3 * n).map(|k| [1.5, -2.0, 7.0][k / n]).collect();
        let out = p.apply(&y);
        let nt = p.target().len();
        for (k, v) in out.iter().enumerate() {
            assert!((v - [1.5, -2.0, 7.0][k / nt]).abs() < 1e-14);
        }
    }

    #[test]
    fn two_cubed_from_three_cubed_averages_corners() {
        let p = plan([2, 2, 2], [3, 3, 3], [1.0; 3]);
        assert_eq!(p.rem[0], vec![0.5, 0.5]);
        assert_eq!(p.base[0], vec![0, 1]);
        for i in 0..8 {
            for (_, w) in p.stencil(i) {
                assert_eq!(w, 0.125);
            }
        }
    }

    #[test]
    fn identity_maps_to_cell_centers() {
        let p = plan([9, 6, 5], [4, 3, 2], [0.8, 1.0, 1.3]);
        let y = p.source().coordinates();
        let x = p.target().coordinates();
        for (a, b) in p.apply(&y).iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adjoint_identity_and_thread_independence() {
        for (m, my) in [([4, 4, 4], [3, 3, 3]), ([7, 5, 9], [3, 4, 5]), ([6, 6, 3], [6, 7, 4])] {
            let p = plan(m, my, [1.0, 0.7, 1.2]);
            let (ns, nt) = (p.source().len(), p.target().len());
            for seed in 0..20 {
                let y = rand_vec(3 * ns, seed);
                let w = rand_vec(3 * nt, 100 + seed);
                let py = p.apply(&y);
                let ptw = p.apply_transpose(&w);
                let a: f64 = py.iter().zip(&w).map(|(a, b)| a * b).sum();
                let b: f64 = y.iter().zip(&ptw).map(|(a, b)| a * b).sum();
                assert!((a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0));
            }
            let w = rand_vec(3 * nt, 7);
            let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
            let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
            let a = one.install(|| p.apply_transpose(&w));
            let b = four.install(|| p.apply_transpose(&w));
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert!(p.apply_transpose(&vec![0.0; 3 * nt]).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn rejects_bad_plans() {
        let img = GridDesc::<f64>::cell_centered([4, 4, 4], [1.0; 3]).unwrap();
        let def = GridDesc::nodal_with_extent([3, 3, 3], [5.0, 4.0, 4.0]).unwrap();
        assert!(matches!(TransferPlan::new(&def, &img), Err(Error::ExtentMismatch(_))));
        let def = GridDesc::nodal_with_extent([6, 3, 3], [4.0; 3]).unwrap();
        assert!(matches!(TransferPlan::new(&def, &img), Err(Error::Coverage(_))));
        assert!(TransferPlan::new(&img, &img).is_err());
    }
}
