//! Deterministic synthetic data for tests, self-checks and benchmarks.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::curvature::DeformationField;
use crate::grid::GridDesc;
use crate::image::Volume;
use crate::ngf::NgfParams;
use crate::{Real, Result};

/// Independent uniform values in `[lo, hi)`.
pub fn random_volume<S: Real>(grid: &GridDesc<S>, seed: u64, lo: f64, hi: f64) -> Volume<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..grid.len()).map(|_| S::lit(rng.gen_range(lo..hi))).collect();
    Volume::new(grid.clone(), data).expect("finite data")
}

pub fn random_vector<S: Real>(n: usize, seed: u64) -> Vec<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| S::lit(rng.gen_range(-1.0..1.0))).collect()
}

/// Identity deformation plus uniform noise of `amplitude` nodal spacings.
pub fn jittered_deformation<S: Real>(def: &GridDesc<S>, seed: u64, amplitude: f64) -> DeformationField<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = def.len();
    let mut y = def.coordinates();
    for (k, v) in y.iter_mut().enumerate() {
        let h = def.h[k / n].to_f64_lossy();
        *v += S::lit(rng.gen_range(-amplitude..amplitude) * h);
    }
    DeformationField::new(def.clone(), y).expect("finite deformation")
}

/// A random registration problem on a small grid.
#[derive(Debug, Clone)]
pub struct RandomCase<S> {
    pub reference: Volume<S>,
    pub template: Volume<S>,
    pub deformation: DeformationField<S>,
    pub params: NgfParams<S>,
}

/// Random images on an `m` image grid, a jittered deformation on an `my`
/// nodal grid, non-uniform spacing.
pub fn random_case<S: Real>(m: [usize; 3], my: [usize; 3], seed: u64) -> Result<RandomCase<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = [0; 3].map(|_| S::lit(rng.gen_range(0.7..1.4)));
    let img = GridDesc::cell_centered(m, h)?;
    let def = img.nodal_for_image(my)?;
    let params = NgfParams::new(S::lit(rng.gen_range(0.5..2.0)), S::lit(rng.gen_range(0.5..2.0)))?;
    Ok(RandomCase {
        reference: random_volume(&img, seed ^ 0x5eed_0001, 0.0, 10.0),
        template: random_volume(&img, seed ^ 0x5eed_0002, 0.0, 10.0),
        deformation: jittered_deformation(&def, seed ^ 0x5eed_0003, 0.15),
        params,
    })
}

#[inline]
fn smooth_step(t: f64, width: f64) -> f64 {
    0.5 * (1.0 + (t / width).tanh())
}

/// Ellipsoidal inclusions `(center, radii, intensity)` in unit-box
/// coordinates centered at the origin, drawn once from a fixed seed.
fn inclusions() -> &'static [([f64; 3], [f64; 3], f64)] {
    static LIST: OnceLock<Vec<([f64; 3], [f64; 3], f64)>> = OnceLock::new();
    LIST.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
        (0..48)
            .map(|_| {
                let c = [0; 3].map(|_| rng.gen_range(-0.42..0.42));
                let r = [0; 3].map(|_| rng.gen_range(0.05..0.14));
                let v = rng.gen_range(60.0..200.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                (c, r, v)
            })
            .collect()
    })
}

/// Multi-edge phantom at physical point `p` of a box with side lengths
/// `extent`: a large body, a rod and many overlapping ellipsoidal inclusions
/// spread over the whole box, with tanh-smoothed edges and intensities in
/// the hundreds. Edges in every region and orientation keep the deformation
/// identifiable for edge-based distances.
pub fn phantom_value(p: [f64; 3], extent: [f64; 3]) -> f64 {
    let q = [0, 1, 2].map(|k| p[k] / extent[k] - 0.5);
    let w = 0.012;
    let ellipsoid = |c: [f64; 3], r: [f64; 3]| {
        let d = ((q[0] - c[0]) / r[0]).powi(2) + ((q[1] - c[1]) / r[1]).powi(2) + ((q[2] - c[2]) / r[2]).powi(2);
        smooth_step(1.0 - d.sqrt(), w / r[0].min(r[1]).min(r[2]))
    };
    let mut v = 300.0 + 250.0 * ellipsoid([0.0, 0.0, 0.0], [0.36, 0.3, 0.33]);
    for &(c, r, a) in inclusions() {
        v += a * ellipsoid(c, r);
    }
    let rod = ((q[0] + 0.2).powi(2) + (q[1] - 0.2).powi(2)).sqrt();
    v += 180.0 * smooth_step(0.05 - rod, w) * smooth_step(0.3 - q[2].abs(), w);
    v
}

pub fn phantom<S: Real>(grid: &GridDesc<S>) -> Volume<S> {
    let extent = grid.extent().map(|e| e.to_f64_lossy());
    Volume::from_fn(grid.clone(), |p| {
        S::lit(phantom_value(p.map(|c| c.to_f64_lossy()), extent))
    })
    .expect("finite phantom")
}

/// Smooth displacement field: a sum of low-frequency sinusoids whose normal
/// component vanishes on the boundary (points stay inside the box), scaled so the largest displacement length is
/// `max_amplitude` (physical units).
#[derive(Debug, Clone)]
pub struct SinusoidalWarp {
    extent: [f64; 3],
    scale: f64,
}

impl SinusoidalWarp {
    pub fn new(extent: [f64; 3], max_amplitude: f64) -> Self {
        let mut w = Self { extent, scale: 1.0 };
        // normalize on a dense probe lattice
        let n = 48;
        let mut peak = 0.0f64;
        for a in 0..=n {
            for b in 0..=n {
                for c in 0..=n {
                    let p = [a, b, c].map(|t| t as f64 / n as f64);
                    let p = [0, 1, 2].map(|k| p[k] * extent[k]);
                    let d = w.displacement(p);
                    peak = peak.max((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt());
                }
            }
        }
        w.scale = max_amplitude / peak;
        w
    }

    pub fn displacement(&self, p: [f64; 3]) -> [f64; 3] {
        use std::f64::consts::PI;
        let t = [0, 1, 2].map(|k| p[k] / self.extent[k]);
        let s = |k: usize, f: f64| (PI * f * t[k]).sin();
        let c = |k: usize, f: f64, ph: f64| (PI * f * t[k] + ph).cos();
        let dx = s(0, 1.0) * (c(1, 1.0, 0.3) + 0.6 * s(2, 2.0) + 0.3 * c(2, 1.0, 1.0));
        let dy = s(1, 1.0) * (c(2, 1.0, 1.1) + 0.6 * s(0, 2.0) + 0.3 * c(0, 1.0, 0.4));
        let dz = s(2, 1.0) * (c(0, 1.0, 2.0) + 0.6 * s(1, 2.0) + 0.3 * c(1, 1.0, 2.2));
        [dx, dy, dz].map(|v| v * self.scale)
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let d = self.displacement(p);
        [p[0] + d[0], p[1] + d[1], p[2] + d[2]]
    }
}

/// A synthetic registration problem with known answer: the reference is
/// the phantom pulled back through `warp`, so the exact deformation maps
/// every reference point `x` to `warp.apply(x)` in the template.
#[derive(Debug, Clone)]
pub struct WarpCase<S> {
    pub reference: Volume<S>,
    pub template: Volume<S>,
    pub warp: SinusoidalWarp,
}

pub fn warp_case<S: Real>(m: [usize; 3], h: [S; 3], max_voxels: f64) -> Result<WarpCase<S>> {
    let grid = GridDesc::cell_centered(m, h)?;
    let extent = grid.extent().map(|e| e.to_f64_lossy());
    let warp = SinusoidalWarp::new(extent, max_voxels * grid.min_spacing().to_f64_lossy());
    let template = phantom(&grid);
    let reference = Volume::from_fn(grid.clone(), |p| {
        S::lit(phantom_value(warp.apply(p.map(|c| c.to_f64_lossy())), extent))
    })?;
    Ok(WarpCase {
        reference,
        template,
        warp,
    })
}

/// Mean distance (in units of the smallest image spacing) between `P y` at
/// the image cell centers and the exact deformation.
pub fn endpoint_error<S: Real>(image: &GridDesc<S>, py: &[S], warp: &SinusoidalWarp) -> f64 {
    let n = image.len();
    assert_eq!(py.len(), 3 * n);
    let h = image.min_spacing().to_f64_lossy();
    let total: f64 = (0..n)
        .map(|i| {
            let x = image.point_coords(i).map(|c| c.to_f64_lossy());
            let want = warp.apply(x);
            (0..3)
                .map(|d| (py[d * n + i].to_f64_lossy() - want[d]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    total / (n as f64 * h)
}
