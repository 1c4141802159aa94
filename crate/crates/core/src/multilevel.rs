//! Coarse-to-fine driver.

use std::time::Instant;

use crate::curvature::DeformationField;
use crate::grid::{GridDesc, GridKind};
use crate::image::Volume;
use crate::ngf::NgfParams;
use crate::transfer::TransferPlan;
use crate::optimizer::{run_optimizer, IterationTrace, Objective, OptimizerConfig};
use crate::{Error, Real, Result};

/// Image pairs per level, level 0 the finest.
pub fn build_pyramid<S: Real>(
    reference: &Volume<S>,
    template: &Volume<S>,
    levels: usize,
) -> Result<Vec<(Volume<S>, Volume<S>)>> {
    if levels == 0 {
        return Err(Error::InvalidParameter("levels must be >= 1".into()));
    }
    if reference.grid() != template.grid() {
        return Err(Error::InvalidGrid("reference and template grids differ".into()));
    }
    let mut out = vec![(reference.clone(), template.clone())];
    for _ in 1..levels {
        let (r, t) = out.last().unwrap();
        let pair = (r.downsample()?, t.downsample()?);
        out.push(pair);
    }
    Ok(out)
}

/// Nodal grid with `max(2, ceil(m/ratio) + 1)` points per axis over the same
/// extent as `image`.
pub fn deformation_grid_for<S: Real>(image: &GridDesc<S>, ratio: usize) -> Result<GridDesc<S>> {
    if ratio == 0 {
        return Err(Error::InvalidParameter("deformation ratio must be >= 1".into()));
    }
    image.nodal_for_image(image.m.map(|m| (m.div_ceil(ratio) + 1).max(2)))
}

/// Trilinear interpolation of the coarse displacement onto `fine` nodes.
pub fn prolong<S: Real>(coarse: &DeformationField<S>, fine: &GridDesc<S>) -> Result<DeformationField<S>> {
    let cg = coarse.grid();
    if fine.kind != GridKind::Nodal {
        return Err(Error::InvalidGrid("prolongation target must be nodal".into()));
    }
    if !cg.same_extent(fine, S::lit(1e-9)) {
        return Err(Error::ExtentMismatch(format!(
            "coarse extent {:?} vs fine extent {:?}",
            cg.extent(),
            fine.extent()
        )));
    }
    let u = coarse.displacement().u;
    let (nc, nf) = (cg.len(), fine.len());
    let mut y = fine.coordinates();
    // per-axis lower node and weight of every fine index
    let axes: [Vec<(usize, S)>; 3] = [0, 1, 2].map(|l| {
        (0..fine.m[l])
            .map(|k| {
                let top = cg.m[l] - 1;
                let t = (fine.coord(l, k) / cg.h[l]).max(S::zero()).min(S::from_usize_lossy(top));
                let b = t.floor().to_usize().unwrap_or(0).min(top.saturating_sub(1));
                (b, t - S::from_usize_lossy(b))
            })
            .collect()
    });
    for i in 0..nf {
        let c = fine.decompose(i);
        let (bx, rx) = axes[0][c[0]];
        let (by, ry) = axes[1][c[1]];
        let (bz, rz) = axes[2][c[2]];
        let mut corners = Vec::with_capacity(8);
        for (dz, wz) in [(0, S::one() - rz), (1, rz)] {
            for (dy, wy) in [(0, S::one() - ry), (1, ry)] {
                for (dx, wx) in [(0, S::one() - rx), (1, rx)] {
                    let w = wx * wy * wz;
                    if w != S::zero() {
                        corners.push((cg.linearize(bx + dx, by + dy, bz + dz), w));
                    }
                }
            }
        }
        for d in 0..3 {
            let v = corners.iter().fold(S::zero(), |a, &(j, w)| a + w * u[d * nc + j]);
            y[d * nf + i] += v;
        }
    }
    DeformationField::new(fine.clone(), y)
}

/// Template resampled through `y` onto `target`: `T(P y)` at the cell
/// centers of `target`, which must span the deformation grid's extent.
pub fn warp<S: Real>(template: &Volume<S>, y: &DeformationField<S>, target: &GridDesc<S>) -> Result<Volume<S>> {
    let plan = TransferPlan::new(y.grid(), target)?;
    let sampled = template.sample_deformed(&plan.apply(y.y()));
    Volume::new(target.clone(), sampled.values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationConfig {
    pub levels: usize,
    pub deform_ratio: usize,
    pub alpha: f64,
    pub tau: f64,
    pub rho: f64,
    pub optimizer: OptimizerConfig,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            deform_ratio: 4,
            alpha: 1.0,
            tau: 10.0,
            rho: 10.0,
            optimizer: OptimizerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelReport {
    /// 0 is the finest level.
    pub level: usize,
    pub image_size: [usize; 3],
    pub deformation_size: [usize; 3],
    pub trace: IterationTrace,
    pub seconds: f64,
    pub peak_derivative_bytes: usize,
}

#[derive(Debug, Clone)]
pub struct Registration<S> {
    pub deformation: DeformationField<S>,
    /// Coarsest level first.
    pub levels: Vec<LevelReport>,
}

/// Optimizes on every level from coarse to fine, prolonging the result.
pub fn register_multilevel<S: Real>(
    reference: &Volume<S>,
    template: &Volume<S>,
    cfg: &RegistrationConfig,
) -> Result<Registration<S>> {
    let params = NgfParams::new(S::lit(cfg.tau), S::lit(cfg.rho))?;
    cfg.optimizer.validate()?;
    let pyramid = build_pyramid(reference, template, cfg.levels)?;
    let mut current: Option<DeformationField<S>> = None;
    let mut reports = Vec::with_capacity(cfg.levels);
    for (level, (r, t)) in pyramid.iter().enumerate().rev() {
        let start = Instant::now();
        let def = deformation_grid_for(r.grid(), cfg.deform_ratio)?;
        let y0 = match &current {
            None => DeformationField::identity(def.clone())?,
            Some(c) => prolong(c, &def)?,
        };
        let mut objective = Objective::new(r, t, &def, params, S::lit(cfg.alpha))?;
        let (y, trace) = run_optimizer(&mut objective, y0.y(), &cfg.optimizer)?;
        current = Some(DeformationField::new(def.clone(), y)?);
        reports.push(LevelReport {
            level,
            image_size: r.grid().m,
            deformation_size: def.m,
            trace,
            seconds: start.elapsed().as_secs_f64(),
            peak_derivative_bytes: objective.peak_derivative_bytes(),
        });
    }
    Ok(Registration {
        deformation: current.expect("at least one level"),
        levels: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curvature::Displacement;

    fn img(m: [usize; 3]) -> GridDesc<f64> {
        GridDesc::cell_centered(m, [1.0; 3]).unwrap()
    }

    #[test]
    fn pyramid_sizes() {
        let v = Volume::new(img([48, 32, 20]), vec![1.0; 48 * 32 * 20]).unwrap();
        let p = build_pyramid(&v, &v, 2).unwrap();
        assert_eq!(p[1].0.grid().m, [24, 16, 10]);
        assert!(p[1].0.grid().same_extent(v.grid(), 1e-12));
        assert_eq!(build_pyramid(&v, &v, 1).unwrap().len(), 1);
        assert!(build_pyramid(&v, &v, 0).is_err());
        let tiny = Volume::new(img([2, 2, 2]), vec![1.0; 8]).unwrap();
        assert!(build_pyramid(&tiny, &tiny, 3).is_err());
    }

    #[test]
    fn deformation_grid_sizes() {
        assert_eq!(deformation_grid_for(&img([64; 3]), 4).unwrap().m, [17; 3]);
        assert_eq!(deformation_grid_for(&img([512, 2, 2]), 4).unwrap().m, [129, 2, 2]);
        assert!(deformation_grid_for(&img([8; 3]), 0).is_err());
        let g = deformation_grid_for(&img([10, 7, 3]), 4).unwrap();
        assert_eq!(g.m, [4, 3, 2]);
        assert!(g.same_extent(&img([10, 7, 3]), 1e-12));
    }

    #[test]
    fn prolong_identity_constant_and_linear() {
        let coarse = deformation_grid_for(&img([16, 12, 8]), 8).unwrap();
        let fine = deformation_grid_for(&img([16, 12, 8]), 2).unwrap();
        let id = DeformationField::identity(coarse.clone()).unwrap();
        assert_eq!(prolong(&id, &fine).unwrap().y(), fine.coordinates().as_slice());

        let n = coarse.len();
        let u = Displacement {
            u: (0..3 * n).map(|k| [1.0, 2.0, 3.0][k / n]).collect(),
        };
        let p = prolong(&DeformationField::from_displacement(coarse.clone(), &u).unwrap(), &fine).unwrap();
        let nf = fine.len();
        for (k, v) in p.displacement().u.iter().enumerate() {
            assert!((v - [1.0, 2.0, 3.0][k / nf]).abs() < 1e-12);
        }

        let lin = |q: [f64; 3]| [0.1 * q[0] - 0.2 * q[2], 0.3 * q[1], 0.05 * (q[0] + q[1] + q[2])];
        let mut uc = vec![0.0; 3 * n];
        for i in 0..n {
            let v = lin(coarse.point_coords(i));
            for d in 0..3 {
                uc[d * n + i] = v[d];
            }
        }
        let p = prolong(&DeformationField::from_displacement(coarse, &Displacement { u: uc }).unwrap(), &fine).unwrap();
        let uf = p.displacement().u;
        for i in 0..nf {
            let v = lin(fine.point_coords(i));
            for d in 0..3 {
                assert!((uf[d * nf + i] - v[d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prolong_rejects_other_extent() {
        let a = GridDesc::<f64>::nodal_with_extent([3, 3, 3], [4.0; 3]).unwrap();
        let b = GridDesc::<f64>::nodal_with_extent([5, 5, 5], [5.0; 3]).unwrap();
        assert!(prolong(&DeformationField::identity(a).unwrap(), &b).is_err());
    }

    #[test]
    fn warp_with_identity_and_translation() {
        let g = img([10, 8, 6]);
        let v = crate::synthetic::random_volume::<f64>(&g, 5, 0.0, 1.0);
        let def = deformation_grid_for(&g, 2).unwrap();
        let id = DeformationField::identity(def.clone()).unwrap();
        let w = warp(&v, &id, &g).unwrap();
        for (a, b) in w.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        // spike at (4, 3, 2); shifting by one voxel along x moves it to (3, 3, 2)
        let mut spike = vec![0.0; g.len()];
        spike[g.linearize(4, 3, 2)] = 1.0;
        let spike = Volume::new(g.clone(), spike).unwrap();
        let n = def.len();
        let u = Displacement {
            u: (0..3 * n).map(|k| if k < n { 1.0 } else { 0.0 }).collect(),
        };
        let shifted = warp(&spike, &DeformationField::from_displacement(def.clone(), &u).unwrap(), &g).unwrap();
        assert!((shifted.data()[g.linearize(3, 3, 2)] - 1.0).abs() < 1e-12);
        assert!(shifted.data().iter().sum::<f64>() - 1.0 < 1e-12);
        assert!(warp(&v, &id, &img([10, 8, 7])).is_err());
    }

    #[test]
    fn identical_images_stay_at_identity() {
        let g = img([12, 12, 12]);
        let v = crate::synthetic::phantom(&g);
        let cfg = RegistrationConfig {
            levels: 2,
            ..Default::default()
        };
        let reg = register_multilevel(&v, &v, &cfg).unwrap();
        assert_eq!(reg.levels.len(), 2);
        assert_eq!(reg.levels[1].level, 0);
        let u = reg.deformation.displacement().u;
        assert!(u.iter().all(|x| x.abs() <= 1e-6));
    }
}
