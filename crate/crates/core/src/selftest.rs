//! Built-in consistency suites on synthetic data.

use crate::curvature::{curvature_gradient, curvature_hessian_vec, curvature_value};
use crate::ngf::{ngf_gradient, ngf_hessian_vec, NgfPrecomp, NgfWorkspace};
use crate::optimizer::{Objective, Problem};
use crate::oracle::OracleSystem;
use crate::scalar::dot;
use crate::synthetic::{random_case, random_vector};
use crate::transfer::TransferPlan;
use crate::Result;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SelftestConfig {
    pub seed: u64,
    /// Fewer cases per suite.
    pub quick: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    /// Largest error seen, in the suite's own measure.
    pub worst: f64,
    pub tolerance: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

/// `max|a - b| / max|b|`, or the absolute difference when `b` vanishes.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = b.iter().fold(0.0f64, |m, y| m.max(y.abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

const SHAPES: [([usize; 3], [usize; 3]); 4] = [
    ([6, 6, 6], [4, 4, 4]),
    ([8, 7, 6], [5, 4, 4]),
    ([7, 8, 8], [4, 5, 5]),
    ([8, 8, 8], [5, 5, 5]),
];

/// Matrix-free kernels against the assembled sparse chain.
pub fn oracle_suite(cfg: &SelftestConfig) -> Result<SuiteResult> {
    let cases = if cfg.quick { 2 } else { 10 };
    let mut worst = 0.0f64;
    for k in 0..cases {
        let seed = cfg.seed.wrapping_mul(1000).wrapping_add(k as u64);
        let (m, my) = SHAPES[k % SHAPES.len()];
        let c = random_case::<f64>(m, my, seed)?;
        let img = c.reference.grid().clone();
        let def = c.deformation.grid().clone();
        let plan = TransferPlan::new(&def, &img)?;
        let pre = NgfPrecomp::new(&c.reference, &c.params);
        let ws = NgfWorkspace::evaluate(&c.template, &plan.apply(c.deformation.y()), &img, &pre, &c.params);
        let sys = OracleSystem::assemble(&c.reference, &ws.sampled, &c.params, &def, 1.0)?;
        let p = random_vector(3 * img.len(), seed ^ 1);
        let y = random_vector(3 * def.len(), seed ^ 2);
        let u = c.deformation.displacement().u;
        for e in [
            max_rel_err(&ngf_gradient(&ws, &pre, &img), &sys.ngf_gradient()),
            max_rel_err(&ngf_hessian_vec(&p, &ws, &pre, &img), &sys.ngf_hvp(&p)),
            max_rel_err(&curvature_gradient(&u, &def), &sys.curvature_hvp(&u)),
            max_rel_err(&curvature_hessian_vec(&y, &def), &sys.curvature_hvp(&y)),
            max_rel_err(&plan.apply(&y), &sys.transfer(&y)),
            max_rel_err(&plan.apply_transpose(&p), &sys.transfer_transpose(&p)),
        ] {
            worst = worst.max(e);
        }
    }
    Ok(SuiteResult {
        name: "oracle",
        cases,
        worst,
        tolerance: 1e-12,
    })
}

/// Directional derivative of the objective against central differences;
/// per direction the best step of `1e-4, 1e-5, 1e-6` counts.
pub fn finite_difference_suite(cfg: &SelftestConfig) -> Result<SuiteResult> {
    let directions = if cfg.quick { 5 } else { 20 };
    let c = random_case::<f64>([8; 3], [5; 3], cfg.seed ^ 0xfd)?;
    let def = c.deformation.grid().clone();
    let mut obj = Objective::new(&c.reference, &c.template, &def, c.params, 0.5)?;
    let y = c.deformation.y().to_vec();
    let (_, g) = obj.value_grad(&y)?;
    let mut worst = 0.0f64;
    for k in 0..directions {
        let v = random_vector::<f64>(y.len(), cfg.seed.wrapping_add(17 * k as u64 + 1));
        let exact = dot(&g, &v);
        let mut best = f64::INFINITY;
        for eps in [1e-4, 1e-5, 1e-6] {
            let shifted = |s: f64| -> Vec<f64> { y.iter().zip(&v).map(|(a, b)| a + s * b).collect() };
            let fd = (obj.value(&shifted(eps))? - obj.value(&shifted(-eps))?) / (2.0 * eps);
            best = best.min((fd - exact).abs() / exact.abs().max(1e-12));
        }
        worst = worst.max(best);
    }
    Ok(SuiteResult {
        name: "finite-difference",
        cases: directions,
        worst,
        tolerance: 1e-6,
    })
}

/// `<P y, w> = <y, P^T w>` relative to `|<P y, w>|`.
pub fn adjointness_suite(cfg: &SelftestConfig) -> Result<SuiteResult> {
    let cases = if cfg.quick { 4 } else { 20 };
    let mut worst = 0.0f64;
    for k in 0..cases {
        let seed = cfg.seed.wrapping_mul(1000).wrapping_add(k as u64);
        let (m, my) = SHAPES[k % SHAPES.len()];
        let c = random_case::<f64>(m, my, seed)?;
        let plan = TransferPlan::new(c.deformation.grid(), c.reference.grid())?;
        let y = random_vector(3 * c.deformation.grid().len(), seed ^ 3);
        let w = random_vector(3 * c.reference.grid().len(), seed ^ 4);
        let lhs = dot(&plan.apply(&y), &w);
        let rhs = dot(&y, &plan.apply_transpose(&w));
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300));
    }
    Ok(SuiteResult {
        name: "adjointness",
        cases,
        worst,
        tolerance: 1e-12,
    })
}

/// Gauss-Newton operator symmetry and semi-definiteness, and a nonnegative
/// regularizer. The worst value is the relative symmetry error, or infinity
/// if `<Hp, p> < -1e-10 |p|^2` or the regularizer turns negative.
pub fn psd_suite(cfg: &SelftestConfig) -> Result<SuiteResult> {
    let vectors = if cfg.quick { 10 } else { 50 };
    let c = random_case::<f64>([8, 7, 6], [5, 4, 4], cfg.seed ^ 0x95d)?;
    let def = c.deformation.grid().clone();
    let mut obj = Objective::new(&c.reference, &c.template, &def, c.params, 0.5)?;
    let y = c.deformation.y().to_vec();
    obj.value_grad(&y)?;
    let mut worst = 0.0f64;
    let psd_tol = 1e-10;
    let sym_tol = 1e-12;
    for k in 0..vectors {
        let p = random_vector::<f64>(y.len(), cfg.seed.wrapping_add(2 * k as u64 + 7));
        let q = random_vector::<f64>(y.len(), cfg.seed.wrapping_add(2 * k as u64 + 8));
        let (hp, hq) = (obj.hessian_vec(&p), obj.hessian_vec(&q));
        let (a, b) = (dot(&hp, &q), dot(&p, &hq));
        let sym = (a - b).abs() / a.abs().max(b.abs()).max(1e-300);
        let curv = dot(&hp, &p) / dot(&p, &p);
        worst = worst.max(sym);
        if curv < -psd_tol || curvature_value(&p, &def) < 0.0 {
            worst = f64::INFINITY;
        }
    }
    Ok(SuiteResult {
        name: "psd",
        cases: vectors,
        worst,
        tolerance: sym_tol,
    })
}

/// All suites in order.
pub fn run_all(cfg: &SelftestConfig) -> Result<Vec<SuiteResult>> {
    Ok(vec![
        oracle_suite(cfg)?,
        finite_difference_suite(cfg)?,
        adjointness_suite(cfg)?,
        psd_suite(cfg)?,
    ])
}
