//! Objective `J(y) = D(y) + alpha S(y)` and its minimizers: L-BFGS with a
//! regularizer-based initial matrix, and Gauss-Newton with inexact CG.

use crate::curvature::{curvature_hessian_vec_into, curvature_value, DeformationField};
use crate::grid::GridDesc;
use crate::image::Volume;
use crate::ngf::{
    ngf_gradient_into, ngf_hessian_vec_into, ngf_value, offset_table, NgfParams, NgfPrecomp,
    NgfWorkspace, OffsetEntry,
};
use crate::scalar::{axpy, dot, norm2, norm_inf};
use crate::transfer::TransferPlan;
use crate::{Error, Real, Result};

/// A smooth objective the minimizers can drive.
pub trait Problem<S: Real> {
    fn dim(&self) -> usize;

    /// Objective value at `x` (line-search trial points).
    fn value(&mut self, x: &[S]) -> Result<S>;

    /// Value and gradient at `x`; `x` becomes the point at which
    /// [`Problem::hessian_vec`] linearizes.
    fn value_grad(&mut self, x: &[S]) -> Result<(S, Vec<S>)>;

    /// Gauss-Newton Hessian at the last `value_grad` point, applied to `p`.
    fn hessian_vec(&self, p: &[S]) -> Vec<S>;

    /// `alpha * Hessian(S) * p`; zero when there is no quadratic part.
    fn regularizer_hessian_vec(&self, p: &[S]) -> Vec<S> {
        vec![S::zero(); p.len()]
    }

    fn alpha(&self) -> f64 {
        0.0
    }

    /// Length scale for the step-size stopping rule.
    fn step_scale(&self) -> f64 {
        1.0
    }

    /// `(D, alpha S)` at the last `value_grad` point, for the trace.
    fn breakdown(&self) -> (f64, f64) {
        (f64::NAN, f64::NAN)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmijoConfig {
    pub c1: f64,
    pub beta: f64,
    pub max_backtracks: usize,
}

impl Default for ArmijoConfig {
    fn default() -> Self {
        Self {
            c1: 1e-4,
            beta: 0.5,
            max_backtracks: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgConfig {
    pub rel_tol: f64,
    pub max_iters: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Lbfgs,
    GaussNewton,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub method: Method,
    pub max_iters: usize,
    pub armijo: ArmijoConfig,
    /// Newton-system solve for Gauss-Newton.
    pub cg: CgConfig,
    /// Initial-matrix solve inside the L-BFGS two-loop recursion.
    pub h0_cg: CgConfig,
    pub history: usize,
    /// Shift of the initial L-BFGS matrix; `None` means `1e-3 max(1, alpha)`.
    pub gamma: Option<f64>,
    pub rel_change_tol: f64,
    pub grad_rel_tol: f64,
    pub grad_abs_tol: f64,
    /// Step infinity-norm tolerance relative to the problem's step scale.
    pub step_rel_tol: f64,
    /// Longest trial step (infinity norm) relative to the step scale; longer
    /// directions are shortened before the line search. `None` disables.
    pub max_step_rel: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            method: Method::Lbfgs,
            max_iters: 20,
            armijo: ArmijoConfig::default(),
            cg: CgConfig {
                rel_tol: 1e-2,
                max_iters: 50,
            },
            h0_cg: CgConfig {
                rel_tol: 1e-2,
                max_iters: 20,
            },
            history: 5,
            gamma: None,
            rel_change_tol: 1e-4,
            grad_rel_tol: 1e-4,
            grad_abs_tol: 1e-12,
            step_rel_tol: 1e-3,
            max_step_rel: Some(1.0),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("armijo.c1", self.armijo.c1),
            ("cg.rel_tol", self.cg.rel_tol),
            ("h0_cg.rel_tol", self.h0_cg.rel_tol),
            ("rel_change_tol", self.rel_change_tol),
            ("grad_rel_tol", self.grad_rel_tol),
            ("grad_abs_tol", self.grad_abs_tol),
            ("step_rel_tol", self.step_rel_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.armijo.c1 < 1.0) || !(self.armijo.beta > 0.0 && self.armijo.beta < 1.0) {
            return Err(Error::InvalidParameter("armijo needs 0 < c1 < 1 and 0 < beta < 1".into()));
        }
        if self.history == 0 {
            return Err(Error::InvalidParameter("history must be >= 1".into()));
        }
        if self.cg.max_iters == 0 || self.h0_cg.max_iters == 0 {
            return Err(Error::InvalidParameter("CG iteration caps must be >= 1".into()));
        }
        if let Some(m) = self.max_step_rel {
            if !(m > 0.0) || !m.is_finite() {
                return Err(Error::InvalidParameter(format!("max_step_rel must be > 0, got {m}")));
            }
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0) || !g.is_finite() {
                return Err(Error::InvalidParameter(format!("gamma must be > 0, got {g}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    pub value: f64,
    pub distance: f64,
    pub regularizer: f64,
    pub grad_norm: f64,
    pub step_length: f64,
    pub cg_iters: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxIterations,
    GradientNorm,
    RelativeChange,
    StepSize,
    LineSearchFailed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace {
    pub initial_value: f64,
    /// NaN when no gradient was evaluated (`max_iters == 0`).
    pub initial_grad_norm: f64,
    /// One record per accepted step.
    pub records: Vec<IterationRecord>,
    pub stop: StopReason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgResult<S> {
    pub x: Vec<S>,
    pub iters: usize,
    pub rel_residual: f64,
}

/// Conjugate gradients from `x = 0` on a symmetric positive semi-definite
/// operator. Stops at `|b - Ax| <= rel_tol |b|` or after `max_iters`.
///
/// Non-positive curvature ends the iteration with the current iterate (or
/// with `b` itself if it occurs in the first step), which keeps the result a
/// descent direction for `-b`.
pub fn cg_solve<S: Real>(op: impl Fn(&[S]) -> Vec<S>, b: &[S], cfg: &CgConfig) -> Result<CgResult<S>> {
    let n = b.len();
    let bnorm = norm2(b);
    if !bnorm.is_finite() {
        return Err(Error::CgBreakdown("non-finite right-hand side".into()));
    }
    if bnorm == S::zero() {
        return Ok(CgResult {
            x: vec![S::zero(); n],
            iters: 0,
            rel_residual: 0.0,
        });
    }
    let mut x = vec![S::zero(); n];
    let mut r = b.to_vec();
    let mut p = b.to_vec();
    let mut rr = dot(&r, &r);
    let tol = S::lit(cfg.rel_tol) * bnorm;
    let mut iters = 0;
    while iters < cfg.max_iters {
        let ap = op(&p);
        let pap = dot(&p, &ap);
        if !pap.is_finite() {
            return Err(Error::CgBreakdown(format!("non-finite curvature at iteration {iters}")));
        }
        if pap <= S::zero() {
            if iters == 0 {
                x.copy_from_slice(b);
            }
            break;
        }
        let a = rr / pap;
        axpy(a, &p, &mut x);
        axpy(-a, &ap, &mut r);
        iters += 1;
        let rr_new = dot(&r, &r);
        if rr_new.sqrt() <= tol {
            rr = rr_new;
            break;
        }
        let beta = rr_new / rr;
        rr = rr_new;
        for (pi, &ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
    }
    Ok(CgResult {
        x,
        iters,
        rel_residual: (rr.sqrt() / bnorm).to_f64_lossy(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineSearch<S> {
    pub step: S,
    pub value: S,
    pub accepted: bool,
    pub evaluations: usize,
}

/// Backtracking Armijo search over `eta = 1, beta, beta^2, ...`.
pub fn armijo_search<S: Real>(
    mut f: impl FnMut(&[S]) -> Result<S>,
    x: &[S],
    fx: S,
    d: &[S],
    g: &[S],
    cfg: &ArmijoConfig,
) -> Result<LineSearch<S>> {
    let slope = dot(g, d);
    if !(slope < S::zero()) {
        return Err(Error::NotDescent(slope.to_f64_lossy()));
    }
    let c1 = S::lit(cfg.c1);
    let beta = S::lit(cfg.beta);
    let mut eta = S::one();
    let mut trial = vec![S::zero(); x.len()];
    for k in 0..=cfg.max_backtracks {
        for ((t, &xi), &di) in trial.iter_mut().zip(x).zip(d) {
            *t = xi + eta * di;
        }
        let ft = f(&trial)?;
        if ft.is_finite() && ft <= fx + c1 * eta * slope {
            return Ok(LineSearch {
                step: eta,
                value: ft,
                accepted: true,
                evaluations: k + 1,
            });
        }
        eta *= beta;
    }
    Ok(LineSearch {
        step: S::zero(),
        value: fx,
        accepted: false,
        evaluations: cfg.max_backtracks + 1,
    })
}

/// Shared outer loop: `direction` turns the gradient into a search direction
/// and reports CG iterations; `update` sees each accepted `(s, g_new - g_old)`.
fn minimize<S: Real, P: Problem<S>>(
    problem: &mut P,
    x0: &[S],
    cfg: &OptimizerConfig,
    mut direction: impl FnMut(&P, &[S]) -> Result<(Vec<S>, usize)>,
    mut update: impl FnMut(&[S], &[S]),
) -> Result<(Vec<S>, IterationTrace)> {
    cfg.validate()?;
    let mut x = x0.to_vec();
    if cfg.max_iters == 0 {
        let fx = problem.value(&x)?;
        return Ok((
            x,
            IterationTrace {
                initial_value: fx.to_f64_lossy(),
                initial_grad_norm: f64::NAN,
                records: Vec::new(),
                stop: StopReason::MaxIterations,
            },
        ));
    }
    let (mut fx, mut g) = problem.value_grad(&x)?;
    let g0 = norm2(&g).to_f64_lossy();
    let mut trace = IterationTrace {
        initial_value: fx.to_f64_lossy(),
        initial_grad_norm: g0,
        records: Vec::new(),
        stop: StopReason::MaxIterations,
    };
    let grad_tol = (cfg.grad_rel_tol * g0).max(cfg.grad_abs_tol);
    let step_tol = cfg.step_rel_tol * problem.step_scale();
    for iter in 1..=cfg.max_iters {
        if norm2(&g).to_f64_lossy() <= grad_tol {
            trace.stop = StopReason::GradientNorm;
            break;
        }
        let (mut d, cg_iters) = direction(problem, &g)?;
        if !(dot(&g, &d) < S::zero()) {
            d = g.iter().map(|&v| -v).collect();
        }
        if let Some(m) = cfg.max_step_rel {
            let cap = S::lit(m * problem.step_scale());
            let len = norm_inf(&d);
            if len > cap {
                let f = cap / len;
                d.iter_mut().for_each(|v| *v *= f);
            }
        }
        let ls = armijo_search(|t| problem.value(t), &x, fx, &d, &g, &cfg.armijo)?;
        if !ls.accepted {
            trace.stop = StopReason::LineSearchFailed;
            break;
        }
        let s: Vec<S> = d.iter().map(|&v| ls.step * v).collect();
        axpy(S::one(), &s, &mut x);
        let (f_new, g_new) = problem.value_grad(&x)?;
        let yd: Vec<S> = g_new.iter().zip(&g).map(|(&a, &b)| a - b).collect();
        update(&s, &yd);
        let (dist, reg) = problem.breakdown();
        let change = (fx - f_new).abs().to_f64_lossy();
        let denom = fx.abs().to_f64_lossy().max(f64::MIN_POSITIVE);
        fx = f_new;
        g = g_new;
        trace.records.push(IterationRecord {
            iter,
            value: fx.to_f64_lossy(),
            distance: dist,
            regularizer: reg,
            grad_norm: norm2(&g).to_f64_lossy(),
            step_length: ls.step.to_f64_lossy(),
            cg_iters,
        });
        if change <= cfg.rel_change_tol * denom {
            trace.stop = StopReason::RelativeChange;
            break;
        }
        if norm_inf(&s).to_f64_lossy() < step_tol {
            trace.stop = StopReason::StepSize;
            break;
        }
        if norm2(&g).to_f64_lossy() <= grad_tol {
            trace.stop = StopReason::GradientNorm;
            break;
        }
    }
    Ok((x, trace))
}

/// L-BFGS with `H0 = alpha Hess(S) + gamma I`, applied through CG.
pub fn lbfgs_minimize<S: Real, P: Problem<S>>(
    problem: &mut P,
    x0: &[S],
    cfg: &OptimizerConfig,
) -> Result<(Vec<S>, IterationTrace)> {
    let gamma = S::lit(cfg.gamma.unwrap_or(1e-3 * problem.alpha().max(1.0)));
    let history = cfg.history;
    let pairs = std::cell::RefCell::new(std::collections::VecDeque::<(Vec<S>, Vec<S>, S)>::new());
    let h0 = cfg.h0_cg;
    minimize(
        problem,
        x0,
        cfg,
        |p, g| {
            let pairs = pairs.borrow();
            let mut q = g.to_vec();
            let mut a = Vec::with_capacity(pairs.len());
            for (s, y, rho) in pairs.iter().rev() {
                let ai = *rho * dot(s, &q);
                axpy(-ai, y, &mut q);
                a.push(ai);
            }
            let solve = cg_solve(
                |v| {
                    let mut out = p.regularizer_hessian_vec(v);
                    axpy(gamma, v, &mut out);
                    out
                },
                &q,
                &h0,
            )?;
            let mut r = solve.x;
            for ((s, y, rho), ai) in pairs.iter().zip(a.into_iter().rev()) {
                let b = *rho * dot(y, &r);
                axpy(ai - b, s, &mut r);
            }
            Ok((r.into_iter().map(|v| -v).collect(), solve.iters))
        },
        |s, yd| {
            let sy = dot(s, yd);
            if sy > S::lit(1e-10) * norm2(s) * norm2(yd) {
                let mut pairs = pairs.borrow_mut();
                if pairs.len() == history {
                    pairs.pop_front();
                }
                pairs.push_back((s.to_vec(), yd.to_vec(), S::one() / sy));
            }
        },
    )
}

/// Gauss-Newton: solve `H s = -g` inexactly by CG, then Armijo.
pub fn gauss_newton_minimize<S: Real, P: Problem<S>>(
    problem: &mut P,
    x0: &[S],
    cfg: &OptimizerConfig,
) -> Result<(Vec<S>, IterationTrace)> {
    let cg = cfg.cg;
    minimize(
        problem,
        x0,
        cfg,
        |p, g| {
            let rhs: Vec<S> = g.iter().map(|&v| -v).collect();
            let sol = cg_solve(|v| p.hessian_vec(v), &rhs, &cg)?;
            Ok((sol.x, sol.iters))
        },
        |_, _| {},
    )
}

pub fn run_optimizer<S: Real, P: Problem<S>>(
    problem: &mut P,
    x0: &[S],
    cfg: &OptimizerConfig,
) -> Result<(Vec<S>, IterationTrace)> {
    match cfg.method {
        Method::Lbfgs => lbfgs_minimize(problem, x0, cfg),
        Method::GaussNewton => gauss_newton_minimize(problem, x0, cfg),
    }
}

/// `D(y) + alpha S(y)` for one resolution level.
pub struct Objective<'a, S: Real> {
    reference: &'a Volume<S>,
    template: &'a Volume<S>,
    params: NgfParams<S>,
    pre: NgfPrecomp<S>,
    plan: TransferPlan<S>,
    def: GridDesc<S>,
    nodes: Vec<S>,
    alpha: S,
    table: Vec<OffsetEntry>,
    /// Linearization point of the Gauss-Newton operator.
    current: Option<NgfWorkspace<S>>,
    last: (S, S),
    derivative_bytes: std::cell::Cell<usize>,
}

impl<'a, S: Real> Objective<'a, S> {
    pub fn new(
        reference: &'a Volume<S>,
        template: &'a Volume<S>,
        def: &GridDesc<S>,
        params: NgfParams<S>,
        alpha: S,
    ) -> Result<Self> {
        if reference.grid() != template.grid() {
            return Err(Error::InvalidGrid("reference and template grids differ".into()));
        }
        if !(alpha >= S::zero()) || !alpha.is_finite() {
            return Err(Error::InvalidParameter(format!("alpha must be >= 0, got {alpha}")));
        }
        let plan = TransferPlan::new(def, reference.grid())?;
        Ok(Self {
            reference,
            template,
            pre: NgfPrecomp::new(reference, &params),
            params,
            plan,
            def: def.clone(),
            nodes: def.coordinates(),
            alpha,
            table: offset_table(),
            current: None,
            last: (S::zero(), S::zero()),
            derivative_bytes: std::cell::Cell::new(0),
        })
    }

    pub fn plan(&self) -> &TransferPlan<S> {
        &self.plan
    }

    pub fn deformation_grid(&self) -> &GridDesc<S> {
        &self.def
    }

    /// Largest total size of simultaneously live image-grid derivative
    /// buffers (`dD/dP`, `P p`, `H P p`) so far; 0 before any derivative.
    pub fn peak_derivative_bytes(&self) -> usize {
        self.derivative_bytes.get()
    }

    fn note_derivative_buffers(&self, count: usize) {
        let bytes = count * 3 * self.reference.grid().len() * std::mem::size_of::<S>();
        self.derivative_bytes.set(self.derivative_bytes.get().max(bytes));
    }

    fn check(&self, y: &[S]) -> Result<()> {
        if y.len() != 3 * self.def.len() {
            return Err(Error::LengthMismatch {
                expected: 3 * self.def.len(),
                actual: y.len(),
            });
        }
        Ok(())
    }

    fn parts(&self, y: &[S]) -> (NgfWorkspace<S>, Vec<S>, S, S) {
        let img = self.reference.grid();
        let points = self.plan.apply(y);
        let ws = NgfWorkspace::evaluate(self.template, &points, img, &self.pre, &self.params);
        let u: Vec<S> = y.iter().zip(&self.nodes).map(|(&a, &b)| a - b).collect();
        let d = ngf_value(&ws, img);
        let s = curvature_value(&u, &self.def);
        (ws, u, d, s)
    }

    /// `J` and optionally its gradient; with a gradient, `y` also becomes
    /// the Gauss-Newton linearization point.
    pub fn objective_eval(&mut self, y: &DeformationField<S>, need_gradient: bool) -> Result<(S, Option<Vec<S>>)> {
        if need_gradient {
            let (j, g) = self.value_grad(y.y())?;
            Ok((j, Some(g)))
        } else {
            Ok((self.value(y.y())?, None))
        }
    }

    /// Gauss-Newton operator at the current linearization point:
    /// `P^T H P p + alpha Hess(S) p`.
    pub fn gn_hessian_vec(&self, p: &[S]) -> Vec<S> {
        self.hessian_vec(p)
    }
}

impl<S: Real> Problem<S> for Objective<'_, S> {
    fn dim(&self) -> usize {
        3 * self.def.len()
    }

    fn value(&mut self, y: &[S]) -> Result<S> {
        self.check(y)?;
        let (_, _, d, s) = self.parts(y);
        Ok(d + self.alpha * s)
    }

    fn value_grad(&mut self, y: &[S]) -> Result<(S, Vec<S>)> {
        self.check(y)?;
        let img = self.reference.grid();
        let (ws, u, d, s) = self.parts(y);
        let mut gd = vec![S::zero(); 3 * img.len()];
        self.note_derivative_buffers(1);
        ngf_gradient_into(&ws, &self.pre, img, &mut gd);
        let mut grad = self.plan.apply_transpose(&gd);
        drop(gd);
        let mut tmp = vec![S::zero(); u.len()];
        let mut gs = vec![S::zero(); u.len()];
        curvature_hessian_vec_into(&u, &self.def, &mut tmp, &mut gs);
        axpy(self.alpha, &gs, &mut grad);
        self.current = Some(ws);
        self.last = (d, self.alpha * s);
        Ok((d + self.alpha * s, grad))
    }

    fn hessian_vec(&self, p: &[S]) -> Vec<S> {
        let ws = self
            .current
            .as_ref()
            .expect("hessian_vec needs a prior value_grad");
        let img = self.reference.grid();
        let pp = self.plan.apply(p);
        let mut hp = vec![S::zero(); pp.len()];
        self.note_derivative_buffers(2);
        ngf_hessian_vec_into(&pp, ws, &self.pre, img, &self.table, &mut hp);
        let mut q = self.plan.apply_transpose(&hp);
        axpy(S::one(), &self.regularizer_hessian_vec(p), &mut q);
        q
    }

    fn regularizer_hessian_vec(&self, p: &[S]) -> Vec<S> {
        let mut tmp = vec![S::zero(); p.len()];
        let mut out = vec![S::zero(); p.len()];
        curvature_hessian_vec_into(p, &self.def, &mut tmp, &mut out);
        out.iter_mut().for_each(|v| *v *= self.alpha);
        out
    }

    fn alpha(&self) -> f64 {
        self.alpha.to_f64_lossy()
    }

    fn step_scale(&self) -> f64 {
        self.def.min_spacing().to_f64_lossy()
    }

    fn breakdown(&self) -> (f64, f64) {
        (self.last.0.to_f64_lossy(), self.last.1.to_f64_lossy())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `f(x) = 1/2 x^T diag(d) x - b^T x`.
    struct Quadratic {
        d: Vec<f64>,
        b: Vec<f64>,
        alpha: f64,
    }

    impl Problem<f64> for Quadratic {
        fn dim(&self) -> usize {
            self.d.len()
        }
        fn value(&mut self, x: &[f64]) -> Result<f64> {
            Ok((0..x.len()).map(|i| 0.5 * self.d[i] * x[i] * x[i] - self.b[i] * x[i]).sum())
        }
        fn value_grad(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
            let g = (0..x.len()).map(|i| self.d[i] * x[i] - self.b[i]).collect();
            Ok((self.value(x)?, g))
        }
        fn hessian_vec(&self, p: &[f64]) -> Vec<f64> {
            p.iter().zip(&self.d).map(|(a, b)| a * b).collect()
        }
        fn alpha(&self) -> f64 {
            self.alpha
        }
    }

    fn diag_op(d: &'static [f64]) -> impl Fn(&[f64]) -> Vec<f64> {
        move |v: &[f64]| v.iter().zip(d).map(|(a, b)| a * b).collect()
    }

    #[test]
    fn cg_examples() {
        let cfg = CgConfig {
            rel_tol: 1e-14,
            max_iters: 10,
        };
        let r = cg_solve(|v: &[f64]| v.to_vec(), &[3.0, -1.0, 2.0], &cfg).unwrap();
        assert_eq!(r.x, vec![3.0, -1.0, 2.0]);
        assert_eq!(r.iters, 1);
        let r = cg_solve(diag_op(&[1.0, 2.0]), &[1.0, 2.0], &cfg).unwrap();
        assert!(r.iters <= 2);
        assert!((r.x[0] - 1.0).abs() < 1e-12 && (r.x[1] - 1.0).abs() < 1e-12);
        let r = cg_solve(diag_op(&[1.0, 2.0]), &[0.0, 0.0], &cfg).unwrap();
        assert_eq!((r.x, r.iters), (vec![0.0, 0.0], 0));
        assert!(cg_solve(|v: &[f64]| v.iter().map(|_| f64::NAN).collect(), &[1.0], &cfg).is_err());
    }

    #[test]
    fn cg_single_step_is_descent() {
        let cfg = CgConfig {
            rel_tol: 1e-14,
            max_iters: 1,
        };
        let b = [1.0, -2.0, 0.5];
        let r = cg_solve(diag_op(&[1.0, 10.0, 100.0]), &b, &cfg).unwrap();
        assert!(r.x.iter().zip(&b).map(|(x, b)| x * b).sum::<f64>() > 0.0);
    }

    #[test]
    fn armijo_examples() {
        let cfg = ArmijoConfig::default();
        let f = |x: &[f64]| Ok(x[0] * x[0]);
        let ls = armijo_search(f, &[1.0], 1.0, &[-2.0], &[2.0], &cfg).unwrap();
        assert!(ls.accepted);
        assert_eq!(ls.step, 0.5);
        assert_eq!(ls.value, 0.0);
        // Newton step on a quadratic
        let ls = armijo_search(f, &[1.0], 1.0, &[-1.0], &[2.0], &cfg).unwrap();
        assert_eq!(ls.step, 1.0);
        assert!(matches!(
            armijo_search(f, &[1.0], 1.0, &[2.0], &[2.0], &cfg),
            Err(Error::NotDescent(_))
        ));
    }

    #[test]
    fn lbfgs_on_identity_quadratic() {
        let mut q = Quadratic {
            d: vec![1.0; 4],
            b: vec![0.0; 4],
            alpha: 0.0,
        };
        let cfg = OptimizerConfig {
            gamma: Some(1.0),
            max_step_rel: None,
            ..Default::default()
        };
        let (x, trace) = lbfgs_minimize(&mut q, &[1.0, -2.0, 3.0, 0.5], &cfg).unwrap();
        assert!(trace.records.len() <= 2);
        assert!(x.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn lbfgs_zero_iterations_and_monotone_trace() {
        let mut q = Quadratic {
            d: vec![1.0, 4.0, 9.0, 30.0],
            b: vec![1.0, 1.0, 1.0, 1.0],
            alpha: 0.0,
        };
        let x0 = [0.3, 0.2, -0.5, 2.0];
        let cfg = OptimizerConfig {
            max_iters: 0,
            ..Default::default()
        };
        let (x, trace) = lbfgs_minimize(&mut q, &x0, &cfg).unwrap();
        assert_eq!(x, x0.to_vec());
        assert!(trace.records.is_empty());
        let cfg = OptimizerConfig {
            gamma: Some(1.0),
            max_iters: 50,
            rel_change_tol: 1e-14,
            grad_rel_tol: 1e-10,
            step_rel_tol: 1e-12,
            ..Default::default()
        };
        let (x, trace) = lbfgs_minimize(&mut q, &x0, &cfg).unwrap();
        let mut prev = trace.initial_value;
        for r in &trace.records {
            assert!(r.value <= prev);
            prev = r.value;
        }
        for i in 0..4 {
            assert!((x[i] - 1.0 / q.d[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn gauss_newton_examples() {
        let mut q = Quadratic {
            d: vec![2.0, 5.0],
            b: vec![2.0, 5.0],
            alpha: 0.0,
        };
        // already at the minimizer
        let (x, trace) = gauss_newton_minimize(&mut q, &[1.0, 1.0], &OptimizerConfig::default()).unwrap();
        assert_eq!(x, vec![1.0, 1.0]);
        assert!(trace.records.is_empty());
        assert_eq!(trace.stop, StopReason::GradientNorm);
        let cfg = OptimizerConfig {
            cg: CgConfig {
                rel_tol: 1e-12,
                max_iters: 1,
            },
            max_iters: 3,
            ..Default::default()
        };
        let (_, trace) = gauss_newton_minimize(&mut q, &[0.0, 0.0], &cfg).unwrap();
        assert!(!trace.records.is_empty());
        assert!(trace.records[0].value < trace.initial_value);
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::default().validate().is_ok());
        let bad = OptimizerConfig {
            history: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = OptimizerConfig {
            gamma: Some(-1.0),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
