//! Operation counters for the coefficient-count identities.
//!
//! Counting is compiled in only with the `instrument` feature; otherwise the
//! recording functions are empty and [`enabled`] returns `false`.

#[cfg(feature = "instrument")]
use std::sync::atomic::{AtomicU64, Ordering};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounts {
    /// Evaluations of the NGF residual-derivative coefficients.
    pub rho_evals: u64,
    /// Image-derivative point loads inside the Hessian-vector kernel.
    pub hvp_dt_loads: u64,
    /// Image-derivative evaluations inside the gradient kernel.
    pub grad_dt_evals: u64,
    /// Coefficient stores performed by the sparse-matrix assembly.
    pub oracle_stores: u64,
}

#[cfg(feature = "instrument")]
static RHO: AtomicU64 = AtomicU64::new(0);
#[cfg(feature = "instrument")]
static HVP_DT: AtomicU64 = AtomicU64::new(0);
#[cfg(feature = "instrument")]
static GRAD_DT: AtomicU64 = AtomicU64::new(0);
#[cfg(feature = "instrument")]
static STORES: AtomicU64 = AtomicU64::new(0);

pub const fn enabled() -> bool {
    cfg!(feature = "instrument")
}

#[inline(always)]
pub(crate) fn add_rho(_n: u64) {
    #[cfg(feature = "instrument")]
    RHO.fetch_add(_n, Ordering::Relaxed);
}

#[inline(always)]
pub(crate) fn add_hvp_dt(_n: u64) {
    #[cfg(feature = "instrument")]
    HVP_DT.fetch_add(_n, Ordering::Relaxed);
}

#[inline(always)]
pub(crate) fn add_grad_dt(_n: u64) {
    #[cfg(feature = "instrument")]
    GRAD_DT.fetch_add(_n, Ordering::Relaxed);
}

#[inline(always)]
pub(crate) fn add_stores(_n: u64) {
    #[cfg(feature = "instrument")]
    STORES.fetch_add(_n, Ordering::Relaxed);
}

pub fn reset() {
    #[cfg(feature = "instrument")]
    for c in [&RHO, &HVP_DT, &GRAD_DT, &STORES] {
        c.store(0, Ordering::Relaxed);
    }
}

pub fn snapshot() -> OpCounts {
    #[cfg(feature = "instrument")]
    {
        OpCounts {
            rho_evals: RHO.load(Ordering::Relaxed),
            hvp_dt_loads: HVP_DT.load(Ordering::Relaxed),
            grad_dt_evals: GRAD_DT.load(Ordering::Relaxed),
            oracle_stores: STORES.load(Ordering::Relaxed),
        }
    }
    #[cfg(not(feature = "instrument"))]
    OpCounts::default()
}

/// Runs `f` and returns the counts it produced.
///
/// The counters are process-global; concurrent instrumented work on other
/// threads leaks into the result.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, OpCounts) {
    let before = snapshot();
    let out = f();
    let after = snapshot();
    (
        out,
        OpCounts {
            rho_evals: after.rho_evals - before.rho_evals,
            hvp_dt_loads: after.hvp_dt_loads - before.hvp_dt_loads,
            grad_dt_evals: after.grad_dt_evals - before.grad_dt_evals,
            oracle_stores: after.oracle_stores - before.oracle_stores,
        },
    )
}
