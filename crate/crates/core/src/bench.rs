//! Desk-scale measurement harness: kernel timings, thread scaling, memory
//! and operation counts.

use std::alloc::{GlobalAlloc, Layout, System};
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use crate::curvature::{curvature_hessian_vec_into, curvature_value};
use crate::image::{SampledTemplate, Volume};
use crate::instrument::{self, OpCounts};
use crate::multilevel::deformation_grid_for;
use crate::ngf::{
    ngf_gradient_into, ngf_hessian_vec_into, ngf_value, offset_table, NgfParams, NgfPrecomp, NgfWorkspace,
    OffsetEntry,
};
use crate::oracle::OracleSystem;
use crate::synthetic::{jittered_deformation, random_vector, warp_case};
use crate::transfer::TransferPlan;
use crate::{Error, GridDesc, Result};

/// Default memory budget for oracle configurations.
pub const DEFAULT_BUDGET_BYTES: usize = 4 << 30;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

/// System allocator that tracks live and peak heap bytes. Install it with
/// `#[global_allocator]` in a binary or test target to enable
/// [`bench_memory`].
pub struct CountingAlloc;

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            if new_size >= layout.size() {
                let now = CURRENT.fetch_add(new_size - layout.size(), Ordering::Relaxed) + new_size - layout.size();
                PEAK.fetch_max(now, Ordering::Relaxed);
            } else {
                CURRENT.fetch_sub(layout.size() - new_size, Ordering::Relaxed);
            }
        }
        p
    }
}

impl CountingAlloc {
    /// Whether a `CountingAlloc` is the active global allocator.
    pub fn active() -> bool {
        let before = CURRENT.load(Ordering::Relaxed);
        let probe = std::hint::black_box(vec![0u8; 1 << 16]);
        let during = CURRENT.load(Ordering::Relaxed);
        drop(probe);
        during >= before + (1 << 16)
    }

    pub fn current() -> usize {
        CURRENT.load(Ordering::Relaxed)
    }

    /// Peak heap bytes above the level at entry while `f` runs.
    pub fn peak_during<T>(f: impl FnOnce() -> T) -> (T, usize) {
        let base = CURRENT.load(Ordering::Relaxed);
        PEAK.store(base, Ordering::Relaxed);
        let out = f();
        (out, PEAK.load(Ordering::Relaxed).saturating_sub(base))
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn time_median(repeats: usize, mut f: impl FnMut()) -> f64 {
    median(
        (0..repeats.max(1))
            .map(|_| {
                let t = Instant::now();
                f();
                t.elapsed().as_secs_f64()
            })
            .collect(),
    )
}

/// One benchmark configuration: phantom images, a jittered deformation and
/// everything the kernels read, all in `f64`.
pub struct Setup {
    pub reference: Volume<f64>,
    pub template: Volume<f64>,
    pub def: GridDesc<f64>,
    pub params: NgfParams<f64>,
    pub pre: NgfPrecomp<f64>,
    pub plan: TransferPlan<f64>,
    pub table: Vec<OffsetEntry>,
    pub y: Vec<f64>,
    /// `y` minus the nodal coordinates.
    pub u: Vec<f64>,
    pub sampled: SampledTemplate<f64>,
    pub ws: NgfWorkspace<f64>,
    /// Random direction on the deformation grid and its transfer.
    pub p: Vec<f64>,
    pub pp: Vec<f64>,
}

impl Setup {
    pub fn new(size: usize, ratio: usize, seed: u64) -> Result<Self> {
        let case = warp_case::<f64>([size; 3], [1.0; 3], 2.0)?;
        let img = case.reference.grid().clone();
        let def = deformation_grid_for(&img, ratio)?;
        let params = NgfParams::new(10.0, 10.0)?;
        let pre = NgfPrecomp::new(&case.reference, &params);
        let plan = TransferPlan::new(&def, &img)?;
        let y = jittered_deformation(&def, seed, 0.3).into_y();
        let u: Vec<f64> = y.iter().zip(def.coordinates()).map(|(a, b)| a - b).collect();
        let sampled = case.template.sample_deformed(&plan.apply(&y));
        let ws = NgfWorkspace::from_sampled(sampled.clone(), &img, &pre, &params);
        let p = random_vector(3 * def.len(), seed ^ 0xbe7c);
        let pp = plan.apply(&p);
        Ok(Self {
            reference: case.reference,
            template: case.template,
            def,
            params,
            pre,
            plan,
            table: offset_table(),
            y,
            u,
            sampled,
            ws,
            p,
            pp,
        })
    }

    pub fn image_grid(&self) -> &GridDesc<f64> {
        self.reference.grid()
    }

    /// Matrix-free objective gradient: residuals, `dD/dP`, `P^T` and the
    /// regularizer term.
    pub fn mf_gradient(&self, sampled: SampledTemplate<f64>, bufs: &mut Buffers) {
        let img = self.image_grid();
        let ws = NgfWorkspace::from_sampled(sampled, img, &self.pre, &self.params);
        ngf_gradient_into(&ws, &self.pre, img, &mut bufs.img);
        self.plan.apply_transpose_into(&bufs.img, &mut bufs.def);
        curvature_hessian_vec_into(&self.u, &self.def, &mut bufs.tmp, &mut bufs.def2);
        for (g, r) in bufs.def.iter_mut().zip(&bufs.def2) {
            *g += r;
        }
    }

    /// Matrix-free Gauss-Newton product `P^T H P p + Hess(S) p`.
    pub fn mf_hvp(&self, bufs: &mut Buffers) {
        let img = self.image_grid();
        self.plan.apply_into(&self.p, &mut bufs.img);
        ngf_hessian_vec_into(&bufs.img, &self.ws, &self.pre, img, &self.table, &mut bufs.img2);
        self.plan.apply_transpose_into(&bufs.img2, &mut bufs.def);
        curvature_hessian_vec_into(&self.p, &self.def, &mut bufs.tmp, &mut bufs.def2);
        for (g, r) in bufs.def.iter_mut().zip(&bufs.def2) {
            *g += r;
        }
    }

    pub fn oracle(&self) -> Result<OracleSystem<f64>> {
        OracleSystem::assemble(&self.reference, &self.sampled, &self.params, &self.def, 1.0)
    }

    pub fn buffers(&self) -> Buffers {
        let (n, ny) = (3 * self.image_grid().len(), 3 * self.def.len());
        Buffers {
            img: vec![0.0; n],
            img2: vec![0.0; n],
            def: vec![0.0; ny],
            def2: vec![0.0; ny],
            tmp: vec![0.0; ny],
        }
    }
}

/// Preallocated outputs for the matrix-free paths.
pub struct Buffers {
    pub img: Vec<f64>,
    pub img2: Vec<f64>,
    pub def: Vec<f64>,
    pub def2: Vec<f64>,
    pub tmp: Vec<f64>,
}

/// Conservative heap estimate for assembling the oracle and forming its
/// products (CSR entries at 16 bytes plus construction scratch).
pub fn oracle_bytes_estimate(image_voxels: usize, deform_nodes: usize) -> usize {
    // dr 7, dT 3, P 8, dr^T dr 25 (and its transposed copies), triplet
    // scratch for each; vectors of length 3m.
    image_voxels * 16 * 160 + deform_nodes * 16 * 60
}

pub const KERNEL_COLUMNS: [&str; 13] = [
    "ngf_value",
    "ngf_gradient",
    "ngf_hvp",
    "curvature_value",
    "curvature_hvp",
    "apply",
    "apply_transpose",
    "mf_gradient",
    "mf_hvp",
    "oracle_gradient",
    "oracle_hvp",
    "speedup_gradient",
    "speedup_hvp",
];

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Seconds(f64),
    Ratio(f64),
    /// Skipped: estimated memory above the budget.
    OutOfMemory,
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Cell::Seconds(s) => write!(f, "{s:.6}"),
            Cell::Ratio(r) => write!(f, "{r:.2}"),
            Cell::OutOfMemory => f.write_str("*"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelRow {
    pub image: usize,
    pub deform: usize,
    /// Median wall time per column of [`KERNEL_COLUMNS`].
    pub cells: Vec<Cell>,
}

impl KernelRow {
    pub fn get(&self, column: &str) -> Option<&Cell> {
        KERNEL_COLUMNS.iter().position(|c| *c == column).map(|k| &self.cells[k])
    }

    pub fn seconds(&self, column: &str) -> Option<f64> {
        match self.get(column)? {
            Cell::Seconds(s) | Cell::Ratio(s) => Some(*s),
            Cell::OutOfMemory => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelTable {
    pub repeats: usize,
    pub threads: usize,
    pub rows: Vec<KernelRow>,
}

impl KernelTable {
    pub fn to_tsv(&self) -> String {
        let mut s = format!("image\tdeform\t{}\n", KERNEL_COLUMNS.join("\t"));
        for r in &self.rows {
            let cells: Vec<String> = r.cells.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(s, "{}\t{}\t{}", r.image, r.deform, cells.join("\t"));
        }
        s
    }

    pub fn to_key_value(&self) -> String {
        let mut s = format!("kernels.repeats: {}\nkernels.threads: {}\n", self.repeats, self.threads);
        for r in &self.rows {
            for (c, v) in KERNEL_COLUMNS.iter().zip(&r.cells) {
                let _ = writeln!(s, "kernels.{}_{}.{c}: {v}", r.image, r.deform);
            }
        }
        s
    }
}

/// Median-of-`repeats` kernel times for every `(size^3, ratio)` pair. The
/// oracle columns are `*` where its estimated footprint exceeds
/// `budget_bytes`. Runs in the current rayon pool.
pub fn bench_kernels(sizes: &[usize], ratios: &[usize], repeats: usize, budget_bytes: usize) -> Result<KernelTable> {
    let mut rows = Vec::new();
    for &size in sizes {
        for &ratio in ratios {
            let s = Setup::new(size, ratio, 1)?;
            rows.push(kernel_row(&s, size, repeats, budget_bytes)?);
        }
    }
    Ok(KernelTable {
        repeats,
        threads: rayon::current_num_threads(),
        rows,
    })
}

fn kernel_row(s: &Setup, size: usize, repeats: usize, budget: usize) -> Result<KernelRow> {
    let img = s.image_grid();
    let mut b = s.buffers();
    let mut cells = Vec::with_capacity(KERNEL_COLUMNS.len());
    let sampled_copy = || s.sampled.clone();

    let mut value_times = Vec::new();
    for _ in 0..repeats.max(1) {
        let sm = sampled_copy();
        let t = Instant::now();
        let ws = NgfWorkspace::from_sampled(sm, img, &s.pre, &s.params);
        std::hint::black_box(ngf_value(&ws, img));
        value_times.push(t.elapsed().as_secs_f64());
    }
    cells.push(Cell::Seconds(median(value_times)));
    cells.push(Cell::Seconds(time_median(repeats, || {
        ngf_gradient_into(&s.ws, &s.pre, img, &mut b.img)
    })));
    cells.push(Cell::Seconds(time_median(repeats, || {
        ngf_hessian_vec_into(&s.pp, &s.ws, &s.pre, img, &s.table, &mut b.img2)
    })));
    cells.push(Cell::Seconds(time_median(repeats, || {
        std::hint::black_box(curvature_value(&s.u, &s.def));
    })));
    cells.push(Cell::Seconds(time_median(repeats, || {
        curvature_hessian_vec_into(&s.u, &s.def, &mut b.tmp, &mut b.def2)
    })));
    cells.push(Cell::Seconds(time_median(repeats, || s.plan.apply_into(&s.y, &mut b.img))));
    cells.push(Cell::Seconds(time_median(repeats, || {
        s.plan.apply_transpose_into(&b.img2, &mut b.def)
    })));

    let mut grad_times = Vec::new();
    for _ in 0..repeats.max(1) {
        let sm = sampled_copy();
        let t = Instant::now();
        s.mf_gradient(sm, &mut b);
        grad_times.push(t.elapsed().as_secs_f64());
    }
    let mf_grad = median(grad_times);
    let mf_hvp = time_median(repeats, || s.mf_hvp(&mut b));
    cells.push(Cell::Seconds(mf_grad));
    cells.push(Cell::Seconds(mf_hvp));

    if oracle_bytes_estimate(img.len(), s.def.len()) > budget {
        cells.extend([Cell::OutOfMemory, Cell::OutOfMemory, Cell::OutOfMemory, Cell::OutOfMemory]);
    } else {
        let og = time_median(repeats, || {
            let sys = s.oracle().expect("oracle assembly");
            std::hint::black_box(sys.gradient(&s.u));
        });
        let sys = s.oracle()?;
        let oh = time_median(repeats, || {
            std::hint::black_box(sys.hvp(&s.p));
        });
        cells.extend([
            Cell::Seconds(og),
            Cell::Seconds(oh),
            Cell::Ratio(og / mf_grad),
            Cell::Ratio(oh / mf_hvp),
        ]);
    }
    Ok(KernelRow {
        image: size,
        deform: s.def.m[0],
        cells,
    })
}

pub const SCALING_KERNELS: [&str; 5] = ["ngf_gradient", "ngf_hvp", "curvature_hvp", "apply", "apply_transpose"];

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingRow {
    pub threads: usize,
    /// Median seconds per entry of [`SCALING_KERNELS`].
    pub seconds: Vec<f64>,
    /// Single-thread time over this time.
    pub speedup: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingTable {
    pub image: usize,
    pub deform: usize,
    pub physical_cores: usize,
    pub rows: Vec<ScalingRow>,
    /// Every kernel output is bit-identical to the single-thread output.
    pub bit_identical: bool,
}

impl ScalingTable {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("threads");
        for k in SCALING_KERNELS {
            let _ = write!(s, "\t{k}_s\t{k}_speedup");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{}", r.threads);
            for (t, x) in r.seconds.iter().zip(&r.speedup) {
                let _ = write!(s, "\t{t:.6}\t{x:.2}");
            }
            s.push('\n');
        }
        s
    }

    pub fn to_key_value(&self) -> String {
        let mut s = format!(
            "scaling.image: {}\nscaling.deform: {}\nscaling.physical_cores: {}\nscaling.bit_identical: {}\n",
            self.image, self.deform, self.physical_cores, self.bit_identical
        );
        for r in &self.rows {
            for (k, x) in SCALING_KERNELS.iter().zip(&r.speedup) {
                let _ = writeln!(s, "scaling.{}.{k}_speedup: {x:.3}", r.threads);
            }
        }
        s
    }
}

pub fn physical_cores() -> usize {
    num_cpus::get_physical()
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Unsupported(format!("cannot build a {threads}-thread pool: {e}")))
}

/// Times the kernels in dedicated pools of each thread count (the first
/// entry should be 1) and checks outputs for bit identity.
pub fn bench_scaling(threads: &[usize], size: usize, ratio: usize, repeats: usize) -> Result<ScalingTable> {
    if threads.is_empty() {
        return Err(Error::InvalidParameter("empty thread list".into()));
    }
    let s = Setup::new(size, ratio, 2)?;
    let img = s.image_grid();
    let mut rows: Vec<ScalingRow> = Vec::new();
    let mut reference_out: Option<Vec<Vec<f64>>> = None;
    let mut identical = true;
    let mut base: Option<Vec<f64>> = None;
    for &n in threads {
        let mut b = s.buffers();
        let (seconds, outs) = pool(n)?.install(|| {
            let mut t = Vec::new();
            let mut outs = Vec::new();
            t.push(time_median(repeats, || ngf_gradient_into(&s.ws, &s.pre, img, &mut b.img)));
            outs.push(b.img.clone());
            t.push(time_median(repeats, || {
                ngf_hessian_vec_into(&s.pp, &s.ws, &s.pre, img, &s.table, &mut b.img2)
            }));
            outs.push(b.img2.clone());
            t.push(time_median(repeats, || {
                curvature_hessian_vec_into(&s.p, &s.def, &mut b.tmp, &mut b.def2)
            }));
            outs.push(b.def2.clone());
            t.push(time_median(repeats, || s.plan.apply_into(&s.y, &mut b.img)));
            outs.push(b.img.clone());
            t.push(time_median(repeats, || s.plan.apply_transpose_into(&b.img2, &mut b.def)));
            outs.push(b.def.clone());
            (t, outs)
        });
        match &reference_out {
            None => reference_out = Some(outs),
            Some(r) => {
                identical &= r
                    .iter()
                    .zip(&outs)
                    .all(|(a, b)| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
        let b0 = base.get_or_insert_with(|| seconds.clone());
        let speedup = b0.iter().zip(&seconds).map(|(a, b)| a / b).collect();
        rows.push(ScalingRow {
            threads: n,
            seconds,
            speedup,
        });
    }
    Ok(ScalingTable {
        image: size,
        deform: s.def.m[0],
        physical_cores: physical_cores(),
        rows,
        bit_identical: identical,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryReport {
    pub image: usize,
    pub deform: usize,
    /// Transient heap peak of one matrix-free gradient plus one HVP kernel
    /// call with preallocated inputs and outputs.
    pub matrix_free_aux_bytes: usize,
    /// Transient heap peak of oracle assembly plus one gradient and one HVP.
    pub oracle_aux_bytes: usize,
    /// Images, workspace, deformation and output buffers.
    pub persistent_bytes: usize,
}

impl MemoryReport {
    pub fn to_key_value(&self) -> String {
        format!(
            "memory.{i}_{d}.matrix_free_aux_bytes: {}\nmemory.{i}_{d}.oracle_aux_bytes: {}\nmemory.{i}_{d}.persistent_bytes: {}\n",
            self.matrix_free_aux_bytes,
            self.oracle_aux_bytes,
            self.persistent_bytes,
            i = self.image,
            d = self.deform
        )
    }
}

/// Requires [`CountingAlloc`] as the global allocator.
pub fn bench_memory(size: usize, ratio: usize) -> Result<MemoryReport> {
    if !CountingAlloc::active() {
        return Err(Error::Unsupported(
            "memory accounting needs CountingAlloc as the global allocator".into(),
        ));
    }
    let before = CountingAlloc::current();
    let s = Setup::new(size, ratio, 3)?;
    let mut b = s.buffers();
    let persistent = CountingAlloc::current().saturating_sub(before);
    let img = s.image_grid();
    let ((), mf) = CountingAlloc::peak_during(|| {
        ngf_gradient_into(&s.ws, &s.pre, img, &mut b.img);
        ngf_hessian_vec_into(&s.pp, &s.ws, &s.pre, img, &s.table, &mut b.img2);
    });
    let ((), oracle) = CountingAlloc::peak_during(|| {
        let sys = s.oracle().expect("oracle assembly");
        std::hint::black_box(sys.ngf_gradient());
        std::hint::black_box(sys.ngf_hvp(&s.pp));
    });
    Ok(MemoryReport {
        image: size,
        deform: s.def.m[0],
        matrix_free_aux_bytes: mf,
        oracle_aux_bytes: oracle,
        persistent_bytes: persistent,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpReport {
    pub image_voxels: usize,
    pub deform_nodes: usize,
    pub hvp: OpCounts,
    pub gradient: OpCounts,
    pub assembly: OpCounts,
    /// Stored entries of the residual Jacobian alone.
    pub dr_nnz: usize,
}

impl OpReport {
    pub fn to_key_value(&self) -> String {
        format!(
            "ops.image_voxels: {}\nops.deform_nodes: {}\nops.hvp_rho_evals: {}\nops.hvp_dt_loads: {}\n\
             ops.gradient_rho_evals: {}\nops.gradient_dt_evals: {}\nops.oracle_stores: {}\nops.oracle_dr_stores: {}\n",
            self.image_voxels,
            self.deform_nodes,
            self.hvp.rho_evals,
            self.hvp.hvp_dt_loads,
            self.gradient.rho_evals,
            self.gradient.grad_dt_evals,
            self.assembly.oracle_stores,
            self.dr_nnz
        )
    }
}

/// Counters for one HVP, one gradient and one oracle assembly. Needs the
/// `instrument` feature; the counters are process-global, so nothing else
/// may run instrumented kernels concurrently.
pub fn count_ops(size: usize, ratio: usize) -> Result<OpReport> {
    if !instrument::enabled() {
        return Err(Error::Unsupported("operation counts need the `instrument` feature".into()));
    }
    let s = Setup::new(size, ratio, 4)?;
    let img = s.image_grid();
    let mut b = s.buffers();
    let ((), hvp) = instrument::measure(|| ngf_hessian_vec_into(&s.pp, &s.ws, &s.pre, img, &s.table, &mut b.img2));
    let ((), gradient) = instrument::measure(|| ngf_gradient_into(&s.ws, &s.pre, img, &mut b.img));
    let (sys, assembly) = instrument::measure(|| s.oracle());
    Ok(OpReport {
        image_voxels: img.len(),
        deform_nodes: s.def.len(),
        hvp,
        gradient,
        assembly,
        dr_nnz: sys?.dr.nnz(),
    })
}
