//! End-to-end acceptance checks. Each criterion prints one line; the test
//! fails if any criterion that can be evaluated here fails.
//!
//! Timing criteria are meaningful only with optimizations (the workspace
//! test profile enables them).

use std::io::Write;
use std::process::Command;

use ngfreg::bench::{self, CountingAlloc, DEFAULT_BUDGET_BYTES};
use ngfreg::curvature::curvature_value;
use ngfreg::multilevel::{register_multilevel, RegistrationConfig};
use ngfreg::selftest::{self, SelftestConfig, SuiteResult};
use ngfreg::synthetic::{endpoint_error, random_vector, warp_case};
use ngfreg::transfer::TransferPlan;
use ngfreg::Grid64;

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

enum Outcome {
    Pass(String),
    Fail(String),
    NotEvaluated(String),
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn suite_detail(r: &SuiteResult) -> String {
    format!("{} cases={} worst={:.3e} tol={:.0e}", r.name, r.cases, r.worst, r.tolerance)
}

fn oracle_equivalence() -> Outcome {
    let r = selftest::oracle_suite(&SelftestConfig::default()).unwrap();
    verdict(r.cases >= 10 && r.worst <= 1e-12, suite_detail(&r))
}

fn finite_differences() -> Outcome {
    let r = selftest::finite_difference_suite(&SelftestConfig::default()).unwrap();
    verdict(r.cases == 20 && r.worst <= 1e-6, suite_detail(&r))
}

fn operator_properties() -> Outcome {
    let cfg = SelftestConfig::default();
    let psd = selftest::psd_suite(&cfg).unwrap();
    let adj = selftest::adjointness_suite(&cfg).unwrap();

    // curvature of a constant displacement vanishes, random ones are positive
    let g = Grid64::nodal_with_extent([6, 5, 7], [3.0, 2.5, 4.0]).unwrap();
    let n = g.len();
    let mut constant = vec![0.7; n];
    constant.extend(vec![-1.3; n]);
    constant.extend(vec![2.1; n]);
    let zero = curvature_value(&constant, &g);
    let positive = (0..20).all(|k| curvature_value(&random_vector::<f64>(3 * n, k), &g) > 0.0);

    verdict(
        psd.cases >= 50 && psd.worst <= 1e-12 && adj.worst <= 1e-12 && zero == 0.0 && positive,
        format!("{}; {}; constant curvature={zero:e}", suite_detail(&psd), suite_detail(&adj)),
    )
}

fn counting_identities() -> Outcome {
    let mut details = Vec::new();
    let mut ok = true;
    for size in [12, 16] {
        let r = bench::count_ops(size, 4).unwrap();
        let m = r.image_voxels as u64;
        let my = r.deform_nodes as u64;
        let store_bound = 19 * m + 25 * my;
        ok &= r.hvp.rho_evals == 98 * m && r.hvp.hvp_dt_loads == 25 * m && r.assembly.oracle_stores <= store_bound;
        details.push(format!(
            "{size}^3: rho={} (98m={}), dT={} (25m={}), stores={} (bound {store_bound})",
            r.hvp.rho_evals,
            98 * m,
            r.hvp.hvp_dt_loads,
            25 * m,
            r.assembly.oracle_stores
        ));
    }
    verdict(ok, details.join("; "))
}

fn memory_complexity() -> Outcome {
    let small = bench::bench_memory(32, 4).unwrap();
    let large = bench::bench_memory(64, 4).unwrap();
    let mf_a = small.matrix_free_aux_bytes as f64;
    let mf_b = large.matrix_free_aux_bytes as f64;
    let variation = (mf_b - mf_a).abs() / mf_a.max(1.0);
    let growth = large.oracle_aux_bytes as f64 / small.oracle_aux_bytes as f64;
    verdict(
        variation < 0.10 && growth >= 5.0,
        format!(
            "matrix-free {} -> {} B ({:.1}%), oracle {} -> {} B ({growth:.2}x)",
            small.matrix_free_aux_bytes,
            large.matrix_free_aux_bytes,
            100.0 * variation,
            small.oracle_aux_bytes,
            large.oracle_aux_bytes
        ),
    )
}

fn thread_scaling() -> Outcome {
    let cores = bench::physical_cores();
    if cores >= 8 {
        let t = bench::bench_scaling(&[1, 8], 128, 4, 5).unwrap();
        let at8 = &t.rows[1];
        let ok = t.bit_identical && at8.speedup.iter().all(|&s| s >= 5.0);
        return verdict(ok, format!("speedups at 8 threads {:?}, bit identical {}", at8.speedup, t.bit_identical));
    }
    // the bit-identity half is still checked here
    let t = bench::bench_scaling(&[1, 2, 4], 128, 4, 1).unwrap();
    if !t.bit_identical {
        return Outcome::Fail("outputs differ across 1/2/4 threads".into());
    }
    Outcome::NotEvaluated(format!(
        "requires >=8 physical cores, found {cores}; outputs bit-identical across 1/2/4 threads"
    ))
}

fn speedup_vs_oracle() -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let t = pool
        .install(|| bench::bench_kernels(&[64], &[4], 5, DEFAULT_BUDGET_BYTES))
        .unwrap();
    let row = &t.rows[0];
    let (Some(g), Some(h)) = (row.seconds("speedup_gradient"), row.seconds("speedup_hvp")) else {
        return Outcome::Fail("oracle did not fit the memory budget".into());
    };
    verdict(
        row.deform == 17 && g >= 2.0 && h >= 5.0,
        format!(
            "64^3/{}^3 gradient {g:.1}x ({:.3}s vs {:.3}s), hvp {h:.1}x ({:.3}s vs {:.3}s)",
            row.deform,
            row.seconds("mf_gradient").unwrap(),
            row.seconds("oracle_gradient").unwrap(),
            row.seconds("mf_hvp").unwrap(),
            row.seconds("oracle_hvp").unwrap()
        ),
    )
}

fn warp_recovery() -> Outcome {
    let c = warp_case::<f64>([64; 3], [1.0; 3], 3.0).unwrap();
    let g = c.reference.grid().clone();
    let before = endpoint_error(&g, &g.coordinates(), &c.warp);
    let reg = register_multilevel(&c.reference, &c.template, &RegistrationConfig::default()).unwrap();
    let plan = TransferPlan::new(reg.deformation.grid(), &g).unwrap();
    let after = endpoint_error(&g, &plan.apply(reg.deformation.y()), &c.warp);
    let reduction = 1.0 - after / before;
    let monotone = reg.levels.iter().all(|l| {
        let mut prev = l.trace.initial_value;
        l.trace.records.iter().all(|r| {
            let ok = r.value <= prev;
            prev = r.value;
            ok
        })
    });
    verdict(
        after <= 1.0 && reduction >= 0.70 && monotone,
        format!(
            "mean endpoint error {before:.3} -> {after:.3} voxels ({:.0}% reduction), monotone objective {monotone}",
            100.0 * reduction
        ),
    )
}

fn identity_landmarks() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let pts = "10 20 30\n0 0 0\n63 1 17\n5.5 2.25 40\n";
    let (f, m) = (dir.path().join("fixed.txt"), dir.path().join("moving.txt"));
    std::fs::write(&f, pts).unwrap();
    std::fs::write(&m, pts).unwrap();
    let def = dir.path().join("identity.bin");
    let g = Grid64::nodal_with_extent([17, 17, 9], [64.0, 64.0, 100.0]).unwrap();
    ngfreg::io::write_deformation(&def, &ngfreg::curvature::DeformationField::identity(g).unwrap()).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_ngfreg"))
        .args(["eval-landmarks", "--spacing", "1,1,2.5", "--fixed-landmarks"])
        .arg(&f)
        .arg("--moving-landmarks")
        .arg(&m)
        .arg("--deformation")
        .arg(&def)
        .output()
        .unwrap();
    let out = String::from_utf8_lossy(&o.stdout);
    let after: Option<f64> = out
        .lines()
        .find_map(|l| l.strip_prefix("after.mean: "))
        .and_then(|v| v.parse().ok());
    verdict(
        o.status.success() && after == Some(0.0),
        format!("identity mean error {after:?} over 4 landmarks"),
    )
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("oracle equivalence", oracle_equivalence),
        ("finite-difference consistency", finite_differences),
        ("operator properties", operator_properties),
        ("counting identities", counting_identities),
        ("memory complexity", memory_complexity),
        ("thread scaling", thread_scaling),
        ("speedup vs sparse oracle", speedup_vs_oracle),
        ("synthetic warp recovery", warp_recovery),
        ("landmark evaluation", identity_landmarks),
    ];
    // straight to the handle so the lines show up even when libtest
    // captures output
    let mut err = std::io::stderr();
    let mut failed = Vec::new();
    for (k, (name, run)) in criteria.iter().enumerate() {
        let line = match run() {
            Outcome::Pass(d) => format!("PASS {name}: {d}"),
            Outcome::NotEvaluated(d) => format!("NOT EVALUATED {name}: {d}"),
            Outcome::Fail(d) => {
                failed.push(k + 1);
                format!("FAIL {name}: {d}")
            }
        };
        writeln!(err, "criterion {}: {line}", k + 1).unwrap();
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
