use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ngfreg::curvature::{DeformationField, Displacement};
use ngfreg::multilevel::deformation_grid_for;
use ngfreg::synthetic::phantom;
use ngfreg::{io, Grid64, Volume64};

fn ngfreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ngfreg"))
        .args(args)
        .output()
        .expect("running ngfreg")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Value of the first `key: value` line with this key.
fn field<'a>(out: &'a str, key: &str) -> &'a str {
    out.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(": ")))
        .unwrap_or_else(|| panic!("no `{key}` in\n{out}"))
}

fn phantom_file(dir: &Path, name: &str, n: usize) -> (PathBuf, Volume64) {
    let g = Grid64::cell_centered([n; 3], [1.0; 3]).unwrap();
    let v = phantom(&g);
    let p = dir.join(name);
    io::write_volume(&p, &v).unwrap();
    (p, v)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn register_identical_images_stays_at_identity() {
    let dir = tempfile::tempdir().unwrap();
    let (img, _) = phantom_file(dir.path(), "a.mhd", 16);
    let def = dir.path().join("y.bin");
    let warped = dir.path().join("w.mhd");
    let o = ngfreg(&[
        "register", "--fixed", s(&img), "--moving", s(&img), "--out-deformation", s(&def),
        "--out-warped", s(&warped), "--levels", "2", "--max-iters", "5",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert_eq!(field(&out, "levels"), "2");
    assert_eq!(field(&out, "image_size"), "16 16 16");
    let max: f64 = field(&out, "final.max_displacement").parse().unwrap();
    assert!(max <= 1e-6, "{max}");
    assert!(!field(&out, "level.0.stop").is_empty());

    let y: DeformationField<f64> = io::read_deformation(&def, None).unwrap();
    assert_eq!(y.grid().m, [5; 3]);
    let w: Volume64 = io::read_volume(&warped).unwrap();
    assert_eq!(w.grid().m, [16; 3]);
}

#[test]
fn zero_iterations_write_the_identity() {
    let dir = tempfile::tempdir().unwrap();
    let (a, _) = phantom_file(dir.path(), "a.mhd", 12);
    let g = Grid64::cell_centered([12; 3], [1.0; 3]).unwrap();
    let b = dir.path().join("b.mhd");
    let shifted: Vec<f64> = phantom(&g).data().iter().map(|x| 2.0 * x + 1.0).collect();
    io::write_volume(&b, &Volume64::new(g.clone(), shifted).unwrap()).unwrap();
    let def = dir.path().join("y.bin");
    let o = ngfreg(&[
        "register", "--fixed", s(&a), "--moving", s(&b), "--out-deformation", s(&def),
        "--levels", "1", "--max-iters", "0", "--optimizer", "gn",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(field(&stdout(&o), "level.0.iterations"), "0");
    let y: DeformationField<f64> = io::read_deformation(&def, None).unwrap();
    let id = y.grid().coordinates();
    assert_eq!(y.y(), &id[..]);
}

#[test]
fn missing_arguments_are_usage_errors() {
    let o = ngfreg(&["register", "--moving", "x.mhd", "--out-deformation", "y.bin"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--fixed"));
}

#[test]
fn unreadable_input_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.mhd");
    let o = ngfreg(&[
        "register", "--fixed", s(&missing), "--moving", s(&missing), "--out-deformation",
        s(&dir.path().join("y.bin")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: reading"));
}

#[test]
fn warp_identity_and_translation() {
    let dir = tempfile::tempdir().unwrap();
    let n = 10;
    let (img, v) = phantom_file(dir.path(), "a.mhd", n);
    let def_grid = deformation_grid_for(v.grid(), 4).unwrap();
    let nodes = def_grid.len();

    let id = dir.path().join("id.bin");
    io::write_deformation(&id, &DeformationField::identity(def_grid.clone()).unwrap()).unwrap();
    let out = dir.path().join("w.mhd");
    let o = ngfreg(&["warp", "--moving", s(&img), "--deformation", s(&id), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let w: Volume64 = io::read_volume(&out).unwrap();
    for (i, (a, b)) in w.data().iter().zip(v.data()).enumerate() {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{i}: {a} {b}");
    }

    // one voxel along x: w(i) = v(i + 1) away from the last slice
    let mut u = vec![0.0; 3 * nodes];
    u[..nodes].fill(1.0);
    let shift = DeformationField::from_displacement(def_grid, &Displacement { u }).unwrap();
    let sh = dir.path().join("shift.bin");
    io::write_deformation(&sh, &shift).unwrap();
    let o = ngfreg(&["warp", "--moving", s(&img), "--deformation", s(&sh), "--like", s(&img), "--out", s(&out)]);
    assert!(o.status.success());
    let w: Volume64 = io::read_volume(&out).unwrap();
    for z in 0..n {
        for y in 0..n {
            for x in 0..n - 1 {
                let i = x + n * (y + n * z);
                assert!((w.data()[i] - v.data()[i + 1]).abs() <= 1e-12 * v.data()[i + 1].abs().max(1.0));
            }
        }
    }
}

#[test]
fn warp_rejects_a_deformation_for_another_grid() {
    let dir = tempfile::tempdir().unwrap();
    let (img, _) = phantom_file(dir.path(), "a.mhd", 8);
    let (big, _) = phantom_file(dir.path(), "b.mhd", 12);
    let other = Grid64::nodal_with_extent([4; 3], [12.0; 3]).unwrap();
    let def = dir.path().join("y.bin");
    io::write_deformation(&def, &DeformationField::identity(other).unwrap()).unwrap();
    let out = dir.path().join("w.mhd");
    let o = ngfreg(&["warp", "--moving", s(&big), "--deformation", s(&def), "--like", s(&img), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn landmarks_under_identity_and_shift() {
    let dir = tempfile::tempdir().unwrap();
    let fixed = dir.path().join("f.txt");
    let moving = dir.path().join("m.txt");
    let pts = "# x y z\n1 2 3\n4 5 6\n7 1 0\n";
    std::fs::write(&fixed, pts).unwrap();
    std::fs::write(&moving, pts).unwrap();
    let g = Grid64::nodal_with_extent([3; 3], [10.0; 3]).unwrap();
    let def = dir.path().join("y.bin");
    io::write_deformation(&def, &DeformationField::identity(g).unwrap()).unwrap();

    let args = |d: &Path| {
        ngfreg(&[
            "eval-landmarks", "--fixed-landmarks", s(&fixed), "--moving-landmarks", s(&moving),
            "--spacing", "1,1,2.5", "--deformation", s(d),
        ])
    };
    let o = args(&def);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert_eq!(field(&out, "landmarks"), "3");
    for k in ["before.mean", "before.max", "after.mean", "after.stddev", "after.max"] {
        assert_eq!(field(&out, k).parse::<f64>().unwrap(), 0.0, "{k}");
    }

    // shifted moving points: error = 2.5 mm (one z index) everywhere
    std::fs::write(&moving, "1 2 4\n4 5 7\n7 1 1\n").unwrap();
    let out = stdout(&args(&def));
    assert!((field(&out, "after.mean").parse::<f64>().unwrap() - 2.5).abs() < 1e-6);
    assert_eq!(field(&out, "after.stddev").parse::<f64>().unwrap(), 0.0);
}

#[test]
fn landmark_count_mismatch_fails() {
    let dir = tempfile::tempdir().unwrap();
    let fixed = dir.path().join("f.txt");
    let moving = dir.path().join("m.txt");
    std::fs::write(&fixed, "1 2 3\n").unwrap();
    std::fs::write(&moving, "1 2 3\n4 5 6\n").unwrap();
    let o = ngfreg(&[
        "eval-landmarks", "--fixed-landmarks", s(&fixed), "--moving-landmarks", s(&moving), "--spacing", "1,1,1",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn selftest_variants_pass() {
    for args in [&["selftest", "--quick"][..], &["selftest", "--quick", "--seed", "7", "--threads", "2"]] {
        let o = ngfreg(args);
        assert!(o.status.success(), "{}", stdout(&o));
        let out = stdout(&o);
        assert_eq!(field(&out, "result"), "pass");
        assert_eq!(out.lines().filter(|l| l.starts_with("suite.")).count(), 4);
    }
    let o = ngfreg(&["selftest"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(field(&stdout(&o), "suite.oracle").contains("cases=10"));
}

#[test]
fn bench_reports_are_key_value() {
    let o = ngfreg(&["bench", "kernels", "--sizes", "8", "--repeats", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.lines().next().unwrap().starts_with("image\t"));

    let o = ngfreg(&["bench", "memory", "--sizes", "8"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(field(&stdout(&o), "memory.8_3.matrix_free_aux_bytes").parse::<usize>().is_ok());

    let o = ngfreg(&["bench", "scaling", "--threads-list", "1,2", "--size", "8", "--repeats", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(field(&stdout(&o), "scaling.bit_identical"), "true");
}
