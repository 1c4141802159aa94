use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ngfreg::bench::{self, CountingAlloc};
use ngfreg::curvature::DeformationField;
use ngfreg::io;
use ngfreg::multilevel::{register_multilevel, warp, RegistrationConfig};
use ngfreg::optimizer::{Method, OptimizerConfig};
use ngfreg::selftest::{self, SelftestConfig};
use ngfreg::Volume64;

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

#[derive(Parser)]
#[command(name = "ngfreg", version, about = "Deformable 3D registration with normalized gradient fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register a moving volume to a fixed volume.
    Register(RegisterArgs),
    /// Resample a volume through a stored deformation.
    Warp(WarpArgs),
    /// Landmark distances before and after a deformation.
    EvalLandmarks(LandmarkArgs),
    /// Built-in consistency checks on synthetic data.
    Selftest(SelftestArgs),
    /// Timing, scaling, memory and operation-count measurements.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerKind {
    Lbfgs,
    Gn,
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    fixed: PathBuf,
    #[arg(long)]
    moving: PathBuf,
    #[arg(long)]
    out_deformation: PathBuf,
    #[arg(long)]
    out_warped: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 10.0)]
    tau: f64,
    #[arg(long, default_value_t = 10.0)]
    edge_rho: f64,
    #[arg(long, default_value_t = 3)]
    levels: usize,
    #[arg(long, default_value_t = 4)]
    deform_ratio: usize,
    #[arg(long, value_enum, default_value_t = OptimizerKind::Lbfgs)]
    optimizer: OptimizerKind,
    #[arg(long, default_value_t = 20)]
    max_iters: usize,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct WarpArgs {
    /// Volume to resample.
    #[arg(long)]
    moving: PathBuf,
    #[arg(long)]
    deformation: PathBuf,
    /// Volume whose grid defines the output (default: the moving volume's).
    #[arg(long)]
    like: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct LandmarkArgs {
    #[arg(long)]
    fixed_landmarks: PathBuf,
    #[arg(long)]
    moving_landmarks: PathBuf,
    /// Voxel spacing used to convert indices to physical positions.
    #[arg(long, value_delimiter = ',', required = true)]
    spacing: Vec<f64>,
    /// Deformation to evaluate; without it only the initial error is shown.
    #[arg(long)]
    deformation: Option<PathBuf>,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fewer cases per suite.
    #[arg(long)]
    quick: bool,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(subcommand)]
    what: BenchKind,
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum BenchKind {
    /// Median kernel times per image size and deformation ratio.
    Kernels {
        #[arg(long, value_delimiter = ',', default_value = "32,64")]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "4")]
        ratios: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Oracle memory budget in GiB.
        #[arg(long, default_value_t = 4.0)]
        budget_gib: f64,
    },
    /// Speedup over one thread.
    Scaling {
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        threads_list: Vec<usize>,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        ratio: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Transient allocation of one gradient and one HVP.
    Memory {
        #[arg(long, value_delimiter = ',', default_value = "32,64")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 4)]
        ratio: usize,
    },
    /// Coefficient and store counters (needs the `instrument` feature).
    Ops {
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        ratio: usize,
    },
}

fn set_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

fn register(a: RegisterArgs) -> Result<()> {
    set_threads(a.threads)?;
    let start = Instant::now();
    let fixed: Volume64 = io::read_volume(&a.fixed).with_context(|| format!("reading {}", a.fixed.display()))?;
    let moving: Volume64 = io::read_volume(&a.moving).with_context(|| format!("reading {}", a.moving.display()))?;
    let cfg = RegistrationConfig {
        levels: a.levels,
        deform_ratio: a.deform_ratio,
        alpha: a.alpha,
        tau: a.tau,
        rho: a.edge_rho,
        optimizer: OptimizerConfig {
            method: match a.optimizer {
                OptimizerKind::Lbfgs => Method::Lbfgs,
                OptimizerKind::Gn => Method::GaussNewton,
            },
            max_iters: a.max_iters,
            ..Default::default()
        },
    };
    let reg = register_multilevel(&fixed, &moving, &cfg)?;
    io::write_deformation(&a.out_deformation, &reg.deformation)?;
    if let Some(path) = &a.out_warped {
        io::write_volume(path, &warp(&moving, &reg.deformation, fixed.grid())?)?;
    }

    let m = fixed.grid().m;
    println!("command: register");
    println!("image_size: {} {} {}", m[0], m[1], m[2]);
    println!("levels: {}", a.levels);
    println!("optimizer: {}", if matches!(a.optimizer, OptimizerKind::Lbfgs) { "lbfgs" } else { "gn" });
    println!("alpha: {}", a.alpha);
    println!("tau: {}", a.tau);
    println!("edge_rho: {}", a.edge_rho);
    println!("threads: {}", rayon::current_num_threads());
    for l in &reg.levels {
        let p = format!("level.{}", l.level);
        let t = &l.trace;
        println!("{p}.image_size: {} {} {}", l.image_size[0], l.image_size[1], l.image_size[2]);
        println!(
            "{p}.deformation_size: {} {} {}",
            l.deformation_size[0], l.deformation_size[1], l.deformation_size[2]
        );
        println!("{p}.initial_value: {:e}", t.initial_value);
        println!("{p}.initial_grad_norm: {:e}", t.initial_grad_norm);
        for r in &t.records {
            println!(
                "{p}.iter.{}: value={:e} distance={:e} regularizer={:e} grad_norm={:e} step={:e} cg_iters={}",
                r.iter, r.value, r.distance, r.regularizer, r.grad_norm, r.step_length, r.cg_iters
            );
        }
        println!("{p}.iterations: {}", t.records.len());
        println!("{p}.stop: {:?}", t.stop);
        println!("{p}.seconds: {:.3}", l.seconds);
        println!("{p}.peak_derivative_bytes: {}", l.peak_derivative_bytes);
    }
    let u = reg.deformation.displacement().u;
    let n = reg.deformation.grid().len();
    let lens: Vec<f64> = (0..n)
        .map(|i| (u[i].powi(2) + u[n + i].powi(2) + u[2 * n + i].powi(2)).sqrt())
        .collect();
    println!("final.max_displacement: {:e}", lens.iter().copied().fold(0.0, f64::max));
    println!("final.mean_displacement: {:e}", lens.iter().sum::<f64>() / n as f64);
    println!(
        "peak_derivative_bytes: {}",
        reg.levels.iter().map(|l| l.peak_derivative_bytes).max().unwrap_or(0)
    );
    println!("total_seconds: {:.3}", start.elapsed().as_secs_f64());
    println!("output.deformation: {}", a.out_deformation.display());
    if let Some(p) = &a.out_warped {
        println!("output.warped: {}", p.display());
    }
    Ok(())
}

fn warp_cmd(a: WarpArgs) -> Result<()> {
    set_threads(a.threads)?;
    let moving: Volume64 = io::read_volume(&a.moving).with_context(|| format!("reading {}", a.moving.display()))?;
    let target = match &a.like {
        Some(p) => io::read_volume::<f64>(p)
            .with_context(|| format!("reading {}", p.display()))?
            .grid()
            .clone(),
        None => moving.grid().clone(),
    };
    let y: DeformationField<f64> = io::read_deformation(&a.deformation, None)?;
    let out = warp(&moving, &y, &target).context("deformation does not match the output grid")?;
    io::write_volume(&a.out, &out)?;
    println!("command: warp");
    println!("output: {}", a.out.display());
    Ok(())
}

fn eval_landmarks(a: LandmarkArgs) -> Result<()> {
    let h: [f64; 3] = a
        .spacing
        .as_slice()
        .try_into()
        .map_err(|_| anyhow::anyhow!("--spacing needs three comma-separated values"))?;
    let fixed = io::read_landmarks(&a.fixed_landmarks, h)?;
    let moving = io::read_landmarks(&a.moving_landmarks, h)?;
    let before = io::landmark_stats(&fixed, &moving, |p| p)?;
    println!("command: eval-landmarks");
    println!("landmarks: {}", before.count);
    println!("before.mean: {:.6}", before.mean);
    println!("before.stddev: {:.6}", before.stddev);
    println!("before.max: {:.6}", before.max);
    if let Some(path) = &a.deformation {
        let y: DeformationField<f64> = io::read_deformation(path, None)?;
        let after = io::landmark_error(&fixed, &moving, &y)?;
        println!("after.mean: {:.6}", after.mean);
        println!("after.stddev: {:.6}", after.stddev);
        println!("after.max: {:.6}", after.max);
    }
    Ok(())
}

fn selftest_cmd(a: SelftestArgs) -> Result<bool> {
    set_threads(a.threads)?;
    let cfg = SelftestConfig {
        seed: a.seed,
        quick: a.quick,
    };
    println!("command: selftest");
    println!("seed: {}", a.seed);
    let mut ok = true;
    for r in selftest::run_all(&cfg)? {
        println!(
            "suite.{}: {} cases={} worst={:e} tolerance={:e}",
            r.name,
            if r.passed() { "pass" } else { "FAIL" },
            r.cases,
            r.worst,
            r.tolerance
        );
        ok &= r.passed();
    }
    println!("result: {}", if ok { "pass" } else { "FAIL" });
    Ok(ok)
}

fn bench_cmd(a: BenchArgs) -> Result<()> {
    set_threads(a.threads)?;
    match a.what {
        BenchKind::Kernels {
            sizes,
            ratios,
            repeats,
            budget_gib,
        } => {
            let t = bench::bench_kernels(&sizes, &ratios, repeats, (budget_gib * (1u64 << 30) as f64) as usize)?;
            print!("{}", t.to_tsv());
            print!("{}", t.to_key_value());
        }
        BenchKind::Scaling {
            threads_list,
            size,
            ratio,
            repeats,
        } => {
            let t = bench::bench_scaling(&threads_list, size, ratio, repeats)?;
            print!("{}", t.to_tsv());
            print!("{}", t.to_key_value());
        }
        BenchKind::Memory { sizes, ratio } => {
            for s in sizes {
                print!("{}", bench::bench_memory(s, ratio)?.to_key_value());
            }
        }
        BenchKind::Ops { size, ratio } => {
            print!("{}", bench::count_ops(size, ratio)?.to_key_value());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Register(a) => register(a).map(|_| true),
        Command::Warp(a) => warp_cmd(a).map(|_| true),
        Command::EvalLandmarks(a) => eval_landmarks(a).map(|_| true),
        Command::Selftest(a) => selftest_cmd(a),
        Command::Bench(a) => bench_cmd(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
