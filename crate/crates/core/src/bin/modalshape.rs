//! Command-line front end: scenario runs, sweeps, modal dumps, and ellipsoid
//! mesh generation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::{Isometry3, Vector3};

use modalshape::harness::{
    exit_code, export_csv, run_baseline, run_scenario, run_sweep, summarize, BasisCache, RunRecord,
};
use modalshape::{
    assemble_system, generate_ellipsoid_mesh, solve_modes, EllipsoidSpec, MaterialParams,
    MeshResolution, Scenario, SolidMesh,
};

#[derive(Parser)]
#[command(name = "modalshape", version, about = "Model-free 3D shape control simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario file and print its summary.
    Run(RunArgs),
    /// Run every *.scn scenario in a directory, sharing the modal basis cache.
    Sweep(SweepArgs),
    /// Solve the modal basis of a mesh file and dump it.
    Modes(ModesArgs),
    /// Mesh utilities.
    #[command(subcommand)]
    Mesh(MeshCommand),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file.
    scenario: PathBuf,
    /// Write the per-tick CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the scenario's noise seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run the point-based baseline controller instead of the modal one.
    #[arg(long)]
    baseline: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// Directory containing *.scn files.
    dir: PathBuf,
    /// Write per-run CSVs into this directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, default_value_t = 4)]
    workers: usize,
}

#[derive(Args)]
struct ModesArgs {
    /// Mesh file (plain-text format).
    mesh: PathBuf,
    /// Number of modes to retain.
    m: usize,
    /// Young's modulus of the base material.
    #[arg(long, default_value_t = 50.0)]
    e: f64,
    /// Poisson ratio.
    #[arg(long, default_value_t = 0.45)]
    nu: f64,
    /// Total mass.
    #[arg(long, default_value_t = 20.0)]
    mass: f64,
    /// Write the basis dump here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum MeshCommand {
    /// Generate an ellipsoid mesh from `ax=.. ay=.. az=.. lat=.. lon=.. rad=..`.
    Gen(MeshGenArgs),
}

#[derive(Args)]
struct MeshGenArgs {
    /// Spec string, comma or space separated key=value pairs.
    spec: String,
    /// Write the mesh file here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn print_summary(record: &RunRecord) {
    let s = summarize(record);
    println!(
        "{} [{}]: ticks={} initial_error={:.6e} final_error={:.6e} final_e_x={:.6e} \
         max|e_d|_steady={:.6e} converged={} stalled={}",
        s.scenario,
        s.controller,
        s.ticks,
        s.initial_error,
        s.final_error,
        s.final_e_x,
        s.max_e_d_steady,
        s.converged,
        s.stalled
    );
}

fn cmd_run(args: RunArgs) -> modalshape::Result<i32> {
    let mut scenario = Scenario::load(&args.scenario)?;
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    let cache = BasisCache::new();
    let record = if args.baseline {
        run_baseline(&scenario, &cache)?
    } else {
        run_scenario(&scenario, &cache)?
    };
    print_summary(&record);
    if let Some(out) = &args.out {
        export_csv(&record, out)?;
        println!("wrote {}", out.display());
    }
    Ok(exit_code(&record))
}

fn cmd_sweep(args: SweepArgs) -> modalshape::Result<i32> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&args.dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "scn"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        eprintln!("no *.scn files in {}", args.dir.display());
        return Ok(1);
    }
    let scenarios: modalshape::Result<Vec<Scenario>> = paths.iter().map(Scenario::load).collect();
    let scenarios = scenarios?;
    let cache = BasisCache::new();
    let results = run_sweep(&scenarios, &cache, args.workers);
    let mut worst = 0;
    for result in &results {
        match result {
            Ok(record) => {
                print_summary(record);
                worst = worst.max(exit_code(record));
                if let Some(dir) = &args.out_dir {
                    std::fs::create_dir_all(dir)?;
                    let path = dir.join(format!("{}_{}.csv", record.scenario, record.controller));
                    export_csv(record, &path)?;
                }
            }
            Err(e) => {
                eprintln!("run failed: {e}");
                worst = worst.max(1);
            }
        }
    }
    println!(
        "basis cache: {} hits, {} misses",
        cache.hits(),
        cache.misses()
    );
    Ok(worst)
}

fn cmd_modes(args: ModesArgs) -> modalshape::Result<i32> {
    let mesh = SolidMesh::read_file(&args.mesh)?;
    let sys = assemble_system(&mesh, &MaterialParams::new(args.e, args.nu, args.mass))?;
    let basis = solve_modes(&sys, args.m)?;
    match &args.out {
        Some(path) => {
            basis.write_file(path)?;
            println!("wrote {} modes to {}", basis.mode_count(), path.display());
        }
        None => print!("{}", basis.to_text()),
    }
    Ok(0)
}

fn cmd_mesh_gen(args: MeshGenArgs) -> modalshape::Result<i32> {
    let mut vals = std::collections::HashMap::new();
    for tok in args.spec.split([',', ' ']).filter(|t| !t.is_empty()) {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| modalshape::Error::Parse(format!("expected key=value, got `{tok}`")))?;
        let num: f64 = v
            .parse()
            .map_err(|e| modalshape::Error::Parse(format!("bad value for {k}: {e}")))?;
        vals.insert(k.to_string(), num);
    }
    let need = |k: &str| -> modalshape::Result<f64> {
        vals.get(k)
            .copied()
            .ok_or_else(|| modalshape::Error::Parse(format!("missing `{k}=`")))
    };
    let spec = EllipsoidSpec::new(
        Vector3::new(need("ax")?, need("ay")?, need("az")?),
        Isometry3::identity(),
        MeshResolution::new(
            need("lat")? as usize,
            need("lon")? as usize,
            need("rad")? as usize,
        ),
    );
    let mesh = generate_ellipsoid_mesh(&spec)?;
    match &args.out {
        Some(path) => {
            mesh.write_file(path)?;
            println!(
                "wrote mesh ({} nodes, {} tets, {} surface tris) to {}",
                mesh.node_count(),
                mesh.tets.len(),
                mesh.surface_tris.len(),
                path.display()
            );
        }
        None => print!("{}", mesh.to_text()),
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Modes(args) => cmd_modes(args),
        Command::Mesh(MeshCommand::Gen(args)) => cmd_mesh_gen(args),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
