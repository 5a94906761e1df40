use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wallflow::bench::{corrupt, divergence_stats, divergence_table, generate_phantom, rmse, CorruptionSpec, PhantomSpec};
use wallflow::grid::ScalarField;
use wallflow::io::{self, ScalarType};
use wallflow::operators::{FieldLayout, Operators, WallTreatment};
use wallflow::pipeline::{self, PipelineConfig};
use wallflow::segmentation::{self, Combine, ImageStack, SegmentParams};
use wallflow::Error;

#[derive(Parser, Debug)]
#[command(name = "wallflow", version, about = "Wall-aware divergence-free smoothing and wall shear stress estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Binarize magnitude images into a vessel mask and signed distance map.
    Segment(SegmentArgs),
    /// Divergence-free smoothing of a velocity volume.
    Smooth(StageArgs),
    /// Wall shear stress from a velocity volume.
    Wss(StageArgs),
    /// Generate an analytic phantom and its corrupted copy.
    Phantom(PhantomArgs),
    /// Divergence statistics of one or more velocity volumes.
    Stats(StatsArgs),
    /// Smoothing with and without wall treatment, with statistics.
    Compare(StageArgs),
    /// Full pipeline from a config file, a preset or input volumes.
    Run(StageArgs),
}

/// Options shared by the pipeline subcommands. Flags override the config
/// file; `--set` overrides both.
#[derive(Args, Debug)]
struct StageArgs {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Benchmark preset, e.g. poiseuille-default.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    velocity: Option<PathBuf>,
    /// Magnitude image volumes, comma separated.
    #[arg(long)]
    images: Option<String>,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    phi: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Fixed smoothing parameter; omit for GCV.
    #[arg(long)]
    s: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    theta_min: Option<f64>,
    #[arg(long)]
    profile_points: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
    /// Any configuration key, as KEY=VALUE.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct SegmentArgs {
    /// Magnitude image volumes.
    #[arg(required = true)]
    images: Vec<PathBuf>,
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    window: usize,
    #[arg(long, default_value_t = 3)]
    median_window: usize,
    #[arg(long, default_value = "product")]
    combine: String,
    #[arg(long, default_value_t = segmentation::DEFAULT_THETA_MIN)]
    theta_min: f64,
}

#[derive(Args, Debug)]
struct PhantomArgs {
    #[arg(long, default_value = "poiseuille-default")]
    preset: String,
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 0.01)]
    outlier_fraction: f64,
    #[arg(long, default_value_t = 0.0)]
    missing_fraction: f64,
    #[arg(long, default_value = "f32")]
    scalar: String,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(required = true)]
    velocity: Vec<PathBuf>,
    /// Velocity volume to measure RMSE against.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Signed distance map for wall-aware divergence.
    #[arg(long)]
    phi: Option<PathBuf>,
    #[arg(long, default_value_t = segmentation::DEFAULT_THETA_MIN)]
    theta_min: f64,
    /// Write the table as CSV instead.
    #[arg(long)]
    csv: bool,
}

fn stage_config(args: &StageArgs, base: PipelineConfig) -> wallflow::Result<PipelineConfig> {
    let mut cfg = match &args.config {
        Some(p) => PipelineConfig::from_file(p)?,
        None => base,
    };
    let mut flags: Vec<(&str, String)> = Vec::new();
    let mut push = |k: &'static str, v: Option<String>| {
        if let Some(v) = v {
            flags.push((k, v));
        }
    };
    push("preset", args.preset.clone());
    push("velocity", args.velocity.as_ref().map(|p| p.display().to_string()));
    push("images", args.images.clone());
    push("mask", args.mask.as_ref().map(|p| p.display().to_string()));
    push("phi", args.phi.as_ref().map(|p| p.display().to_string()));
    push("output", args.out.as_ref().map(|p| p.display().to_string()));
    push("s", args.s.map(|v| v.to_string()));
    push("seed", args.seed.map(|v| v.to_string()));
    push("theta_min", args.theta_min.map(|v| v.to_string()));
    push("profile_points", args.profile_points.map(|v| v.to_string()));
    push("rho", args.rho.map(|v| v.to_string()));
    push("mu", args.mu.map(|v| v.to_string()));
    push("tol", args.tol.map(|v| v.to_string()));
    for (k, v) in flags {
        cfg.set(k, &v)?;
    }
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Parameter(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v)?;
    }
    Ok(cfg)
}

/// Failures split by exit status: configuration problems are usage errors.
enum Failure {
    Usage(Error),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn run_stage(args: &StageArgs, base: PipelineConfig) -> Result<(), Failure> {
    let cfg = stage_config(args, base).map_err(|e| match e {
        Error::MissingInput(_) | Error::Io(_) => Failure::Run(e),
        e => Failure::Usage(e),
    })?;
    cfg.validate().map_err(Failure::Usage)?;
    let out = pipeline::run_pipeline(&cfg)?;
    print!("{}", out.report);
    println!("outputs written to {}", cfg.output.display());
    Ok(())
}

fn load_stack(path: &Path) -> wallflow::Result<(ImageStack, wallflow::grid::VolumeGrid)> {
    let f = io::read_scalar(path)?;
    let [nx, ny, nz] = f.grid.dims();
    Ok((ImageStack::new(nx, ny, nz, f.values)?, f.grid))
}

fn cmd_segment(a: &SegmentArgs) -> wallflow::Result<()> {
    let combine: Combine = a.combine.parse()?;
    let mut stacks = Vec::new();
    let mut grid = None;
    for p in &a.images {
        let (s, g) = load_stack(p)?;
        if grid.as_ref().is_some_and(|g0| *g0 != g) {
            return Err(Error::Parameter(format!("{} differs in grid from the first image", p.display())));
        }
        grid = Some(g);
        stacks.push(s);
    }
    let grid = grid.expect("clap requires one image");
    let params = SegmentParams {
        window: a.window,
        median_window: a.median_window,
        combine,
    };
    let mask = segmentation::segment(&stacks, params).map_err(|e| e.in_stage("segment"))?;
    let geometry = segmentation::levelset_from_mask(&grid, &mask, a.theta_min).map_err(|e| e.in_stage("segment"))?;
    let mask_field = ScalarField::new(grid.clone(), mask.iter().map(|&m| m as u8 as f64).collect())?;
    let phi = ScalarField::new(grid, geometry.phi.clone())?;
    std::fs::create_dir_all(&a.out)?;
    io::write_scalar(&a.out.join("mask.wfv"), &mask_field, ScalarType::F32)?;
    io::write_scalar(&a.out.join("phi.wfv"), &phi, ScalarType::F64)?;
    io::write_atomic(&a.out.join("mask.vtk"), io::vtk_scalar(&mask_field, "mask").as_bytes())?;
    println!(
        "{} of {} voxels inside the vessel, {} wall vertices",
        mask.iter().filter(|&&m| m).count(),
        mask.len(),
        geometry.surface.vertices.len()
    );
    Ok(())
}

fn cmd_phantom(a: &PhantomArgs) -> wallflow::Result<()> {
    let spec = match a.preset.as_str() {
        "poiseuille-default" => PhantomSpec::poiseuille_default(),
        other => return Err(Error::Parameter(format!("unknown preset `{other}`"))),
    };
    let scalar: ScalarType = a.scalar.parse()?;
    let phantom = generate_phantom(&spec)?;
    let noisy = corrupt(
        &phantom.truth,
        &CorruptionSpec {
            gaussian_sigma: a.noise_sigma,
            outlier_fraction: a.outlier_fraction,
            missing_fraction: a.missing_fraction,
            reference_speed: spec.u_max,
            seed: a.seed,
        },
    )?;
    std::fs::create_dir_all(&a.out)?;
    io::write_velocity(&a.out.join("truth.wfv"), &phantom.truth, scalar)?;
    io::write_velocity(&a.out.join("noisy.wfv"), &noisy, scalar)?;
    let phi = ScalarField::new(phantom.truth.grid.clone(), phantom.geometry.phi.clone())?;
    io::write_scalar(&a.out.join("phi.wfv"), &phi, ScalarType::F64)?;
    println!("analytic wall shear stress: {:.6} Pa", spec.wall_shear());
    println!("rmse of corrupted field: {:.6} m/s", rmse(&noisy, &phantom.truth));
    Ok(())
}

fn cmd_stats(a: &StatsArgs) -> wallflow::Result<()> {
    let fields = a.velocity.iter().map(|p| io::read_velocity(p)).collect::<wallflow::Result<Vec<_>>>()?;
    let first = &fields[0];
    if fields.iter().any(|f| f.grid != first.grid) {
        return Err(Error::Parameter("velocity volumes differ in grid".into()));
    }
    let geometry = match &a.phi {
        Some(p) => {
            let phi = io::read_scalar(p)?;
            segmentation::geometry_from_level_set(&first.grid, phi.values, a.theta_min)?
        }
        None => {
            let mask: Vec<bool> = first.class.iter().map(|c| c.is_fluid()).collect();
            segmentation::levelset_from_mask(&first.grid, &mask, a.theta_min)?
        }
    };
    let layout = FieldLayout::new(&first.grid, &first.class)?;
    let ops = Operators::assemble(layout, Some(&geometry), WallTreatment::WallAware)?;
    let names: Vec<String> = a
        .velocity
        .iter()
        .map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())
        .collect();
    let mut columns = Vec::new();
    for (name, f) in names.iter().zip(&fields) {
        columns.push((name.as_str(), divergence_stats(f, &ops)?));
    }
    if a.csv {
        print!("{}", wallflow::bench::divergence_csv(&columns));
    } else {
        print!("{}", divergence_table(&columns));
    }
    if let Some(r) = &a.reference {
        let truth = io::read_velocity(r)?;
        for (name, f) in names.iter().zip(&fields) {
            println!("rmse {name}: {:.6}", rmse(f, &truth));
        }
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Segment(a) => Ok(cmd_segment(&a)?),
        Command::Phantom(a) => Ok(cmd_phantom(&a)?),
        Command::Stats(a) => Ok(cmd_stats(&a)?),
        Command::Smooth(a) => run_stage(
            &a,
            PipelineConfig {
                wss: false,
                compare: false,
                ..PipelineConfig::default()
            },
        ),
        Command::Wss(a) => run_stage(
            &a,
            PipelineConfig {
                smooth: false,
                compare: false,
                ..PipelineConfig::default()
            },
        ),
        Command::Compare(a) => run_stage(
            &a,
            PipelineConfig {
                compare: true,
                wss: false,
                ..PipelineConfig::default()
            },
        ),
        Command::Run(a) => run_stage(&a, PipelineConfig::default()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
