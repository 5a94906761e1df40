//! Configuration and orchestration of segment, smooth and WSS stages.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::bench::{
    corrupt, divergence_csv, divergence_stats, divergence_table, field_correlation, generate_phantom, plane_region,
    rmse, CorruptionSpec, PhantomSpec, DEFAULT_MU, DEFAULT_RHO,
};
use crate::dfs::{smooth_with_operators, DfsConfig, OutlierTest, SmoothReport, Smoothing, SolveOptions};
use crate::error::{Error, Result};
use crate::gcv::GcvConfig;
use crate::grid::{classify, ScalarField, TriMesh, VelocityField, WallGeometry};
use crate::io::{self, ScalarType};
use crate::operators::{FieldLayout, Operators, WallTreatment};
use crate::segmentation::{self, Combine, ImageStack, SegmentParams, DEFAULT_THETA_MIN};
use crate::wss::{self, Interpolation, WssConfig, WssSample};

pub const PRESETS: &[&str] = &["poiseuille-default"];

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Generated benchmark input instead of files.
    pub preset: Option<String>,
    pub velocity: Option<PathBuf>,
    /// Magnitude images for segmentation.
    pub images: Vec<PathBuf>,
    pub mask: Option<PathBuf>,
    /// Signed distance volume; takes precedence over `mask`.
    pub phi: Option<PathBuf>,
    pub output: PathBuf,

    pub segment: bool,
    pub smooth: bool,
    pub wss: bool,
    /// Report errors against the phantom truth (presets only).
    pub bench: bool,
    /// Also run the wall-unaware baseline at the same `s`.
    pub compare: bool,

    /// Fixed smoothing parameter; GCV when unset.
    pub s: Option<f64>,
    pub gcv_log10_min: f64,
    pub gcv_log10_max: f64,
    pub gcv_eigenvalues: usize,
    pub theta_min: f64,
    pub profile_points: usize,
    pub profile_spacing: Option<f64>,
    pub interpolation: Interpolation,
    pub rho: f64,
    pub mu: f64,
    pub tol: f64,
    pub tol_div: f64,
    pub outlier_test: bool,
    pub outlier_threshold: f64,
    pub outlier_epsilon: f64,
    pub window: usize,
    pub median_window: usize,
    pub combine: Combine,
    pub noise_sigma: f64,
    pub outlier_fraction: f64,
    pub missing_fraction: f64,
    pub seed: u64,
    pub scalar: ScalarType,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let gcv = GcvConfig::default();
        let solve = SolveOptions::default();
        let outliers = OutlierTest::default();
        let seg = SegmentParams::default();
        let wss = WssConfig::default();
        Self {
            preset: None,
            velocity: None,
            images: Vec::new(),
            mask: None,
            phi: None,
            output: PathBuf::from("wallflow-out"),
            segment: true,
            smooth: true,
            wss: true,
            bench: true,
            compare: true,
            s: None,
            gcv_log10_min: gcv.log10_range.0,
            gcv_log10_max: gcv.log10_range.1,
            gcv_eigenvalues: gcv.eigenvalues,
            theta_min: DEFAULT_THETA_MIN,
            profile_points: wss.n_points,
            profile_spacing: wss.spacing,
            interpolation: wss.interpolation,
            rho: DEFAULT_RHO,
            mu: DEFAULT_MU,
            tol: solve.tol,
            tol_div: solve.tol_div,
            outlier_test: true,
            outlier_threshold: outliers.threshold,
            outlier_epsilon: outliers.epsilon,
            window: seg.window,
            median_window: seg.median_window,
            combine: seg.combine,
            noise_sigma: 0.1,
            outlier_fraction: 0.01,
            missing_fraction: 0.0,
            seed: 7,
            scalar: ScalarType::F32,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Parameter(format!("`{key}` expects true or false, got `{v}`"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Parameter(format!("`{key}` expects a number, got `{v}`")))
}

impl PipelineConfig {
    /// Configuration for a named benchmark preset.
    pub fn preset(name: &str) -> Result<Self> {
        if !PRESETS.contains(&name) {
            return Err(Error::Parameter(format!("unknown preset `{name}`")));
        }
        Ok(Self {
            preset: Some(name.to_string()),
            ..Self::default()
        })
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let opt_path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        match key.trim() {
            "preset" => {
                if !v.is_empty() && !PRESETS.contains(&v) {
                    return Err(Error::Parameter(format!("unknown preset `{v}`")));
                }
                self.preset = (!v.is_empty()).then(|| v.to_string());
            }
            "velocity" => self.velocity = opt_path(v),
            "images" => self.images = v.split(',').map(str::trim).filter(|p| !p.is_empty()).map(PathBuf::from).collect(),
            "mask" => self.mask = opt_path(v),
            "phi" => self.phi = opt_path(v),
            "output" => self.output = PathBuf::from(v),
            "segment" => self.segment = parse_bool(key, v)?,
            "smooth" => self.smooth = parse_bool(key, v)?,
            "wss" => self.wss = parse_bool(key, v)?,
            "bench" => self.bench = parse_bool(key, v)?,
            "compare" => self.compare = parse_bool(key, v)?,
            "s" => {
                self.s = match v {
                    "" | "gcv" | "auto" => None,
                    _ => Some(parse_num(key, v)?),
                }
            }
            "gcv_log10_min" => self.gcv_log10_min = parse_num(key, v)?,
            "gcv_log10_max" => self.gcv_log10_max = parse_num(key, v)?,
            "gcv_eigenvalues" => self.gcv_eigenvalues = parse_num(key, v)?,
            "theta_min" => self.theta_min = parse_num(key, v)?,
            "profile_points" => self.profile_points = parse_num(key, v)?,
            "profile_spacing" => {
                self.profile_spacing = match v {
                    "" | "grid" => None,
                    _ => Some(parse_num(key, v)?),
                }
            }
            "interpolation" => self.interpolation = v.parse()?,
            "rho" => self.rho = parse_num(key, v)?,
            "mu" => self.mu = parse_num(key, v)?,
            "tol" => self.tol = parse_num(key, v)?,
            "tol_div" => self.tol_div = parse_num(key, v)?,
            "outlier_test" => self.outlier_test = parse_bool(key, v)?,
            "outlier_threshold" => self.outlier_threshold = parse_num(key, v)?,
            "outlier_epsilon" => self.outlier_epsilon = parse_num(key, v)?,
            "window" => self.window = parse_num(key, v)?,
            "median_window" => self.median_window = parse_num(key, v)?,
            "combine" => self.combine = v.parse()?,
            "noise_sigma" => self.noise_sigma = parse_num(key, v)?,
            "outlier_fraction" => self.outlier_fraction = parse_num(key, v)?,
            "missing_fraction" => self.missing_fraction = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "scalar" => self.scalar = v.parse()?,
            other => return Err(Error::Parameter(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a flat `key = value` text; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parameter(format!("config line {}: expected key = value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingInput(path.to_path_buf())),
            Err(e) => return Err(e.into()),
        };
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.preset.is_none() && self.velocity.is_none() {
            return bad("either `preset` or `velocity` must be given".into());
        }
        if !(self.gcv_log10_min < self.gcv_log10_max) {
            return bad("gcv_log10_min must be below gcv_log10_max".into());
        }
        if let Some(s) = self.s {
            if !(s >= 0.0 && s.is_finite()) {
                return bad(format!("s must be finite and >= 0, got {s}"));
            }
        }
        if !(self.theta_min > 0.0 && self.theta_min <= 1.0) {
            return bad(format!("theta_min must lie in (0, 1], got {}", self.theta_min));
        }
        if self.profile_points < 3 {
            return bad(format!("profile_points must be at least 3, got {}", self.profile_points));
        }
        if !(self.rho > 0.0 && self.mu > 0.0) {
            return bad("rho and mu must be positive".into());
        }
        if !(self.tol > 0.0 && self.tol_div > 0.0) {
            return bad("tolerances must be positive".into());
        }
        for (name, f) in [
            ("noise_sigma", self.noise_sigma),
            ("outlier_fraction", self.outlier_fraction),
            ("missing_fraction", self.missing_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("{name} must lie in [0, 1], got {f}"));
            }
        }
        if self.outlier_fraction + self.missing_fraction > 1.0 {
            return bad("outlier and missing fractions exceed 1 together".into());
        }
        if self.gcv_eigenvalues == 0 {
            return bad("gcv_eigenvalues must be positive".into());
        }
        Ok(())
    }

    pub fn dfs_config(&self, treatment: WallTreatment, fixed: Option<f64>) -> DfsConfig {
        let gcv = GcvConfig {
            eigenvalues: self.gcv_eigenvalues,
            log10_range: (self.gcv_log10_min, self.gcv_log10_max),
            seed: self.seed,
            ..GcvConfig::default()
        };
        DfsConfig {
            treatment,
            smoothing: match fixed.or(self.s) {
                Some(s) => Smoothing::Fixed(s),
                None => Smoothing::Gcv(gcv),
            },
            solve: SolveOptions {
                tol: self.tol,
                tol_div: self.tol_div,
                ..SolveOptions::default()
            },
            outliers: self.outlier_test.then_some(OutlierTest {
                threshold: self.outlier_threshold,
                epsilon: self.outlier_epsilon,
            }),
        }
    }

    pub fn wss_config(&self) -> WssConfig {
        WssConfig {
            n_points: self.profile_points,
            spacing: self.profile_spacing,
            interpolation: self.interpolation,
            ..WssConfig::default()
        }
    }
}

/// In-memory results of a pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub input: VelocityField,
    pub truth: Option<VelocityField>,
    pub geometry: WallGeometry,
    pub smoothed: Option<VelocityField>,
    pub smooth_report: Option<SmoothReport>,
    pub traditional: Option<VelocityField>,
    pub wss: Option<Vec<WssSample>>,
    /// Plain-text report.
    pub report: String,
    pub divergence_csv: String,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

fn image_from_volume(path: &Path) -> Result<ImageStack> {
    let f = io::read_scalar(path)?;
    let [nx, ny, nz] = f.grid.dims();
    ImageStack::new(nx, ny, nz, f.values)
}

/// Reclassifies `field` against a mask, keeping values and weights.
fn conform(field: &VelocityField, mask: &[bool]) -> Result<VelocityField> {
    let class = classify(&field.grid, mask)?;
    let mut out = VelocityField::new(field.grid.clone(), field.velocity.clone(), class)?;
    out.set_weights(field.weight.clone())?;
    Ok(out)
}

struct Inputs {
    observed: VelocityField,
    truth: Option<VelocityField>,
    geometry: WallGeometry,
    analytic_wss: Option<f64>,
}

fn load_inputs(cfg: &PipelineConfig) -> Result<Inputs> {
    if let Some(name) = &cfg.preset {
        let spec = match name.as_str() {
            "poiseuille-default" => PhantomSpec {
                rho: cfg.rho,
                mu: cfg.mu,
                theta_min: cfg.theta_min,
                ..PhantomSpec::poiseuille_default()
            },
            other => return Err(Error::Parameter(format!("unknown preset `{other}`"))),
        };
        let phantom = generate_phantom(&spec)?;
        let noisy = corrupt(
            &phantom.truth,
            &CorruptionSpec {
                gaussian_sigma: cfg.noise_sigma,
                outlier_fraction: cfg.outlier_fraction,
                missing_fraction: cfg.missing_fraction,
                reference_speed: spec.u_max,
                seed: cfg.seed,
            },
        )?;
        return Ok(Inputs {
            observed: noisy,
            analytic_wss: Some(spec.wall_shear()),
            truth: Some(phantom.truth),
            geometry: phantom.geometry,
        });
    }
    let path = cfg.velocity.as_ref().expect("validated");
    let field = io::read_velocity(path)?;
    let grid = field.grid.clone();
    for p in cfg.images.iter().chain(&cfg.mask).chain(&cfg.phi) {
        if !p.exists() {
            return Err(Error::MissingInput(p.clone()));
        }
    }
    let geometry = if let Some(phi) = &cfg.phi {
        let f = io::read_scalar(phi)?;
        if f.grid != grid {
            return Err(Error::Parameter("signed distance grid differs from the velocity grid".into()));
        }
        segmentation::geometry_from_level_set(&grid, f.values, cfg.theta_min)?
    } else {
        let mask: Vec<bool> = if cfg.segment && !cfg.images.is_empty() {
            let images = cfg.images.iter().map(|p| image_from_volume(p)).collect::<Result<Vec<_>>>()?;
            if images.iter().any(|im| [im.nx, im.ny, im.nslices] != grid.dims()) {
                return Err(Error::Parameter("image dimensions differ from the velocity grid".into()));
            }
            stage(
                "segment",
                segmentation::segment(
                    &images,
                    SegmentParams {
                        window: cfg.window,
                        median_window: cfg.median_window,
                        combine: cfg.combine,
                    },
                ),
            )?
        } else if let Some(m) = &cfg.mask {
            let f = io::read_scalar(m)?;
            if f.grid != grid {
                return Err(Error::Parameter("mask grid differs from the velocity grid".into()));
            }
            f.values.iter().map(|&v| v != 0.0).collect()
        } else {
            field.class.iter().map(|c| c.is_fluid()).collect()
        };
        stage("segment", segmentation::levelset_from_mask(&grid, &mask, cfg.theta_min))?
    };
    let observed = conform(&field, &geometry.mask())?;
    Ok(Inputs {
        observed,
        truth: None,
        geometry,
        analytic_wss: None,
    })
}

/// Runs the enabled stages and returns the results without writing files.
pub fn execute(cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let inputs = stage("input", load_inputs(cfg))?;
    let Inputs {
        observed,
        truth,
        geometry,
        analytic_wss,
    } = inputs;
    let mut report = String::new();
    let _ = writeln!(report, "wallflow pipeline report");
    match &cfg.preset {
        Some(p) => {
            let _ = writeln!(report, "input: preset {p} (seed {})", cfg.seed);
        }
        None => {
            let _ = writeln!(report, "input: {}", cfg.velocity.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        }
    }
    let [nx, ny, nz] = observed.grid.dims();
    let fluid = observed.class.iter().filter(|c| c.is_fluid()).count();
    let _ = writeln!(report, "grid: {nx} x {ny} x {nz}, fluid voxels: {fluid}");
    let _ = writeln!(report, "wall vertices: {}", geometry.surface.vertices.len());

    let layout = stage("smooth", FieldLayout::new(&observed.grid, &observed.class))?;
    let ops = stage("smooth", Operators::assemble(layout.clone(), Some(&geometry), WallTreatment::WallAware))?;

    let mut smoothed = None;
    let mut smooth_report = None;
    let mut traditional = None;
    if cfg.smooth {
        let dfs = cfg.dfs_config(WallTreatment::WallAware, None);
        let (field, rep) = stage("smooth", smooth_with_operators(&observed, &ops, &dfs))?;
        match &rep.gcv {
            Some(g) => {
                let _ = writeln!(
                    report,
                    "s: {:e} (GCV, {} solves{})",
                    rep.s,
                    g.solves,
                    if g.boundary { ", minimum on the search boundary" } else { "" }
                );
            }
            None => {
                let _ = writeln!(report, "s: fixed {:e}", rep.s);
            }
        }
        let _ = writeln!(
            report,
            "solver: {} iterations, relative KKT residual {:.3e}, feasibility {:.3e}",
            rep.iterations, rep.kkt_residual, rep.feasibility
        );
        let _ = writeln!(report, "outliers flagged: {}", rep.outliers_flagged);
        let _ = writeln!(report, "degraded stencil rows: {}", rep.degraded_rows);
        if cfg.compare {
            let trad_ops = stage("compare", Operators::assemble(layout, Some(&geometry), WallTreatment::Traditional))?;
            let dfs = cfg.dfs_config(WallTreatment::Traditional, Some(rep.s));
            let (t, _) = stage("compare", smooth_with_operators(&observed, &trad_ops, &dfs))?;
            traditional = Some(t);
        }
        smoothed = Some(field);
        smooth_report = Some(rep);
    }

    let mut columns = vec![("input", stage("bench", divergence_stats(&observed, &ops))?)];
    if let Some(t) = &traditional {
        columns.push(("traditional", stage("bench", divergence_stats(t, &ops))?));
    }
    if let Some(s) = &smoothed {
        columns.push(("improved", stage("bench", divergence_stats(s, &ops))?));
    }
    let _ = writeln!(report, "\ndivergence (grid units)");
    report.push_str(&divergence_table(&columns));
    let csv = divergence_csv(&columns);

    if cfg.bench {
        if let Some(tr) = &truth {
            let _ = writeln!(report, "\nerror against truth");
            let mut fields = vec![("input", &observed)];
            if let Some(t) = &traditional {
                fields.push(("traditional", t));
            }
            if let Some(s) = &smoothed {
                fields.push(("improved", s));
            }
            let plane = plane_region(tr, 2, nz / 2);
            for (name, f) in fields {
                let _ = write!(report, "{name:<12} rmse {:.6}", rmse(f, tr));
                if let Ok(c) = field_correlation(f, tr, &plane) {
                    let _ = write!(report, "  mid-plane w: r {:.4}, mean error {:.6}", c[2].r, c[2].mean_abs_error);
                }
                let _ = writeln!(report);
            }
        }
    }

    let mut wss_out = None;
    if cfg.wss {
        let source = smoothed.as_ref().unwrap_or(&observed);
        let samples = stage("wss", wss::compute_wss_field(source, &geometry, cfg.rho, cfg.mu, &cfg.wss_config()))?;
        let mut counts = [0usize; 4];
        for s in &samples {
            counts[s.status.code() as usize] += 1;
        }
        let _ = writeln!(report, "\nwall shear stress");
        match wss::median_tau(&samples) {
            Some(m) => {
                let _ = writeln!(report, "median: {m:.6} Pa");
            }
            None => {
                let _ = writeln!(report, "median: none (all vertices stagnant)");
            }
        }
        if let (true, Some(a)) = (cfg.bench, analytic_wss) {
            let _ = writeln!(report, "analytic: {a:.6} Pa");
        }
        let _ = writeln!(
            report,
            "status: {} ok, {} stagnant, {} thin, {} fit failures",
            counts[0], counts[1], counts[2], counts[3]
        );
        wss_out = Some(samples);
    }

    Ok(PipelineOutput {
        input: observed,
        truth,
        geometry,
        smoothed,
        smooth_report,
        traditional,
        wss: wss_out,
        report,
        divergence_csv: csv,
    })
}

/// Files written by [`write_outputs`].
pub fn output_files(out: &PipelineOutput) -> Vec<&'static str> {
    let mut names = vec!["input.wfv", "report.txt", "divergence.csv", "surface.vtk"];
    if out.truth.is_some() {
        names.push("truth.wfv");
    }
    if out.smoothed.is_some() {
        names.extend(["smoothed.wfv", "smoothed.vtk"]);
    }
    if out.traditional.is_some() {
        names.push("traditional.wfv");
    }
    if out.wss.is_some() {
        names.push("wss.vtk");
    }
    names
}

fn empty_wss(mesh: &TriMesh) -> Vec<WssSample> {
    vec![
        WssSample {
            u_tau: 0.0,
            tau: 0.0,
            direction: [0.0, 0.0, 0.0],
            fit_residual: 0.0,
            status: wss::WssStatus::Stagnant,
        };
        mesh.vertices.len()
    ]
}

/// Writes every output of a run into `dir`, each file atomically.
pub fn write_outputs(out: &PipelineOutput, dir: &Path, scalar: ScalarType) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: Vec<u8>| -> Result<()> {
        let p = dir.join(name);
        io::write_atomic(&p, &bytes)?;
        written.push(p);
        Ok(())
    };
    put("input.wfv", io::encode_volume(&io::velocity_volume(&out.input, scalar))?)?;
    if let Some(t) = &out.truth {
        put("truth.wfv", io::encode_volume(&io::velocity_volume(t, scalar))?)?;
    }
    if let Some(s) = &out.smoothed {
        put("smoothed.wfv", io::encode_volume(&io::velocity_volume(s, scalar))?)?;
        put("smoothed.vtk", io::vtk_velocity(s).into_bytes())?;
    }
    if let Some(t) = &out.traditional {
        put("traditional.wfv", io::encode_volume(&io::velocity_volume(t, scalar))?)?;
    }
    let mesh = &out.geometry.surface;
    put("surface.vtk", io::vtk_wss(mesh, &empty_wss(mesh))?.into_bytes())?;
    if let Some(w) = &out.wss {
        put("wss.vtk", io::vtk_wss(mesh, w)?.into_bytes())?;
    }
    put("divergence.csv", out.divergence_csv.clone().into_bytes())?;
    put("report.txt", out.report.clone().into_bytes())?;
    Ok(written)
}

/// Executes the pipeline and writes its outputs to `cfg.output`. Nothing is
/// written when a stage fails.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutput> {
    let out = execute(cfg)?;
    stage("output", write_outputs(&out, &cfg.output, cfg.scalar))?;
    Ok(out)
}

/// Distance map of a mask as a scalar field, for export.
pub fn signed_distance_field(geometry: &WallGeometry, grid: &crate::grid::VolumeGrid) -> Result<ScalarField> {
    ScalarField::new(grid.clone(), geometry.phi.clone())
}
