//! Analytic flow phantoms with ground truth, corruption models, and
//! divergence / correlation diagnostics.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grid::{classify, Direction, VelocityField, VolumeGrid, VoxelClass, WallGeometry};
use crate::operators::{wall_extrapolation, Operators};
use crate::segmentation::{geometry_from_level_set, DEFAULT_THETA_MIN};

/// Blood-like fluid used by the default phantoms.
pub const DEFAULT_RHO: f64 = 1060.0;
pub const DEFAULT_MU: f64 = 0.0035;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhantomKind {
    /// Circular pipe, `u = U_max (1 - r²/R²)` along the axis.
    PoiseuillePipe,
    /// Azimuthal flow in a closed cylinder, `u_θ = ω r (1 - r²/R²)` with `ω`
    /// chosen so the peak speed is `U_max`.
    SolidRotation,
    /// Plane Poiseuille flow between two plates at `±R`.
    UniformChannel,
}

impl FromStr for PhantomKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "poiseuille-pipe" | "pipe" => Ok(Self::PoiseuillePipe),
            "solid-rotation" | "rotation" => Ok(Self::SolidRotation),
            "uniform-channel" | "channel" => Ok(Self::UniformChannel),
            other => Err(Error::Parameter(format!("unknown phantom kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Pipe or cylinder radius, channel half-gap [m].
    pub radius: f64,
    /// Flow axis (pipe, channel) or rotation axis.
    pub axis: usize,
    /// Peak speed [m/s].
    pub u_max: f64,
    pub rho: f64,
    pub mu: f64,
    pub theta_min: f64,
}

impl PhantomSpec {
    /// 48³ pipe along z, R = 1 cm, h = 0.5 mm, U_max = 1 m/s.
    pub fn poiseuille_default() -> Self {
        Self {
            kind: PhantomKind::PoiseuillePipe,
            dims: [48, 48, 48],
            spacing: [0.0005; 3],
            radius: 0.01,
            axis: 2,
            u_max: 1.0,
            rho: DEFAULT_RHO,
            mu: DEFAULT_MU,
            theta_min: DEFAULT_THETA_MIN,
        }
    }

    /// Small pipe for fast checks: `n³` voxels, radius `0.4 (n - 1) h`.
    pub fn small_pipe(n: usize) -> Self {
        let h = 0.001;
        Self {
            dims: [n, n, n],
            spacing: [h; 3],
            radius: 0.4 * (n - 1) as f64 * h,
            ..Self::poiseuille_default()
        }
    }

    /// Grid centered on the phantom axis.
    pub fn grid(&self) -> Result<VolumeGrid> {
        let origin = [0, 1, 2].map(|a| -0.5 * (self.dims[a] - 1) as f64 * self.spacing[a]);
        VolumeGrid::new(self.dims, self.spacing, origin)
    }

    /// Angular rate of the rotation phantom.
    pub fn omega(&self) -> f64 {
        3.0 * 3f64.sqrt() * self.u_max / (2.0 * self.radius)
    }

    /// Analytic wall shear stress magnitude.
    pub fn wall_shear(&self) -> f64 {
        match self.kind {
            PhantomKind::PoiseuillePipe | PhantomKind::UniformChannel => {
                2.0 * self.mu * self.u_max / self.radius
            }
            PhantomKind::SolidRotation => 2.0 * self.mu * self.omega(),
        }
    }

    /// Signed distance to the wall, negative inside.
    pub fn phi(&self, p: [f64; 3]) -> f64 {
        let (a, b) = ((self.axis + 1) % 3, (self.axis + 2) % 3);
        match self.kind {
            PhantomKind::PoiseuillePipe | PhantomKind::SolidRotation => {
                p[a].hypot(p[b]) - self.radius
            }
            PhantomKind::UniformChannel => p[a].abs() - self.radius,
        }
    }

    /// Analytic velocity, zero outside the lumen.
    pub fn velocity(&self, p: [f64; 3]) -> [f64; 3] {
        if self.phi(p) >= 0.0 {
            return [0.0; 3];
        }
        let (a, b) = ((self.axis + 1) % 3, (self.axis + 2) % 3);
        let mut v = [0.0; 3];
        match self.kind {
            PhantomKind::PoiseuillePipe => {
                let r2 = p[a] * p[a] + p[b] * p[b];
                v[self.axis] = self.u_max * (1.0 - r2 / (self.radius * self.radius));
            }
            PhantomKind::UniformChannel => {
                let y = p[a] / self.radius;
                v[self.axis] = self.u_max * (1.0 - y * y);
            }
            PhantomKind::SolidRotation => {
                let r2 = p[a] * p[a] + p[b] * p[b];
                let f = self.omega() * (1.0 - r2 / (self.radius * self.radius));
                // u_θ e_θ = f * (-y, x) in the (a, b) plane
                v[a] = -f * p[b];
                v[b] = f * p[a];
            }
        }
        v
    }
}

/// Ground truth for one phantom.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub spec: PhantomSpec,
    pub truth: VelocityField,
    pub geometry: WallGeometry,
    /// Analytic WSS at every surface vertex [Pa].
    pub wall_shear: Vec<f64>,
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    let min_radius = 4.0 * spec.spacing.iter().fold(0.0f64, |m, &h| m.max(h));
    if spec.radius < min_radius {
        return Err(Error::Resolution {
            radius: spec.radius,
            min_radius,
        });
    }
    if spec.axis > 2 || spec.u_max < 0.0 || spec.rho <= 0.0 || spec.mu <= 0.0 {
        return Err(Error::Parameter("invalid phantom parameters".into()));
    }
    let grid = spec.grid()?;
    let phi: Vec<f64> = (0..grid.len()).map(|i| spec.phi(grid.position(i))).collect();
    let geometry = geometry_from_level_set(&grid, phi, spec.theta_min)?;
    let class = classify(&grid, &geometry.mask())?;
    let mut velocity = [vec![0.0; grid.len()], vec![0.0; grid.len()], vec![0.0; grid.len()]];
    for idx in 0..grid.len() {
        if class[idx].is_fluid() {
            let v = spec.velocity(grid.position(idx));
            for c in 0..3 {
                velocity[c][idx] = v[c];
            }
        }
    }
    let truth = VelocityField::new(grid, velocity, class)?;
    let wall_shear = vec![spec.wall_shear(); geometry.surface.vertices.len()];
    Ok(Phantom {
        spec: spec.clone(),
        truth,
        geometry,
        wall_shear,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionSpec {
    /// Noise standard deviation as a fraction of `reference_speed`.
    pub gaussian_sigma: f64,
    pub outlier_fraction: f64,
    pub missing_fraction: f64,
    /// `U_max` used to scale noise and outliers [m/s].
    pub reference_speed: f64,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn none() -> Self {
        Self {
            gaussian_sigma: 0.0,
            outlier_fraction: 0.0,
            missing_fraction: 0.0,
            reference_speed: 1.0,
            seed: 0,
        }
    }
}

/// Noise, outliers and missing voxels over the fluid voxels of `field`.
/// Outlier and missing voxels are disjoint; missing voxels get value and
/// weight zero.
pub fn corrupt(field: &VelocityField, spec: &CorruptionSpec) -> Result<VelocityField> {
    for (name, f) in [
        ("outlier_fraction", spec.outlier_fraction),
        ("missing_fraction", spec.missing_fraction),
    ] {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::Parameter(format!("{name} = {f} outside [0, 1]")));
        }
    }
    if spec.gaussian_sigma < 0.0 || spec.reference_speed < 0.0 {
        return Err(Error::Parameter("negative noise level".into()));
    }
    let mut out = field.clone();
    let fluid: Vec<usize> = (0..field.grid.len()).filter(|&i| field.class[i].is_fluid()).collect();
    let n = fluid.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sigma = spec.gaussian_sigma * spec.reference_speed;
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::Parameter(e.to_string()))?;
        for &idx in &fluid {
            for c in 0..3 {
                out.velocity[c][idx] += normal.sample(&mut rng);
            }
        }
    }
    let n_out = (spec.outlier_fraction * n as f64).floor() as usize;
    let n_miss = (spec.missing_fraction * n as f64).floor() as usize;
    if n_out + n_miss > n {
        return Err(Error::Parameter("outlier and missing fractions exceed the fluid voxel count".into()));
    }
    let picked = sample(&mut rng, n, n_out + n_miss).into_vec();
    let bound = 2.0 * spec.reference_speed;
    for &k in &picked[..n_out] {
        let idx = fluid[k];
        for c in 0..3 {
            out.velocity[c][idx] = if bound > 0.0 { rng.random_range(-bound..=bound) } else { 0.0 };
        }
    }
    for &k in &picked[n_out..] {
        let idx = fluid[k];
        for c in 0..3 {
            out.velocity[c][idx] = 0.0;
        }
        out.weight[idx] = 0.0;
    }
    Ok(out)
}

/// Mean and maximum of `|A U|` in grid units.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DivergenceStats {
    pub mean: f64,
    pub max: f64,
    pub rows: usize,
}

impl DivergenceStats {
    fn from_values(values: impl Iterator<Item = f64>) -> Self {
        let (mut sum, mut max, mut rows) = (0.0, 0.0f64, 0);
        for v in values {
            sum += v.abs();
            max = max.max(v.abs());
            rows += 1;
        }
        Self {
            mean: if rows > 0 { sum / rows as f64 } else { 0.0 },
            max,
            rows,
        }
    }
}

/// Divergence statistics over all constraint rows and split by class.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DivergenceReport {
    pub all: DivergenceStats,
    pub interior: DivergenceStats,
    pub near_wall: DivergenceStats,
}

pub fn divergence_stats(field: &VelocityField, ops: &Operators) -> Result<DivergenceReport> {
    if field.grid != *ops.layout.grid() || field.class != ops.layout.class() {
        return Err(Error::Parameter("field layout differs from the operator layout".into()));
    }
    let div = ops.divergence.mul_vec(&ops.layout.gather(&field.velocity));
    let of_class = |want: VoxelClass| {
        DivergenceStats::from_values(
            div.iter()
                .zip(&ops.divergence_voxels)
                .filter(move |(_, &v)| field.class[v] == want)
                .map(|(d, _)| *d),
        )
    };
    Ok(DivergenceReport {
        all: DivergenceStats::from_values(div.iter().copied()),
        interior: of_class(VoxelClass::Interior),
        near_wall: of_class(VoxelClass::NearWall),
    })
}

/// Divergence table with one column per labelled field.
pub fn divergence_table(columns: &[(&str, DivergenceReport)]) -> String {
    let mut out = format!("{:<18}", "");
    for (label, _) in columns {
        let _ = write!(out, "{label:>14}");
    }
    out.push('\n');
    type Pick = fn(&DivergenceReport) -> f64;
    let rows: [(&str, Pick); 4] = [
        ("mean |div|", |r| r.all.mean),
        ("max |div|", |r| r.all.max),
        ("mean |div| wall", |r| r.near_wall.mean),
        ("mean |div| inner", |r| r.interior.mean),
    ];
    for (name, pick) in rows {
        let _ = write!(out, "{name:<18}");
        for (_, r) in columns {
            let _ = write!(out, "{:>14.4e}", pick(r));
        }
        out.push('\n');
    }
    out
}

pub fn divergence_csv(columns: &[(&str, DivergenceReport)]) -> String {
    let mut out = String::from("field,mean,max,mean_near_wall,max_near_wall,mean_interior,max_interior\n");
    for (label, r) in columns {
        let _ = writeln!(
            out,
            "{label},{:e},{:e},{:e},{:e},{:e},{:e}",
            r.all.mean, r.all.max, r.near_wall.mean, r.near_wall.max, r.interior.mean, r.interior.max
        );
    }
    out
}

/// Pearson correlation and mean absolute error of one component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correlation {
    pub r: f64,
    pub mean_abs_error: f64,
}

/// Component-wise correlation of two fields over `region` (voxel indices).
pub fn field_correlation(a: &VelocityField, b: &VelocityField, region: &[usize]) -> Result<[Correlation; 3]> {
    if a.grid != b.grid {
        return Err(Error::Parameter("fields live on different grids".into()));
    }
    if region.is_empty() {
        return Err(Error::Parameter("empty correlation region".into()));
    }
    let m = region.len() as f64;
    let mut out = [Correlation {
        r: 0.0,
        mean_abs_error: 0.0,
    }; 3];
    for c in 0..3 {
        let xs: Vec<f64> = region.iter().map(|&i| a.velocity[c][i]).collect();
        let ys: Vec<f64> = region.iter().map(|&i| b.velocity[c][i]).collect();
        let mx = xs.iter().sum::<f64>() / m;
        let my = ys.iter().sum::<f64>() / m;
        let (mut sxy, mut sxx, mut syy, mut mae) = (0.0, 0.0, 0.0, 0.0);
        for (x, y) in xs.iter().zip(&ys) {
            sxy += (x - mx) * (y - my);
            sxx += (x - mx) * (x - mx);
            syy += (y - my) * (y - my);
            mae += (x - y).abs();
        }
        if sxx == 0.0 || syy == 0.0 {
            return Err(Error::UndefinedCorrelation { component: c });
        }
        out[c] = Correlation {
            r: sxy / (sxx * syy).sqrt(),
            mean_abs_error: mae / m,
        };
    }
    Ok(out)
}

/// Speed extrapolated to the wall at every near-wall voxel, the largest over
/// the directions in which the voxel faces the wall. Voxels with no fluid
/// neighbor opposite any of their walls are left out.
pub fn wall_slip(field: &VelocityField, geometry: &WallGeometry) -> Result<Vec<(usize, f64)>> {
    let grid = &field.grid;
    let fluid = |i: usize| field.class[i].is_fluid();
    let mut out = Vec::new();
    for idx in 0..grid.len() {
        if field.class[idx] != VoxelClass::NearWall {
            continue;
        }
        let mut worst: Option<f64> = None;
        for dir in Direction::ALL {
            let Some(theta) = geometry.theta[idx][dir.slot()] else {
                continue;
            };
            let back = dir.opposite();
            let Some(n2) = grid.neighbor(idx, back).filter(|&n| fluid(n)) else {
                continue;
            };
            let n3 = grid.neighbor(n2, back).filter(|&n| fluid(n));
            let h = grid.spacing()[dir.axis()];
            let mut sq = 0.0;
            for c in 0..3 {
                let u = &field.velocity[c];
                let uw = wall_extrapolation(u[idx], u[n2], n3.map(|n| u[n]), theta, h)?;
                sq += uw * uw;
            }
            worst = Some(worst.unwrap_or(0.0).max(sq.sqrt()));
        }
        if let Some(w) = worst {
            out.push((idx, w));
        }
    }
    Ok(out)
}

/// Fluid voxels of `field` in the plane `coord[axis] == index`.
pub fn plane_region(field: &VelocityField, axis: usize, index: usize) -> Vec<usize> {
    (0..field.grid.len())
        .filter(|&i| field.class[i].is_fluid() && field.grid.coords(i)[axis] == index)
        .collect()
}

/// Root-mean-square difference over the fluid voxels, all components.
pub fn rmse(a: &VelocityField, b: &VelocityField) -> f64 {
    let mut sum = 0.0;
    let mut count = 0;
    for idx in 0..a.grid.len() {
        if a.class[idx].is_fluid() {
            for c in 0..3 {
                sum += (a.velocity[c][idx] - b.velocity[c][idx]).powi(2);
            }
            count += 3;
        }
    }
    if count == 0 {
        0.0
    } else {
        (sum / count as f64).sqrt()
    }
}
