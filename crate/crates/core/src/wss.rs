//! Wall shear stress from near-wall velocity profiles fitted with the Musker
//! wall law.

use crate::error::{Error, Result};
use crate::grid::{add, cross, dot, norm, sample_trilinear, scale, VelocityField, WallGeometry};

/// von Kármán constant of the wall law.
pub const KARMAN: f64 = 0.41;
/// Musker profile constant.
pub const MUSKER_S: f64 = 0.001093;
/// Speeds below this are treated as stagnant [m/s].
pub const DEFAULT_V_FLOOR: f64 = 1e-6;

const QUAD_TOL: f64 = 1e-8;

/// Orthonormal frame at a wall vertex; `yp` is the inward normal and `xp`
/// the local flow direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalFrame {
    pub origin: [f64; 3],
    pub xp: [f64; 3],
    pub yp: [f64; 3],
    pub zp: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WssStatus {
    Ok,
    /// Velocity too small or parallel to the normal.
    Stagnant,
    /// Too few profile points; the two-point slope was used.
    Thin,
    /// The fit did not settle; the sublayer slope was used.
    FitFailed,
}

impl WssStatus {
    pub fn code(self) -> u8 {
        match self {
            WssStatus::Ok => 0,
            WssStatus::Stagnant => 1,
            WssStatus::Thin => 2,
            WssStatus::FitFailed => 3,
        }
    }
}

/// Velocity profile along the inward normal; the first point is the wall.
#[derive(Debug, Clone, PartialEq)]
pub struct WallProfile {
    pub distance: Vec<f64>,
    pub speed: Vec<f64>,
}

impl WallProfile {
    pub fn new(distance: Vec<f64>, speed: Vec<f64>) -> Result<Self> {
        if distance.len() != speed.len() || distance.is_empty() {
            return Err(Error::Parameter("profile needs matching, non-empty distance and speed".into()));
        }
        if distance[0] != 0.0 || speed[0] != 0.0 {
            return Err(Error::Parameter("profile must start at the wall with zero speed".into()));
        }
        if distance.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Parameter("profile distances must increase strictly".into()));
        }
        Ok(Self { distance, speed })
    }

    pub fn len(&self) -> usize {
        self.distance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distance.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WssSample {
    pub u_tau: f64,
    /// Shear stress magnitude [Pa].
    pub tau: f64,
    pub direction: [f64; 3],
    pub fit_residual: f64,
    pub status: WssStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interpolation {
    #[default]
    Trilinear,
    /// Separable Catmull-Rom cubic.
    Cubic,
}

impl std::str::FromStr for Interpolation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trilinear" | "linear" => Ok(Self::Trilinear),
            "cubic" => Ok(Self::Cubic),
            other => Err(Error::Parameter(format!("unknown interpolation '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WssConfig {
    /// Profile points including the wall point.
    pub n_points: usize,
    /// Profile spacing [m]; the smallest grid spacing when `None`.
    pub spacing: Option<f64>,
    pub interpolation: Interpolation,
    pub v_floor: f64,
}

impl Default for WssConfig {
    fn default() -> Self {
        Self {
            n_points: 3,
            spacing: None,
            interpolation: Interpolation::Trilinear,
            v_floor: DEFAULT_V_FLOOR,
        }
    }
}

fn unit(a: [f64; 3]) -> Option<[f64; 3]> {
    let n = norm(a);
    (n > 0.0 && n.is_finite()).then(|| scale(a, 1.0 / n))
}

/// Frame at `origin` with inward normal `normal`, oriented by the velocity
/// sampled one `spacing` inside. `None` marks a stagnant vertex.
pub fn build_local_frame(
    field: &VelocityField,
    origin: [f64; 3],
    normal: [f64; 3],
    spacing: f64,
    interpolation: Interpolation,
    v_floor: f64,
) -> Result<Option<LocalFrame>> {
    let yp = unit(normal).ok_or_else(|| Error::Parameter("wall normal has zero length".into()))?;
    let v = sample(field, add(origin, scale(yp, spacing)), interpolation)?;
    Ok(frame_from_velocity(origin, yp, v, v_floor))
}

/// Frame construction from a given unit normal and velocity sample.
pub fn frame_from_velocity(origin: [f64; 3], yp: [f64; 3], v: [f64; 3], v_floor: f64) -> Option<LocalFrame> {
    if norm(v) < v_floor {
        return None;
    }
    let zc = cross(yp, v);
    if norm(zc) < v_floor {
        return None;
    }
    let mut zp = unit(zc)?;
    let mut xp = cross(yp, zp);
    if dot(xp, v) < 0.0 {
        xp = scale(xp, -1.0);
        zp = scale(zp, -1.0);
    }
    Some(LocalFrame { origin, xp, yp, zp })
}

fn sample(field: &VelocityField, p: [f64; 3], interpolation: Interpolation) -> Result<[f64; 3]> {
    match interpolation {
        Interpolation::Trilinear => sample_trilinear(field, p),
        Interpolation::Cubic => sample_cubic(field, p),
    }
}

fn catmull_rom(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

/// Separable cubic interpolation; exterior and off-grid nodes count as zero.
fn sample_cubic(field: &VelocityField, p: [f64; 3]) -> Result<[f64; 3]> {
    let grid = &field.grid;
    if !grid.contains(p) {
        return Err(Error::OutOfDomain { x: p[0], y: p[1], z: p[2] });
    }
    let dims = grid.dims();
    let (o, h) = (grid.origin(), grid.spacing());
    let mut base = [0isize; 3];
    let mut wts = [[0.0; 4]; 3];
    for a in 0..3 {
        let t = (p[a] - o[a]) / h[a];
        let cell = t.floor();
        base[a] = cell as isize - 1;
        wts[a] = catmull_rom(t - cell);
    }
    let mut out = [0.0; 3];
    for (dk, wk) in wts[2].iter().enumerate() {
        let k = base[2] + dk as isize;
        if k < 0 || k >= dims[2] as isize {
            continue;
        }
        for (dj, wj) in wts[1].iter().enumerate() {
            let j = base[1] + dj as isize;
            if j < 0 || j >= dims[1] as isize {
                continue;
            }
            for (di, wi) in wts[0].iter().enumerate() {
                let i = base[0] + di as isize;
                if i < 0 || i >= dims[0] as isize {
                    continue;
                }
                let idx = grid.index(i as usize, j as usize, k as usize);
                if field.class[idx].is_fluid() {
                    let w = wi * wj * wk;
                    for (c, comp) in out.iter_mut().zip(&field.velocity) {
                        *c += w * comp[idx];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Distance along `dir` from `origin` until `phi` turns non-negative or the
/// ray leaves the grid, searched up to `limit`.
fn lumen_thickness(field: &VelocityField, phi: &[f64], origin: [f64; 3], dir: [f64; 3], limit: f64) -> f64 {
    let grid = &field.grid;
    let step = 0.25 * grid.min_spacing();
    let mut t = step;
    while t <= limit {
        let p = add(origin, scale(dir, t));
        match grid.interpolate(phi, p) {
            Ok(v) if v < 0.0 => t += step,
            _ => return t,
        }
    }
    limit
}

/// Profile of the speed projected on `frame.xp`, sampled at `k * spacing`
/// along the inward normal. Points beyond half the local lumen thickness or
/// outside the lumen are dropped, together with everything past them.
pub fn sample_profile(
    field: &VelocityField,
    phi: &[f64],
    frame: &LocalFrame,
    n_points: usize,
    spacing: f64,
    interpolation: Interpolation,
) -> Result<WallProfile> {
    if n_points < 3 {
        return Err(Error::Parameter(format!("profile needs at least 3 points, got {n_points}")));
    }
    if !(spacing > 0.0) {
        return Err(Error::Parameter(format!("profile spacing must be positive, got {spacing}")));
    }
    let depth = (n_points - 1) as f64 * spacing;
    let half = 0.5 * lumen_thickness(field, phi, frame.origin, frame.yp, 2.0 * depth + spacing);
    let mut distance = vec![0.0];
    let mut speed = vec![0.0];
    for k in 1..n_points {
        let y = k as f64 * spacing;
        if y > half {
            break;
        }
        let p = add(frame.origin, scale(frame.yp, y));
        match field.grid.interpolate(phi, p) {
            Ok(v) if v < 0.0 => {}
            _ => break,
        }
        let v = sample(field, p, interpolation)?;
        distance.push(y);
        speed.push(dot(v, frame.xp));
    }
    WallProfile::new(distance, speed)
}

fn musker_integrand(t: f64) -> f64 {
    let a = t * t / KARMAN + 1.0 / MUSKER_S;
    a / (t * t * t + a)
}

fn simpson(f: &impl Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
    let m = 0.5 * (a + b);
    let fm = f(m);
    (m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb))
}

#[allow(clippy::too_many_arguments)]
fn adaptive(
    f: &impl Fn(f64) -> f64,
    a: f64,
    fa: f64,
    b: f64,
    fb: f64,
    m: f64,
    fm: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let (lm, flm, left) = simpson(f, a, fa, m, fm);
    let (rm, frm, right) = simpson(f, m, fm, b, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    adaptive(f, a, fa, m, fm, lm, flm, left, 0.5 * tol, depth - 1)
        + adaptive(f, m, fm, b, fb, rm, frm, right, 0.5 * tol, depth - 1)
}

/// Dimensionless Musker velocity `U+` at `Y+`.
pub fn musker_u_plus(y_plus: f64) -> f64 {
    if y_plus <= 0.0 {
        return 0.0;
    }
    let f = musker_integrand;
    let (fa, fb) = (f(0.0), f(y_plus));
    let (m, fm, whole) = simpson(&f, 0.0, fa, y_plus, fb);
    // the integrand is bounded by 1, so U+ is at least y/(1+y^3) scale; use a
    // relative tolerance on a cheap lower estimate
    let scale = whole.abs().max(1e-300);
    adaptive(&f, 0.0, fa, y_plus, fb, m, fm, whole, QUAD_TOL * scale, 50)
}

/// Musker wall-law speed `u_tau * U+(Y+)` [m/s].
pub fn musker_velocity(y_plus: f64, u_tau: f64) -> f64 {
    u_tau * musker_u_plus(y_plus)
}

/// Derivative `dU+/dY+` of the Musker profile.
pub fn musker_slope(y_plus: f64) -> f64 {
    musker_integrand(y_plus.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrictionFit {
    pub u_tau: f64,
    /// RMS misfit of the profile [m/s].
    pub residual: f64,
    pub converged: bool,
}

fn profile_misfit(profile: &WallProfile, rho: f64, mu: f64, u_tau: f64) -> f64 {
    profile
        .distance
        .iter()
        .zip(&profile.speed)
        .skip(1)
        .map(|(&y, &u)| {
            let r = musker_velocity(rho * u_tau * y / mu, u_tau) - u;
            r * r
        })
        .sum()
}

/// Two-point viscous-sublayer estimate from the first interior point.
pub fn sublayer_u_tau(profile: &WallProfile, rho: f64, mu: f64) -> f64 {
    if profile.len() < 2 {
        return 0.0;
    }
    let slope = (profile.speed[1] / profile.distance[1]).max(0.0);
    (mu * slope / rho).sqrt()
}

/// Least-squares fit of the Musker profile to a wall profile.
pub fn fit_friction_velocity(profile: &WallProfile, rho: f64, mu: f64) -> Result<FrictionFit> {
    if !(rho > 0.0 && mu > 0.0) {
        return Err(Error::Parameter(format!("density and viscosity must be positive, got {rho} and {mu}")));
    }
    let samples = (profile.len() - 1).max(1) as f64;
    if profile.speed.iter().all(|&u| u == 0.0) {
        return Ok(FrictionFit { u_tau: 0.0, residual: 0.0, converged: true });
    }
    let u0 = sublayer_u_tau(profile, rho, mu);
    let hi = 10.0 * u0 + 1.0;
    let cost = |u: f64| profile_misfit(profile, rho, mu, u);

    const SCAN: usize = 24;
    let mut best = (0usize, f64::INFINITY);
    for i in 0..=SCAN {
        let c = cost(hi * i as f64 / SCAN as f64);
        if c < best.1 {
            best = (i, c);
        }
    }
    let mut a = hi * best.0.saturating_sub(1) as f64 / SCAN as f64;
    let mut b = hi * (best.0 + 1).min(SCAN) as f64 / SCAN as f64;
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (cost(c), cost(d));
    let mut converged = false;
    for _ in 0..200 {
        if (b - a) <= 1e-10 * (a.abs() + b.abs()).max(1e-300) {
            converged = true;
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = cost(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = cost(d);
        }
    }
    let u = 0.5 * (a + b);
    let fu = cost(u);
    if !converged || !fu.is_finite() {
        return Ok(FrictionFit {
            u_tau: u0,
            residual: (cost(u0) / samples).sqrt(),
            converged: false,
        });
    }
    Ok(FrictionFit { u_tau: u, residual: (fu / samples).sqrt(), converged: true })
}

/// Wall shear stress at every vertex of the wall surface.
pub fn compute_wss_field(
    field: &VelocityField,
    geometry: &WallGeometry,
    rho: f64,
    mu: f64,
    cfg: &WssConfig,
) -> Result<Vec<WssSample>> {
    if !(rho > 0.0 && mu > 0.0) {
        return Err(Error::Parameter(format!("density and viscosity must be positive, got {rho} and {mu}")));
    }
    if geometry.phi.len() != field.grid.len() {
        return Err(Error::Parameter("geometry and field grids differ".into()));
    }
    let spacing = cfg.spacing.unwrap_or_else(|| field.grid.min_spacing());
    let mesh = &geometry.surface;
    mesh.vertices
        .iter()
        .zip(&mesh.normals)
        .map(|(&vertex, &outward)| {
            let inward = scale(outward, -1.0);
            let stagnant = WssSample {
                u_tau: 0.0,
                tau: 0.0,
                direction: unit(inward).unwrap_or([0.0, 0.0, 1.0]),
                fit_residual: 0.0,
                status: WssStatus::Stagnant,
            };
            let frame = match unit(inward) {
                None => return Ok(stagnant),
                Some(yp) => {
                    let p = add(vertex, scale(yp, spacing));
                    let v = if field.grid.contains(p) { sample(field, p, cfg.interpolation)? } else { [0.0; 3] };
                    match frame_from_velocity(vertex, yp, v, cfg.v_floor) {
                        Some(f) => f,
                        None => return Ok(stagnant),
                    }
                }
            };
            let profile = sample_profile(field, &geometry.phi, &frame, cfg.n_points, spacing, cfg.interpolation)?;
            let (u_tau, residual, status) = if profile.len() < 3 {
                (sublayer_u_tau(&profile, rho, mu), 0.0, WssStatus::Thin)
            } else {
                let fit = fit_friction_velocity(&profile, rho, mu)?;
                let status = if fit.converged { WssStatus::Ok } else { WssStatus::FitFailed };
                (fit.u_tau, fit.residual, status)
            };
            Ok(WssSample {
                u_tau,
                tau: rho * u_tau * u_tau,
                direction: frame.xp,
                fit_residual: residual,
                status,
            })
        })
        .collect()
}

/// Median of the shear stress over samples that carry a fitted value.
pub fn median_tau(samples: &[WssSample]) -> Option<f64> {
    let mut v: Vec<f64> = samples
        .iter()
        .filter(|s| s.status != WssStatus::Stagnant)
        .map(|s| s.tau)
        .collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}
