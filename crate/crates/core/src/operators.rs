//! Wall-aware discrete divergence and smoothness operators.
//!
//! Operators act on the stacked velocity vector `[u; v; w]`, each block holding
//! one value per fluid voxel in layout order. Spacings are expressed in grid
//! units (divided by the smallest grid spacing), so derivative values are per
//! grid cell rather than per meter.
//!
//! Near a wall, the voxel sits at a fraction `theta` of a spacing from the wall
//! along the axis. The three-point stencils through (wall, node, next node) are
//! exact for quadratics; because the wall value is zero the wall coefficient is
//! dropped from the row.

use crate::error::{Error, Result};
use crate::grid::{Direction, VolumeGrid, VoxelClass, WallGeometry};
use crate::sparse::SparseOperator;

const NONE: usize = usize::MAX;

/// Weights of a three-point derivative stencil applied to
/// `(u_wall, u_near, u_next)`, multiplied by `scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StencilCoefficients {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub scale: f64,
}

impl StencilCoefficients {
    pub fn apply(&self, u_wall: f64, u_near: f64, u_next: f64) -> f64 {
        self.scale * (self.c0 * u_wall + self.c1 * u_near + self.c2 * u_next)
    }
}

fn check_theta(theta: f64, h: f64) -> Result<()> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::Parameter(format!(
            "wall fraction must lie in (0, 1], got {theta}"
        )));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Parameter(format!("spacing must be positive, got {h}")));
    }
    Ok(())
}

/// First derivative at the near-wall node, wall at distance `theta * h` behind it.
pub fn first_derivative_stencil(theta: f64, h: f64) -> Result<StencilCoefficients> {
    check_theta(theta, h)?;
    Ok(StencilCoefficients {
        c0: -1.0 / (theta * theta + theta),
        c1: (1.0 - theta) / theta,
        c2: theta / (1.0 + theta),
        scale: 1.0 / h,
    })
}

/// Second derivative at the near-wall node, wall at distance `theta * h` behind it.
pub fn second_derivative_stencil(theta: f64, h: f64) -> Result<StencilCoefficients> {
    check_theta(theta, h)?;
    Ok(StencilCoefficients {
        c0: 1.0 / (theta * theta + theta),
        c1: -1.0 / theta,
        c2: 1.0 / (1.0 + theta),
        scale: 2.0 / (h * h),
    })
}

/// Lagrange weights for the first and second derivative at `at` of the
/// quadratic through three distinct abscissae.
fn lagrange3(xs: [f64; 3], at: f64) -> ([f64; 3], [f64; 3]) {
    let mut first = [0.0; 3];
    let mut second = [0.0; 3];
    for i in 0..3 {
        let (j, k) = ((i + 1) % 3, (i + 2) % 3);
        let denom = (xs[i] - xs[j]) * (xs[i] - xs[k]);
        first[i] = ((at - xs[j]) + (at - xs[k])) / denom;
        second[i] = 2.0 / denom;
    }
    (first, second)
}

/// How near-wall rows are discretized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WallTreatment {
    /// Sub-grid wall stencils with the no-slip value folded out.
    #[default]
    WallAware,
    /// Wall-unaware baseline: exterior neighbors are ignored and the row
    /// falls back to one-sided differences through fluid nodes.
    Traditional,
}

/// Mapping between fluid voxels and unknown indices.
#[derive(Debug, Clone)]
pub struct FieldLayout {
    grid: VolumeGrid,
    class: Vec<VoxelClass>,
    unknown_of: Vec<usize>,
    voxels: Vec<usize>,
    constrained: Vec<usize>,
}

impl FieldLayout {
    pub fn new(grid: &VolumeGrid, class: &[VoxelClass]) -> Result<Self> {
        if class.len() != grid.len() {
            return Err(Error::Assembly(format!(
                "classification holds {} voxels, grid has {}",
                class.len(),
                grid.len()
            )));
        }
        let mut unknown_of = vec![NONE; grid.len()];
        let mut voxels = Vec::new();
        let mut constrained = Vec::new();
        for (idx, c) in class.iter().enumerate() {
            if c.is_fluid() {
                unknown_of[idx] = voxels.len();
                voxels.push(idx);
            }
            if matches!(c, VoxelClass::Interior | VoxelClass::NearWall) {
                constrained.push(idx);
            }
        }
        if voxels.is_empty() {
            return Err(Error::EmptyMask);
        }
        Ok(Self {
            grid: grid.clone(),
            class: class.to_vec(),
            unknown_of,
            voxels,
            constrained,
        })
    }

    pub fn grid(&self) -> &VolumeGrid {
        &self.grid
    }

    pub fn class(&self) -> &[VoxelClass] {
        &self.class
    }

    /// Number of fluid voxels `n`; the velocity vector has length `3n`.
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn voxels(&self) -> &[usize] {
        &self.voxels
    }

    /// Voxels carrying a divergence constraint (interior and near-wall).
    pub fn constrained_voxels(&self) -> &[usize] {
        &self.constrained
    }

    pub fn unknown(&self, voxel: usize) -> Option<usize> {
        let u = self.unknown_of[voxel];
        (u != NONE).then_some(u)
    }

    /// Gathers a per-voxel component triple into the stacked unknown vector.
    pub fn gather(&self, velocity: &[Vec<f64>; 3]) -> Vec<f64> {
        let n = self.len();
        let mut out = vec![0.0; 3 * n];
        for (c, comp) in velocity.iter().enumerate() {
            for (u, &vox) in self.voxels.iter().enumerate() {
                out[c * n + u] = comp[vox];
            }
        }
        out
    }

    /// Gathers a per-voxel scalar into one unknown block.
    pub fn gather_scalar(&self, values: &[f64]) -> Vec<f64> {
        self.voxels.iter().map(|&v| values[v]).collect()
    }

    /// Scatters a stacked unknown vector back to per-voxel arrays; exterior is zero.
    pub fn scatter(&self, stacked: &[f64]) -> [Vec<f64>; 3] {
        let n = self.len();
        std::array::from_fn(|c| {
            let mut comp = vec![0.0; self.grid.len()];
            for (u, &vox) in self.voxels.iter().enumerate() {
                comp[vox] = stacked[c * n + u];
            }
            comp
        })
    }

    fn h_grid(&self, axis: usize) -> f64 {
        self.grid.spacing()[axis] / self.grid.min_spacing()
    }
}

/// What lies across one face of a fluid voxel.
#[derive(Debug, Clone, Copy)]
enum Side {
    Fluid(usize),
    Wall(f64),
    Edge,
}

/// First- and second-derivative rows for one axis at one voxel, as
/// (voxel, weight) pairs. Wall points carry zero value and do not appear.
#[derive(Debug, Clone, Default)]
pub struct AxisStencil {
    pub first: Vec<(usize, f64)>,
    pub second: Vec<(usize, f64)>,
    /// Fewer than two usable neighbors; the row is first-order or degenerate.
    pub degraded: bool,
}

/// Derivative stencil along `axis` at fluid voxel `voxel`.
pub fn axis_stencil(
    layout: &FieldLayout,
    geometry: Option<&WallGeometry>,
    voxel: usize,
    axis: usize,
    treatment: WallTreatment,
) -> Result<AxisStencil> {
    let h = layout.h_grid(axis);
    let side = |from: usize, dir: Direction| -> Result<Side> {
        match layout.grid.neighbor(from, dir) {
            None => Ok(Side::Edge),
            Some(nb) if layout.class[nb].is_fluid() => Ok(Side::Fluid(nb)),
            Some(_) => match treatment {
                WallTreatment::Traditional => Ok(Side::Edge),
                WallTreatment::WallAware => {
                    let theta = geometry
                        .and_then(|g| g.theta[from][dir.slot()])
                        .ok_or_else(|| {
                            Error::Assembly(format!(
                                "voxel {from} borders exterior across {dir:?} without a wall fraction"
                            ))
                        })?;
                    Ok(Side::Wall(theta))
                }
            },
        }
    };
    let minus = Direction::new(axis, false);
    let plus = Direction::new(axis, true);
    let left = side(voxel, minus)?;
    let right = side(voxel, plus)?;

    let mut st = AxisStencil::default();
    match (left, right) {
        (Side::Fluid(l), Side::Fluid(r)) => {
            st.first = vec![(l, -0.5 / h), (r, 0.5 / h)];
            st.second = vec![(l, 1.0 / (h * h)), (voxel, -2.0 / (h * h)), (r, 1.0 / (h * h))];
        }
        (Side::Wall(theta), Side::Fluid(next)) | (Side::Fluid(next), Side::Wall(theta)) => {
            let d1 = first_derivative_stencil(theta, h)?;
            let d2 = second_derivative_stencil(theta, h)?;
            // mirrored coordinate when the wall is on the positive side
            let sign = if matches!(left, Side::Wall(_)) { 1.0 } else { -1.0 };
            st.first = vec![(voxel, sign * d1.scale * d1.c1), (next, sign * d1.scale * d1.c2)];
            st.second = vec![(voxel, d2.scale * d2.c1), (next, d2.scale * d2.c2)];
        }
        (Side::Wall(tl), Side::Wall(tr)) => {
            let (d1, d2) = lagrange3([-tl * h, 0.0, tr * h], 0.0);
            st.first = vec![(voxel, d1[1])];
            st.second = vec![(voxel, d2[1])];
            st.degraded = true;
        }
        (Side::Edge, Side::Edge) => {
            st.degraded = true;
        }
        (Side::Edge, inner) | (inner, Side::Edge) => {
            let outward = if matches!(left, Side::Edge) { plus } else { minus };
            let sign = if outward.is_positive() { 1.0 } else { -1.0 };
            match inner {
                Side::Fluid(next) => match side(next, outward)? {
                    Side::Fluid(far) => {
                        let (d1, d2) = lagrange3([0.0, h, 2.0 * h], 0.0);
                        st.first = vec![(voxel, sign * d1[0]), (next, sign * d1[1]), (far, sign * d1[2])];
                        st.second = vec![(voxel, d2[0]), (next, d2[1]), (far, d2[2])];
                    }
                    Side::Wall(theta) => {
                        let (d1, d2) = lagrange3([0.0, h, h + theta * h], 0.0);
                        st.first = vec![(voxel, sign * d1[0]), (next, sign * d1[1])];
                        st.second = vec![(voxel, d2[0]), (next, d2[1])];
                    }
                    Side::Edge => {
                        st.first = vec![(voxel, -sign / h), (next, sign / h)];
                        st.degraded = true;
                    }
                },
                Side::Wall(theta) => {
                    st.first = vec![(voxel, -sign / (theta * h))];
                    st.degraded = true;
                }
                Side::Edge => unreachable!(),
            }
        }
    }
    Ok(st)
}

/// Which fluid voxels receive a divergence row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DivergenceRows {
    /// Interior and near-wall voxels (the constraint set).
    #[default]
    Constrained,
    /// Every fluid voxel, including open-boundary planes (diagnostics).
    AllFluid,
}

/// Assembly diagnostics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AssemblyReport {
    /// (voxel, axis) pairs whose stencil lacked a second neighbor.
    pub degraded: Vec<(usize, usize)>,
}

/// Assembled operators for one layout and wall treatment.
#[derive(Debug, Clone)]
pub struct Operators {
    pub layout: FieldLayout,
    pub treatment: WallTreatment,
    /// Divergence `A`: one row per constrained voxel, `3n` columns.
    pub divergence: SparseOperator,
    /// Voxel index of every row of `divergence`.
    pub divergence_voxels: Vec<usize>,
    /// Per-component Laplacian block; the full smoother is three copies on the diagonal.
    pub smoother: SparseOperator,
    pub report: AssemblyReport,
}

impl Operators {
    pub fn assemble(
        layout: FieldLayout,
        geometry: Option<&WallGeometry>,
        treatment: WallTreatment,
    ) -> Result<Self> {
        let (divergence, divergence_voxels, mut report) =
            assemble_divergence(&layout, geometry, treatment, DivergenceRows::Constrained)?;
        let (smoother, smoother_report) = assemble_smoother(&layout, geometry, treatment)?;
        report.degraded.extend(smoother_report.degraded);
        report.degraded.sort_unstable();
        report.degraded.dedup();
        Ok(Self {
            layout,
            treatment,
            divergence,
            divergence_voxels,
            smoother,
            report,
        })
    }

    /// `3n`
    pub fn unknowns(&self) -> usize {
        3 * self.layout.len()
    }

    /// Explicit block-diagonal smoother over the stacked vector.
    pub fn smoother_full(&self) -> SparseOperator {
        block_diagonal(&self.smoother, 3)
    }
}

/// Divergence operator over the stacked velocity vector.
pub fn assemble_divergence(
    layout: &FieldLayout,
    geometry: Option<&WallGeometry>,
    treatment: WallTreatment,
    rows: DivergenceRows,
) -> Result<(SparseOperator, Vec<usize>, AssemblyReport)> {
    let n = layout.len();
    let row_voxels: Vec<usize> = match rows {
        DivergenceRows::Constrained => layout.constrained.clone(),
        DivergenceRows::AllFluid => layout.voxels.clone(),
    };
    let mut triplets = Vec::with_capacity(row_voxels.len() * 6);
    let mut report = AssemblyReport::default();
    for (row, &vox) in row_voxels.iter().enumerate() {
        for axis in 0..3 {
            let st = axis_stencil(layout, geometry, vox, axis, treatment)?;
            if st.degraded {
                report.degraded.push((vox, axis));
            }
            for (nb, w) in st.first {
                let col = layout.unknown(nb).expect("stencil references a fluid voxel");
                triplets.push((row, axis * n + col, w));
            }
        }
    }
    let op = SparseOperator::from_triplets(row_voxels.len(), 3 * n, &triplets)?;
    Ok((op, row_voxels, report))
}

/// Per-component Laplacian block (`n x n`).
pub fn assemble_smoother(
    layout: &FieldLayout,
    geometry: Option<&WallGeometry>,
    treatment: WallTreatment,
) -> Result<(SparseOperator, AssemblyReport)> {
    let n = layout.len();
    let mut triplets = Vec::with_capacity(n * 7);
    let mut report = AssemblyReport::default();
    for (row, &vox) in layout.voxels.iter().enumerate() {
        for axis in 0..3 {
            let st = axis_stencil(layout, geometry, vox, axis, treatment)?;
            if st.degraded {
                report.degraded.push((vox, axis));
            }
            for (nb, w) in st.second {
                let col = layout.unknown(nb).expect("stencil references a fluid voxel");
                triplets.push((row, col, w));
            }
        }
    }
    Ok((SparseOperator::from_triplets(n, n, &triplets)?, report))
}

/// `copies` copies of `block` along the diagonal.
pub fn block_diagonal(block: &SparseOperator, copies: usize) -> SparseOperator {
    let (r, c) = (block.rows(), block.cols());
    let mut triplets = Vec::with_capacity(block.nnz() * copies);
    for b in 0..copies {
        for row in 0..r {
            for (col, v) in block.row(row) {
                triplets.push((b * r + row, b * c + col, v));
            }
        }
    }
    SparseOperator::from_triplets(r * copies, c * copies, &triplets)
        .expect("block copies stay within bounds")
}

/// Velocity at the wall extrapolated from three nodes marching away from it,
/// `u1` at `theta * h` from the wall and `u2`, `u3` one and two spacings further.
/// The interior slope at `u1` is taken one-sided and the first-derivative wall
/// stencil is solved for the wall value. With `u3` unavailable the slope is
/// two-point.
pub fn wall_extrapolation(u1: f64, u2: f64, u3: Option<f64>, theta: f64, h: f64) -> Result<f64> {
    let d1 = first_derivative_stencil(theta, h)?;
    let slope = match u3 {
        Some(u3) => (-3.0 * u1 + 4.0 * u2 - u3) / (2.0 * h),
        None => return Ok(u1 - theta * (u2 - u1)),
    };
    Ok((slope / d1.scale - d1.c1 * u1 - d1.c2 * u2) / d1.c0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{classify, WallFractions};

    const THETAS: [f64; 6] = [0.05, 0.1, 0.3, 0.5, 0.7, 1.0];

    #[test]
    fn first_stencil_examples() {
        let s = first_derivative_stencil(1.0, 1.0).unwrap();
        assert!((s.apply(0.0, 1.0, 2.0) - 1.0).abs() < 1e-15);
        let s = first_derivative_stencil(0.5, 1.0).unwrap();
        assert!(s.apply(0.25, 0.0, 1.0).abs() < 1e-15);
        assert!((s.apply(-0.5, 0.0, 1.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn second_stencil_examples() {
        let s = second_derivative_stencil(1.0, 1.0).unwrap();
        assert!(s.apply(1.0, 1.0, 1.0).abs() < 1e-15);
        let s = second_derivative_stencil(0.5, 1.0).unwrap();
        assert!((s.apply(0.25, 0.0, 1.0) - 2.0).abs() < 1e-14);
        // uniform limit is the central second difference
        let h = 0.7;
        let s = second_derivative_stencil(1.0, h).unwrap();
        let (a, b, c) = (0.3, -1.1, 2.5);
        assert!((s.apply(a, b, c) - (a - 2.0 * b + c) / (h * h)).abs() < 1e-13);
    }

    #[test]
    fn theta_out_of_range_rejected() {
        for t in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(first_derivative_stencil(t, 1.0).is_err());
            assert!(second_derivative_stencil(t, 1.0).is_err());
        }
    }

    #[test]
    fn stencil_coefficient_sums() {
        for t in THETAS {
            let d1 = first_derivative_stencil(t, 1.0).unwrap();
            let d2 = second_derivative_stencil(t, 1.0).unwrap();
            assert!((d1.c0 + d1.c1 + d1.c2).abs() < 1e-13);
            assert!((d2.c0 + d2.c1 + d2.c2).abs() < 1e-13);
            // second derivative annihilates linears: sum c_i x_i = 0 with x = (-t, 0, 1)
            assert!((-t * d2.c0 + d2.c2).abs() < 1e-13);
        }
    }

    #[test]
    fn lagrange_agrees_with_wall_stencils() {
        for t in THETAS {
            let (f, s) = lagrange3([-t, 0.0, 1.0], 0.0);
            let d1 = first_derivative_stencil(t, 1.0).unwrap();
            let d2 = second_derivative_stencil(t, 1.0).unwrap();
            for (a, b) in f.iter().zip([d1.c0, d1.c1, d1.c2]) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in s.iter().zip([d2.c0, d2.c1, d2.c2]) {
                assert!((a - 2.0 * b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn first_stencil_is_second_order() {
        // f = sin(x + 0.3) around node at 0, fixed theta, refine h
        let f = |x: f64| (x + 0.3).sin();
        let df = 0.3f64.cos();
        let d2f = -(0.3f64.sin());
        for t in [0.2, 0.5, 0.9] {
            let err = |h: f64| {
                let s1 = first_derivative_stencil(t, h).unwrap();
                let s2 = second_derivative_stencil(t, h).unwrap();
                let u = (f(-t * h), f(0.0), f(h));
                (
                    (s1.apply(u.0, u.1, u.2) - df).abs(),
                    (s2.apply(u.0, u.1, u.2) - d2f).abs(),
                )
            };
            let (e1a, e2a) = err(0.02);
            let (e1b, e2b) = err(0.01);
            assert!((e1a / e1b).log2() >= 1.9, "first order {}", (e1a / e1b).log2());
            assert!((e2a / e2b).log2() >= 0.9, "second order {}", (e2a / e2b).log2());
        }
    }

    #[test]
    fn wall_extrapolation_exact_on_quadratics() {
        for t in THETAS {
            let q = |x: f64| 0.3 + 1.7 * x - 0.4 * x * x;
            // wall at x = 0, nodes at t, t+1, t+2
            let got = wall_extrapolation(q(t), q(t + 1.0), Some(q(t + 2.0)), t, 1.0).unwrap();
            assert!((got - q(0.0)).abs() < 1e-10, "theta {t}: {got}");
        }
    }

    fn box_layout(n: usize) -> FieldLayout {
        let g = VolumeGrid::new([n; 3], [1.0; 3], [0.0; 3]).unwrap();
        let class = classify(&g, &vec![true; g.len()]).unwrap();
        FieldLayout::new(&g, &class).unwrap()
    }

    fn eval_field(layout: &FieldLayout, f: impl Fn([f64; 3]) -> [f64; 3]) -> Vec<f64> {
        let n = layout.len();
        let mut x = vec![0.0; 3 * n];
        for (u, &vox) in layout.voxels().iter().enumerate() {
            let v = f(layout.grid().position(vox));
            for c in 0..3 {
                x[c * n + u] = v[c];
            }
        }
        x
    }

    #[test]
    fn divergence_on_box() {
        let layout = box_layout(6);
        let ops = Operators::assemble(layout, None, WallTreatment::WallAware).unwrap();
        let a = &ops.divergence;
        let c = eval_field(&ops.layout, |_| [1.0, 1.0, 1.0]);
        assert!(a.mul_vec(&c).iter().all(|v| v.abs() < 1e-13));
        let lin = eval_field(&ops.layout, |p| p);
        assert!(a.mul_vec(&lin).iter().all(|v| (v - 3.0).abs() < 1e-12));
        let sad = eval_field(&ops.layout, |p| [p[0], -p[1], 0.0]);
        assert!(a.mul_vec(&sad).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn smoother_on_box() {
        let layout = box_layout(6);
        let ops = Operators::assemble(layout, None, WallTreatment::WallAware).unwrap();
        let d = &ops.smoother;
        let n = ops.layout.len();
        let q = eval_field(&ops.layout, |p| [p[0] * p[0] + p[1] * p[1] + p[2] * p[2], p[0], 1.0]);
        // one-sided second differences on the open planes are exact for quadratics too
        assert!(d.mul_vec(&q[..n]).iter().all(|v| (v - 6.0).abs() < 1e-11));
        assert!(d.mul_vec(&q[n..2 * n]).iter().all(|v| v.abs() < 1e-12));
        assert!(d.mul_vec(&q[2 * n..]).iter().all(|v| v.abs() < 1e-12));
    }

    /// Slab of fluid between two walls normal to x at `x = a` and `x = b`.
    fn slab(a: f64, b: f64) -> (FieldLayout, WallGeometry) {
        let g = VolumeGrid::new([10, 5, 5], [1.0; 3], [0.0; 3]).unwrap();
        let phi: Vec<f64> = (0..g.len())
            .map(|i| {
                let x = g.position(i)[0];
                (a - x).max(x - b)
            })
            .collect();
        let mask: Vec<bool> = phi.iter().map(|&p| p < 0.0).collect();
        let class = classify(&g, &mask).unwrap();
        let mut theta = vec![WallFractions::default(); g.len()];
        for i in 0..g.len() {
            if !mask[i] {
                continue;
            }
            for d in Direction::ALL {
                if let Some(nb) = g.neighbor(i, d) {
                    if !mask[nb] {
                        theta[i][d.slot()] = Some(phi[i] / (phi[i] - phi[nb]));
                    }
                }
            }
        }
        let layout = FieldLayout::new(&g, &class).unwrap();
        let geom = WallGeometry {
            phi,
            theta,
            surface: Default::default(),
            clamped: vec![],
        };
        (layout, geom)
    }

    #[test]
    fn wall_rows_exact_for_quadratics_vanishing_at_walls() {
        let (a, b) = (1.7, 7.4);
        let (layout, geom) = slab(a, b);
        let ops = Operators::assemble(layout, Some(&geom), WallTreatment::WallAware).unwrap();
        // u = (x - a)(b - x) vanishes on both walls: du/dx = a + b - 2x, d2u/dx2 = -2
        let x = eval_field(&ops.layout, |p| [(p[0] - a) * (b - p[0]), 0.0, 0.0]);
        let div = ops.divergence.mul_vec(&x);
        for (row, &vox) in ops.divergence_voxels.iter().enumerate() {
            let px = ops.layout.grid().position(vox)[0];
            assert!((div[row] - (a + b - 2.0 * px)).abs() < 1e-11);
        }
        let n = ops.layout.len();
        let lap = ops.smoother.mul_vec(&x[..n]);
        assert!(lap.iter().all(|v| (v + 2.0).abs() < 1e-10));
    }

    #[test]
    fn traditional_rows_ignore_walls() {
        let (layout, geom) = slab(1.7, 7.4);
        let ops = Operators::assemble(layout, Some(&geom), WallTreatment::Traditional).unwrap();
        // linear fields are reproduced by one-sided differences regardless of the wall
        let x = eval_field(&ops.layout, |p| [p[0], 0.0, 0.0]);
        assert!(ops.divergence.mul_vec(&x).iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn missing_theta_is_assembly_error() {
        let (layout, mut geom) = slab(1.7, 7.4);
        for t in geom.theta.iter_mut() {
            *t = WallFractions::default();
        }
        assert!(matches!(
            Operators::assemble(layout, Some(&geom), WallTreatment::WallAware),
            Err(Error::Assembly(_))
        ));
    }

    #[test]
    fn gram_of_smoother_is_psd() {
        use rand::{Rng, SeedableRng};
        let (layout, geom) = slab(1.3, 6.8);
        let ops = Operators::assemble(layout, Some(&geom), WallTreatment::WallAware).unwrap();
        let dtd = ops.smoother.gram().unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x: Vec<f64> = (0..dtd.cols()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = dtd.mul_vec(&x);
            assert!(crate::sparse::dotv(&x, &y) >= -1e-12);
            // symmetric
            let z: Vec<f64> = (0..dtd.cols()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let lhs = crate::sparse::dotv(&z, &y);
            let rhs = crate::sparse::dotv(&x, &dtd.mul_vec(&z));
            assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn scatter_inverts_gather() {
        let (layout, _) = slab(1.5, 7.5);
        let g = layout.grid().clone();
        let comps: [Vec<f64>; 3] = std::array::from_fn(|c| {
            (0..g.len())
                .map(|i| if layout.unknown(i).is_some() { (i * (c + 1)) as f64 } else { 0.0 })
                .collect()
        });
        assert_eq!(layout.scatter(&layout.gather(&comps)), comps);
    }
}
