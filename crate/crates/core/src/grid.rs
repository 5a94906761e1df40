//! Grid, field, and geometry containers shared by every processing stage.
//!
//! All voxel arrays use one linearization project-wide: `x` fastest, then
//! `y`, then `z`, i.e. `index = i + nx * (j + ny * k)`.

use crate::error::{Error, Result};

/// Uniform structured 3-D grid. Spacing may differ per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
}

impl VolumeGrid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d < 3) {
            return Err(Error::Parameter(format!(
                "grid dims must all be >= 3, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&h| !(h > 0.0 && h.is_finite())) {
            return Err(Error::Parameter(format!(
                "grid spacing must be positive and finite, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Parameter("grid origin must be finite".into()));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_spacing(&self) -> f64 {
        self.spacing.iter().copied().fold(0.0, f64::max)
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Physical position of a grid node.
    pub fn position(&self, idx: usize) -> [f64; 3] {
        let c = self.coords(idx);
        std::array::from_fn(|a| self.origin[a] + c[a] as f64 * self.spacing[a])
    }

    /// Upper corner of the bounding box spanned by the grid nodes.
    pub fn upper(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + (self.dims[a] - 1) as f64 * self.spacing[a])
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let hi = self.upper();
        (0..3).all(|a| {
            let tol = 1e-12 * self.spacing[a];
            p[a] >= self.origin[a] - tol && p[a] <= hi[a] + tol
        })
    }

    /// Neighbor across `dir`, or `None` at the volume edge.
    #[inline]
    pub fn neighbor(&self, idx: usize, dir: Direction) -> Option<usize> {
        let c = self.coords(idx);
        let a = dir.axis();
        if dir.is_positive() {
            (c[a] + 1 < self.dims[a]).then(|| idx + self.stride(a))
        } else {
            (c[a] > 0).then(|| idx - self.stride(a))
        }
    }

    #[inline]
    pub fn stride(&self, axis: usize) -> usize {
        match axis {
            0 => 1,
            1 => self.dims[0],
            _ => self.dims[0] * self.dims[1],
        }
    }

    /// Eight (node, weight) pairs of the trilinear interpolation stencil at `p`.
    pub fn trilinear_stencil(&self, p: [f64; 3]) -> Result<[(usize, f64); 8]> {
        if !self.contains(p) {
            return Err(Error::OutOfDomain {
                x: p[0],
                y: p[1],
                z: p[2],
            });
        }
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let t = (p[a] - self.origin[a]) / self.spacing[a];
            let cell = (t.floor().max(0.0) as usize).min(self.dims[a] - 2);
            base[a] = cell;
            frac[a] = (t - cell as f64).clamp(0.0, 1.0);
        }
        let mut out = [(0usize, 0.0); 8];
        for (corner, slot) in out.iter_mut().enumerate() {
            let o = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
            let mut wgt = 1.0;
            for a in 0..3 {
                wgt *= if o[a] == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            *slot = (
                self.index(base[0] + o[0], base[1] + o[1], base[2] + o[2]),
                wgt,
            );
        }
        Ok(out)
    }

    /// Trilinear interpolation of a scalar array living on this grid.
    pub fn interpolate(&self, values: &[f64], p: [f64; 3]) -> Result<f64> {
        Ok(self
            .trilinear_stencil(p)?
            .iter()
            .map(|&(i, w)| w * values[i])
            .sum())
    }
}

/// One of the six axis-aligned neighbor directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    MinusX,
    PlusX,
    MinusY,
    PlusY,
    MinusZ,
    PlusZ,
}

impl Direction {
    pub const ALL: [Direction; 6] = [
        Direction::MinusX,
        Direction::PlusX,
        Direction::MinusY,
        Direction::PlusY,
        Direction::MinusZ,
        Direction::PlusZ,
    ];

    pub fn new(axis: usize, positive: bool) -> Self {
        Self::ALL[2 * axis + positive as usize]
    }

    /// Slot in a six-entry per-direction array.
    #[inline]
    pub fn slot(self) -> usize {
        self as usize
    }

    #[inline]
    pub fn axis(self) -> usize {
        self as usize / 2
    }

    #[inline]
    pub fn is_positive(self) -> bool {
        self as usize % 2 == 1
    }

    pub fn opposite(self) -> Self {
        Self::new(self.axis(), !self.is_positive())
    }
}

/// Per-voxel classification relative to the vessel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VoxelClass {
    Exterior,
    Interior,
    /// Inside the vessel with at least one exterior face neighbor.
    NearWall,
    /// Inside the vessel on the volume edge (inlet/outlet plane).
    OpenBoundary,
}

impl VoxelClass {
    pub fn is_fluid(self) -> bool {
        self != VoxelClass::Exterior
    }
}

/// Classify voxels from a fluid mask. Mask voxels on the volume edge are
/// open boundaries; remaining mask voxels touching a non-mask face neighbor
/// are near-wall.
pub fn classify(grid: &VolumeGrid, mask: &[bool]) -> Result<Vec<VoxelClass>> {
    if mask.len() != grid.len() {
        return Err(Error::Parameter(format!(
            "mask has {} voxels, grid has {}",
            mask.len(),
            grid.len()
        )));
    }
    Ok((0..grid.len())
        .map(|idx| {
            if !mask[idx] {
                return VoxelClass::Exterior;
            }
            let mut near_wall = false;
            for dir in Direction::ALL {
                match grid.neighbor(idx, dir) {
                    None => return VoxelClass::OpenBoundary,
                    Some(nb) if !mask[nb] => near_wall = true,
                    Some(_) => {}
                }
            }
            if near_wall {
                VoxelClass::NearWall
            } else {
                VoxelClass::Interior
            }
        })
        .collect())
}

/// Number of voxels in each class, in the order
/// (exterior, interior, near-wall, open-boundary).
pub fn class_counts(classes: &[VoxelClass]) -> [usize; 4] {
    let mut counts = [0; 4];
    for c in classes {
        counts[*c as usize] += 1;
    }
    counts
}

/// Three velocity components per voxel with classification and observation weights.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    pub grid: VolumeGrid,
    /// `[u, v, w]`, each sized to the grid.
    pub velocity: [Vec<f64>; 3],
    pub class: Vec<VoxelClass>,
    /// Observation weight in `[0, 1]`; zero on exterior voxels.
    pub weight: Vec<f64>,
}

impl VelocityField {
    /// Builds a field with unit weight on every fluid voxel. Exterior values are zeroed.
    pub fn new(grid: VolumeGrid, mut velocity: [Vec<f64>; 3], class: Vec<VoxelClass>) -> Result<Self> {
        let n = grid.len();
        if velocity.iter().any(|c| c.len() != n) || class.len() != n {
            return Err(Error::Parameter(format!(
                "field arrays must all hold {n} voxels"
            )));
        }
        for comp in velocity.iter_mut() {
            for (val, c) in comp.iter_mut().zip(&class) {
                if !c.is_fluid() {
                    *val = 0.0;
                }
            }
        }
        let weight = class
            .iter()
            .map(|c| if c.is_fluid() { 1.0 } else { 0.0 })
            .collect();
        Ok(Self {
            grid,
            velocity,
            class,
            weight,
        })
    }

    pub fn zeros(grid: VolumeGrid, class: Vec<VoxelClass>) -> Result<Self> {
        let n = grid.len();
        Self::new(grid, [vec![0.0; n], vec![0.0; n], vec![0.0; n]], class)
    }

    pub fn u(&self) -> &[f64] {
        &self.velocity[0]
    }

    pub fn v(&self) -> &[f64] {
        &self.velocity[1]
    }

    pub fn w(&self) -> &[f64] {
        &self.velocity[2]
    }

    pub fn at(&self, idx: usize) -> [f64; 3] {
        [
            self.velocity[0][idx],
            self.velocity[1][idx],
            self.velocity[2][idx],
        ]
    }

    pub fn set_weights(&mut self, weight: Vec<f64>) -> Result<()> {
        if weight.len() != self.grid.len() {
            return Err(Error::Parameter("weight array size mismatch".into()));
        }
        if weight.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::Parameter("weights must lie in [0, 1]".into()));
        }
        self.weight = weight
            .into_iter()
            .zip(&self.class)
            .map(|(w, c)| if c.is_fluid() { w } else { 0.0 })
            .collect();
        Ok(())
    }

    /// Largest speed component magnitude over fluid voxels.
    pub fn max_abs(&self) -> f64 {
        self.velocity
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Trilinear interpolation of the three velocity components at `p`.
/// Exterior voxels contribute zero.
pub fn sample_trilinear(field: &VelocityField, p: [f64; 3]) -> Result<[f64; 3]> {
    let stencil = field.grid.trilinear_stencil(p)?;
    let mut out = [0.0; 3];
    for (idx, wgt) in stencil {
        if field.class[idx].is_fluid() {
            for (o, comp) in out.iter_mut().zip(&field.velocity) {
                *o += wgt * comp[idx];
            }
        }
    }
    Ok(out)
}

/// A single scalar per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub grid: VolumeGrid,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: VolumeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Parameter(format!(
                "scalar field holds {} values, grid has {}",
                values.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, values })
    }
}

/// Triangulated surface with per-vertex outward unit normals.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
    pub normals: Vec<[f64; 3]>,
}

impl TriMesh {
    pub fn area(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let a = self.vertices[t[0]];
                let b = self.vertices[t[1]];
                let c = self.vertices[t[2]];
                0.5 * norm(cross(sub(b, a), sub(c, a)))
            })
            .sum()
    }
}

/// Sub-grid wall fraction per direction; `None` where the neighbor is not exterior.
pub type WallFractions = [Option<f64>; 6];

/// Signed distance, sub-grid wall fractions, and wall surface.
#[derive(Debug, Clone, PartialEq)]
pub struct WallGeometry {
    /// Signed distance per voxel [m], negative inside the vessel.
    pub phi: Vec<f64>,
    /// Per-voxel, per-direction wall fraction; populated only on fluid
    /// voxels whose neighbor across that direction is exterior.
    pub theta: Vec<WallFractions>,
    pub surface: TriMesh,
    /// Near-wall (voxel, direction) pairs whose fraction was raised to the floor.
    pub clamped: Vec<(usize, Direction)>,
}

impl WallGeometry {
    /// Fluid mask implied by the level set.
    pub fn mask(&self) -> Vec<bool> {
        self.phi.iter().map(|&p| p < 0.0).collect()
    }
}

pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_grid(n: usize) -> VolumeGrid {
        VolumeGrid::new([n; 3], [1.0; 3], [0.0; 3]).unwrap()
    }

    fn all_fluid(grid: &VolumeGrid) -> Vec<VoxelClass> {
        classify(grid, &vec![true; grid.len()]).unwrap()
    }

    fn field_from(grid: &VolumeGrid, f: impl Fn([f64; 3]) -> [f64; 3]) -> VelocityField {
        let mut comps = [vec![], vec![], vec![]];
        for idx in 0..grid.len() {
            let v = f(grid.position(idx));
            for a in 0..3 {
                comps[a].push(v[a]);
            }
        }
        VelocityField::new(grid.clone(), comps, all_fluid(grid)).unwrap()
    }

    #[test]
    fn rejects_degenerate_grids() {
        assert!(VolumeGrid::new([2, 4, 4], [1.0; 3], [0.0; 3]).is_err());
        assert!(VolumeGrid::new([4, 4, 4], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
    }

    #[test]
    fn index_round_trip() {
        let g = VolumeGrid::new([4, 5, 6], [1.0; 3], [0.0; 3]).unwrap();
        for idx in 0..g.len() {
            let [i, j, k] = g.coords(idx);
            assert_eq!(g.index(i, j, k), idx);
        }
        assert_eq!(g.index(1, 0, 0), 1);
        assert_eq!(g.index(0, 1, 0), 4);
        assert_eq!(g.index(0, 0, 1), 20);
    }

    #[test]
    fn constant_field_reproduced() {
        let g = unit_grid(4);
        let f = field_from(&g, |_| [1.0, 0.0, 0.0]);
        let s = sample_trilinear(&f, [1.5, 1.5, 1.5]).unwrap();
        assert_eq!(s, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn linear_field_exact_at_nodes() {
        let g = unit_grid(4);
        let f = field_from(&g, |p| [p[0], 0.0, 0.0]);
        for idx in 0..g.len() {
            let s = sample_trilinear(&f, g.position(idx)).unwrap();
            assert!((s[0] - g.position(idx)[0]).abs() < 1e-14);
        }
    }

    #[test]
    fn bilinear_field_cell_center_is_corner_average() {
        let g = unit_grid(4);
        let f = field_from(&g, |p| [p[0] * p[1], 0.0, 0.0]);
        // corners of the cell [1,2]^3: x*y in {1, 2, 2, 4}, each twice
        let s = sample_trilinear(&f, [1.5, 1.5, 1.5]).unwrap();
        assert!((s[0] - 2.25).abs() < 1e-14);
    }

    #[test]
    fn outside_point_is_an_error() {
        let g = unit_grid(4);
        let f = field_from(&g, |_| [1.0; 3]);
        assert!(matches!(
            sample_trilinear(&f, [3.5, 1.0, 1.0]),
            Err(Error::OutOfDomain { .. })
        ));
    }

    #[test]
    fn exterior_voxels_sample_as_zero() {
        let g = unit_grid(4);
        let mask: Vec<bool> = (0..g.len()).map(|i| g.coords(i)[0] < 2).collect();
        let class = classify(&g, &mask).unwrap();
        let f = VelocityField::new(g.clone(), [vec![1.0; 64], vec![0.0; 64], vec![0.0; 64]], class).unwrap();
        let s = sample_trilinear(&f, [1.5, 1.0, 1.0]).unwrap();
        assert!((s[0] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn classification_partitions_volume() {
        let g = VolumeGrid::new([8, 8, 6], [1.0; 3], [0.0; 3]).unwrap();
        let mask: Vec<bool> = (0..g.len())
            .map(|i| {
                let p = g.position(i);
                (p[0] - 3.5).powi(2) + (p[1] - 3.5).powi(2) < 7.0
            })
            .collect();
        let class = classify(&g, &mask).unwrap();
        let counts = class_counts(&class);
        assert_eq!(counts.iter().sum::<usize>(), g.len());
        for idx in 0..g.len() {
            if class[idx] == VoxelClass::NearWall {
                assert!(Direction::ALL.iter().any(|&d| {
                    g.neighbor(idx, d).is_some_and(|nb| class[nb] == VoxelClass::Exterior)
                }));
            }
        }
        assert!(counts[1] > 0 && counts[2] > 0 && counts[3] > 0);
    }

    #[test]
    fn exterior_weight_is_zero() {
        let g = unit_grid(4);
        let mask: Vec<bool> = (0..g.len()).map(|i| g.coords(i)[1] < 2).collect();
        let class = classify(&g, &mask).unwrap();
        let f = VelocityField::zeros(g, class).unwrap();
        for (w, c) in f.weight.iter().zip(&f.class) {
            assert_eq!(*w == 0.0, *c == VoxelClass::Exterior);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn trilinear_reproduces_multilinear_fields(
                c in prop::array::uniform8(-2.0f64..2.0),
                p in prop::array::uniform3(0.0f64..3.0),
                h in prop::array::uniform3(0.5f64..2.0),
            ) {
                let g = VolumeGrid::new([4; 3], h, [0.3, -0.2, 1.0]).unwrap();
                let f = |x: [f64; 3]| c[0] + c[1]*x[0] + c[2]*x[1] + c[3]*x[2]
                    + c[4]*x[0]*x[1] + c[5]*x[1]*x[2] + c[6]*x[0]*x[2] + c[7]*x[0]*x[1]*x[2];
                let values: Vec<f64> = (0..g.len()).map(|i| f(g.position(i))).collect();
                let q: [f64; 3] = std::array::from_fn(|a| g.origin()[a] + p[a] * h[a]);
                let got = g.interpolate(&values, q).unwrap();
                prop_assert!((got - f(q)).abs() <= 1e-11 * (1.0 + f(q).abs()));
            }
        }
    }
}
