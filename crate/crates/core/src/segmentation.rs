//! Vessel segmentation: neighborhood denoising of per-slice images, median
//! filtering, Otsu thresholding, signed distance, sub-grid wall fractions, and
//! isosurface extraction.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::grid::{
    cross, dot, norm, scale, sub, Direction, TriMesh, VolumeGrid, WallFractions, WallGeometry,
};

/// Smallest admissible wall fraction.
pub const DEFAULT_THETA_MIN: f64 = 0.05;

/// Number of Otsu histogram bins.
pub const OTSU_BINS: usize = 256;

/// Stack of 2-D slices, `x` fastest then `y` then slice.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageStack {
    pub nx: usize,
    pub ny: usize,
    pub nslices: usize,
    pub data: Vec<f64>,
}

impl ImageStack {
    pub fn new(nx: usize, ny: usize, nslices: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != nx * ny * nslices {
            return Err(Error::Parameter(format!(
                "image stack {nx}x{ny}x{nslices} needs {} pixels, got {}",
                nx * ny * nslices,
                data.len()
            )));
        }
        Ok(Self {
            nx,
            ny,
            nslices,
            data,
        })
    }

    pub fn from_fn(nx: usize, ny: usize, nslices: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(nx * ny * nslices);
        for s in 0..nslices {
            for j in 0..ny {
                for i in 0..nx {
                    data.push(f(i, j, s));
                }
            }
        }
        Self {
            nx,
            ny,
            nslices,
            data,
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, s: usize) -> f64 {
        self.data[i + self.nx * (j + self.ny * s)]
    }

    fn same_shape(&self, other: &ImageStack) -> bool {
        self.nx == other.nx && self.ny == other.ny && self.nslices == other.nslices
    }

    /// Applies `f` to the clipped `window x window` neighborhood of every pixel.
    fn map_windows(&self, window: usize, mut f: impl FnMut(&[f64]) -> f64) -> ImageStack {
        let r = window / 2;
        let mut buf = Vec::with_capacity(window * window);
        let mut out = Vec::with_capacity(self.data.len());
        for s in 0..self.nslices {
            for j in 0..self.ny {
                for i in 0..self.nx {
                    buf.clear();
                    for y in j.saturating_sub(r)..(j + r + 1).min(self.ny) {
                        for x in i.saturating_sub(r)..(i + r + 1).min(self.nx) {
                            buf.push(self.get(x, y, s));
                        }
                    }
                    out.push(f(&buf));
                }
            }
        }
        ImageStack {
            nx: self.nx,
            ny: self.ny,
            nslices: self.nslices,
            data: out,
        }
    }
}

fn check_window(window: usize) -> Result<()> {
    if window < 3 || window % 2 == 0 {
        return Err(Error::Parameter(format!(
            "window must be odd and >= 3, got {window}"
        )));
    }
    Ok(())
}

/// Local standard deviation over a clipped square window, per slice.
pub fn neighborhood_variance(img: &ImageStack, window: usize) -> Result<ImageStack> {
    check_window(window)?;
    Ok(img.map_windows(window, |w| {
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
    }))
}

/// Squared imbalance between positive and negative pixel counts in a clipped
/// square window. Zero pixels count as neither.
pub fn neighborhood_sign(img: &ImageStack, window: usize) -> Result<ImageStack> {
    check_window(window)?;
    Ok(img.map_windows(window, |w| {
        let pos = w.iter().filter(|&&v| v > 0.0).count() as f64;
        let neg = w.iter().filter(|&&v| v < 0.0).count() as f64;
        (pos - neg).powi(2)
    }))
}

/// How the variance and sign maps are merged before median filtering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Combine {
    #[default]
    Product,
    Min,
    Mean,
}

impl std::str::FromStr for Combine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "product" => Ok(Self::Product),
            "min" => Ok(Self::Min),
            "mean" => Ok(Self::Mean),
            other => Err(Error::Parameter(format!("unknown combine strategy `{other}`"))),
        }
    }
}

fn normalized(values: &[f64]) -> Vec<f64> {
    let (lo, hi) = min_max(values);
    if hi > lo {
        values.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; values.len()]
    }
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Per-slice median over a clipped square window. Even-sized clipped windows
/// take the upper median.
pub fn median_filter(img: &ImageStack, window: usize) -> Result<ImageStack> {
    check_window(window)?;
    let mut scratch = Vec::new();
    Ok(img.map_windows(window, |w| {
        scratch.clear();
        scratch.extend_from_slice(w);
        let mid = scratch.len() / 2;
        *scratch
            .select_nth_unstable_by(mid, |a, b| a.total_cmp(b))
            .1
    }))
}

/// Merges min-max normalized variance and sign maps, then median filters.
pub fn combine_and_median(
    var_map: &ImageStack,
    sign_map: &ImageStack,
    median_window: usize,
    strategy: Combine,
) -> Result<ImageStack> {
    if !var_map.same_shape(sign_map) {
        return Err(Error::Parameter("variance and sign maps differ in shape".into()));
    }
    let a = normalized(&var_map.data);
    let b = normalized(&sign_map.data);
    let data = a
        .iter()
        .zip(&b)
        .map(|(&x, &y)| match strategy {
            Combine::Product => x * y,
            Combine::Min => x.min(y),
            Combine::Mean => 0.5 * (x + y),
        })
        .collect();
    let combined = ImageStack {
        data,
        ..var_map.clone()
    };
    median_filter(&combined, median_window)
}

/// 256-bin histogram over `[min, max]` with the bin index of every pixel.
fn histogram(values: &[f64]) -> Result<(Vec<usize>, Vec<usize>)> {
    let (lo, hi) = min_max(values);
    if !(hi > lo) {
        return Err(Error::DegenerateHistogram);
    }
    let width = (hi - lo) / OTSU_BINS as f64;
    let bins: Vec<usize> = values
        .iter()
        .map(|&v| (((v - lo) / width) as usize).min(OTSU_BINS - 1))
        .collect();
    let mut counts = vec![0usize; OTSU_BINS];
    for &b in &bins {
        counts[b] += 1;
    }
    Ok((counts, bins))
}

/// Otsu threshold bin: pixels in bins `> t` are foreground. Ties go to the smallest `t`.
pub fn otsu_bin(counts: &[usize]) -> usize {
    let total: usize = counts.iter().sum();
    let total_f = total as f64;
    let sum_all: f64 = counts.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let mut best = (0usize, f64::NEG_INFINITY);
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    for t in 0..counts.len() - 1 {
        w0 += counts[t] as f64;
        sum0 += t as f64 * counts[t] as f64;
        let w1 = total_f - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (mu0 - mu1).powi(2) / (total_f * total_f);
        if between > best.1 {
            best = (t, between);
        }
    }
    best.0
}

/// Otsu threshold over a 256-bin histogram; returns `(threshold value, mask)`.
/// The threshold is the upper edge of the last background bin.
pub fn otsu_binarize(img: &ImageStack) -> Result<(f64, Vec<bool>)> {
    let (counts, bins) = histogram(&img.data)?;
    let t = otsu_bin(&counts);
    let (lo, hi) = min_max(&img.data);
    let threshold = lo + (t + 1) as f64 * (hi - lo) / OTSU_BINS as f64;
    Ok((threshold, bins.iter().map(|&b| b > t).collect()))
}

/// Denoising parameters for [`segment`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentParams {
    pub window: usize,
    pub median_window: usize,
    pub combine: Combine,
}

impl Default for SegmentParams {
    fn default() -> Self {
        Self {
            window: 3,
            median_window: 3,
            combine: Combine::Product,
        }
    }
}

/// Full image chain: neighborhood maps per image, combination, median, Otsu.
/// Multiple images (e.g. velocity components) are averaged after combination.
pub fn segment(images: &[ImageStack], params: SegmentParams) -> Result<Vec<bool>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Parameter("no images to segment".into()))?;
    let mut acc = vec![0.0; first.data.len()];
    for img in images {
        if !img.same_shape(first) {
            return Err(Error::Parameter("image stacks differ in shape".into()));
        }
        let var = neighborhood_variance(img, params.window)?;
        let sign = neighborhood_sign(img, params.window)?;
        let comb = combine_and_median(&var, &sign, params.median_window, params.combine)?;
        for (a, v) in acc.iter_mut().zip(comb.data) {
            *a += v / images.len() as f64;
        }
    }
    let combined = ImageStack {
        data: acc,
        ..first.clone()
    };
    Ok(otsu_binarize(&combined)?.1)
}

/// 1-D squared distance transform of sampled function `f` with node spacing `h`.
fn distance_transform_1d(f: &[f64], h: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let xq = q as f64 * h;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.clear();
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let xp = p as f64 * h;
                    let s = ((f[q] + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp));
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    z.push(f64::INFINITY);
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let x = q as f64 * h;
        while z[k + 1] < x {
            k += 1;
        }
        let xp = v[k] as f64 * h;
        *o = (x - xp).powi(2) + f[v[k]];
    }
}

/// Euclidean distance from every voxel center to the nearest voxel where
/// `feature` holds, honoring per-axis spacing.
pub fn distance_to(grid: &VolumeGrid, feature: &[bool]) -> Vec<f64> {
    let dims = grid.dims();
    let h = grid.spacing();
    let mut d: Vec<f64> = feature
        .iter()
        .map(|&f| if f { 0.0 } else { f64::INFINITY })
        .collect();
    for axis in 0..3 {
        let n = dims[axis];
        let stride = grid.stride(axis);
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        for start in 0..grid.len() {
            if grid.coords(start)[axis] != 0 {
                continue;
            }
            for (q, l) in line.iter_mut().enumerate() {
                *l = d[start + q * stride];
            }
            distance_transform_1d(&line, h[axis], &mut out);
            for (q, o) in out.iter().enumerate() {
                d[start + q * stride] = *o;
            }
        }
    }
    d.iter_mut().for_each(|v| *v = v.sqrt());
    d
}

/// Signed distance to the mask boundary (negative inside). The boundary sits
/// half a spacing from the outermost mask voxel centers.
pub fn signed_distance_from_mask(grid: &VolumeGrid, mask: &[bool]) -> Result<Vec<f64>> {
    if mask.len() != grid.len() {
        return Err(Error::Parameter("mask size does not match grid".into()));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyMask);
    }
    let outside: Vec<bool> = mask.iter().map(|&m| !m).collect();
    let to_inside = distance_to(grid, mask);
    let to_outside = distance_to(grid, &outside);
    let half = 0.5 * grid.min_spacing();
    let cap = norm(sub(grid.upper(), grid.origin())) + grid.max_spacing();
    Ok(mask
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            if m {
                -(to_outside[i].min(cap) - half)
            } else {
                to_inside[i] - half
            }
        })
        .collect())
}

/// Wall fraction per face of every fluid voxel whose neighbor is exterior, from
/// the linear zero crossing of `phi` along the grid line, clamped to
/// `[theta_min, 1]`. Returns the fractions and the clamped (voxel, direction) pairs.
pub fn wall_fractions(
    grid: &VolumeGrid,
    phi: &[f64],
    theta_min: f64,
) -> Result<(Vec<WallFractions>, Vec<(usize, Direction)>)> {
    if !(theta_min > 0.0 && theta_min < 1.0) {
        return Err(Error::Parameter(format!(
            "theta_min must lie in (0, 1), got {theta_min}"
        )));
    }
    let mut theta = vec![WallFractions::default(); grid.len()];
    let mut clamped = Vec::new();
    for idx in 0..grid.len() {
        if phi[idx] >= 0.0 {
            continue;
        }
        for dir in Direction::ALL {
            let Some(nb) = grid.neighbor(idx, dir) else {
                continue;
            };
            if phi[nb] < 0.0 {
                continue;
            }
            let raw = phi[idx] / (phi[idx] - phi[nb]);
            if raw < theta_min {
                clamped.push((idx, dir));
            }
            theta[idx][dir.slot()] = Some(raw.clamp(theta_min, 1.0));
        }
    }
    Ok((theta, clamped))
}

/// Wall geometry from a level set: fractions plus the zero isosurface (empty
/// when the level set has no sign change).
pub fn geometry_from_level_set(grid: &VolumeGrid, phi: Vec<f64>, theta_min: f64) -> Result<WallGeometry> {
    if phi.len() != grid.len() {
        return Err(Error::Parameter("level set size does not match grid".into()));
    }
    let (theta, clamped) = wall_fractions(grid, &phi, theta_min)?;
    let surface = match extract_surface(grid, &phi) {
        Ok(mesh) => mesh,
        Err(Error::NoSignChange) => TriMesh::default(),
        Err(e) => return Err(e),
    };
    Ok(WallGeometry {
        phi,
        theta,
        surface,
        clamped,
    })
}

/// Signed distance, wall fractions, and surface from a binary mask.
pub fn levelset_from_mask(grid: &VolumeGrid, mask: &[bool], theta_min: f64) -> Result<WallGeometry> {
    let phi = signed_distance_from_mask(grid, mask)?;
    geometry_from_level_set(grid, phi, theta_min)
}

/// Central-difference gradient of `phi` at grid nodes (one-sided at edges).
fn gradient(grid: &VolumeGrid, phi: &[f64]) -> [Vec<f64>; 3] {
    let h = grid.spacing();
    std::array::from_fn(|axis| {
        (0..grid.len())
            .map(|idx| {
                let lo = grid.neighbor(idx, Direction::new(axis, false));
                let hi = grid.neighbor(idx, Direction::new(axis, true));
                match (lo, hi) {
                    (Some(l), Some(r)) => (phi[r] - phi[l]) / (2.0 * h[axis]),
                    (None, Some(r)) => (phi[r] - phi[idx]) / h[axis],
                    (Some(l), None) => (phi[idx] - phi[l]) / h[axis],
                    (None, None) => 0.0,
                }
            })
            .collect()
    })
}

/// Six tetrahedra sharing the cube diagonal from corner 0 to corner 7
/// (corner bit 0 = +x, bit 1 = +y, bit 2 = +z). Adjacent cubes split their
/// shared faces along the same diagonal, so the surface is consistent.
const TETS: [[usize; 4]; 6] = [
    [0, 1, 3, 7],
    [0, 1, 5, 7],
    [0, 2, 3, 7],
    [0, 2, 6, 7],
    [0, 4, 5, 7],
    [0, 4, 6, 7],
];

/// Zero isosurface of `phi` by marching tetrahedra with linear edge
/// interpolation. Vertex normals point along `grad phi` (outward).
pub fn extract_surface(grid: &VolumeGrid, phi: &[f64]) -> Result<TriMesh> {
    let has_in = phi.iter().any(|&p| p < 0.0);
    let has_out = phi.iter().any(|&p| p >= 0.0);
    if !(has_in && has_out) {
        return Err(Error::NoSignChange);
    }
    let [nx, ny, nz] = grid.dims();
    let mut mesh = TriMesh::default();
    let mut edge_vertex: HashMap<(usize, usize), usize> = HashMap::new();

    let mut vertex_on = |a: usize, b: usize, mesh: &mut TriMesh| -> usize {
        let key = (a.min(b), a.max(b));
        *edge_vertex.entry(key).or_insert_with(|| {
            let (pa, pb) = (grid.position(key.0), grid.position(key.1));
            let (fa, fb) = (phi[key.0], phi[key.1]);
            let t = (fa / (fa - fb)).clamp(0.0, 1.0);
            mesh.vertices.push(std::array::from_fn(|i| pa[i] + t * (pb[i] - pa[i])));
            mesh.vertices.len() - 1
        })
    };

    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let corners: [usize; 8] =
                    std::array::from_fn(|c| grid.index(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1)));
                let inside = corners.iter().filter(|&&c| phi[c] < 0.0).count();
                if inside == 0 || inside == 8 {
                    continue;
                }
                for tet in TETS {
                    let nodes = tet.map(|c| corners[c]);
                    let (ins, outs): (Vec<usize>, Vec<usize>) = nodes.iter().partition(|&&n| phi[n] < 0.0);
                    let polygon: Vec<usize> = match ins.len() {
                        1 => outs.iter().map(|&o| vertex_on(ins[0], o, &mut mesh)).collect(),
                        3 => ins.iter().map(|&i| vertex_on(i, outs[0], &mut mesh)).collect(),
                        2 => vec![
                            vertex_on(ins[0], outs[0], &mut mesh),
                            vertex_on(ins[0], outs[1], &mut mesh),
                            vertex_on(ins[1], outs[1], &mut mesh),
                            vertex_on(ins[1], outs[0], &mut mesh),
                        ],
                        _ => continue,
                    };
                    let centroid = |set: &[usize]| -> [f64; 3] {
                        let mut c = [0.0; 3];
                        for &n in set {
                            let p = grid.position(n);
                            (0..3).for_each(|a| c[a] += p[a] / set.len() as f64);
                        }
                        c
                    };
                    let outward = sub(centroid(&outs), centroid(&ins));
                    let tris: Vec<[usize; 3]> = if polygon.len() == 3 {
                        vec![[polygon[0], polygon[1], polygon[2]]]
                    } else {
                        vec![[polygon[0], polygon[1], polygon[2]], [polygon[0], polygon[2], polygon[3]]]
                    };
                    for mut t in tris {
                        let [a, b, c] = t.map(|v| mesh.vertices[v]);
                        let n = cross(sub(b, a), sub(c, a));
                        if norm(n) <= 1e-14 * grid.min_spacing().powi(2) {
                            continue;
                        }
                        if dot(n, outward) < 0.0 {
                            t.swap(1, 2);
                        }
                        mesh.triangles.push(t);
                    }
                }
            }
        }
    }

    let grad = gradient(grid, phi);
    let mut face_normals = vec![[0.0; 3]; mesh.vertices.len()];
    for t in &mesh.triangles {
        let [a, b, c] = t.map(|v| mesh.vertices[v]);
        let n = cross(sub(b, a), sub(c, a));
        for &v in t {
            face_normals[v] = std::array::from_fn(|i| face_normals[v][i] + n[i]);
        }
    }
    mesh.normals = mesh
        .vertices
        .iter()
        .zip(&face_normals)
        .map(|(&p, &fallback)| {
            let g: [f64; 3] = std::array::from_fn(|a| grid.interpolate(&grad[a], p).unwrap_or(0.0));
            let n = if norm(g) > 1e-12 { g } else { fallback };
            let len = norm(n);
            if len > 0.0 {
                scale(n, 1.0 / len)
            } else {
                [0.0, 0.0, 1.0]
            }
        })
        .collect();
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn img3(values: [f64; 9]) -> ImageStack {
        ImageStack::new(3, 3, 1, values.to_vec()).unwrap()
    }

    #[test]
    fn variance_examples() {
        let out = neighborhood_variance(&img3([4.0; 9]), 3).unwrap();
        assert_eq!(out.get(1, 1, 0), 0.0);
        let mut v = [0.0; 9];
        v[4] = 9.0;
        let out = neighborhood_variance(&img3(v), 3).unwrap();
        assert!((out.get(1, 1, 0) - 8f64.sqrt()).abs() < 1e-12);
        let alt = [2.5, -2.5, 2.5, -2.5, 0.0, 2.5, -2.5, 2.5, -2.5];
        // eight of nine are +-2.5 with zero mean: std = 2.5 * sqrt(8/9); use a full window
        let out = neighborhood_variance(&img3(alt), 3).unwrap();
        assert!((out.get(1, 1, 0) - 2.5 * (8.0f64 / 9.0).sqrt()).abs() < 1e-12);
        let alt4 = ImageStack::new(2, 2, 1, vec![2.5, -2.5, -2.5, 2.5]).unwrap();
        let out = neighborhood_variance(&alt4, 3).unwrap();
        assert!(out.data.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn sign_examples() {
        assert_eq!(neighborhood_sign(&img3([1.0; 9]), 3).unwrap().get(1, 1, 0), 81.0);
        let v = [1.0, 1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0];
        assert_eq!(neighborhood_sign(&img3(v), 3).unwrap().get(1, 1, 0), 1.0);
        assert_eq!(neighborhood_sign(&img3([0.0; 9]), 3).unwrap().get(1, 1, 0), 0.0);
    }

    #[test]
    fn even_window_rejected() {
        let img = img3([0.0; 9]);
        assert!(neighborhood_variance(&img, 4).is_err());
        assert!(neighborhood_sign(&img, 2).is_err());
        assert!(median_filter(&img, 1).is_err());
    }

    #[test]
    fn median_removes_impulse_and_keeps_constants() {
        let mut img = ImageStack::from_fn(7, 7, 1, |_, _, _| 3.0);
        img.data[3 + 7 * 3] = 100.0;
        let out = median_filter(&img, 3).unwrap();
        assert!(out.data.iter().all(|&v| v == 3.0));
    }

    #[test]
    fn median_of_checkerboard_is_window_majority() {
        let img = ImageStack::from_fn(6, 6, 1, |i, j, _| ((i + j) % 2) as f64);
        let out = median_filter(&img, 3).unwrap();
        for j in 1..5 {
            for i in 1..5 {
                // a full 3x3 window holds five pixels of the center's color
                let expected = ((i + j) % 2) as f64;
                assert_eq!(out.get(i, j, 0), expected, "pixel ({i},{j})");
            }
        }
    }

    #[test]
    fn combine_checks_shapes() {
        let a = img3([0.0; 9]);
        let b = ImageStack::new(9, 1, 1, vec![0.0; 9]).unwrap();
        assert!(combine_and_median(&a, &b, 3, Combine::Product).is_err());
    }

    #[test]
    fn otsu_two_level_images() {
        let img = ImageStack::from_fn(10, 10, 1, |i, _, _| if i < 5 { 10.0 } else { 200.0 });
        let (_, mask) = otsu_binarize(&img).unwrap();
        for (v, m) in img.data.iter().zip(&mask) {
            assert_eq!(*m, *v == 200.0);
        }
        let img = ImageStack::from_fn(10, 10, 1, |i, j, _| if i == 0 && j < 10 { 255.0 } else { 0.0 });
        let (_, mask) = otsu_binarize(&img).unwrap();
        for (v, m) in img.data.iter().zip(&mask) {
            assert_eq!(*m, *v == 255.0);
        }
    }

    #[test]
    fn otsu_constant_image_is_error() {
        assert!(matches!(
            otsu_binarize(&img3([7.0; 9])),
            Err(Error::DegenerateHistogram)
        ));
    }

    /// Exhaustive between-class variance maximization, computed per threshold from scratch.
    fn otsu_oracle(counts: &[usize]) -> usize {
        let total: f64 = counts.iter().map(|&c| c as f64).sum();
        let mut best = (0, f64::NEG_INFINITY);
        for t in 0..counts.len() - 1 {
            let (mut w0, mut w1, mut s0, mut s1) = (0.0, 0.0, 0.0, 0.0);
            for (i, &c) in counts.iter().enumerate() {
                if i <= t {
                    w0 += c as f64;
                    s0 += (i * c) as f64;
                } else {
                    w1 += c as f64;
                    s1 += (i * c) as f64;
                }
            }
            if w0 == 0.0 || w1 == 0.0 {
                continue;
            }
            let v = (w0 / total) * (w1 / total) * (s0 / w0 - s1 / w1).powi(2);
            if v > best.1 + 1e-12 * v.abs() {
                best = (t, v);
            }
        }
        best.0
    }

    #[test]
    fn otsu_matches_exhaustive_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let counts: Vec<usize> = (0..OTSU_BINS)
                .map(|i| {
                    let bump = |c: f64, w: f64| (-(i as f64 - c).powi(2) / w).exp();
                    (rng.random_range(0..5) as f64 + 300.0 * bump(60.0, 200.0) + 200.0 * bump(180.0, 400.0)) as usize
                })
                .collect();
            assert_eq!(otsu_bin(&counts), otsu_oracle(&counts));
        }
    }

    fn sphere_grid() -> (VolumeGrid, [f64; 3], f64) {
        let g = VolumeGrid::new([32; 3], [1.0; 3], [0.0; 3]).unwrap();
        (g, [15.3, 15.6, 15.45], 10.0)
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let g = VolumeGrid::new([9, 7, 6], [1.0, 1.3, 0.7], [0.0; 3]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let feature: Vec<bool> = (0..g.len()).map(|_| rng.random_bool(0.08)).collect();
        let d = distance_to(&g, &feature);
        for i in 0..g.len() {
            let brute = (0..g.len())
                .filter(|&j| feature[j])
                .map(|j| norm(sub(g.position(i), g.position(j))))
                .fold(f64::INFINITY, f64::min);
            assert!((d[i] - brute).abs() < 1e-9, "voxel {i}: {} vs {brute}", d[i]);
        }
    }

    #[test]
    fn half_space_mask_gives_half_fractions() {
        let g = VolumeGrid::new([10, 6, 6], [1.0; 3], [0.0; 3]).unwrap();
        let mask: Vec<bool> = (0..g.len()).map(|i| g.coords(i)[0] < 5).collect();
        let geom = levelset_from_mask(&g, &mask, DEFAULT_THETA_MIN).unwrap();
        let mut seen = 0;
        for t in &geom.theta {
            for v in t.iter().flatten() {
                assert!((v - 0.5).abs() < 1e-12);
                seen += 1;
            }
        }
        assert_eq!(seen, 36);
    }

    #[test]
    fn boundary_on_voxel_plane_gives_unit_fraction() {
        let g = VolumeGrid::new([10, 5, 5], [1.0; 3], [0.0; 3]).unwrap();
        let phi: Vec<f64> = (0..g.len()).map(|i| g.position(i)[0] - 5.0).collect();
        let (theta, clamped) = wall_fractions(&g, &phi, DEFAULT_THETA_MIN).unwrap();
        assert!(clamped.is_empty());
        for i in 0..g.len() {
            if g.coords(i)[0] == 4 {
                assert_eq!(theta[i][Direction::PlusX.slot()], Some(1.0));
            }
        }
    }

    #[test]
    fn fractions_clamped_to_floor() {
        let g = VolumeGrid::new([10, 5, 5], [1.0; 3], [0.0; 3]).unwrap();
        let phi: Vec<f64> = (0..g.len()).map(|i| g.position(i)[0] - 4.01).collect();
        let (theta, clamped) = wall_fractions(&g, &phi, DEFAULT_THETA_MIN).unwrap();
        assert_eq!(clamped.len(), 25);
        let i = g.index(4, 2, 2);
        assert_eq!(theta[i][Direction::PlusX.slot()], Some(DEFAULT_THETA_MIN));
    }

    #[test]
    fn empty_mask_is_error() {
        let g = VolumeGrid::new([4; 3], [1.0; 3], [0.0; 3]).unwrap();
        assert!(matches!(
            levelset_from_mask(&g, &vec![false; 64], DEFAULT_THETA_MIN),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn sphere_mask_fractions_in_range() {
        let (g, c, r) = sphere_grid();
        let mask: Vec<bool> = (0..g.len()).map(|i| norm(sub(g.position(i), c)) < r).collect();
        let geom = levelset_from_mask(&g, &mask, DEFAULT_THETA_MIN).unwrap();
        let mut count = 0;
        for t in geom.theta.iter().flat_map(|t| t.iter().flatten()) {
            assert!((DEFAULT_THETA_MIN..=1.0).contains(t));
            count += 1;
        }
        assert!(count > 0);
    }

    #[test]
    fn analytic_sphere_surface() {
        let (g, c, r) = sphere_grid();
        let phi: Vec<f64> = (0..g.len()).map(|i| norm(sub(g.position(i), c)) - r).collect();
        let mesh = extract_surface(&g, &phi).unwrap();
        for (v, n) in mesh.vertices.iter().zip(&mesh.normals) {
            let d = norm(sub(*v, c));
            assert!((d - r).abs() <= 0.6, "vertex distance {d}");
            assert!((norm(*n) - 1.0).abs() < 1e-10);
            assert!(dot(*n, sub(*v, c)) > 0.0);
        }
        let area = mesh.area();
        let exact = 4.0 * std::f64::consts::PI * r * r;
        assert!((area - exact).abs() / exact < 0.05, "area {area} vs {exact}");
        // triangle winding agrees with the outward normals
        for t in &mesh.triangles {
            let [a, b, cc] = t.map(|v| mesh.vertices[v]);
            let centroid = scale([a[0] + b[0] + cc[0], a[1] + b[1] + cc[1], a[2] + b[2] + cc[2]], 1.0 / 3.0);
            assert!(dot(cross(sub(b, a), sub(cc, a)), sub(centroid, c)) > 0.0);
        }
    }

    #[test]
    fn sphere_mask_surface_within_bound() {
        let (g, c, r) = sphere_grid();
        let mask: Vec<bool> = (0..g.len()).map(|i| norm(sub(g.position(i), c)) < r).collect();
        let geom = levelset_from_mask(&g, &mask, DEFAULT_THETA_MIN).unwrap();
        let worst = geom
            .surface
            .vertices
            .iter()
            .map(|v| (norm(sub(*v, c)) - r).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 0.6, "worst vertex deviation {worst}");
    }

    #[test]
    fn surface_requires_sign_change() {
        let g = VolumeGrid::new([4; 3], [1.0; 3], [0.0; 3]).unwrap();
        assert!(matches!(extract_surface(&g, &vec![1.0; 64]), Err(Error::NoSignChange)));
    }

    #[test]
    fn mesh_level_set_reproduces_mask() {
        let (g, c, r) = sphere_grid();
        let mask: Vec<bool> = (0..g.len()).map(|i| norm(sub(g.position(i), c)) < r).collect();
        let geom = levelset_from_mask(&g, &mask, DEFAULT_THETA_MIN).unwrap();
        // nearest-vertex sign test: inside iff (p - v) . n < 0 for the closest vertex
        let mesh = &geom.surface;
        let agree = (0..g.len())
            .filter(|&i| {
                let p = g.position(i);
                let (best, _) = mesh
                    .vertices
                    .iter()
                    .enumerate()
                    .map(|(k, v)| (k, norm(sub(p, *v))))
                    .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
                let inside = dot(sub(p, mesh.vertices[best]), mesh.normals[best]) < 0.0;
                inside == mask[i]
            })
            .count();
        assert!(agree as f64 >= 0.99 * g.len() as f64, "{agree} of {}", g.len());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn stack() -> impl Strategy<Value = ImageStack> {
            prop::collection::vec(-50.0f64..50.0, 5 * 4 * 2)
                .prop_map(|d| ImageStack::new(5, 4, 2, d).unwrap())
        }

        proptest! {
            #[test]
            fn variance_shift_and_scale(img in stack(), shift in -10.0f64..10.0, k in 0.1f64..5.0) {
                let base = neighborhood_variance(&img, 3).unwrap();
                let shifted = ImageStack { data: img.data.iter().map(|v| v + shift).collect(), ..img.clone() };
                let scaled = ImageStack { data: img.data.iter().map(|v| v * k).collect(), ..img.clone() };
                let s = neighborhood_variance(&shifted, 3).unwrap();
                let m = neighborhood_variance(&scaled, 3).unwrap();
                for i in 0..base.data.len() {
                    prop_assert!((s.data[i] - base.data[i]).abs() < 1e-9);
                    prop_assert!((m.data[i] - k * base.data[i]).abs() < 1e-9 * (1.0 + m.data[i]));
                }
            }

            #[test]
            fn sign_invariant_to_positive_scaling(img in stack(), k in 0.01f64..100.0) {
                let scaled = ImageStack { data: img.data.iter().map(|v| v * k).collect(), ..img.clone() };
                prop_assert_eq!(neighborhood_sign(&img, 3).unwrap(), neighborhood_sign(&scaled, 3).unwrap());
            }
        }
    }
}
