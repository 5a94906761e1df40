//! Block preconditioner for the smoothing saddle-point system built from
//! constant-coefficient symbols on the bounding box, diagonalized by sine
//! transforms.
//!
//! The velocity block `W + s DᵀD` is approximated by `w̄ + s L²` and the
//! constraint Schur complement `A (W + s DᵀD)⁻¹ Aᵀ` by `σ / (w̄ + s L²)`, where
//! `L` is the 7-point Laplacian and `σ` the symbol of the wide-stencil
//! Laplacian produced by central divergence and gradient. Both are rescaled
//! per row by the ratio of the true to the model diagonal, which absorbs the
//! large near-wall coefficients.
//!
//! The symbol cannot see the stiff wall rows, so the velocity block is
//! corrected by an exact Cholesky solve on a thin layer of unknowns next to
//! the wall and the box faces, applied symmetrically around the box solve.

use std::cell::RefCell;
use std::collections::VecDeque;
use std::sync::Arc;

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Llt, SymbolicLlt};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMat};
use faer::{MatMut, Side};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::dfs::DfsProblem;
use crate::error::{Error, Result};
use crate::krylov::LinearOperator;
use crate::sparse::SparseOperator;

/// Placement of unknowns and constraint rows in a box grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxEmbedding {
    pub dims: [usize; 3],
    /// Spacing in grid units.
    pub h: [f64; 3],
    /// Box cell of every unknown of one component.
    pub unknowns: Vec<usize>,
    /// Box cell of every constraint row.
    pub constraints: Vec<usize>,
}

struct BoxTransform {
    dims: [usize; 3],
    /// Complex FFTs of length `2 (n + 1)` per axis.
    ffts: [Arc<dyn Fft<f64>>; 3],
    /// Normalization making the forward-backward pair the identity.
    norm: f64,
}

/// Buffers reused across transforms.
#[derive(Default)]
struct Scratch {
    lines: Vec<Complex64>,
    fft: Vec<Complex64>,
}

impl BoxTransform {
    fn new(dims: [usize; 3]) -> Self {
        let mut planner = FftPlanner::new();
        let ffts = dims.map(|n| planner.plan_fft_forward(2 * (n + 1)));
        let norm = dims.iter().map(|&n| 2.0 / (n + 1) as f64).product();
        Self { dims, ffts, norm }
    }

    /// Unnormalized DST-I along every axis, in place.
    fn transform(&self, data: &mut [f64], scratch: &mut Scratch) {
        let [nx, ny, nz] = self.dims;
        let starts = |axis: usize| -> Vec<usize> {
            match axis {
                0 => (0..ny * nz).map(|r| r * nx).collect(),
                1 => (0..nz).flat_map(|k| (0..nx).map(move |i| i + nx * ny * k)).collect(),
                _ => (0..nx * ny).collect(),
            }
        };
        let strides = [1, nx, nx * ny];
        for axis in 0..3 {
            self.transform_axis(data, &starts(axis), strides[axis], axis, scratch);
        }
    }

    /// Two real lines share one complex FFT of their odd extensions: the
    /// first comes back in the imaginary part, the second in the real part.
    fn transform_axis(&self, data: &mut [f64], starts: &[usize], stride: usize, axis: usize, scratch: &mut Scratch) {
        let n = self.dims[axis];
        let m = 2 * (n + 1);
        let pairs = starts.len().div_ceil(2);
        let Scratch { lines, fft } = scratch;
        lines.clear();
        lines.resize(pairs * m, Complex64::default());
        for (p, chunk) in lines.chunks_exact_mut(m).enumerate() {
            let a = starts[2 * p];
            let b = starts.get(2 * p + 1).copied();
            for j in 0..n {
                let re = data[a + j * stride];
                let im = b.map_or(0.0, |b| data[b + j * stride]);
                chunk[1 + j] = Complex64::new(re, im);
                chunk[m - 1 - j] = Complex64::new(-re, -im);
            }
        }
        let len = self.ffts[axis].get_inplace_scratch_len();
        if fft.len() < len {
            fft.resize(len, Complex64::default());
        }
        self.ffts[axis].process_with_scratch(lines, &mut fft[..len]);
        for (p, chunk) in lines.chunks_exact(m).enumerate() {
            let a = starts[2 * p];
            let b = starts.get(2 * p + 1).copied();
            for j in 0..n {
                let z = chunk[1 + j];
                data[a + j * stride] = -0.5 * z.im;
                if let Some(b) = b {
                    data[b + j * stride] = 0.5 * z.re;
                }
            }
        }
    }

    /// `data <- F diag(symbol) F data` with `F` the orthonormal transform.
    fn apply_symbol(&self, data: &mut [f64], symbol: &[f64], scratch: &mut Scratch) {
        self.transform(data, scratch);
        for (d, s) in data.iter_mut().zip(symbol) {
            *d *= s * self.norm;
        }
        self.transform(data, scratch);
    }
}

/// Per-mode symbols `(μ, σ)`: 7-point Laplacian and wide-stencil Laplacian.
fn mode_symbols(dims: [usize; 3], h: [f64; 3]) -> (Vec<f64>, Vec<f64>) {
    let axis = |a: usize| -> Vec<(f64, f64)> {
        (1..=dims[a])
            .map(|j| {
                let k = std::f64::consts::PI * j as f64 / (dims[a] + 1) as f64;
                let h2 = h[a] * h[a];
                (4.0 * (0.5 * k).sin().powi(2) / h2, k.sin().powi(2) / h2)
            })
            .collect()
    };
    let (ax, ay, az) = (axis(0), axis(1), axis(2));
    let len = dims.iter().product();
    let mut mu = Vec::with_capacity(len);
    let mut sigma = Vec::with_capacity(len);
    for z in &az {
        for y in &ay {
            for x in &ax {
                mu.push(x.0 + y.0 + z.0);
                sigma.push(x.1 + y.1 + z.1);
            }
        }
    }
    (mu, sigma)
}

/// Face steps from the boundary included in the wall layer.
pub const LAYER_DEPTH: usize = 2;

/// Unknowns within a few face steps of an exterior cell or a box face,
/// with the pattern of `DᵀD` restricted to them.
#[derive(Debug)]
pub struct WallLayer {
    /// Block-local unknowns, ascending.
    idx: Vec<usize>,
    /// Upper triangle of the restricted `DᵀD`, column-compressed.
    pattern: SymbolicSparseColMat<usize>,
    gram: Vec<f64>,
    /// Position of each diagonal entry in `gram`.
    diag: Vec<usize>,
    symbolic: SymbolicLlt<usize>,
}

impl WallLayer {
    /// `None` when no unknown touches the boundary.
    pub fn new(block: &SparseOperator, embedding: &BoxEmbedding, depth: usize) -> Result<Option<Self>> {
        let [nx, ny, nz] = embedding.dims;
        let cells = nx * ny * nz;
        let n = embedding.unknowns.len();
        let mut of_cell = vec![usize::MAX; cells];
        for (u, &c) in embedding.unknowns.iter().enumerate() {
            of_cell[c] = u;
        }
        let neighbors = |c: usize| -> [Option<usize>; 6] {
            let (i, j, k) = (c % nx, (c / nx) % ny, c / (nx * ny));
            [
                (i > 0).then(|| c - 1),
                (i + 1 < nx).then(|| c + 1),
                (j > 0).then(|| c - nx),
                (j + 1 < ny).then(|| c + nx),
                (k > 0).then(|| c - nx * ny),
                (k + 1 < nz).then(|| c + nx * ny),
            ]
        };
        let mut dist = vec![usize::MAX; n];
        let mut queue = VecDeque::new();
        for (u, &c) in embedding.unknowns.iter().enumerate() {
            if neighbors(c).iter().any(|nb| nb.is_none_or(|nc| of_cell[nc] == usize::MAX)) {
                dist[u] = 0;
                queue.push_back(u);
            }
        }
        while let Some(u) = queue.pop_front() {
            if dist[u] == depth {
                continue;
            }
            for nc in neighbors(embedding.unknowns[u]).into_iter().flatten() {
                let v = of_cell[nc];
                if v != usize::MAX && dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        let idx: Vec<usize> = (0..n).filter(|&u| dist[u] != usize::MAX).collect();
        if idx.is_empty() {
            return Ok(None);
        }
        let mut local = vec![usize::MAX; n];
        for (l, &u) in idx.iter().enumerate() {
            local[u] = l;
        }
        let g = block.gram()?;
        let mut col_ptr = vec![0usize];
        let mut row_idx = Vec::new();
        let mut gram = Vec::new();
        let mut diag = Vec::with_capacity(idx.len());
        for (j, &u) in idx.iter().enumerate() {
            let mut has_diag = false;
            for (c, v) in g.row(u) {
                let i = local[c];
                if i == usize::MAX || i > j {
                    continue;
                }
                if i == j {
                    has_diag = true;
                    diag.push(row_idx.len());
                }
                row_idx.push(i);
                gram.push(v);
            }
            if !has_diag {
                // keep the diagonal in the pattern for the weight term
                let pos = row_idx.len();
                row_idx.push(j);
                gram.push(0.0);
                diag.push(pos);
            }
            col_ptr.push(row_idx.len());
        }
        let m = idx.len();
        let pattern = SymbolicSparseColMat::new_checked(m, m, col_ptr, None, row_idx);
        let symbolic = SymbolicLlt::try_new(pattern.as_ref(), Side::Upper)
            .map_err(|e| Error::Assembly(format!("wall layer ordering failed: {e:?}")))?;
        Ok(Some(Self {
            idx,
            pattern,
            gram,
            diag,
            symbolic,
        }))
    }

    pub fn len(&self) -> usize {
        self.idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.idx.is_empty()
    }

    /// Cholesky factor of `diag(w) + s DᵀD` on the layer; `w` is the
    /// block's full weight vector.
    fn factor(&self, w: &[f64], s: f64) -> Option<Llt<usize, f64>> {
        let mut vals: Vec<f64> = self.gram.iter().map(|g| s * g).collect();
        for (l, &p) in self.diag.iter().enumerate() {
            vals[p] += w[self.idx[l]];
        }
        let mat = SparseColMatRef::new(self.pattern.as_ref(), &vals);
        Llt::try_new_with_symbolic(self.symbolic.clone(), mat, Side::Upper).ok()
    }
}

struct LayerSolve {
    layer: Arc<WallLayer>,
    /// One factor per component, or one shared when all weights agree.
    factors: Vec<Llt<usize, f64>>,
}

impl LayerSolve {
    /// `y = C x` over all stacked components: zero outside the layer.
    fn apply(&self, n: usize, x: &[f64], y: &mut [f64], buf: &mut Vec<f64>) {
        let idx = &self.layer.idx;
        let m = idx.len();
        let comps = x.len() / n;
        buf.clear();
        for c in 0..comps {
            buf.extend(idx.iter().map(|&u| x[c * n + u]));
        }
        if self.factors.len() == 1 {
            self.factors[0].solve_in_place(MatMut::from_column_major_slice_mut(buf.as_mut_slice(), m, comps));
        } else {
            for (c, f) in self.factors.iter().enumerate() {
                f.solve_in_place(MatMut::from_column_major_slice_mut(&mut buf[c * m..(c + 1) * m], m, 1));
            }
        }
        y.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..comps {
            for (&u, v) in idx.iter().zip(&buf[c * m..(c + 1) * m]) {
                y[c * n + u] = *v;
            }
        }
    }
}

pub struct SpectralPreconditioner<'a> {
    problem: &'a DfsProblem,
    s: f64,
    layer: Option<LayerSolve>,
    embedding: BoxEmbedding,
    components: usize,
    transform: BoxTransform,
    velocity_symbol: Vec<f64>,
    constraint_symbol: Vec<f64>,
    /// `Δ^{-1/2}` per stacked unknown.
    velocity_scale: Vec<f64>,
    constraint_scale: Vec<f64>,
    work: RefCell<(Vec<f64>, Scratch)>,
    /// Block-sized scratch for the layer correction.
    block_work: RefCell<[Vec<f64>; 4]>,
}

impl<'a> SpectralPreconditioner<'a> {
    /// Box symbols only, without the wall layer.
    pub fn new(problem: &'a DfsProblem, embedding: &BoxEmbedding, s: f64) -> Result<Self> {
        Self::with_layer(problem, embedding, s, None)
    }

    pub fn with_layer(
        problem: &'a DfsProblem,
        embedding: &BoxEmbedding,
        s: f64,
        layer: Option<Arc<WallLayer>>,
    ) -> Result<Self> {
        let n = problem.smoother_block().cols();
        let cells: usize = embedding.dims.iter().product();
        if embedding.unknowns.len() != n
            || embedding.constraints.len() != problem.constraints()
            || embedding.unknowns.iter().chain(&embedding.constraints).any(|&c| c >= cells)
        {
            return Err(Error::Assembly("box embedding does not match the problem".into()));
        }
        let h = embedding.h;
        let nu = problem.unknowns();
        let w_bar = (problem.observations() / nu as f64).max(1e-3);
        let (mu, sigma) = mode_symbols(embedding.dims, h);
        let velocity_symbol: Vec<f64> = mu.iter().map(|m| 1.0 / (w_bar + s * m * m)).collect();
        let sigma_floor = sigma.iter().copied().fold(f64::INFINITY, f64::min);
        let constraint_symbol: Vec<f64> = mu
            .iter()
            .zip(&sigma)
            .map(|(m, sg)| (w_bar + s * m * m) / sg.max(sigma_floor))
            .collect();

        let inv_h2: [f64; 3] = h.map(|v| 1.0 / (v * v));
        let lap_diag: f64 = 2.0 * inv_h2.iter().sum::<f64>();
        let model_diag = w_bar + s * (lap_diag * lap_diag + 2.0 * inv_h2.iter().map(|v| v * v).sum::<f64>());
        let colnorm = problem.smoother_block().column_norms_sq();
        let weights = problem.weights();
        let h_diag: Vec<f64> = (0..nu).map(|i| weights[i] + s * colnorm[i % n]).collect();
        let velocity_scale: Vec<f64> = h_diag
            .iter()
            .map(|d| 1.0 / (d / model_diag).max(1e-2).sqrt())
            .collect();
        let model_schur = 0.5 * inv_h2.iter().sum::<f64>() / model_diag;
        let a = problem.divergence();
        let constraint_scale: Vec<f64> = (0..problem.constraints())
            .map(|r| {
                let jac: f64 = a.row(r).map(|(c, v)| v * v / h_diag[c].max(1e-2 * model_diag)).sum();
                1.0 / (jac / model_schur).max(1e-2).sqrt()
            })
            .collect();
        let layer = match layer {
            Some(layer) if s > 0.0 => {
                let blocks: Vec<&[f64]> = (0..problem.components()).map(|c| &weights[c * n..(c + 1) * n]).collect();
                let shared = blocks.windows(2).all(|p| p[0] == p[1]);
                let factors: Option<Vec<_>> = if shared {
                    layer.factor(blocks[0], s).map(|f| vec![f])
                } else {
                    blocks.iter().map(|w| layer.factor(w, s)).collect()
                };
                match factors {
                    Some(factors) => Some(LayerSolve { layer, factors }),
                    None => {
                        log::debug!("wall layer factorization failed at s = {s:e}; box symbols only");
                        None
                    }
                }
            }
            _ => None,
        };
        Ok(Self {
            problem,
            s,
            layer,
            block_work: RefCell::new([vec![0.0; nu], vec![0.0; n], vec![0.0; nu], Vec::new()]),
            embedding: embedding.clone(),
            components: problem.components(),
            transform: BoxTransform::new(embedding.dims),
            velocity_symbol,
            constraint_symbol,
            velocity_scale,
            constraint_scale,
            work: RefCell::new((vec![0.0; cells], Scratch::default())),
        })
    }

    fn apply_block(&self, cells: &[usize], symbol: &[f64], scale: &[f64], x: &[f64], y: &mut [f64]) {
        let mut guard = self.work.borrow_mut();
        let (grid, scratch) = &mut *guard;
        grid.iter_mut().for_each(|v| *v = 0.0);
        for ((&c, xi), sc) in cells.iter().zip(x).zip(scale) {
            grid[c] = xi * sc;
        }
        self.transform.apply_symbol(grid, symbol, scratch);
        for ((&c, yi), sc) in cells.iter().zip(y.iter_mut()).zip(scale) {
            *yi = grid[c] * sc;
        }
    }
}

impl SpectralPreconditioner<'_> {
    /// `r - (diag(w) + s DᵀD) x` for one component block.
    fn residual(&self, component: usize, r: &[f64], x: &[f64], out: &mut [f64], tmp: &mut [f64]) {
        let n = x.len();
        let w = &self.problem.weights()[component * n..(component + 1) * n];
        self.problem.smoother_block().apply(x, tmp);
        for (o, ((ri, xi), wi)) in out.iter_mut().zip(r.iter().zip(x).zip(w)) {
            *o = ri - wi * xi;
        }
        self.problem.smoother_block_t().apply_add(-self.s, tmp, out);
    }

    /// Velocity block over all stacked components.
    fn apply_velocity(&self, x: &[f64], y: &mut [f64]) {
        let n = self.embedding.unknowns.len();
        let Some(layer) = &self.layer else {
            for c in 0..self.components {
                let span = c * n..(c + 1) * n;
                self.apply_block(
                    &self.embedding.unknowns,
                    &self.velocity_symbol,
                    &self.velocity_scale[span.clone()],
                    &x[span.clone()],
                    &mut y[span],
                );
            }
            return;
        };
        // y = C x; y += B (x - H y); y += C (x - H y)
        let mut guard = self.block_work.borrow_mut();
        let [res, tmp, corr, buf] = &mut *guard;
        layer.apply(n, x, y, buf);
        for c in 0..self.components {
            let span = c * n..(c + 1) * n;
            self.residual(c, &x[span.clone()], &y[span.clone()], &mut res[span.clone()], tmp);
            self.apply_block(
                &self.embedding.unknowns,
                &self.velocity_symbol,
                &self.velocity_scale[span.clone()],
                &res[span.clone()],
                &mut corr[span.clone()],
            );
            y[span.clone()].iter_mut().zip(&corr[span]).for_each(|(a, b)| *a += b);
        }
        for c in 0..self.components {
            let span = c * n..(c + 1) * n;
            self.residual(c, &x[span.clone()], &y[span.clone()], &mut res[span], tmp);
        }
        layer.apply(n, res, corr, buf);
        y.iter_mut().zip(corr.iter()).for_each(|(a, b)| *a += b);
    }
}

impl LinearOperator for SpectralPreconditioner<'_> {
    fn dim(&self) -> usize {
        self.velocity_scale.len() + self.constraint_scale.len()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let n = self.embedding.unknowns.len();
        let nu = self.components * n;
        self.apply_velocity(&x[..nu], &mut y[..nu]);
        self.apply_block(
            &self.embedding.constraints,
            &self.constraint_symbol,
            &self.constraint_scale,
            &x[nu..],
            &mut y[nu..],
        );
    }
}
