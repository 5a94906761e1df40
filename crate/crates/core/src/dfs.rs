//! Divergence-free smoothing: weighted least squares plus a second-derivative
//! penalty, subject to the discrete divergence constraint, solved as a
//! symmetric saddle-point system.

use std::cell::RefCell;
use std::sync::{Arc, OnceLock};

use crate::error::{Error, Result};
use crate::gcv::{self, GcvConfig, GcvReport};
use crate::grid::{VelocityField, WallGeometry};
use crate::krylov::{minres, InverseDiagonal, LinearOperator, MinresOutcome};
use crate::operators::{FieldLayout, Operators, WallTreatment};
use crate::precond::{BoxEmbedding, SpectralPreconditioner, WallLayer, LAYER_DEPTH};
use crate::sparse::{dotv, SparseOperator};

/// Smoothing problem for a fixed operator pair, weights and observation.
/// The smoother acts block-diagonally: one `n x n` block per component.
#[derive(Debug, Clone)]
pub struct DfsProblem {
    divergence: SparseOperator,
    divergence_t: SparseOperator,
    block: SparseOperator,
    block_t: SparseOperator,
    components: usize,
    weights: Vec<f64>,
    observed: Vec<f64>,
    embedding: Option<BoxEmbedding>,
    layer: OnceLock<Option<Arc<WallLayer>>>,
}

impl DfsProblem {
    /// `divergence` is `n_c x (components * n)`, `block` is `n x n`.
    pub fn from_parts(
        divergence: SparseOperator,
        block: SparseOperator,
        components: usize,
        weights: Vec<f64>,
        observed: Vec<f64>,
    ) -> Result<Self> {
        let n = block.cols();
        let total = components * n;
        if block.rows() != n {
            return Err(Error::Assembly(format!(
                "smoother block is {}x{}, expected square",
                block.rows(),
                n
            )));
        }
        if divergence.cols() != total || weights.len() != total || observed.len() != total {
            return Err(Error::Assembly(format!(
                "expected {total} unknowns, divergence has {} columns, {} weights, {} observations",
                divergence.cols(),
                weights.len(),
                observed.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(Error::Assembly(format!("weight {w} outside [0, 1]")));
        }
        if observed.iter().any(|v| !v.is_finite()) {
            return Err(Error::Assembly("non-finite observation".into()));
        }
        Ok(Self {
            divergence_t: divergence.transpose(),
            divergence,
            block_t: block.transpose(),
            block,
            components,
            weights,
            observed,
            embedding: None,
            layer: OnceLock::new(),
        })
    }

    /// Problem for a field on the layout of `ops`.
    pub fn from_field(ops: &Operators, field: &VelocityField) -> Result<Self> {
        let layout = &ops.layout;
        if field.grid != *layout.grid() || field.class != layout.class() {
            return Err(Error::Assembly("field layout differs from the operator layout".into()));
        }
        let w = layout.gather_scalar(&field.weight);
        let weights = [w.clone(), w.clone(), w].concat();
        let mut problem = Self::from_parts(
            ops.divergence.clone(),
            ops.smoother.clone(),
            3,
            weights,
            layout.gather(&field.velocity),
        )?;
        let g = layout.grid();
        let hmin = g.min_spacing();
        problem.embedding = Some(BoxEmbedding {
            dims: g.dims(),
            h: g.spacing().map(|v| v / hmin),
            unknowns: layout.voxels().to_vec(),
            constraints: ops.divergence_voxels.clone(),
        });
        Ok(problem)
    }

    /// Grid placement used by the spectral preconditioner.
    pub fn embedding(&self) -> Option<&BoxEmbedding> {
        self.embedding.as_ref()
    }

    pub fn with_embedding(mut self, embedding: BoxEmbedding) -> Self {
        self.embedding = Some(embedding);
        self.layer = OnceLock::new();
        self
    }

    /// Length of the stacked velocity vector.
    pub fn unknowns(&self) -> usize {
        self.observed.len()
    }

    pub fn constraints(&self) -> usize {
        self.divergence.rows()
    }

    pub fn divergence(&self) -> &SparseOperator {
        &self.divergence
    }

    /// Per-component smoother block.
    pub fn smoother_block(&self) -> &SparseOperator {
        &self.block
    }

    pub fn smoother_block_t(&self) -> &SparseOperator {
        &self.block_t
    }

    /// Near-wall layer of the spectral preconditioner, built on first use.
    pub fn wall_layer(&self) -> Option<Arc<WallLayer>> {
        self.layer
            .get_or_init(|| {
                let emb = self.embedding.as_ref()?;
                match WallLayer::new(&self.block, emb, LAYER_DEPTH) {
                    Ok(layer) => layer.map(Arc::new),
                    Err(e) => {
                        log::warn!("wall layer unavailable: {e}");
                        None
                    }
                }
            })
            .clone()
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn observed(&self) -> &[f64] {
        &self.observed
    }

    /// Weighted observation count, `sum(W)`.
    pub fn observations(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// `(U - U_m)ᵀ W (U - U_m)`
    pub fn rss(&self, u: &[f64]) -> f64 {
        u.iter()
            .zip(&self.observed)
            .zip(&self.weights)
            .map(|((a, b), w)| w * (a - b) * (a - b))
            .sum()
    }

    /// Explicit `DᵀD` over the stacked vector.
    pub fn gram(&self) -> Result<SparseOperator> {
        Ok(crate::operators::block_diagonal(&self.block.gram()?, self.components))
    }

    /// `DᵀD` of one component block, applied matrix-free.
    pub fn gram_operator(&self) -> BlockGram<'_> {
        BlockGram {
            block: &self.block,
            block_t: &self.block_t,
            scratch: RefCell::new(vec![0.0; self.block.rows()]),
        }
    }

    pub fn kkt_operator(&self, s: f64) -> KktOperator<'_> {
        KktOperator {
            problem: self,
            s,
            scratch: RefCell::new(vec![0.0; self.block.rows()]),
        }
    }

    /// Right-hand side `[W U_m; 0]`.
    pub fn kkt_rhs(&self) -> Vec<f64> {
        let mut b: Vec<f64> = self.weights.iter().zip(&self.observed).map(|(w, u)| w * u).collect();
        b.resize(self.unknowns() + self.constraints(), 0.0);
        b
    }

    /// Explicit `[[W + s DᵀD, Aᵀ], [A, 0]]`.
    pub fn assemble_kkt(&self, s: f64) -> Result<SparseOperator> {
        if !(s >= 0.0 && s.is_finite()) {
            return Err(Error::Parameter(format!("smoothing parameter {s} must be finite and >= 0")));
        }
        let nu = self.unknowns();
        let gram = self.gram()?;
        let mut t = Vec::with_capacity(gram.nnz() + 2 * self.divergence.nnz() + nu);
        for (i, w) in self.weights.iter().enumerate() {
            t.push((i, i, *w));
        }
        for r in 0..nu {
            for (c, v) in gram.row(r) {
                t.push((r, c, s * v));
            }
        }
        for r in 0..self.constraints() {
            for (c, v) in self.divergence.row(r) {
                t.push((nu + r, c, v));
                t.push((c, nu + r, v));
            }
        }
        SparseOperator::from_triplets(nu + self.constraints(), nu + self.constraints(), &t)
    }

    /// Block-diagonal preconditioner: `diag(W + s DᵀD)` on the velocity block
    /// and `γ I` on the constraint block, with `γ` the mean diagonal of
    /// `A diag⁻¹ Aᵀ`.
    pub fn preconditioner(&self, s: f64) -> InverseDiagonal {
        let n = self.block.rows();
        let colnorm = self.block.column_norms_sq();
        let mut diag: Vec<f64> = (0..self.unknowns())
            .map(|i| self.weights[i] + s * colnorm[i % n])
            .collect();
        let positive: Vec<f64> = diag.iter().copied().filter(|d| *d > 0.0).collect();
        let floor = if positive.is_empty() {
            1.0
        } else {
            1e-8 * positive.iter().sum::<f64>() / positive.len() as f64
        };
        diag.iter_mut().for_each(|d| *d = d.max(floor));
        let m = self.constraints();
        let mut gamma = 0.0;
        for r in 0..m {
            gamma += self.divergence.row(r).map(|(c, v)| v * v / diag[c]).sum::<f64>();
        }
        gamma = if m > 0 && gamma > 0.0 { gamma / m as f64 } else { 1.0 };
        let mut inv: Vec<f64> = diag.iter().map(|d| 1.0 / d).collect();
        inv.resize(self.unknowns() + m, 1.0 / gamma);
        InverseDiagonal(inv)
    }

    /// Iterative solve at smoothing parameter `s`. Returns the iterate even if
    /// the tolerance was not reached; `converged` tells.
    pub fn solve_unchecked(&self, s: f64, opts: &SolveOptions, warm: Option<&[f64]>) -> Result<DfsSolution> {
        if !(s >= 0.0 && s.is_finite()) {
            return Err(Error::Parameter(format!("smoothing parameter {s} must be finite and >= 0")));
        }
        let nu = self.unknowns();
        let dim = nu + self.constraints();
        if let Some(w) = warm {
            if w.len() != dim {
                return Err(Error::Parameter(format!("warm start of length {} for {dim} unknowns", w.len())));
            }
        }
        let (out, iterations) = match (opts.preconditioner, &self.embedding) {
            (Preconditioner::Spectral, Some(emb)) => {
                let pre = SpectralPreconditioner::with_layer(self, emb, s, self.wall_layer())?;
                self.run_minres(s, &pre, opts, warm)
            }
            _ => self.run_minres(s, &self.preconditioner(s), opts, warm),
        };
        let feasibility = self.feasibility(&out.x[..nu]);
        let mut x = out.x;
        let lambda = x.split_off(nu);
        Ok(DfsSolution {
            u: x,
            lambda,
            kkt_residual: out.relative_residual,
            iterations,
            s_used: s,
            converged: out.converged && feasibility <= opts.tol_div,
            feasibility,
        })
    }

    fn run_minres<P: LinearOperator>(
        &self,
        s: f64,
        pre: &P,
        opts: &SolveOptions,
        warm: Option<&[f64]>,
    ) -> (MinresOutcome, usize) {
        let nu = self.unknowns();
        let op = self.kkt_operator(s);
        let b = self.kkt_rhs();
        let max_iter = opts.max_iter.unwrap_or_else(|| default_max_iter(nu));
        let mut tol = opts.tol;
        let mut out = minres(&op, &b, pre, warm, tol, max_iter);
        let mut iterations = out.iterations;
        // the Krylov residual is global; tighten until the constraint holds pointwise
        for _ in 0..4 {
            if !out.converged || self.feasibility(&out.x[..nu]) <= opts.tol_div {
                break;
            }
            tol *= 0.01;
            out = minres(&op, &b, pre, Some(&out.x), tol, max_iter);
            iterations += out.iterations;
        }
        (out, iterations)
    }

    /// Iterative solve; a convergence error if the tolerance is missed.
    pub fn solve(&self, s: f64, opts: &SolveOptions, warm: Option<&[f64]>) -> Result<DfsSolution> {
        let sol = self.solve_unchecked(s, opts, warm)?;
        if !sol.converged {
            return Err(Error::Convergence {
                iterations: sol.iterations,
                residual: sol.kkt_residual,
            });
        }
        Ok(sol)
    }

    /// `‖A U‖_∞ / max(‖U‖_∞, ε)`
    pub fn feasibility(&self, u: &[f64]) -> f64 {
        let div = self.divergence.mul_vec(u);
        let dmax = div.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let umax = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        dmax / umax.max(1e-12)
    }
}

/// `20 sqrt(3n)`
pub fn default_max_iter(unknowns: usize) -> usize {
    (20.0 * (unknowns as f64).sqrt()).ceil() as usize
}

/// `DᵀD` of one component block.
pub struct BlockGram<'a> {
    block: &'a SparseOperator,
    block_t: &'a SparseOperator,
    scratch: RefCell<Vec<f64>>,
}

impl LinearOperator for BlockGram<'_> {
    fn dim(&self) -> usize {
        self.block.cols()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let mut tmp = self.scratch.borrow_mut();
        self.block.apply(x, &mut tmp);
        self.block_t.apply(&tmp, y);
    }
}

/// Matrix-free `[[W + s DᵀD, Aᵀ], [A, 0]]`.
pub struct KktOperator<'a> {
    problem: &'a DfsProblem,
    s: f64,
    scratch: RefCell<Vec<f64>>,
}

impl LinearOperator for KktOperator<'_> {
    fn dim(&self) -> usize {
        self.problem.unknowns() + self.problem.constraints()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let p = self.problem;
        let nu = p.unknowns();
        let n = p.block.cols();
        let (xu, xl) = x.split_at(nu);
        let (yu, yl) = y.split_at_mut(nu);
        for ((yi, xi), w) in yu.iter_mut().zip(xu).zip(&p.weights) {
            *yi = w * xi;
        }
        if self.s != 0.0 {
            let mut tmp = self.scratch.borrow_mut();
            for c in 0..p.components {
                p.block.apply(&xu[c * n..(c + 1) * n], &mut tmp);
                p.block_t.apply_add(self.s, &tmp, &mut yu[c * n..(c + 1) * n]);
            }
        }
        p.divergence_t.apply_add(1.0, xl, yu);
        p.divergence.apply(xu, yl);
    }
}

/// Preconditioner of the saddle-point solve. `Spectral` needs a box
/// embedding and falls back to `Diagonal` without one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Preconditioner {
    /// `diag(W + s DᵀD)` and a scaled identity.
    Diagonal,
    #[default]
    Spectral,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    /// Relative KKT residual.
    pub tol: f64,
    /// Defaults to `20 sqrt(3n)`.
    pub max_iter: Option<usize>,
    /// Feasibility bound on `‖A U‖_∞ / max|U|`.
    pub tol_div: f64,
    pub preconditioner: Preconditioner,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: None,
            tol_div: 1e-6,
            preconditioner: Preconditioner::Spectral,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DfsSolution {
    /// Stacked smoothed velocity.
    pub u: Vec<f64>,
    pub lambda: Vec<f64>,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub s_used: f64,
    pub converged: bool,
    /// `‖A U‖_∞ / max|U|`
    pub feasibility: f64,
}

impl DfsSolution {
    /// `[U; λ]`, for warm starts.
    pub fn stacked(&self) -> Vec<f64> {
        [self.u.as_slice(), self.lambda.as_slice()].concat()
    }
}

/// Normalized median test parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutlierTest {
    pub threshold: f64,
    /// Noise floor in velocity units [m/s].
    pub epsilon: f64,
}

impl Default for OutlierTest {
    fn default() -> Self {
        Self {
            threshold: 2.0,
            epsilon: 0.1,
        }
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let m = values.len();
    if m % 2 == 1 {
        values[m / 2]
    } else {
        0.5 * (values[m / 2 - 1] + values[m / 2])
    }
}

/// Voxels failing the normalized median test in any component. Neighbors are
/// the weighted fluid voxels of the 26-neighborhood; voxels with fewer than
/// four of them are not tested.
pub fn normalized_median_outliers(field: &VelocityField, test: OutlierTest) -> Vec<bool> {
    let g = &field.grid;
    let [nx, ny, nz] = g.dims();
    let valid = |i: usize| field.class[i].is_fluid() && field.weight[i] > 0.0;
    let mut flagged = vec![false; g.len()];
    let mut nbs = Vec::with_capacity(26);
    let mut vals = Vec::with_capacity(26);
    let mut res = Vec::with_capacity(26);
    for idx in 0..g.len() {
        if !valid(idx) {
            continue;
        }
        let [i, j, k] = g.coords(idx);
        nbs.clear();
        for kk in k.saturating_sub(1)..(k + 2).min(nz) {
            for jj in j.saturating_sub(1)..(j + 2).min(ny) {
                for ii in i.saturating_sub(1)..(i + 2).min(nx) {
                    let nb = g.index(ii, jj, kk);
                    if nb != idx && valid(nb) {
                        nbs.push(nb);
                    }
                }
            }
        }
        if nbs.len() < 4 {
            continue;
        }
        for c in 0..3 {
            vals.clear();
            vals.extend(nbs.iter().map(|&nb| field.velocity[c][nb]));
            let um = median(&mut vals);
            res.clear();
            res.extend(vals.iter().map(|v| (v - um).abs()));
            let rm = median(&mut res);
            if (field.velocity[c][idx] - um).abs() / (rm + test.epsilon) > test.threshold {
                flagged[idx] = true;
                break;
            }
        }
    }
    flagged
}

/// How the smoothing parameter is chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum Smoothing {
    Fixed(f64),
    Gcv(GcvConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DfsConfig {
    pub treatment: WallTreatment,
    pub smoothing: Smoothing,
    pub solve: SolveOptions,
    pub outliers: Option<OutlierTest>,
}

impl Default for DfsConfig {
    fn default() -> Self {
        Self {
            treatment: WallTreatment::WallAware,
            smoothing: Smoothing::Gcv(GcvConfig::default()),
            solve: SolveOptions::default(),
            outliers: Some(OutlierTest::default()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SmoothReport {
    pub s: f64,
    pub gcv: Option<GcvReport>,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub feasibility: f64,
    pub outliers_flagged: usize,
    pub degraded_rows: usize,
}

/// Assembles operators for `field` and smooths it.
pub fn smooth_field(
    field: &VelocityField,
    geometry: &WallGeometry,
    config: &DfsConfig,
) -> Result<(VelocityField, SmoothReport)> {
    let layout = FieldLayout::new(&field.grid, &field.class)?;
    let ops = Operators::assemble(layout, Some(geometry), config.treatment)?;
    smooth_with_operators(field, &ops, config)
}

/// Smooths `field` with already assembled operators.
pub fn smooth_with_operators(
    field: &VelocityField,
    ops: &Operators,
    config: &DfsConfig,
) -> Result<(VelocityField, SmoothReport)> {
    let mut observed = field.clone();
    let mut outliers_flagged = 0;
    if let Some(test) = config.outliers {
        let flagged = normalized_median_outliers(field, test);
        for (idx, f) in flagged.iter().enumerate() {
            if *f {
                observed.weight[idx] = 0.0;
                outliers_flagged += 1;
            }
        }
        log::info!("normalized median test flagged {outliers_flagged} voxels");
    }
    let problem = DfsProblem::from_field(ops, &observed)?;
    let (s, gcv, sol) = match &config.smoothing {
        Smoothing::Fixed(s) => (*s, None, problem.solve_unchecked(*s, &config.solve, None)?),
        Smoothing::Gcv(cfg) => {
            let model = gcv::spectrum_for(&problem, cfg)?;
            log::debug!("spectrum fit a = {:e}, b = {:e}", model.a, model.b);
            let (report, best) = gcv::select_s(&problem, &model, cfg, &config.solve)?;
            (report.s, Some(report), best)
        }
    };
    if !sol.converged {
        return Err(Error::Convergence {
            iterations: sol.iterations,
            residual: sol.kkt_residual,
        });
    }
    let velocity = ops.layout.scatter(&sol.u);
    let out = VelocityField::new(field.grid.clone(), velocity, field.class.clone())?;
    Ok((
        out,
        SmoothReport {
            s,
            gcv,
            iterations: sol.iterations,
            kkt_residual: sol.kkt_residual,
            feasibility: sol.feasibility,
            outliers_flagged,
            degraded_rows: ops.report.degraded.len(),
        },
    ))
}

/// `max |yᵀK x - xᵀK y|` over the probe pairs.
pub fn symmetry_defect<K: LinearOperator>(op: &K, probes: &[(Vec<f64>, Vec<f64>)]) -> f64 {
    let n = op.dim();
    let (mut kx, mut ky) = (vec![0.0; n], vec![0.0; n]);
    probes
        .iter()
        .map(|(x, y)| {
            op.apply(x, &mut kx);
            op.apply(y, &mut ky);
            (dotv(y, &kx) - dotv(x, &ky)).abs()
        })
        .fold(0.0, f64::max)
}
