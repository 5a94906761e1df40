//! Krylov solvers: preconditioned MINRES for symmetric (indefinite) systems and
//! Lanczos with full reorthogonalization for extreme eigenvalues.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::sparse::{axpy, dotv, SparseOperator};

/// Symmetric linear operator applied matrix-free.
pub trait LinearOperator {
    fn dim(&self) -> usize;
    /// `y = self * x`
    fn apply(&self, x: &[f64], y: &mut [f64]);
}

impl LinearOperator for SparseOperator {
    fn dim(&self) -> usize {
        self.rows()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        SparseOperator::apply(self, x, y)
    }
}

/// `Bᵀ B` applied as two sparse products.
pub struct GramOperator<'a> {
    b: &'a SparseOperator,
    bt: SparseOperator,
    scratch: std::cell::RefCell<Vec<f64>>,
}

impl<'a> GramOperator<'a> {
    pub fn new(b: &'a SparseOperator) -> Self {
        Self {
            b,
            bt: b.transpose(),
            scratch: std::cell::RefCell::new(vec![0.0; b.rows()]),
        }
    }
}

impl LinearOperator for GramOperator<'_> {
    fn dim(&self) -> usize {
        self.b.cols()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let mut tmp = self.scratch.borrow_mut();
        self.b.apply(x, &mut tmp);
        self.bt.apply(&tmp, y);
    }
}

/// Outcome of a MINRES run.
#[derive(Debug, Clone)]
pub struct MinresOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// True relative residual `||b - K x|| / ||b||`.
    pub relative_residual: f64,
    pub converged: bool,
}

/// Diagonal preconditioner stored as its inverse.
pub struct InverseDiagonal(pub Vec<f64>);

impl LinearOperator for InverseDiagonal {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for ((yi, xi), d) in y.iter_mut().zip(x).zip(&self.0) {
            *yi = xi * d;
        }
    }
}

/// Preconditioned MINRES. `precond` applies the inverse of an SPD
/// preconditioner. Iterates until the true relative residual falls below `tol`,
/// restarting from the current iterate when the recurrence estimate and the
/// true residual disagree.
pub fn minres<K: LinearOperator, P: LinearOperator>(
    op: &K,
    b: &[f64],
    precond: &P,
    x0: Option<&[f64]>,
    tol: f64,
    max_iter: usize,
) -> MinresOutcome {
    let n = op.dim();
    let bnorm = dotv(b, b).sqrt();
    let mut x = x0.map_or_else(|| vec![0.0; n], |v| v.to_vec());
    if bnorm == 0.0 {
        return MinresOutcome {
            x: vec![0.0; n],
            iterations: 0,
            relative_residual: 0.0,
            converged: true,
        };
    }
    let mut scratch = vec![0.0; n];
    precond.apply(b, &mut scratch);
    let b_pnorm = dotv(b, &scratch).max(0.0).sqrt();
    let mut total = 0;
    let true_residual = |x: &[f64], scratch: &mut Vec<f64>| -> f64 {
        op.apply(x, scratch);
        b.iter().zip(scratch.iter()).map(|(bi, ki)| (bi - ki).powi(2)).sum::<f64>().sqrt() / bnorm
    };
    let mut rel = true_residual(&x, &mut scratch);
    let mut idle = 0;
    while rel > tol && total < max_iter {
        let (steps, _) = minres_cycle(op, b, precond, &mut x, tol * bnorm, b_pnorm, max_iter - total);
        total += steps;
        let new_rel = true_residual(&x, &mut scratch);
        log::trace!("minres cycle: {steps} steps, relative residual {new_rel:e}");
        idle = if steps < 2 || new_rel >= rel { idle + 1 } else { 0 };
        rel = new_rel;
        if idle > 2 {
            break;
        }
    }
    MinresOutcome {
        x,
        iterations: total,
        relative_residual: rel,
        converged: rel <= tol,
    }
}

/// Steps between true residual checks inside a cycle.
const CHECK_EVERY: usize = 10;

/// One MINRES recurrence from the current `x` until the true residual norm
/// drops below `abs_tol`, the recurrence stagnates at rounding level or
/// `max_iter` steps elapse. The true residual is checked every few steps and
/// whenever the preconditioned estimate passes the target.
fn minres_cycle<K: LinearOperator, P: LinearOperator>(
    op: &K,
    b: &[f64],
    precond: &P,
    x: &mut [f64],
    abs_tol: f64,
    b_pnorm: f64,
    max_iter: usize,
) -> (usize, f64) {
    let n = op.dim();
    let bnorm = dotv(b, b).sqrt();
    let mut r1 = vec![0.0; n];
    let residual_norm = |x: &[f64], r: &mut [f64]| -> f64 {
        op.apply(x, r);
        b.iter().zip(r.iter()).map(|(bi, ki)| (bi - ki).powi(2)).sum::<f64>().sqrt()
    };
    op.apply(x, &mut r1);
    for (r, bi) in r1.iter_mut().zip(b) {
        *r = bi - *r;
    }
    if dotv(&r1, &r1).sqrt() <= abs_tol {
        return (0, 0.0);
    }
    let mut y = vec![0.0; n];
    precond.apply(&r1, &mut y);
    let beta1 = dotv(&r1, &y).max(0.0).sqrt();
    // the preconditioned estimate is only a guide; stop it at rounding level
    let floor = 1e-15 * b_pnorm.max(beta1);
    let estimate_target = abs_tol / bnorm.max(f64::MIN_POSITIVE) * b_pnorm;
    let mut check = vec![0.0; n];
    let mut r2 = r1.clone();
    let mut v = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut w1 = vec![0.0; n];
    let mut w2 = vec![0.0; n];
    let (mut oldb, mut beta) = (0.0, beta1);
    let (mut dbar, mut epsln) = (0.0, 0.0);
    let mut phibar = beta1;
    let (mut cs, mut sn) = (-1.0f64, 0.0f64);
    let mut itn = 0;
    while itn < max_iter {
        itn += 1;
        let s = 1.0 / beta;
        for (vi, yi) in v.iter_mut().zip(&y) {
            *vi = s * yi;
        }
        op.apply(&v, &mut y);
        if itn >= 2 {
            axpy(-beta / oldb, &r1, &mut y);
        }
        let alfa = dotv(&v, &y);
        axpy(-alfa / beta, &r2, &mut y);
        std::mem::swap(&mut r1, &mut r2);
        r2.copy_from_slice(&y);
        precond.apply(&r2, &mut y);
        oldb = beta;
        beta = dotv(&r2, &y).max(0.0).sqrt();

        let oldeps = epsln;
        let delta = cs * dbar + sn * alfa;
        let gbar = sn * dbar - cs * alfa;
        epsln = sn * beta;
        dbar = -cs * beta;
        let gamma = (gbar * gbar + beta * beta).sqrt().max(f64::EPSILON);
        cs = gbar / gamma;
        sn = beta / gamma;
        let phi = cs * phibar;
        phibar *= sn;

        let denom = 1.0 / gamma;
        std::mem::swap(&mut w1, &mut w2);
        std::mem::swap(&mut w2, &mut w);
        for i in 0..n {
            w[i] = (v[i] - oldeps * w1[i] - delta * w2[i]) * denom;
            x[i] += phi * w[i];
        }
        if beta == 0.0 || phibar <= floor {
            break;
        }
        if (itn % CHECK_EVERY == 0 || phibar <= estimate_target) && residual_norm(x, &mut check) <= abs_tol {
            break;
        }
    }
    (itn, phibar)
}

/// Largest eigenvalues of a symmetric operator.
#[derive(Debug, Clone)]
pub struct LanczosOutcome {
    /// Descending.
    pub values: Vec<f64>,
    /// Lanczos steps summed over all deflation rounds.
    pub steps: usize,
    /// Worst relative residual bound among the accepted Ritz values.
    pub worst_residual: f64,
}

/// Converged Ritz pairs of one Lanczos run.
struct Round {
    values: Vec<f64>,
    vectors: Vec<Vec<f64>>,
    steps: usize,
    worst: f64,
}

/// `k` largest eigenvalues by Lanczos with full reorthogonalization.
///
/// A single Krylov sequence sees only one copy of a repeated eigenvalue, so
/// runs are repeated in the orthogonal complement of all Ritz vectors found so
/// far until a run no longer produces a value above the current `k`-th one.
/// Ritz values are accepted when `|beta_j * s_ji| <= tol * |theta_max|`;
/// `max_steps` bounds the total step count across runs.
pub fn lanczos_largest<K: LinearOperator>(
    op: &K,
    k: usize,
    tol: f64,
    max_steps: usize,
    seed: u64,
) -> Result<LanczosOutcome> {
    let n = op.dim();
    if k == 0 || k > n {
        return Err(Error::Parameter(format!(
            "requested {k} eigenvalues of a {n}-dimensional operator"
        )));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut locked_vals: Vec<f64> = Vec::new();
    let mut locked_vecs: Vec<Vec<f64>> = Vec::new();
    let mut steps = 0;
    let mut worst: f64 = 0.0;
    let mut budget = max_steps.max(k);
    loop {
        let free = n - locked_vecs.len();
        if free == 0 {
            break;
        }
        let want = k.min(free);
        let floor = (locked_vals.len() >= k).then(|| kth_largest(&locked_vals, k));
        let round = lanczos_round(op, want, tol, budget.min(free), &locked_vecs, floor, &mut rng)?;
        steps += round.steps;
        log::debug!("lanczos round: {} steps, {} values, top {:?}", round.steps, round.values.len(), round.values.first());
        budget = budget.saturating_sub(round.steps);
        if round.worst > tol {
            return Err(Error::EigenConvergence {
                iterations: steps,
                worst_residual: round.worst,
            });
        }
        let kth = kth_largest(&locked_vals, k);
        let top = round.values.first().copied().unwrap_or(f64::NEG_INFINITY);
        let novel = locked_vals.len() < k || top > kth + tol * kth.abs().max(top.abs());
        if novel {
            worst = worst.max(round.worst);
        }
        locked_vals.extend(round.values);
        locked_vecs.extend(round.vectors);
        if !novel || locked_vecs.len() >= n {
            break;
        }
        if budget == 0 {
            return Err(Error::EigenConvergence {
                iterations: steps,
                worst_residual: f64::INFINITY,
            });
        }
    }
    locked_vals.sort_by(|a, b| b.total_cmp(a));
    locked_vals.truncate(k);
    Ok(LanczosOutcome {
        values: locked_vals,
        steps,
        worst_residual: worst,
    })
}

fn kth_largest(values: &[f64], k: usize) -> f64 {
    if values.len() < k {
        return f64::NEG_INFINITY;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    v[k - 1]
}

/// Removes the span of the first `len` columns of `q` and of `locked` from
/// `v`, returning the coefficients on `q`. The two most recent columns are
/// removed first; a second full pass runs only when the first one cancels
/// most of what remained.
fn orthogonalize(v: &mut DVector<f64>, q: &DMatrix<f64>, len: usize, locked: &[Vec<f64>]) -> DVector<f64> {
    let mut h = DVector::zeros(len);
    let recent = len.saturating_sub(2);
    for i in recent..len {
        let c = q.column(i).dot(v);
        v.axpy(-c, &q.column(i), 1.0);
        h[i] += c;
    }
    for pass in 0..2 {
        let before = v.norm();
        if len > 0 {
            let qa = q.columns(0, len);
            let c = qa.tr_mul(v);
            v.gemv(-1.0, &qa, &c, 1.0);
            h += c;
        }
        for l in locked {
            let c = dotv(l, v.as_slice());
            axpy(-c, l, v.as_mut_slice());
        }
        if pass == 0 && v.norm() > 0.7 * before {
            break;
        }
    }
    h
}

/// Thick-restart Lanczos in the orthogonal complement of `locked`, returning
/// the top `want` Ritz pairs. With `floor` set, the run ends early with no
/// pairs once the largest Ritz value has converged at or below it.
fn lanczos_round<K: LinearOperator>(
    op: &K,
    want: usize,
    tol: f64,
    max_steps: usize,
    locked: &[Vec<f64>],
    floor: Option<f64>,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Round> {
    let n = op.dim();
    let free = n - locked.len();
    let want = want.min(free);
    let cap = (2 * want).max(want + 32).min(free);
    let keep = ((want + cap) / 2).max(want).min(cap.saturating_sub(1)).max(1);
    let mut random_unit = |q: &DMatrix<f64>, len: usize| -> Option<DVector<f64>> {
        for _ in 0..5 {
            let mut v = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            orthogonalize(&mut v, q, len, locked);
            orthogonalize(&mut v, q, len, locked);
            let nv = v.norm();
            if nv > 1e-8 {
                v /= nv;
                return Some(v);
            }
        }
        None
    };
    let empty = |steps| Round { values: vec![], vectors: vec![], steps, worst: 0.0 };
    // basis vectors are the first `len` columns
    let mut q = DMatrix::<f64>::zeros(n, cap);
    match random_unit(&q, 0) {
        Some(v) => q.set_column(0, &v),
        None => return Ok(empty(0)),
    }
    let mut len = 1;
    // projected matrix, row-major `cap x cap`
    let mut t = vec![0.0; cap * cap];
    let mut w = DVector::<f64>::zeros(n);
    let mut steps = 0;
    loop {
        // expand to `cap` vectors or until the Krylov space is exhausted
        let mut beta = 0.0;
        let mut exhausted = false;
        while len <= cap {
            let j = len - 1;
            op.apply(&q.as_slice()[j * n..(j + 1) * n], w.as_mut_slice());
            steps += 1;
            // with full reorthogonalization the coefficients are column j of
            // the projection of the operator on the basis
            let h = orthogonalize(&mut w, &q, len, locked);
            for (i, hi) in h.iter().enumerate() {
                t[i * cap + j] = *hi;
                t[j * cap + i] = *hi;
            }
            beta = w.norm();
            let scale_ref = (0..=j).fold(0.0f64, |m, i| m.max(t[i * cap + i].abs())).max(f64::MIN_POSITIVE);
            if len == cap {
                break;
            }
            if beta <= 1e-12 * scale_ref {
                beta = 0.0;
                match random_unit(&q, len) {
                    Some(v) => q.set_column(len, &v),
                    None => {
                        exhausted = true;
                        break;
                    }
                }
            } else {
                q.set_column(len, &(&w / beta));
            }
            len += 1;
            if steps >= max_steps {
                break;
            }
        }
        let m = len;
        let mut dense = DMatrix::<f64>::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                dense[(i, j)] = 0.5 * (t[i * cap + j] + t[j * cap + i]);
            }
        }
        let eig = SymmetricEigen::new(dense);
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let top = eig.eigenvalues[order[0]].abs().max(f64::MIN_POSITIVE);
        let resid = |i: usize| (beta * eig.eigenvectors[(m - 1, i)]).abs() / top;
        let take = want.min(m);
        let worst = order.iter().take(take).map(|&i| resid(i)).fold(0.0, f64::max);
        let ritz_vectors = |which: &[usize]| -> DMatrix<f64> {
            let coeffs = eig.eigenvectors.select_columns(which);
            q.columns(0, m) * coeffs
        };
        let columns = |y: &DMatrix<f64>| -> Vec<Vec<f64>> {
            y.column_iter().map(|c| c.iter().copied().collect()).collect()
        };
        if let Some(f) = floor {
            if resid(order[0]) <= tol && eig.eigenvalues[order[0]] <= f {
                return Ok(empty(steps));
            }
        }
        if worst <= tol || exhausted || steps >= max_steps || m < cap {
            return Ok(Round {
                values: order.iter().take(take).map(|&i| eig.eigenvalues[i]).collect(),
                vectors: columns(&ritz_vectors(&order[..take])),
                steps,
                worst,
            });
        }
        // restart from the leading Ritz vectors and the residual direction
        let kept: Vec<usize> = order.iter().take(keep).copied().collect();
        let next = ritz_vectors(&kept);
        q.columns_mut(0, keep).copy_from(&next);
        t.iter_mut().for_each(|v| *v = 0.0);
        for (r, &i) in kept.iter().enumerate() {
            t[r * cap + r] = eig.eigenvalues[i];
            let c = beta * eig.eigenvectors[(m - 1, i)];
            t[r * cap + keep] = c;
            t[keep * cap + r] = c;
        }
        if beta > 0.0 {
            q.set_column(keep, &(&w / beta));
        } else {
            match random_unit(&q, keep) {
                Some(v) => q.set_column(keep, &v),
                None => {
                    return Ok(Round {
                        values: kept.iter().map(|&i| eig.eigenvalues[i]).collect(),
                        vectors: columns(&next),
                        steps,
                        worst,
                    })
                }
            }
        }
        len = keep + 1;
    }
}

/// All eigenvalues of a small symmetric operator, descending, by dense decomposition.
pub fn dense_spectrum<K: LinearOperator>(op: &K) -> Vec<f64> {
    let n = op.dim();
    let mut m = DMatrix::<f64>::zeros(n, n);
    let mut e = vec![0.0; n];
    let mut col = vec![0.0; n];
    for j in 0..n {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[j] = 1.0;
        op.apply(&e, &mut col);
        for i in 0..n {
            m[(i, j)] = col[i];
        }
    }
    let sym = (&m + m.transpose()) * 0.5;
    let mut values: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
    values.sort_by(|a, b| b.total_cmp(a));
    values
}
