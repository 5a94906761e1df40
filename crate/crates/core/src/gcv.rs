//! Smoothing-parameter selection by generalized cross validation with a
//! partial-spectrum trace approximation.

use crate::dfs::{DfsProblem, DfsSolution, SolveOptions};
use crate::error::{Error, Result};
use crate::krylov::{dense_spectrum, lanczos_largest, LinearOperator};

#[derive(Debug, Clone, PartialEq)]
pub struct GcvConfig {
    /// Exact eigenvalues kept at the top of the spectrum.
    pub eigenvalues: usize,
    /// Full dense spectrum below this many unknowns.
    pub dense_below: usize,
    pub eig_tol: f64,
    /// Lanczos step budget; defaults to `30 m`.
    pub eig_max_steps: Option<usize>,
    pub log10_range: (f64, f64),
    pub coarse_points: usize,
    /// Golden-section stop width in decades.
    pub golden_tol: f64,
    /// KKT tolerance while scanning; the selected `s` is re-solved at the
    /// caller's tolerance.
    pub search_tol: f64,
    /// Feasibility target while scanning.
    pub search_tol_div: f64,
    pub seed: u64,
}

impl Default for GcvConfig {
    fn default() -> Self {
        Self {
            eigenvalues: 200,
            dense_below: 400,
            eig_tol: 1e-8,
            eig_max_steps: None,
            log10_range: (-6.0, 6.0),
            coarse_points: 25,
            golden_tol: 0.1,
            search_tol: 1e-4,
            search_tol_div: 1e-4,
            seed: 0x5eed,
        }
    }
}

/// Eigenvalues of `DᵀD`: exact at the top, `a exp(-b i)` beyond (1-based `i`).
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumModel {
    /// Descending.
    pub exact: Vec<f64>,
    pub a: f64,
    pub b: f64,
    /// Size of the full spectrum, `3n`.
    pub total: usize,
}

impl SpectrumModel {
    /// Model holding the complete spectrum, no extrapolation.
    pub fn complete(mut exact: Vec<f64>) -> Self {
        exact.sort_by(|a, b| b.total_cmp(a));
        exact.iter_mut().for_each(|v| *v = v.max(0.0));
        let total = exact.len();
        Self {
            exact,
            a: 0.0,
            b: 0.0,
            total,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.exact.len() == self.total
    }

    /// `i`-th largest eigenvalue, 1-based.
    pub fn eigenvalue(&self, i: usize) -> f64 {
        if i <= self.exact.len() {
            self.exact[i - 1]
        } else {
            (self.a * (-self.b * i as f64).exp()).max(0.0)
        }
    }

    /// Number of zero eigenvalues in the model.
    pub fn nullity(&self) -> usize {
        (1..=self.total).filter(|&i| self.eigenvalue(i) == 0.0).count()
    }
}

/// `m` largest eigenvalues of a symmetric operator, descending.
pub fn top_eigenvalues<K: LinearOperator>(op: &K, m: usize, tol: f64, max_steps: usize, seed: u64) -> Result<Vec<f64>> {
    if m >= op.dim() {
        return Ok(dense_spectrum(op));
    }
    Ok(lanczos_largest(op, m, tol, max_steps, seed)?.values)
}

/// Least-squares fit of `ln λ_i = ln a - b i` over the positive exact values.
pub fn fit_spectrum(exact: Vec<f64>, total: usize) -> Result<SpectrumModel> {
    let pts: Vec<(f64, f64)> = exact
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > 0.0)
        .map(|(i, v)| ((i + 1) as f64, v.ln()))
        .collect();
    if pts.is_empty() {
        return Err(Error::DegenerateSpectrum("all eigenvalues are zero".into()));
    }
    if pts.len() < 10 {
        return Err(Error::DegenerateSpectrum(format!(
            "{} positive eigenvalues, at least 10 needed for the fit",
            pts.len()
        )));
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let b = -slope;
    let a = (my - slope * mx).exp();
    let mut exact = exact;
    exact.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(SpectrumModel { exact, a, b, total })
}

/// Spectrum model of the problem's `DᵀD`. The stacked operator repeats the
/// per-component block, so the block's top `⌈m / c⌉` eigenvalues are computed
/// and each is repeated `c` times.
pub fn spectrum_for(problem: &DfsProblem, cfg: &GcvConfig) -> Result<SpectrumModel> {
    let c = problem.components();
    let total = problem.unknowns();
    let op = problem.gram_operator();
    let repeat = |vals: Vec<f64>| -> Vec<f64> { vals.iter().flat_map(|v| std::iter::repeat(*v).take(c)).collect() };
    if total < cfg.dense_below || cfg.eigenvalues >= total {
        return Ok(SpectrumModel::complete(repeat(dense_spectrum(&op))));
    }
    let per_block = cfg.eigenvalues.div_ceil(c);
    let steps = cfg.eig_max_steps.unwrap_or(30 * cfg.eigenvalues);
    let vals = top_eigenvalues(&op, per_block, cfg.eig_tol, steps, cfg.seed)?;
    let mut exact = repeat(vals);
    exact.truncate(cfg.eigenvalues);
    fit_spectrum(exact, total)
}

/// `Σ 1 / (1 + s λ_i)` over the modelled spectrum.
pub fn approximate_trace(model: &SpectrumModel, s: f64) -> f64 {
    if s == 0.0 {
        return model.total as f64;
    }
    let head: f64 = model.exact.iter().map(|l| 1.0 / (1.0 + s * l)).sum();
    let tail: f64 = (model.exact.len() + 1..=model.total)
        .map(|i| 1.0 / (1.0 + s * model.eigenvalue(i)))
        .sum();
    head + tail
}

/// GCV score from a residual sum of squares and a trace. With weights the
/// observation count `N = sum(W)` replaces `3n` and the trace is rescaled by
/// `N / 3n`, which keeps the denominator `1 - Tr / 3n`.
pub fn gcv_score(rss: f64, trace: f64, observations: f64, total: usize) -> Option<f64> {
    let denom = 1.0 - trace / total as f64;
    if denom <= 0.0 || observations <= 0.0 {
        return None;
    }
    Some((rss / observations) / (denom * denom))
}

/// GCV at `s`, solving the constrained problem.
pub fn gcv_value(
    problem: &DfsProblem,
    model: &SpectrumModel,
    s: f64,
    opts: &SolveOptions,
    warm: Option<&[f64]>,
) -> Result<(f64, DfsSolution)> {
    if s <= 0.0 {
        return Err(Error::DegenerateSmoothing { s });
    }
    let sol = problem.solve_unchecked(s, opts, warm)?;
    if !sol.converged {
        log::warn!(
            "GCV solve at s = {s:e} stopped at relative residual {:e}; using the best iterate",
            sol.kkt_residual
        );
    }
    let trace = approximate_trace(model, s);
    let value = gcv_score(problem.rss(&sol.u), trace, problem.observations(), problem.unknowns())
        .ok_or(Error::DegenerateSmoothing { s })?;
    Ok((value, sol))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcvReport {
    pub s: f64,
    /// `(log10 s, GCV)` for every evaluation, ascending in `s`.
    pub curve: Vec<(f64, f64)>,
    /// Minimum on the edge of the search range.
    pub boundary: bool,
    pub exact_eigenvalues: usize,
    pub fit: (f64, f64),
    pub solves: usize,
}

/// Coarse grid in `log10 s` followed by golden-section refinement around the
/// best grid point. Returns the report and the solution at the selected `s`.
pub fn select_s(
    problem: &DfsProblem,
    model: &SpectrumModel,
    cfg: &GcvConfig,
    opts: &SolveOptions,
) -> Result<(GcvReport, DfsSolution)> {
    let (lo, hi) = cfg.log10_range;
    if !(lo < hi) || cfg.coarse_points < 3 || lo.is_nan() || hi.is_nan() {
        return Err(Error::Parameter(format!(
            "invalid GCV search range [{lo}, {hi}] with {} points",
            cfg.coarse_points
        )));
    }
    let search = SolveOptions {
        tol: cfg.search_tol.max(opts.tol),
        tol_div: cfg.search_tol_div.max(opts.tol_div),
        ..*opts
    };
    let mut evals: Vec<(f64, f64, DfsSolution)> = Vec::new();
    let eval = |x: f64, evals: &mut Vec<(f64, f64, DfsSolution)>| -> Result<f64> {
        let warm = evals
            .iter()
            .min_by(|a, b| (a.0 - x).abs().total_cmp(&(b.0 - x).abs()))
            .map(|e| e.2.stacked());
        let (g, sol) = gcv_value(problem, model, 10f64.powf(x), &search, warm.as_deref())?;
        log::debug!("GCV(10^{x:.3}) = {g:e}, {} iterations", sol.iterations);
        evals.push((x, g, sol));
        Ok(g)
    };
    let step = (hi - lo) / (cfg.coarse_points - 1) as f64;
    let grid: Vec<f64> = (0..cfg.coarse_points).map(|i| lo + step * i as f64).collect();
    // walk the coarse grid downhill from its middle until the minimum is
    // bracketed; the extreme ends are the slowest solves and rarely needed
    let mut values: Vec<Option<f64>> = vec![None; grid.len()];
    let mut at = |i: usize, evals: &mut Vec<(f64, f64, DfsSolution)>| -> Result<f64> {
        if let Some(v) = values[i] {
            return Ok(v);
        }
        let v = eval(grid[i], evals)?;
        values[i] = Some(v);
        Ok(v)
    };
    let mid = grid.len() / 2;
    let f_mid = at(mid, &mut evals)?;
    let f_up = at(mid + 1, &mut evals)?;
    let (mut best, mut f_best, dir): (usize, f64, isize) = if f_up < f_mid {
        (mid + 1, f_up, 1)
    } else {
        let f_down = at(mid - 1, &mut evals)?;
        if f_down < f_mid {
            (mid - 1, f_down, -1)
        } else {
            (mid, f_mid, 0)
        }
    };
    if dir != 0 {
        loop {
            let next = best as isize + dir;
            if next < 0 || next as usize >= grid.len() {
                break;
            }
            let v = at(next as usize, &mut evals)?;
            if v >= f_best {
                break;
            }
            best = next as usize;
            f_best = v;
        }
    }
    let boundary = best == 0 || best + 1 == grid.len();
    if boundary {
        log::warn!("GCV minimum on the search boundary, log10 s = {}", grid[best]);
    } else {
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        let (mut a, mut b) = (grid[best - 1], grid[best + 1]);
        let mut c = b - phi * (b - a);
        let mut d = a + phi * (b - a);
        let mut fc = eval(c, &mut evals)?;
        let mut fd = eval(d, &mut evals)?;
        while b - a > cfg.golden_tol {
            if fc <= fd {
                b = d;
                d = c;
                fd = fc;
                c = b - phi * (b - a);
                fc = eval(c, &mut evals)?;
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + phi * (b - a);
                fd = eval(d, &mut evals)?;
            }
        }
    }
    evals.sort_by(|a, b| a.0.total_cmp(&b.0));
    let k = (0..evals.len()).min_by(|&a, &b| evals[a].1.total_cmp(&evals[b].1)).unwrap();
    let curve = evals.iter().map(|e| (e.0, e.1)).collect();
    let mut solves = evals.len();
    let x = evals[k].0;
    let scan = evals.swap_remove(k).2;
    let sol = if search.tol > opts.tol || search.tol_div > opts.tol_div {
        solves += 1;
        problem.solve_unchecked(10f64.powf(x), opts, Some(&scan.stacked()))?
    } else {
        scan
    };
    Ok((
        GcvReport {
            s: 10f64.powf(x),
            curve,
            boundary,
            exact_eigenvalues: model.exact.len(),
            fit: (model.a, model.b),
            solves,
        },
        sol,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::SparseOperator;

    #[test]
    fn synthetic_exponential_round_trip() {
        let exact: Vec<f64> = (1..=50).map(|i| 5.0 * (-0.01 * i as f64).exp()).collect();
        let m = fit_spectrum(exact, 500).unwrap();
        assert!((m.a - 5.0).abs() < 1e-6 && (m.b - 0.01).abs() < 1e-6);
        assert!((m.eigenvalue(400) - 5.0 * (-4.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn flat_and_zero_spectra() {
        let m = fit_spectrum(vec![2.0; 20], 100).unwrap();
        assert!(m.b.abs() < 1e-12 && (m.eigenvalue(90) - 2.0).abs() < 1e-12);
        assert!(matches!(fit_spectrum(vec![0.0; 20], 100), Err(Error::DegenerateSpectrum(_))));
        let mut with_zeros: Vec<f64> = (1..=15).map(|i| (-(i as f64)).exp()).collect();
        with_zeros.extend([0.0; 5]);
        let m = fit_spectrum(with_zeros, 40).unwrap();
        assert!((m.b - 1.0).abs() < 1e-9);
        assert_eq!(m.eigenvalue(18), 0.0);
    }

    #[test]
    fn trace_limits() {
        let m = SpectrumModel::complete(vec![4.0, 1.0, 0.0, 0.0]);
        assert_eq!(approximate_trace(&m, 0.0), 4.0);
        assert!((approximate_trace(&m, 1e12) - 2.0).abs() < 1e-9);
        assert_eq!(m.nullity(), 2);
        let mut last = f64::INFINITY;
        for k in -4..=4 {
            let t = approximate_trace(&m, 10f64.powi(k));
            assert!(t < last);
            last = t;
        }
    }

    #[test]
    fn identity_spectrum() {
        let id = SparseOperator::identity(30);
        let v = top_eigenvalues(&id, 10, 1e-10, 300, 1).unwrap();
        assert!(v.iter().all(|x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn full_request_uses_dense_spectrum() {
        let t: Vec<(usize, usize, f64)> = (0..6).map(|i| (i, i, i as f64)).collect();
        let m = SparseOperator::from_triplets(6, 6, &t).unwrap();
        let v = top_eigenvalues(&m, 6, 1e-10, 100, 1).unwrap();
        assert_eq!(v, vec![5.0, 4.0, 3.0, 2.0, 1.0, 0.0]);
    }

    #[test]
    fn score_rejects_full_trace() {
        assert!(gcv_score(1.0, 10.0, 10.0, 10).is_none());
        let g = gcv_score(2.0, 5.0, 10.0, 10).unwrap();
        assert!((g - 0.2 / 0.25).abs() < 1e-15);
    }
}
