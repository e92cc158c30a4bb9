//! Cross-validation over a `(lambda_alpha, lambda_beta)` grid with
//! interleaved time-point folds.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::admm::BetaProblem;
use crate::em::{alpha_matrix, e_step, fit_em, AlphaProblem, EmConfig, FitResult};
use crate::error::{Error, Result};
use crate::math::derive_seed;
use crate::model::{weighted_log_likelihood, CovariateSeries, CytogramSeries, Hyperparams};
use crate::scaling::ColumnScaling;

/// Fold `o` (0-based) holds time indices `o, o + nfolds, o + 2 nfolds, ...`.
pub fn make_folds(t: usize, nfolds: usize) -> Result<Vec<Vec<usize>>> {
    if nfolds == 0 {
        return Err(Error::invalid("need at least one fold"));
    }
    if t < nfolds {
        return Err(Error::invalid(format!("{t} time points cannot fill {nfolds} folds")));
    }
    Ok((0..nfolds).map(|o| (o..t).step_by(nfolds).collect()).collect())
}

/// Complement of `fold` in `0..t`.
pub fn training_indices(t: usize, fold: &[usize]) -> Vec<usize> {
    (0..t).filter(|i| !fold.contains(i)).collect()
}

/// `n` log-spaced values from `hi` down to `lo`.
pub fn logspace_descending(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![hi];
    }
    let (a, b) = (hi.ln(), lo.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvGrid {
    lambda_alpha: Vec<f64>,
    lambda_beta: Vec<f64>,
}

impl CvGrid {
    /// Values are sorted into descending order; duplicates and negative or
    /// non-finite entries are rejected.
    pub fn new(mut lambda_alpha: Vec<f64>, mut lambda_beta: Vec<f64>) -> Result<Self> {
        for (name, v) in [("lambda_alpha", &mut lambda_alpha), ("lambda_beta", &mut lambda_beta)] {
            if v.is_empty() {
                return Err(Error::invalid(format!("{name} grid is empty")));
            }
            if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(Error::invalid(format!("{name} grid needs finite nonnegative values")));
            }
            v.sort_by(|a, b| b.total_cmp(a));
            if v.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::invalid(format!("{name} grid has duplicate values")));
            }
        }
        Ok(CvGrid {
            lambda_alpha,
            lambda_beta,
        })
    }

    /// `n x n` grid, each axis log-spaced over `[1e-4, 1] * scale`.
    pub fn log_spaced(n: usize, scale: f64) -> Result<Self> {
        if n == 0 || !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid("grid size must be positive and scale finite and positive"));
        }
        let axis = logspace_descending(1e-4 * scale, scale, n);
        Self::new(axis.clone(), axis)
    }

    pub fn lambda_alpha(&self) -> &[f64] {
        &self.lambda_alpha
    }

    pub fn lambda_beta(&self) -> &[f64] {
        &self.lambda_beta
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.lambda_alpha.len(), self.lambda_beta.len())
    }
}

/// Smallest penalties at which the intercept-only model is stationary:
/// the largest slope gradients of the `alpha` and `beta` subproblems, taken at
/// an intercept-only fit. Larger values leave every slope at zero.
pub fn lambda_max(x: &CovariateSeries, y: &CytogramSeries, k: usize, config: &CvConfig) -> Result<(f64, f64)> {
    let (x, _) = prepare(x, config)?;
    let null = Hyperparams::new(1e6, 1e6, config.radius)?;
    let fit = fit_em(&x, y, k, &null, &config.em)?;
    let params = &fit.params;
    let resp = e_step(params, &x, y)?;
    let n = y.total_weight();

    let alpha = AlphaProblem::new(resp.weighted_totals(y), &x, n, 0.0)?;
    let grad = alpha.smooth_gradient(&alpha_matrix(params));
    // The last cluster's row is pinned at zero; column 0 is the intercept.
    let lambda_alpha = (0..k.saturating_sub(1))
        .flat_map(|c| (1..grad.ncols()).map(move |j| (c, j)))
        .map(|(c, j)| grad[(c, j)].abs())
        .fold(0.0, f64::max);

    let mut lambda_beta: f64 = 0.0;
    for (c, cl) in params.clusters.iter().enumerate() {
        let weights = resp.cluster_weights(y, c);
        let problem = BetaProblem::new(c, &x, y, &weights, &cl.sigma, n, 0.0, config.radius)?;
        let zero = DMatrix::zeros(x.p(), y.dim());
        let g = problem.smooth_gradient(&problem.optimal_intercept(&zero), &zero);
        lambda_beta = lambda_beta.max(g.amax());
    }
    Ok((lambda_alpha, lambda_beta))
}

/// A fixed grid, or an `n x n` log grid over `[1e-4, 1] * lambda_max` per
/// axis, where the scale comes from the data being fitted.
#[derive(Debug, Clone, PartialEq)]
pub enum GridSpec {
    Fixed(CvGrid),
    Scaled { n: usize },
}

impl GridSpec {
    pub fn resolve(&self, x: &CovariateSeries, y: &CytogramSeries, k: usize, config: &CvConfig) -> Result<CvGrid> {
        match self {
            GridSpec::Fixed(grid) => Ok(grid.clone()),
            GridSpec::Scaled { n } => {
                let (la, lb) = lambda_max(x, y, k, config)?;
                // A single cluster has no free alpha slopes; any scale works.
                let usable = |v: f64| if v > 0.0 && v.is_finite() { v } else { 1.0 };
                let (la, lb) = (usable(la), usable(lb));
                log::debug!("grid scale: lambda_alpha_max = {la:.4e}, lambda_beta_max = {lb:.4e}");
                CvGrid::new(logspace_descending(1e-4 * la, la, *n), logspace_descending(1e-4 * lb, lb, *n))
            }
        }
    }
}

impl Default for CvGrid {
    fn default() -> Self {
        Self::log_spaced(10, 1.0).expect("static grid")
    }
}

/// How covariates are standardized for cross-validation fits.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum CvScaling {
    /// Use the covariates exactly as given.
    #[default]
    None,
    /// Centre and scale with statistics from the training folds only; the
    /// held-out fold reuses those statistics.
    PerFold { exclude: Vec<usize> },
    /// Standardize once over all time points before splitting.
    Global { exclude: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvConfig {
    pub nfolds: usize,
    pub radius: f64,
    pub em: EmConfig,
    pub scaling: CvScaling,
}

impl CvConfig {
    pub fn new(radius: f64, em: EmConfig) -> Self {
        CvConfig {
            nfolds: 5,
            radius,
            em,
            scaling: CvScaling::None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CellScore {
    /// Mean held-out negative log-likelihood, `+inf` if any fold failed.
    pub score: f64,
    pub fold_scores: Vec<f64>,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct CvResult {
    pub grid: CvGrid,
    /// `|L_alpha| x |L_beta|`.
    pub scores: DMatrix<f64>,
    /// `fold_scores[i * |L_beta| + j][o]`.
    pub fold_scores: Vec<Vec<f64>>,
    pub failures: Vec<String>,
    pub winner: (usize, usize),
    pub lambda_alpha: f64,
    pub lambda_beta: f64,
    /// Scaling applied to the covariates before the final refit.
    pub scaling: ColumnScaling,
    pub refit: FitResult,
}

fn fold_split(
    x: &CovariateSeries,
    y: &CytogramSeries,
    fold: &[usize],
    scaling: &CvScaling,
) -> Result<(CovariateSeries, CytogramSeries, CovariateSeries, CytogramSeries)> {
    let train = training_indices(x.len(), fold);
    let (mut xtr, ytr) = (x.subset(&train), y.subset(&train)?);
    let (mut xte, yte) = (x.subset(fold), y.subset(fold)?);
    if let CvScaling::PerFold { exclude } = scaling {
        let s = ColumnScaling::fit(&xtr, exclude)?;
        xtr = s.apply(&xtr)?;
        xte = s.apply(&xte)?;
    }
    Ok((xtr, ytr, xte, yte))
}

fn fold_score(
    hyper: &Hyperparams,
    k: usize,
    data: &(CovariateSeries, CytogramSeries, CovariateSeries, CytogramSeries),
    em: &EmConfig,
) -> Result<f64> {
    let (xtr, ytr, xte, yte) = data;
    let fit = fit_em(xtr, ytr, k, hyper, em)?;
    let ll = weighted_log_likelihood(&fit.params, xte, yte)?;
    if !ll.is_finite() {
        return Err(Error::NonFinite("held-out log-likelihood".into()));
    }
    Ok(-ll)
}

fn prepare(x: &CovariateSeries, config: &CvConfig) -> Result<(CovariateSeries, ColumnScaling)> {
    match &config.scaling {
        CvScaling::Global { exclude } => {
            let s = ColumnScaling::fit(x, exclude)?;
            Ok((s.apply(x)?, s))
        }
        _ => Ok((x.clone(), ColumnScaling::identity(x.p()))),
    }
}

fn cell_seed(base: u64, cell: usize, fold: usize, nfolds: usize) -> u64 {
    derive_seed(base, (cell * nfolds + fold) as u64)
}

/// Cross-validation score of one `(lambda_alpha, lambda_beta)` pair. `cell`
/// selects the seed stream so the same pair scores identically inside and
/// outside a grid search.
pub fn cv_score(
    lambda_alpha: f64,
    lambda_beta: f64,
    x: &CovariateSeries,
    y: &CytogramSeries,
    k: usize,
    config: &CvConfig,
    cell: usize,
) -> Result<CellScore> {
    let hyper = Hyperparams::new(lambda_alpha, lambda_beta, config.radius)?;
    let (x, _) = prepare(x, config)?;
    let folds = make_folds(x.len(), config.nfolds)?;
    let splits = folds
        .iter()
        .map(|f| fold_split(&x, y, f, &config.scaling))
        .collect::<Result<Vec<_>>>()?;
    let results: Vec<Result<f64>> = splits
        .par_iter()
        .enumerate()
        .map(|(o, data)| {
            let em = EmConfig {
                seed: cell_seed(config.em.seed, cell, o, config.nfolds),
                ..config.em
            };
            fold_score(&hyper, k, data, &em)
        })
        .collect();
    Ok(summarize(results))
}

fn summarize(results: Vec<Result<f64>>) -> CellScore {
    let mut fold_scores = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (o, r) in results.into_iter().enumerate() {
        match r {
            Ok(s) => fold_scores.push(s),
            Err(e) => {
                fold_scores.push(f64::INFINITY);
                failures.push(format!("fold {}: {e}", o + 1));
            }
        }
    }
    let score = if failures.is_empty() {
        fold_scores.iter().sum::<f64>() / fold_scores.len() as f64
    } else {
        f64::INFINITY
    };
    CellScore {
        score,
        fold_scores,
        failures,
    }
}

/// Index of the smallest finite entry. Ties go to the entry with the largest
/// `(lambda_alpha, lambda_beta)` in lexicographic order, which for a
/// descending grid is the first in row-major order.
pub fn select_winner(scores: &DMatrix<f64>) -> Option<(usize, usize)> {
    let mut best: Option<((usize, usize), f64)> = None;
    for i in 0..scores.nrows() {
        for j in 0..scores.ncols() {
            let s = scores[(i, j)];
            if !s.is_finite() {
                continue;
            }
            if best.is_none_or(|(_, b)| s < b) {
                best = Some(((i, j), s));
            }
        }
    }
    best.map(|b| b.0)
}

/// Score every grid cell, pick the minimizer and refit on all time points.
pub fn select_lambdas(
    grid: &CvGrid,
    x: &CovariateSeries,
    y: &CytogramSeries,
    k: usize,
    config: &CvConfig,
) -> Result<CvResult> {
    if x.len() != y.len() {
        return Err(Error::dim(format!("{} covariate rows but {} cytograms", x.len(), y.len())));
    }
    let (xs, scaling) = prepare(x, config)?;
    let folds = make_folds(xs.len(), config.nfolds)?;
    let splits = folds
        .iter()
        .map(|f| fold_split(&xs, y, f, &config.scaling))
        .collect::<Result<Vec<_>>>()?;
    let (na, nb) = grid.shape();
    let nf = config.nfolds;
    let tasks: Vec<(usize, usize)> = (0..na * nb).flat_map(|c| (0..nf).map(move |o| (c, o))).collect();
    let results: Vec<Result<f64>> = tasks
        .par_iter()
        .map(|&(cell, o)| {
            let hyper = Hyperparams::new(
                grid.lambda_alpha[cell / nb],
                grid.lambda_beta[cell % nb],
                config.radius,
            )?;
            let em = EmConfig {
                seed: cell_seed(config.em.seed, cell, o, nf),
                ..config.em
            };
            fold_score(&hyper, k, &splits[o], &em)
        })
        .collect();

    let mut scores = DMatrix::from_element(na, nb, f64::INFINITY);
    let mut fold_scores = Vec::with_capacity(na * nb);
    let mut failures = Vec::new();
    let mut iter = results.into_iter();
    for cell in 0..na * nb {
        let chunk: Vec<Result<f64>> = iter.by_ref().take(nf).collect();
        let summary = summarize(chunk);
        scores[(cell / nb, cell % nb)] = summary.score;
        failures.extend(
            summary
                .failures
                .into_iter()
                .map(|f| format!("cell ({}, {}) {f}", cell / nb, cell % nb)),
        );
        fold_scores.push(summary.fold_scores);
    }
    for f in &failures {
        log::warn!("cross-validation {f}");
    }
    let winner = select_winner(&scores).ok_or(Error::AllCellsInfinite)?;
    let (lambda_alpha, lambda_beta) = (grid.lambda_alpha[winner.0], grid.lambda_beta[winner.1]);
    let hyper = Hyperparams::new(lambda_alpha, lambda_beta, config.radius)?;
    let (fit_x, scaling) = match &config.scaling {
        CvScaling::PerFold { exclude } => {
            let s = ColumnScaling::fit(&xs, exclude)?;
            (s.apply(&xs)?, s)
        }
        _ => (xs, scaling),
    };
    let refit = fit_em(&fit_x, y, k, &hyper, &config.em)?;
    Ok(CvResult {
        grid: grid.clone(),
        scores,
        fold_scores,
        failures,
        winner,
        lambda_alpha,
        lambda_beta,
        scaling,
        refit,
    })
}
