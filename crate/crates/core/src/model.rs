//! The covariate-driven Gaussian mixture: data containers, parameters, and
//! the (penalized) multiplicity-weighted likelihood.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::math::{log_sum_exp, softmax_into};

/// Relative slack used when classifying `||beta_k^T x_t|| <= r` as feasible.
pub const CONSTRAINT_TOL: f64 = 1e-6;

/// The `T x p` design matrix, one row per time point.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateSeries {
    values: DMatrix<f64>,
    names: Vec<String>,
    times: Vec<i64>,
}

impl CovariateSeries {
    /// Build a series with time labels `1..=T`.
    pub fn new(values: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        let times = (1..=values.nrows() as i64).collect();
        Self::with_times(values, names, times)
    }

    pub fn with_times(values: DMatrix<f64>, names: Vec<String>, times: Vec<i64>) -> Result<Self> {
        if names.len() != values.ncols() {
            return Err(Error::dim(format!(
                "{} covariate names for {} columns",
                names.len(),
                values.ncols()
            )));
        }
        if times.len() != values.nrows() {
            return Err(Error::dim(format!(
                "{} time labels for {} rows",
                times.len(),
                values.nrows()
            )));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::invalid(format!("duplicate covariate name `{n}`")));
            }
        }
        let mut seen_t = HashSet::new();
        for t in &times {
            if !seen_t.insert(*t) {
                return Err(Error::invalid(format!("duplicate time index {t}")));
            }
        }
        if let Some(((r, c), _)) = values
            .iter()
            .enumerate()
            .map(|(i, v)| ((i % values.nrows(), i / values.nrows()), v))
            .find(|(_, v)| !v.is_finite())
        {
            return Err(Error::NonFinite(format!("covariate at row {r}, column {c}")));
        }
        Ok(CovariateSeries {
            values,
            names,
            times,
        })
    }

    /// Unnamed columns `x1..xp`, mostly for tests and simulations.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let t = rows.len();
        let p = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::dim("ragged covariate rows"));
        }
        let values = DMatrix::from_fn(t, p, |i, j| rows[i][j]);
        let names = (1..=p).map(|j| format!("x{j}")).collect();
        Self::new(values, names)
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn p(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn times(&self) -> &[i64] {
        &self.times
    }

    pub fn row(&self, t: usize) -> Vec<f64> {
        self.values.row(t).iter().copied().collect()
    }

    pub fn subset(&self, rows: &[usize]) -> CovariateSeries {
        let values = DMatrix::from_fn(rows.len(), self.p(), |i, j| self.values[(rows[i], j)]);
        CovariateSeries {
            values,
            names: self.names.clone(),
            times: rows.iter().map(|&r| self.times[r]).collect(),
        }
    }

    pub(crate) fn values_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.values
    }
}

/// The particles observed at a single time point, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    d: usize,
    coords: Vec<f64>,
    weights: Vec<f64>,
}

impl Frame {
    /// Zero multiplicities are dropped; negative or non-finite ones are rejected.
    pub fn new(d: usize, coords: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("cytogram dimension must be positive"));
        }
        if coords.len() != d * weights.len() {
            return Err(Error::dim(format!(
                "{} coordinates for {} particles of dimension {d}",
                coords.len(),
                weights.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::invalid(format!("invalid multiplicity {w}")));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("particle coordinate".into()));
        }
        if weights.iter().all(|&w| w > 0.0) {
            return Ok(Frame { d, coords, weights });
        }
        let mut kept_c = Vec::with_capacity(coords.len());
        let mut kept_w = Vec::with_capacity(weights.len());
        for (i, &w) in weights.iter().enumerate() {
            if w > 0.0 {
                kept_c.extend_from_slice(&coords[i * d..(i + 1) * d]);
                kept_w.push(w);
            }
        }
        Ok(Frame {
            d,
            coords: kept_c,
            weights: kept_w,
        })
    }

    /// Particles with unit multiplicity.
    pub fn unweighted(d: usize, coords: Vec<f64>) -> Result<Self> {
        let n = if d == 0 { 0 } else { coords.len() / d };
        Self::new(d, coords, vec![1.0; n])
    }

    pub fn empty(d: usize) -> Self {
        Frame {
            d,
            coords: Vec::new(),
            weights: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.d..(i + 1) * self.d]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.coords
            .chunks_exact(self.d)
            .zip(self.weights.iter().copied())
    }
}

/// Per-time particle sets with multiplicities.
#[derive(Debug, Clone, PartialEq)]
pub struct CytogramSeries {
    d: usize,
    frames: Vec<Frame>,
    total: f64,
}

impl CytogramSeries {
    pub fn new(d: usize, frames: Vec<Frame>) -> Result<Self> {
        if frames.iter().any(|f| f.d != d) {
            return Err(Error::dim("frame dimension differs from series dimension"));
        }
        let total: f64 = frames.iter().map(Frame::total_weight).sum();
        if !(total > 0.0) {
            return Err(Error::invalid("total multiplicity must be positive"));
        }
        Ok(CytogramSeries { d, frames, total })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &Frame {
        &self.frames[t]
    }

    /// Total multiplicity `N`.
    pub fn total_weight(&self) -> f64 {
        self.total
    }

    pub fn particle_count(&self) -> usize {
        self.frames.iter().map(Frame::len).sum()
    }

    pub fn subset(&self, rows: &[usize]) -> Result<CytogramSeries> {
        CytogramSeries::new(self.d, rows.iter().map(|&r| self.frames[r].clone()).collect())
    }

    /// Per-axis `(min, max)` over every particle.
    pub fn axis_bounds(&self) -> Vec<(f64, f64)> {
        let mut b = vec![(f64::INFINITY, f64::NEG_INFINITY); self.d];
        for f in &self.frames {
            for (y, _) in f.iter() {
                for (j, &v) in y.iter().enumerate() {
                    b[j].0 = b[j].0.min(v);
                    b[j].1 = b[j].1.max(v);
                }
            }
        }
        b
    }

    pub fn axis_ranges(&self) -> Vec<f64> {
        self.axis_bounds().iter().map(|(lo, hi)| hi - lo).collect()
    }
}

/// Parameters of one mixture component.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterParams {
    pub alpha0: f64,
    /// Length `p`.
    pub alpha: DVector<f64>,
    /// Length `d`.
    pub beta0: DVector<f64>,
    /// `p x d`.
    pub beta: DMatrix<f64>,
    /// `d x d`.
    pub sigma: DMatrix<f64>,
}

impl ClusterParams {
    pub fn zeros(p: usize, d: usize) -> Self {
        ClusterParams {
            alpha0: 0.0,
            alpha: DVector::zeros(p),
            beta0: DVector::zeros(d),
            beta: DMatrix::zeros(p, d),
            sigma: DMatrix::identity(d, d),
        }
    }

    /// `beta0 + beta^T x`.
    pub fn mean_at(&self, x: &[f64]) -> DVector<f64> {
        let mut mu = self.beta0.clone();
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                for j in 0..mu.len() {
                    mu[j] += self.beta[(i, j)] * xi;
                }
            }
        }
        mu
    }

    /// `||beta^T x||_2`.
    pub fn deviation_at(&self, x: &[f64]) -> f64 {
        let d = self.beta.ncols();
        let mut s = 0.0;
        for j in 0..d {
            let v: f64 = x.iter().enumerate().map(|(i, &xi)| self.beta[(i, j)] * xi).sum();
            s += v * v;
        }
        s.sqrt()
    }

    pub fn logit_at(&self, x: &[f64]) -> f64 {
        self.alpha0 + x.iter().zip(self.alpha.iter()).map(|(a, b)| a * b).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub clusters: Vec<ClusterParams>,
}

impl ModelParams {
    pub fn new(clusters: Vec<ClusterParams>) -> Result<Self> {
        let m = ModelParams { clusters };
        m.validate()?;
        Ok(m)
    }

    pub fn k(&self) -> usize {
        self.clusters.len()
    }

    pub fn p(&self) -> usize {
        self.clusters.first().map_or(0, |c| c.alpha.len())
    }

    pub fn d(&self) -> usize {
        self.clusters.first().map_or(0, |c| c.beta0.len())
    }

    /// Shape consistency, finiteness, and positive definiteness of every `Sigma_k`.
    pub fn validate(&self) -> Result<()> {
        if self.clusters.is_empty() {
            return Err(Error::invalid("model needs at least one cluster"));
        }
        let (p, d) = (self.p(), self.d());
        for (k, c) in self.clusters.iter().enumerate() {
            if c.alpha.len() != p
                || c.beta0.len() != d
                || c.beta.shape() != (p, d)
                || c.sigma.shape() != (d, d)
            {
                return Err(Error::dim(format!("cluster {k} has inconsistent shapes")));
            }
            let finite = c.alpha0.is_finite()
                && c.alpha.iter().all(|v| v.is_finite())
                && c.beta0.iter().all(|v| v.is_finite())
                && c.beta.iter().all(|v| v.is_finite())
                && c.sigma.iter().all(|v| v.is_finite());
            if !finite {
                return Err(Error::NonFinite(format!("parameters of cluster {k}")));
            }
            let asym = (0..d)
                .flat_map(|i| (0..d).map(move |j| (i, j)))
                .map(|(i, j)| (c.sigma[(i, j)] - c.sigma[(j, i)]).abs())
                .fold(0.0, f64::max);
            let scale = c.sigma.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if asym > 1e-10 * scale.max(1e-300) {
                return Err(Error::NotPositiveDefinite { cluster: k });
            }
            GaussianFactor::new(&c.sigma, k)?;
        }
        Ok(())
    }

    /// `sum_k ||alpha_k||_1`, intercepts excluded.
    pub fn alpha_l1(&self) -> f64 {
        self.clusters
            .iter()
            .map(|c| c.alpha.iter().map(|v| v.abs()).sum::<f64>())
            .sum()
    }

    /// `sum_k ||beta_k||_1`, intercepts excluded.
    pub fn beta_l1(&self) -> f64 {
        self.clusters
            .iter()
            .map(|c| c.beta.iter().map(|v| v.abs()).sum::<f64>())
            .sum()
    }

    /// Largest `||beta_k^T x_t||_2` over clusters and time points.
    pub fn max_deviation(&self, x: &CovariateSeries) -> f64 {
        let mut m = 0.0f64;
        for t in 0..x.len() {
            let row = x.row(t);
            for c in &self.clusters {
                m = m.max(c.deviation_at(&row));
            }
        }
        m
    }

    pub fn is_feasible(&self, x: &CovariateSeries, radius: f64) -> bool {
        self.max_deviation(x) <= radius * (1.0 + CONSTRAINT_TOL)
    }
}

/// Regularization strengths and the ball radius.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparams {
    pub lambda_alpha: f64,
    pub lambda_beta: f64,
    pub radius: f64,
}

impl Hyperparams {
    pub fn new(lambda_alpha: f64, lambda_beta: f64, radius: f64) -> Result<Self> {
        if !(lambda_alpha >= 0.0) || !(lambda_beta >= 0.0) {
            return Err(Error::invalid("regularization strengths must be nonnegative"));
        }
        if !(radius > 0.0) {
            return Err(Error::invalid("radius must be positive"));
        }
        Ok(Hyperparams {
            lambda_alpha,
            lambda_beta,
            radius,
        })
    }
}

/// Cholesky factor of a covariance, reusable across many density evaluations.
#[derive(Debug, Clone)]
pub struct GaussianFactor {
    /// Lower-triangular `L` with `Sigma = L L^T`, row-major.
    lower: Vec<f64>,
    d: usize,
    log_norm: f64,
}

impl GaussianFactor {
    pub fn new(sigma: &DMatrix<f64>, cluster: usize) -> Result<Self> {
        let d = sigma.nrows();
        let chol = sigma
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite { cluster })?;
        let l = chol.l();
        let log_det: f64 = 2.0 * (0..d).map(|i| l[(i, i)].ln()).sum::<f64>();
        if !log_det.is_finite() {
            return Err(Error::NotPositiveDefinite { cluster });
        }
        let mut lower = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                lower[i * d + j] = l[(i, j)];
            }
        }
        Ok(GaussianFactor {
            lower,
            d,
            log_norm: -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det),
        })
    }

    /// `log N(y; mu, Sigma)`. `scratch` must hold at least `d` entries.
    pub fn log_density_with(&self, y: &[f64], mu: &[f64], scratch: &mut [f64]) -> f64 {
        let d = self.d;
        let mut q = 0.0;
        for i in 0..d {
            let mut s = y[i] - mu[i];
            for j in 0..i {
                s -= self.lower[i * d + j] * scratch[j];
            }
            let z = s / self.lower[i * d + i];
            scratch[i] = z;
            q += z * z;
        }
        self.log_norm - 0.5 * q
    }

    pub fn log_density(&self, y: &[f64], mu: &[f64]) -> f64 {
        let mut scratch = vec![0.0; self.d];
        self.log_density_with(y, mu, &mut scratch)
    }
}

/// Mixing probabilities `pi_k(x)`, via a max-shifted softmax.
pub fn mixture_weights(params: &ModelParams, x: &[f64]) -> Vec<f64> {
    let logits: Vec<f64> = params.clusters.iter().map(|c| c.logit_at(x)).collect();
    let mut out = vec![0.0; logits.len()];
    softmax_into(&logits, &mut out);
    out
}

/// `log pi_k(x)`, computed without forming the probabilities.
pub fn log_mixture_weights(params: &ModelParams, x: &[f64]) -> Vec<f64> {
    let logits: Vec<f64> = params.clusters.iter().map(|c| c.logit_at(x)).collect();
    let lse = log_sum_exp(&logits);
    logits.into_iter().map(|l| l - lse).collect()
}

/// Row `k` is `beta0_k + beta_k^T x`.
pub fn cluster_means(params: &ModelParams, x: &[f64]) -> DMatrix<f64> {
    let (k, d) = (params.k(), params.d());
    let mut out = DMatrix::zeros(k, d);
    for (ci, c) in params.clusters.iter().enumerate() {
        let mu = c.mean_at(x);
        for j in 0..d {
            out[(ci, j)] = mu[j];
        }
    }
    out
}

pub fn gaussian_log_density(y: &[f64], mu: &[f64], sigma: &DMatrix<f64>) -> Result<f64> {
    Ok(GaussianFactor::new(sigma, 0)?.log_density(y, mu))
}

/// Per-time quantities shared by the likelihood and the E-step.
pub(crate) struct TimeTerms {
    pub log_pi: Vec<f64>,
    /// `K x d`, row-major.
    pub means: Vec<f64>,
}

pub(crate) fn time_terms(params: &ModelParams, x: &[f64]) -> TimeTerms {
    let d = params.d();
    let mut means = Vec::with_capacity(params.k() * d);
    for c in &params.clusters {
        means.extend(c.mean_at(x).iter());
    }
    TimeTerms {
        log_pi: log_mixture_weights(params, x),
        means,
    }
}

pub(crate) fn factors(params: &ModelParams) -> Result<Vec<GaussianFactor>> {
    params
        .clusters
        .iter()
        .enumerate()
        .map(|(k, c)| GaussianFactor::new(&c.sigma, k))
        .collect()
}

pub(crate) fn check_dims(params: &ModelParams, x: &CovariateSeries, y: &CytogramSeries) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::dim(format!(
            "{} covariate rows but {} cytograms",
            x.len(),
            y.len()
        )));
    }
    if params.p() != x.p() {
        return Err(Error::dim(format!(
            "model has p = {} but covariates have {} columns",
            params.p(),
            x.p()
        )));
    }
    if params.d() != y.dim() {
        return Err(Error::dim(format!(
            "model has d = {} but cytograms have d = {}",
            params.d(),
            y.dim()
        )));
    }
    Ok(())
}

/// Weighted log-likelihood contribution of one time point.
pub(crate) fn frame_log_likelihood(
    frame: &Frame,
    terms: &TimeTerms,
    factors: &[GaussianFactor],
) -> f64 {
    let k = factors.len();
    let d = frame.dim();
    let mut comp = vec![0.0; k];
    let mut scratch = vec![0.0; d];
    let mut total = 0.0;
    for (y, w) in frame.iter() {
        for (ci, f) in factors.iter().enumerate() {
            comp[ci] = terms.log_pi[ci]
                + f.log_density_with(y, &terms.means[ci * d..(ci + 1) * d], &mut scratch);
        }
        total += w * log_sum_exp(&comp);
    }
    total
}

/// `sum_t sum_i C_i^t log sum_k pi_kt phi(y_i^t; mu_kt, Sigma_k)`.
pub fn weighted_log_likelihood(
    params: &ModelParams,
    x: &CovariateSeries,
    y: &CytogramSeries,
) -> Result<f64> {
    check_dims(params, x, y)?;
    let factors = factors(params)?;
    let per_time: Vec<f64> = (0..y.len())
        .into_par_iter()
        .map(|t| {
            let terms = time_terms(params, &x.row(t));
            frame_log_likelihood(y.frame(t), &terms, &factors)
        })
        .collect();
    Ok(per_time.iter().sum())
}

/// Turn a log-likelihood into the minimized objective: scaled NLL plus the
/// lasso penalties, or `+inf` outside the ball constraint.
pub fn objective_from_log_likelihood(
    log_lik: f64,
    total_weight: f64,
    params: &ModelParams,
    x: &CovariateSeries,
    hyper: &Hyperparams,
) -> f64 {
    if !params.is_feasible(x, hyper.radius) {
        return f64::INFINITY;
    }
    -log_lik / total_weight + hyper.lambda_alpha * params.alpha_l1() + hyper.lambda_beta * params.beta_l1()
}

pub fn penalized_objective(
    params: &ModelParams,
    x: &CovariateSeries,
    y: &CytogramSeries,
    hyper: &Hyperparams,
) -> Result<f64> {
    let ll = weighted_log_likelihood(params, x, y)?;
    Ok(objective_from_log_likelihood(ll, y.total_weight(), params, x, hyper))
}
