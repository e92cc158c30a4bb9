//! Penalized EM for the covariate-driven mixture.
//!
//! One iteration runs the E-step, then updates `alpha` (multinomial lasso by
//! proximal gradient), each cluster's `beta` (ADMM), and each `Sigma_k`
//! (closed form, eigenvalue floored). Every sub-step starts from and never
//! worsens the current iterate, so the penalized objective is non-increasing.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::admm::{solve_beta, AdmmConfig, AdmmState, BetaProblem};
use crate::error::{Error, Result};
use crate::math::{log_sum_exp, soft_threshold_scalar, SigmaFloor};
use crate::model::{
    check_dims, factors, objective_from_log_likelihood, time_terms,
    ClusterParams, CovariateSeries, CytogramSeries, Hyperparams, ModelParams,
};

/// Clusters whose responsibility mass drops below this fraction of `N` keep
/// their previous `beta` and `Sigma`.
pub const EMPTY_CLUSTER_FRACTION: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaSolverConfig {
    pub max_iter: usize,
    /// Stop once the relative objective decrease falls below this.
    pub tol: f64,
    /// FISTA momentum with a restart whenever the objective would increase.
    pub accelerated: bool,
}

impl Default for AlphaSolverConfig {
    fn default() -> Self {
        AlphaSolverConfig {
            max_iter: 500,
            tol: 1e-10,
            accelerated: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmConfig {
    pub max_iter: usize,
    pub rel_tol: f64,
    pub restarts: usize,
    pub seed: u64,
    pub admm: AdmmConfig,
    pub alpha: AlphaSolverConfig,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iter: 500,
            rel_tol: 1e-6,
            restarts: 5,
            seed: 0,
            admm: AdmmConfig::default(),
            alpha: AlphaSolverConfig::default(),
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::invalid("EM max_iter must be at least 1"));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::invalid("EM rel_tol must be positive"));
        }
        if self.restarts == 0 {
            return Err(Error::invalid("at least one restart is required"));
        }
        self.admm.validate()
    }
}

/// `gamma_itk`, stored per time point as an `n_t x K` row-major block.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponsibilityMatrix {
    k: usize,
    frames: Vec<Vec<f64>>,
}

impl ResponsibilityMatrix {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.frames[t]
    }

    pub fn frames(&self) -> &[Vec<f64>] {
        &self.frames
    }

    pub fn row(&self, t: usize, i: usize) -> &[f64] {
        &self.frames[t][i * self.k..(i + 1) * self.k]
    }

    /// `gamma_tk = sum_i C_i gamma_itk`, a `T x K` matrix.
    pub fn weighted_totals(&self, y: &CytogramSeries) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.len(), self.k);
        for t in 0..self.len() {
            let f = y.frame(t);
            for i in 0..f.len() {
                let w = f.weight(i);
                for (k, &r) in self.row(t, i).iter().enumerate() {
                    g[(t, k)] += w * r;
                }
            }
        }
        g
    }

    /// `weights[t][i] = C_i gamma_itk` for one cluster.
    pub fn cluster_weights(&self, y: &CytogramSeries, k: usize) -> Vec<Vec<f64>> {
        (0..self.len())
            .map(|t| {
                let f = y.frame(t);
                (0..f.len()).map(|i| f.weight(i) * self.row(t, i)[k]).collect()
            })
            .collect()
    }
}

/// E-step returning the responsibilities and the weighted log-likelihood of
/// `params` as a by-product.
pub fn e_step_with_log_likelihood(
    params: &ModelParams,
    x: &CovariateSeries,
    y: &CytogramSeries,
) -> Result<(ResponsibilityMatrix, f64)> {
    check_dims(params, x, y)?;
    params.validate()?;
    let fac = factors(params)?;
    let k = params.k();
    let d = y.dim();
    let per_time: Vec<(Vec<f64>, f64)> = (0..y.len())
        .into_par_iter()
        .map(|t| {
            let terms = time_terms(params, &x.row(t));
            let frame = y.frame(t);
            let mut out = vec![0.0; frame.len() * k];
            let mut scratch = vec![0.0; d];
            let mut ll = 0.0;
            for (i, (yi, w)) in frame.iter().enumerate() {
                let row = &mut out[i * k..(i + 1) * k];
                for (ci, f) in fac.iter().enumerate() {
                    row[ci] = terms.log_pi[ci]
                        + f.log_density_with(yi, &terms.means[ci * d..(ci + 1) * d], &mut scratch);
                }
                let lse = log_sum_exp(row);
                for v in row.iter_mut() {
                    *v = (*v - lse).exp();
                }
                ll += w * lse;
            }
            (out, ll)
        })
        .collect();
    let mut ll = 0.0;
    let mut frames = Vec::with_capacity(per_time.len());
    for (f, l) in per_time {
        ll += l;
        frames.push(f);
    }
    if !ll.is_finite() {
        return Err(Error::NonFinite("log-likelihood in E-step".into()));
    }
    Ok((ResponsibilityMatrix { k, frames }, ll))
}

pub fn e_step(params: &ModelParams, x: &CovariateSeries, y: &CytogramSeries) -> Result<ResponsibilityMatrix> {
    e_step_with_log_likelihood(params, x, y).map(|r| r.0)
}

/// The multinomial lasso solved in the `alpha` update.
///
/// Coefficients are a `K x (p+1)` matrix whose row `k` is `(alpha0_k, alpha_k)`.
/// The last row is pinned at zero (reference category).
#[derive(Debug, Clone)]
pub struct AlphaProblem {
    /// `T x (p+1)`, leading column of ones.
    design: DMatrix<f64>,
    /// `T x K`, `gamma_tk`.
    gammas: DMatrix<f64>,
    /// `n_t = sum_k gamma_tk`.
    totals: Vec<f64>,
    total_weight: f64,
    lambda: f64,
}

impl AlphaProblem {
    pub fn new(gammas: DMatrix<f64>, x: &CovariateSeries, total_weight: f64, lambda: f64) -> Result<Self> {
        if gammas.nrows() != x.len() {
            return Err(Error::dim("responsibility totals and covariates disagree on T"));
        }
        let p = x.p();
        let design = DMatrix::from_fn(x.len(), p + 1, |t, j| if j == 0 { 1.0 } else { x.values()[(t, j - 1)] });
        let totals = (0..gammas.nrows()).map(|t| gammas.row(t).sum()).collect();
        Ok(AlphaProblem {
            design,
            gammas,
            totals,
            total_weight,
            lambda,
        })
    }

    pub fn k(&self) -> usize {
        self.gammas.ncols()
    }

    pub fn p(&self) -> usize {
        self.design.ncols() - 1
    }

    /// `(1/N) sum_t [ n_t log sum_l exp(eta_tl) - sum_k gamma_tk eta_tk ]`.
    pub fn smooth_loss(&self, coef: &DMatrix<f64>) -> f64 {
        let eta = &self.design * coef.transpose();
        let mut total = 0.0;
        for t in 0..eta.nrows() {
            let row: Vec<f64> = eta.row(t).iter().copied().collect();
            let lse = log_sum_exp(&row);
            total += self.totals[t] * lse;
            for k in 0..row.len() {
                total -= self.gammas[(t, k)] * row[k];
            }
        }
        total / self.total_weight
    }

    /// Gradient of [`Self::smooth_loss`], `(1/N) sum_t (n_t pi_tk - gamma_tk) (1, x_t)`.
    pub fn smooth_gradient(&self, coef: &DMatrix<f64>) -> DMatrix<f64> {
        self.loss_and_gradient(coef).1
    }

    fn loss_and_gradient(&self, coef: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
        let eta = &self.design * coef.transpose();
        let (t_len, k) = (eta.nrows(), self.k());
        let mut resid = DMatrix::zeros(t_len, k);
        let mut total = 0.0;
        let mut row = vec![0.0; k];
        for t in 0..t_len {
            for c in 0..k {
                row[c] = eta[(t, c)];
            }
            let lse = log_sum_exp(&row);
            total += self.totals[t] * lse;
            for c in 0..k {
                total -= self.gammas[(t, c)] * row[c];
                resid[(t, c)] = self.totals[t] * (row[c] - lse).exp() - self.gammas[(t, c)];
            }
        }
        let grad = resid.tr_mul(&self.design) / self.total_weight;
        (total / self.total_weight, grad)
    }

    pub fn penalty(&self, coef: &DMatrix<f64>) -> f64 {
        let mut s = 0.0;
        for k in 0..coef.nrows() {
            for j in 1..coef.ncols() {
                s += coef[(k, j)].abs();
            }
        }
        self.lambda * s
    }

    pub fn objective(&self, coef: &DMatrix<f64>) -> f64 {
        self.smooth_loss(coef) + self.penalty(coef)
    }

    fn prox(&self, v: &DMatrix<f64>, step: f64) -> DMatrix<f64> {
        let k = v.nrows();
        let mut out = v.clone();
        for c in 0..k {
            for j in 0..v.ncols() {
                out[(c, j)] = if c == k - 1 {
                    0.0
                } else if j == 0 {
                    v[(c, j)]
                } else {
                    soft_threshold_scalar(v[(c, j)], self.lambda * step)
                };
            }
        }
        out
    }

    fn lipschitz_bound(&self) -> f64 {
        let s: f64 = (0..self.design.nrows())
            .map(|t| self.totals[t] * self.design.row(t).norm_squared())
            .sum();
        0.5 * s / self.total_weight
    }

    /// Proximal gradient with backtracking, started from `start`. Returns the
    /// solution and the number of iterations used.
    pub fn solve(&self, start: &DMatrix<f64>, config: &AlphaSolverConfig) -> Result<(DMatrix<f64>, usize)> {
        let k = self.k();
        let mut x = start.clone();
        // Re-express relative to the reference row; the likelihood is unchanged.
        if k > 0 {
            let last = x.row(k - 1).clone_owned();
            for c in 0..k {
                for j in 0..x.ncols() {
                    x[(c, j)] -= last[j];
                }
            }
        }
        if k <= 1 {
            return Ok((x, 0));
        }
        let mut f_obj = self.objective(&x);
        if !f_obj.is_finite() {
            return Err(Error::AlphaSolver { iteration: 0 });
        }
        let l_max = self.lipschitz_bound().max(1e-300);
        let mut lip = l_max / 16.0;
        let mut momentum_point = x.clone();
        let mut theta = 1.0f64;
        let mut iterations = 0;
        for it in 1..=config.max_iter {
            iterations = it;
            let base = if config.accelerated { momentum_point.clone() } else { x.clone() };
            let (f_base, grad) = self.loss_and_gradient(&base);
            if !f_base.is_finite() {
                return Err(Error::AlphaSolver { iteration: it });
            }
            let mut candidate;
            let mut f_cand;
            loop {
                candidate = self.prox(&(&base - &grad / lip), 1.0 / lip);
                f_cand = self.smooth_loss(&candidate);
                let diff = &candidate - &base;
                let model = f_base + grad.dot(&diff) + 0.5 * lip * diff.norm_squared();
                if f_cand <= model + 1e-15 * f_base.abs() || lip >= l_max * 1e6 {
                    break;
                }
                lip *= 2.0;
            }
            let new_obj = f_cand + self.penalty(&candidate);
            if !new_obj.is_finite() {
                return Err(Error::AlphaSolver { iteration: it });
            }
            if new_obj > f_obj {
                if config.accelerated && theta > 1.0 {
                    // Momentum overshot; restart from the current iterate.
                    momentum_point = x.clone();
                    theta = 1.0;
                    continue;
                }
                break;
            }
            let decrease = f_obj - new_obj;
            if config.accelerated {
                let theta_next = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
                momentum_point = &candidate + (&candidate - &x) * ((theta - 1.0) / theta_next);
                theta = theta_next;
            }
            x = candidate;
            f_obj = new_obj;
            if decrease <= config.tol * f_obj.abs().max(1.0) {
                break;
            }
            lip = (lip * 0.8).max(l_max * 1e-8);
        }
        Ok((x, iterations))
    }
}

pub(crate) fn alpha_matrix(params: &ModelParams) -> DMatrix<f64> {
    let (k, p) = (params.k(), params.p());
    DMatrix::from_fn(k, p + 1, |c, j| {
        let cl = &params.clusters[c];
        if j == 0 {
            cl.alpha0
        } else {
            cl.alpha[j - 1]
        }
    })
}

/// The `alpha` update: returns `(alpha0_k, alpha_k)` for every cluster.
pub fn m_step_alpha(
    resp: &ResponsibilityMatrix,
    x: &CovariateSeries,
    y: &CytogramSeries,
    lambda_alpha: f64,
    current: &ModelParams,
    config: &AlphaSolverConfig,
) -> Result<Vec<(f64, DVector<f64>)>> {
    let problem = AlphaProblem::new(resp.weighted_totals(y), x, y.total_weight(), lambda_alpha)?;
    let (coef, _) = problem.solve(&alpha_matrix(current), config)?;
    Ok((0..coef.nrows())
        .map(|c| {
            (
                coef[(c, 0)],
                DVector::from_fn(coef.ncols() - 1, |j, _| coef[(c, j + 1)]),
            )
        })
        .collect())
}

/// The `Sigma` update. Clusters with negligible mass keep `current`; their
/// indices are returned alongside.
pub fn m_step_sigma(
    resp: &ResponsibilityMatrix,
    x: &CovariateSeries,
    y: &CytogramSeries,
    params: &ModelParams,
    floor: &SigmaFloor,
) -> (Vec<DMatrix<f64>>, Vec<usize>) {
    let d = y.dim();
    let n = y.total_weight();
    let results: Vec<(DMatrix<f64>, bool)> = (0..params.k())
        .into_par_iter()
        .map(|k| {
            let c = &params.clusters[k];
            let mut s = DMatrix::zeros(d, d);
            let mut mass = 0.0;
            let mut r = vec![0.0; d];
            for t in 0..y.len() {
                let mu = c.mean_at(&x.row(t));
                let f = y.frame(t);
                for (i, (yi, w)) in f.iter().enumerate() {
                    let g = w * resp.row(t, i)[k];
                    if g == 0.0 {
                        continue;
                    }
                    mass += g;
                    for a in 0..d {
                        r[a] = yi[a] - mu[a];
                    }
                    for a in 0..d {
                        for b in 0..=a {
                            s[(a, b)] += g * r[a] * r[b];
                        }
                    }
                }
            }
            if !(mass >= EMPTY_CLUSTER_FRACTION * n) {
                return (c.sigma.clone(), true);
            }
            for a in 0..d {
                for b in 0..a {
                    s[(b, a)] = s[(a, b)];
                }
            }
            (floor.apply(&(s / mass)), false)
        })
        .collect();
    let frozen = results
        .iter()
        .enumerate()
        .filter(|(_, r)| r.1)
        .map(|(k, _)| k)
        .collect();
    (results.into_iter().map(|r| r.0).collect(), frozen)
}

/// The minimized EM surrogate: `-(1/N) sum C gamma log(pi phi)` plus the lasso
/// penalties, `+inf` outside the ball constraint.
pub fn q_function(
    params: &ModelParams,
    resp: &ResponsibilityMatrix,
    x: &CovariateSeries,
    y: &CytogramSeries,
    hyper: &Hyperparams,
) -> Result<f64> {
    check_dims(params, x, y)?;
    let fac = factors(params)?;
    let d = y.dim();
    let per_time: Vec<f64> = (0..y.len())
        .into_par_iter()
        .map(|t| {
            let terms = time_terms(params, &x.row(t));
            let mut scratch = vec![0.0; d];
            let mut s = 0.0;
            for (i, (yi, w)) in y.frame(t).iter().enumerate() {
                for (k, f) in fac.iter().enumerate() {
                    let g = resp.row(t, i)[k];
                    if g == 0.0 {
                        continue;
                    }
                    let lp = terms.log_pi[k]
                        + f.log_density_with(yi, &terms.means[k * d..(k + 1) * d], &mut scratch);
                    s += w * g * lp;
                }
            }
            s
        })
        .collect();
    let surrogate: f64 = per_time.iter().sum();
    Ok(objective_from_log_likelihood(surrogate, y.total_weight(), params, x, hyper))
}

/// Random initialization: `K` distinct particles drawn with probability
/// proportional to multiplicity as intercepts, zero slopes and `alpha`, and
/// diagonal covariances with entries `range_j / K`.
pub fn init_params(
    x: &CovariateSeries,
    y: &CytogramSeries,
    k: usize,
    seed: u64,
    floor: &SigmaFloor,
) -> Result<ModelParams> {
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    let d = y.dim();
    let p = x.p();
    let mut points: Vec<&[f64]> = Vec::with_capacity(y.particle_count());
    let mut weights: Vec<f64> = Vec::with_capacity(y.particle_count());
    for f in y.frames() {
        for (yi, w) in f.iter() {
            points.push(yi);
            weights.push(w);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<Vec<f64>> = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::invalid(format!(
                "need at least {k} distinct particles, found {}",
                chosen.len()
            )));
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = weights.iter().rposition(|&w| w > 0.0).unwrap_or(0);
        for (i, &w) in weights.iter().enumerate() {
            acc += w;
            if w > 0.0 && acc > target {
                pick = i;
                break;
            }
        }
        let point = points[pick].to_vec();
        for (i, pt) in points.iter().enumerate() {
            if weights[i] > 0.0 && *pt == point.as_slice() {
                weights[i] = 0.0;
            }
        }
        chosen.push(point);
    }
    let ranges = y.axis_ranges();
    let sigma0 = floor.apply(&DMatrix::from_diagonal(&DVector::from_fn(d, |j, _| {
        ranges[j] / k as f64
    })));
    let clusters = chosen
        .into_iter()
        .map(|pt| ClusterParams {
            alpha0: 0.0,
            alpha: DVector::zeros(p),
            beta0: DVector::from_vec(pt),
            beta: DMatrix::zeros(p, d),
            sigma: sigma0.clone(),
        })
        .collect();
    ModelParams::new(clusters)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FitDiagnostics {
    /// ADMM solves that hit `max_iter`.
    pub admm_unconverged: usize,
    /// Total ADMM iterations over the run.
    pub admm_iterations: usize,
    /// Cluster-iterations where `beta` and `Sigma` were frozen.
    pub empty_cluster_events: usize,
    /// Cluster-iterations where the ADMM candidate was rejected for not
    /// improving the surrogate.
    pub beta_steps_rejected: usize,
}

/// Output of a single EM run from one initialization.
#[derive(Debug, Clone)]
pub struct EmRun {
    pub params: ModelParams,
    pub responsibilities: ResponsibilityMatrix,
    pub initial_objective: f64,
    pub objective_trace: Vec<f64>,
    pub objective: f64,
    pub converged: bool,
    pub diagnostics: FitDiagnostics,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    pub responsibilities: ResponsibilityMatrix,
    pub objective_trace: Vec<f64>,
    pub objective: f64,
    pub converged: bool,
    pub winner: usize,
    /// Final objective of each restart; `+inf` for runs that failed.
    pub restart_objectives: Vec<f64>,
    pub diagnostics: FitDiagnostics,
    pub seed: u64,
}

/// Monotonicity slack `1e-7 (1 + |f|)`.
pub fn monotonicity_tol(objective: f64) -> f64 {
    1e-7 * (1.0 + objective.abs())
}

/// Run EM from the given starting parameters.
pub fn run_em(
    x: &CovariateSeries,
    y: &CytogramSeries,
    start: ModelParams,
    hyper: &Hyperparams,
    config: &EmConfig,
    floor: &SigmaFloor,
) -> Result<EmRun> {
    config.validate()?;
    check_dims(&start, x, y)?;
    let n = y.total_weight();
    let k = start.k();
    let mut params = start;
    let (mut resp, ll) = e_step_with_log_likelihood(&params, x, y)?;
    let initial_objective = objective_from_log_likelihood(ll, n, &params, x, hyper);
    if !initial_objective.is_finite() {
        return Err(Error::NonFinite("initial objective (is the start feasible?)".into()));
    }
    let mut objective = initial_objective;
    let mut trace = Vec::new();
    let mut diagnostics = FitDiagnostics::default();
    let mut warm: Vec<Option<AdmmState>> = vec![None; k];
    let mut converged = false;

    for _ in 0..config.max_iter {
        let mut next = params.clone();

        let alphas = m_step_alpha(&resp, x, y, hyper.lambda_alpha, &params, &config.alpha)?;
        for (c, (a0, a)) in next.clusters.iter_mut().zip(alphas) {
            c.alpha0 = a0;
            c.alpha = a;
        }

        let steps: Vec<Result<BetaStep>> = (0..k)
            .into_par_iter()
            .map(|c| beta_step(c, &params.clusters[c], &resp, x, y, hyper, config, warm[c].clone()))
            .collect();
        for (c, step) in steps.into_iter().enumerate() {
            let step = step?;
            match step {
                BetaStep::Frozen => diagnostics.empty_cluster_events += 1,
                BetaStep::Updated {
                    beta0,
                    beta,
                    state,
                    converged,
                    iterations,
                    rejected,
                } => {
                    diagnostics.admm_iterations += iterations;
                    next.clusters[c].beta0 = beta0;
                    next.clusters[c].beta = beta;
                    warm[c] = Some(state);
                    if !converged {
                        diagnostics.admm_unconverged += 1;
                    }
                    if rejected {
                        diagnostics.beta_steps_rejected += 1;
                    }
                }
            }
        }

        let (sigmas, _) = m_step_sigma(&resp, x, y, &next, floor);
        for (c, s) in next.clusters.iter_mut().zip(sigmas) {
            c.sigma = s;
        }

        let (new_resp, new_ll) = e_step_with_log_likelihood(&next, x, y)?;
        let new_obj = objective_from_log_likelihood(new_ll, n, &next, x, hyper);
        if !new_obj.is_finite() {
            return Err(Error::NonFinite("penalized objective during EM".into()));
        }
        if new_obj > objective + monotonicity_tol(objective) {
            log::debug!("EM objective increased from {objective} to {new_obj}");
        }
        trace.push(new_obj);
        let rel = (objective - new_obj) / objective.abs().max(f64::MIN_POSITIVE);
        params = next;
        resp = new_resp;
        objective = new_obj;
        if rel < config.rel_tol {
            converged = true;
            break;
        }
    }
    if diagnostics.empty_cluster_events > 0 {
        log::warn!(
            "{} cluster updates skipped for negligible responsibility mass",
            diagnostics.empty_cluster_events
        );
    }
    if diagnostics.admm_unconverged > 0 {
        log::warn!("{} ADMM solves hit max_iter", diagnostics.admm_unconverged);
    }
    Ok(EmRun {
        params,
        responsibilities: resp,
        initial_objective,
        objective_trace: trace,
        objective,
        converged,
        diagnostics,
    })
}

enum BetaStep {
    Frozen,
    Updated {
        beta0: DVector<f64>,
        beta: DMatrix<f64>,
        state: AdmmState,
        converged: bool,
        iterations: usize,
        rejected: bool,
    },
}

#[allow(clippy::too_many_arguments)]
fn beta_step(
    cluster: usize,
    current: &ClusterParams,
    resp: &ResponsibilityMatrix,
    x: &CovariateSeries,
    y: &CytogramSeries,
    hyper: &Hyperparams,
    config: &EmConfig,
    warm: Option<AdmmState>,
) -> Result<BetaStep> {
    let n = y.total_weight();
    let weights = resp.cluster_weights(y, cluster);
    let mass: f64 = weights.iter().flatten().sum();
    if !(mass >= EMPTY_CLUSTER_FRACTION * n) {
        return Ok(BetaStep::Frozen);
    }
    let problem = BetaProblem::new(
        cluster,
        x,
        y,
        &weights,
        &current.sigma,
        n,
        hyper.lambda_beta,
        hyper.radius,
    )?;
    let sol = match solve_beta(&problem, &config.admm, warm) {
        Ok(sol) => sol,
        // Near-empty clusters can make the least-squares system numerically
        // singular; keep the current slopes rather than failing the fit.
        Err(Error::RankDeficient { .. }) => return Ok(BetaStep::Frozen),
        Err(e) => return Err(e),
    };
    let tol = crate::model::CONSTRAINT_TOL;
    let cand = problem.objective(&sol.beta0, &sol.beta, tol);
    let kept_b0 = problem.optimal_intercept(&current.beta);
    let kept = problem.objective(&kept_b0, &current.beta, tol);
    let (beta0, beta, rejected) = if cand <= kept {
        (sol.beta0, sol.beta, false)
    } else {
        (kept_b0, current.beta.clone(), true)
    };
    Ok(BetaStep::Updated {
        beta0,
        beta,
        state: sol.state,
        converged: sol.converged,
        iterations: sol.iterations,
        rejected,
    })
}

/// Full fit: `config.restarts` independent runs with seeds `seed + r`, keeping
/// the one with the lowest final penalized objective.
pub fn fit_em(
    x: &CovariateSeries,
    y: &CytogramSeries,
    k: usize,
    hyper: &Hyperparams,
    config: &EmConfig,
) -> Result<FitResult> {
    config.validate()?;
    if x.len() != y.len() {
        return Err(Error::dim(format!("{} covariate rows but {} cytograms", x.len(), y.len())));
    }
    let floor = SigmaFloor::from_ranges(&y.axis_ranges());
    let runs: Vec<Result<EmRun>> = (0..config.restarts)
        .into_par_iter()
        .map(|r| {
            let seed = config.seed.wrapping_add(r as u64);
            let start = init_params(x, y, k, seed, &floor)?;
            run_em(x, y, start, hyper, config, &floor)
        })
        .collect();
    let mut best: Option<(usize, EmRun)> = None;
    let mut objectives = Vec::with_capacity(runs.len());
    let mut failures = Vec::new();
    for (r, run) in runs.into_iter().enumerate() {
        match run {
            Ok(run) => {
                objectives.push(run.objective);
                let better = best.as_ref().is_none_or(|(_, b)| run.objective < b.objective);
                if better {
                    best = Some((r, run));
                }
            }
            Err(e) => {
                if matches!(e, Error::InvalidInput(_) | Error::Dimension(_)) {
                    return Err(e);
                }
                objectives.push(f64::INFINITY);
                failures.push(format!("restart {r}: {e}"));
            }
        }
    }
    let (winner, run) = best.ok_or_else(|| Error::AllRestartsDiverged {
        restarts: config.restarts,
        diagnostics: failures.join("; "),
    })?;
    Ok(FitResult {
        params: run.params,
        responsibilities: run.responsibilities,
        objective_trace: run.objective_trace,
        objective: run.objective,
        converged: run.converged,
        winner,
        restart_objectives: objectives,
        diagnostics: run.diagnostics,
        seed: config.seed,
    })
}
