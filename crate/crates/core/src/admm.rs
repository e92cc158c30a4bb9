//! ADMM for the per-cluster coefficient update: a responsibility-weighted,
//! `Sigma^{-1}`-metric least squares with a lasso penalty on the slopes and a
//! ball constraint `||beta^T x_t||_2 <= r` at every time point.
//!
//! The split introduces `Z` (one row per time, constrained to the ball) and
//! `w` (a sparse copy of `beta`). Each iteration solves one stacked least
//! squares problem for `b = vec([beta0^T; beta])`, projects rows of `Z` onto
//! the ball, soft-thresholds `w`, and takes a dual ascent step.
//!
//! `b` is the column-major vectorization of the `(p+1) x d` matrix
//! `[beta0^T; beta]`: entry `(i, j)` sits at `j * (p + 1) + i`, so the
//! intercepts occupy indices `0, p+1, 2(p+1), ...`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::math::soft_threshold_scalar;
use crate::model::{CovariateSeries, CytogramSeries};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmmConfig {
    pub rho: f64,
    pub max_iter: usize,
    pub eps_rel: f64,
    /// Absolute floor on both residual thresholds, per square-rooted
    /// dimension. Without it the primal threshold vanishes whenever the
    /// solution is exactly zero.
    pub eps_abs: f64,
    /// Double or halve `rho` when the primal and dual residuals are more than
    /// ten times apart.
    pub adaptive_rho: bool,
    /// Iteration after which `rho` is held fixed. An adaptive `rho` that
    /// never settles can cycle instead of converging.
    pub adapt_until: usize,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        AdmmConfig {
            rho: 1.0,
            max_iter: 1000,
            eps_rel: 1e-3,
            eps_abs: 1e-6,
            adaptive_rho: true,
            adapt_until: 100,
        }
    }
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0) {
            return Err(Error::invalid("ADMM rho must be positive"));
        }
        if !(self.eps_rel > 0.0) {
            return Err(Error::invalid("ADMM eps_rel must be positive"));
        }
        if !(self.eps_abs >= 0.0) {
            return Err(Error::invalid("ADMM eps_abs must be nonnegative"));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("ADMM max_iter must be at least 1"));
        }
        Ok(())
    }
}

/// Sufficient statistics of the coefficient subproblem for one cluster.
#[derive(Debug, Clone)]
pub struct BetaProblem {
    cluster: usize,
    x: DMatrix<f64>,
    /// `gamma_t = sum_i C_i gamma_itk`.
    weight_sums: Vec<f64>,
    /// Rows `sum_i C_i gamma_itk y_i`, `T x d`.
    weighted_sums: DMatrix<f64>,
    /// `sum_ti C_i gamma_itk y_i^T Sigma^{-1} y_i`.
    quad_const: f64,
    sigma_inv: DMatrix<f64>,
    /// Lower Cholesky factor of `Sigma^{-1}`.
    root: DMatrix<f64>,
    total_weight: f64,
    lambda: f64,
    radius: f64,
}

impl BetaProblem {
    /// `weights[t][i]` is `C_i^t * gamma_itk` for this cluster.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cluster: usize,
        x: &CovariateSeries,
        y: &CytogramSeries,
        weights: &[Vec<f64>],
        sigma: &DMatrix<f64>,
        total_weight: f64,
        lambda: f64,
        radius: f64,
    ) -> Result<Self> {
        let (t_len, d) = (x.len(), y.dim());
        if y.len() != t_len || weights.len() != t_len || sigma.shape() != (d, d) {
            return Err(Error::dim("beta subproblem inputs disagree in shape"));
        }
        let chol = sigma
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite { cluster })?;
        let sigma_inv = chol.inverse();
        let root = sigma_inv
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite { cluster })?
            .l();
        let mut weight_sums = vec![0.0; t_len];
        let mut weighted_sums = DMatrix::zeros(t_len, d);
        let mut quad_const = 0.0;
        for t in 0..t_len {
            let frame = y.frame(t);
            if weights[t].len() != frame.len() {
                return Err(Error::dim(format!("time {t}: weight count mismatch")));
            }
            for (i, (yi, _)) in frame.iter().enumerate() {
                let g = weights[t][i];
                weight_sums[t] += g;
                for j in 0..d {
                    weighted_sums[(t, j)] += g * yi[j];
                }
                let mut q = 0.0;
                for a in 0..d {
                    for b in 0..d {
                        q += yi[a] * sigma_inv[(a, b)] * yi[b];
                    }
                }
                quad_const += g * q;
            }
        }
        Ok(BetaProblem {
            cluster,
            x: x.values().clone(),
            weight_sums,
            weighted_sums,
            quad_const,
            sigma_inv,
            root,
            total_weight,
            lambda,
            radius,
        })
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn d(&self) -> usize {
        self.sigma_inv.nrows()
    }

    pub fn t(&self) -> usize {
        self.x.nrows()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// The smooth part `(1/2N) sum C gamma (y - mu)^T Sigma^{-1} (y - mu)`.
    pub fn smooth_value(&self, beta0: &DVector<f64>, beta: &DMatrix<f64>) -> f64 {
        let (d, p) = (self.d(), self.p());
        let mut total = self.quad_const;
        let mut mu = vec![0.0; d];
        for t in 0..self.t() {
            for j in 0..d {
                mu[j] = beta0[j] + (0..p).map(|i| self.x[(t, i)] * beta[(i, j)]).sum::<f64>();
            }
            for a in 0..d {
                for b in 0..d {
                    let s = self.sigma_inv[(a, b)];
                    total += s * (self.weight_sums[t] * mu[a] * mu[b] - 2.0 * self.weighted_sums[(t, a)] * mu[b]);
                }
            }
        }
        total / (2.0 * self.total_weight)
    }

    /// Gradient of [`Self::smooth_value`] with respect to the slopes, `p x d`.
    pub fn smooth_gradient(&self, beta0: &DVector<f64>, beta: &DMatrix<f64>) -> DMatrix<f64> {
        let (d, p) = (self.d(), self.p());
        // Row t: gamma_t mu_t - sum_i C gamma y_i.
        let mut resid = DMatrix::zeros(self.t(), d);
        for t in 0..self.t() {
            for j in 0..d {
                let mu = beta0[j] + (0..p).map(|i| self.x[(t, i)] * beta[(i, j)]).sum::<f64>();
                resid[(t, j)] = self.weight_sums[t] * mu - self.weighted_sums[(t, j)];
            }
        }
        self.x.tr_mul(&resid) * &self.sigma_inv / self.total_weight
    }

    /// Smooth part plus `lambda ||beta||_1`; `+inf` when the ball constraint is
    /// violated beyond `tol` (relative).
    pub fn objective(&self, beta0: &DVector<f64>, beta: &DMatrix<f64>, tol: f64) -> f64 {
        if max_row_norm(&(&self.x * beta)) > self.radius * (1.0 + tol) {
            return f64::INFINITY;
        }
        self.smooth_value(beta0, beta) + self.lambda * beta.iter().map(|v| v.abs()).sum::<f64>()
    }

    /// Best intercept for fixed slopes: `sum_t (ytilde_t - gamma_t beta^T x_t) / sum_t gamma_t`.
    pub fn optimal_intercept(&self, beta: &DMatrix<f64>) -> DVector<f64> {
        let d = self.d();
        let xb = &self.x * beta;
        let total: f64 = self.weight_sums.iter().sum();
        DVector::from_fn(d, |j, _| {
            let s: f64 = (0..self.t())
                .map(|t| self.weighted_sums[(t, j)] - self.weight_sums[t] * xb[(t, j)])
                .sum();
            s / total
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    /// `vec([beta0^T; beta])`, length `(p+1) d`.
    pub b: DVector<f64>,
    /// `T x d`.
    pub z: DMatrix<f64>,
    /// `p x d`.
    pub w: DMatrix<f64>,
    /// `T x d`.
    pub u_z: DMatrix<f64>,
    /// `p x d`.
    pub u_w: DMatrix<f64>,
    pub rho: f64,
}

impl AdmmState {
    pub fn zeros(t: usize, p: usize, d: usize, rho: f64) -> Self {
        AdmmState {
            b: DVector::zeros((p + 1) * d),
            z: DMatrix::zeros(t, d),
            w: DMatrix::zeros(p, d),
            u_z: DMatrix::zeros(t, d),
            u_w: DMatrix::zeros(p, d),
            rho,
        }
    }

    fn matches(&self, t: usize, p: usize, d: usize) -> bool {
        self.b.len() == (p + 1) * d
            && self.z.shape() == (t, d)
            && self.w.shape() == (p, d)
            && self.u_z.shape() == (t, d)
            && self.u_w.shape() == (p, d)
            && self.rho > 0.0
            && self.rho.is_finite()
    }
}

/// Split `b` into the intercept and the `p x d` slope matrix.
pub fn unpack_b(b: &DVector<f64>, p: usize, d: usize) -> (DVector<f64>, DMatrix<f64>) {
    let beta0 = DVector::from_fn(d, |j, _| b[j * (p + 1)]);
    let beta = DMatrix::from_fn(p, d, |i, j| b[j * (p + 1) + 1 + i]);
    (beta0, beta)
}

pub fn pack_b(beta0: &DVector<f64>, beta: &DMatrix<f64>) -> DVector<f64> {
    let (p, d) = beta.shape();
    let mut b = DVector::zeros((p + 1) * d);
    for j in 0..d {
        b[j * (p + 1)] = beta0[j];
        for i in 0..p {
            b[j * (p + 1) + 1 + i] = beta[(i, j)];
        }
    }
    b
}

/// The constant design matrix `D` of the stacked least squares problem.
///
/// Row blocks, top to bottom:
/// 1. `dT` rows, index `j T + t`: `sqrt(1/2N) (R^T kron W^{1/2} X_a)`, with
///    `X_a = (1 X)` and `R R^T = Sigma^{-1}`;
/// 2. `pd` rows, index `j p + i`: `sqrt(rho/2) I^J`, the identity with the
///    intercept columns removed;
/// 3. `dT` rows, index `t d + j`: `sqrt(rho/2) X_0`, mapping `b` to `beta^T x_t`.
pub fn design_matrix(problem: &BetaProblem, rho: f64) -> DMatrix<f64> {
    let (t_len, p, d) = (problem.t(), problem.p(), problem.d());
    let cols = (p + 1) * d;
    let rows = d * (2 * t_len + p);
    let s1 = (1.0 / (2.0 * problem.total_weight)).sqrt();
    let s2 = (rho / 2.0).sqrt();
    let mut dm = DMatrix::zeros(rows, cols);
    for j in 0..d {
        for t in 0..t_len {
            let row = j * t_len + t;
            let sw = problem.weight_sums[t].max(0.0).sqrt();
            for m in 0..d {
                let r = problem.root[(m, j)];
                if r == 0.0 {
                    continue;
                }
                dm[(row, m * (p + 1))] = s1 * r * sw;
                for i in 0..p {
                    dm[(row, m * (p + 1) + 1 + i)] = s1 * r * sw * problem.x[(t, i)];
                }
            }
        }
    }
    let off2 = d * t_len;
    for j in 0..d {
        for i in 0..p {
            dm[(off2 + j * p + i, j * (p + 1) + 1 + i)] = s2;
        }
    }
    let off3 = off2 + p * d;
    for t in 0..t_len {
        for j in 0..d {
            for i in 0..p {
                dm[(off3 + t * d + j, j * (p + 1) + 1 + i)] = s2 * problem.x[(t, i)];
            }
        }
    }
    dm
}

/// The response `c` of the stacked least squares problem, in the row order of
/// [`design_matrix`].
pub fn response_vector(problem: &BetaProblem, state: &AdmmState, rho: f64) -> DVector<f64> {
    let (t_len, p, d) = (problem.t(), problem.p(), problem.d());
    let s1 = (1.0 / (2.0 * problem.total_weight)).sqrt();
    let s2 = (rho / 2.0).sqrt();
    let mut c = DVector::zeros(d * (2 * t_len + p));
    for t in 0..t_len {
        let g = problem.weight_sums[t];
        if !(g > 0.0) {
            continue;
        }
        let inv_sw = 1.0 / g.sqrt();
        for j in 0..d {
            let v: f64 = (0..d)
                .map(|m| problem.weighted_sums[(t, m)] * problem.root[(m, j)])
                .sum();
            c[j * t_len + t] = s1 * v * inv_sw;
        }
    }
    if rho == 0.0 {
        return c;
    }
    let off2 = d * t_len;
    for j in 0..d {
        for i in 0..p {
            c[off2 + j * p + i] = s2 * (state.w[(i, j)] - state.u_w[(i, j)] / rho);
        }
    }
    let off3 = off2 + p * d;
    for t in 0..t_len {
        for j in 0..d {
            c[off3 + t * d + j] = s2 * (state.z[(t, j)] - state.u_z[(t, j)] / rho);
        }
    }
    c
}

/// `(c, D)` with `||c - D b||^2` equal, up to a constant, to the part of the
/// augmented Lagrangian that depends on `b`.
pub fn assemble_least_squares(
    problem: &BetaProblem,
    state: &AdmmState,
    rho: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    (response_vector(problem, state, rho), design_matrix(problem, rho))
}

/// Row-wise projection onto the Euclidean ball of radius `r`.
pub fn project_ball(v: &DMatrix<f64>, r: f64) -> DMatrix<f64> {
    let mut out = v.clone();
    for t in 0..v.nrows() {
        let norm = v.row(t).norm();
        if norm > r {
            let s = r / norm;
            for j in 0..v.ncols() {
                out[(t, j)] *= s;
            }
        }
    }
    out
}

pub fn soft_threshold(a: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    a.map(|v| soft_threshold_scalar(v, t))
}

/// `U_z += rho (X beta - Z)`, `U_w += rho (beta - w)`.
pub fn dual_updates(state: &mut AdmmState, x: &DMatrix<f64>, beta: &DMatrix<f64>, rho: f64) {
    let xb = x * beta;
    state.u_z += (xb - &state.z) * rho;
    state.u_w += (beta - &state.w) * rho;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Convergence {
    pub primal: f64,
    pub dual: f64,
    pub eps_pri: f64,
    pub eps_dual: f64,
    pub converged: bool,
}

/// Primal residual `r = (beta - w; X beta - Z)`, dual residual
/// `s = -rho (dw + X^T dZ)`, and their thresholds
/// `sqrt(n) eps_abs + eps_rel * scale`.
pub fn convergence_check(
    state: &AdmmState,
    prev_z: &DMatrix<f64>,
    prev_w: &DMatrix<f64>,
    x: &DMatrix<f64>,
    beta: &DMatrix<f64>,
    rho: f64,
    eps_rel: f64,
    eps_abs: f64,
) -> Convergence {
    let xb = x * beta;
    let primal = ((beta - &state.w).norm_squared() + (&xb - &state.z).norm_squared()).sqrt();
    let dz = &state.z - prev_z;
    let dw = &state.w - prev_w;
    let dual = ((dw + x.tr_mul(&dz)) * rho).norm();
    let ax = (beta.norm_squared() + xb.norm_squared()).sqrt();
    let bwz = (state.w.norm_squared() + state.z.norm_squared()).sqrt();
    let n_pri = (beta.len() + xb.len()) as f64;
    let n_dual = beta.len() as f64;
    let eps_pri = n_pri.sqrt() * eps_abs + eps_rel * ax.max(bwz);
    let eps_dual = n_dual.sqrt() * eps_abs + eps_rel * (&state.u_w + x.tr_mul(&state.u_z)).norm();
    Convergence {
        primal,
        dual,
        eps_pri,
        eps_dual,
        converged: primal <= eps_pri && dual <= eps_dual,
    }
}

fn max_row_norm(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows()).map(|t| m.row(t).norm()).fold(0.0, f64::max)
}

#[derive(Debug, Clone)]
pub struct BetaSolution {
    pub beta0: DVector<f64>,
    /// The sparse copy `w`, rescaled onto the feasible set if needed.
    pub beta: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub last: Convergence,
    /// Final iterate, for warm starts.
    pub state: AdmmState,
}

struct Factorized {
    chol: Cholesky<f64, Dyn>,
}

fn factorize(problem: &BetaProblem, rho: f64) -> Result<Factorized> {
    let design = design_matrix(problem, rho);
    let gram = design.tr_mul(&design);
    let n = gram.nrows();
    let scale = (0..n).map(|i| gram[(i, i)]).fold(0.0, f64::max);
    let chol = gram
        .cholesky()
        .ok_or(Error::RankDeficient { cluster: problem.cluster })?;
    let l = chol.l_dirty();
    let min_pivot = (0..n).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    if !(min_pivot > 1e-13 * scale) {
        return Err(Error::RankDeficient { cluster: problem.cluster });
    }
    Ok(Factorized { chol })
}

/// `D^T c` without materializing `c`: the regression block is fixed, and the
/// two penalty blocks contribute `(rho/2) [(w - U_w/rho) + X^T (Z - U_z/rho)]`
/// at the slope positions.
fn normal_rhs(base: &DVector<f64>, state: &AdmmState, x: &DMatrix<f64>, rho: f64) -> DVector<f64> {
    let (p, d) = (state.w.nrows(), state.w.ncols());
    let m = &state.w - &state.u_w / rho + x.tr_mul(&(&state.z - &state.u_z / rho));
    let mut rhs = base.clone();
    for j in 0..d {
        for i in 0..p {
            rhs[j * (p + 1) + 1 + i] += 0.5 * rho * m[(i, j)];
        }
    }
    rhs
}

/// Run ADMM on one cluster's coefficient subproblem.
///
/// On hitting `max_iter` the last iterate is returned with `converged = false`.
/// The returned slopes are the soft-thresholded copy `w`, scaled down uniformly
/// if it overshoots the ball; the intercept is then re-optimized exactly.
pub fn solve_beta(
    problem: &BetaProblem,
    config: &AdmmConfig,
    warm: Option<AdmmState>,
) -> Result<BetaSolution> {
    config.validate()?;
    let (t_len, p, d) = (problem.t(), problem.p(), problem.d());
    let mut state = match warm {
        Some(s) if s.matches(t_len, p, d) => s,
        _ => AdmmState::zeros(t_len, p, d, config.rho),
    };
    if !config.adaptive_rho {
        state.rho = config.rho;
    }
    // Zero slopes sit strictly inside the ball, so they are optimal exactly
    // when no slope gradient exceeds lambda. Checking this first saves the
    // many iterations ADMM needs to certify an all-zero solution.
    let zero = DMatrix::zeros(p, d);
    let null_intercept = problem.optimal_intercept(&zero);
    if problem.smooth_gradient(&null_intercept, &zero).amax() <= problem.lambda {
        return Ok(BetaSolution {
            beta0: null_intercept,
            beta: zero,
            iterations: 0,
            converged: true,
            last: Convergence {
                primal: 0.0,
                dual: 0.0,
                eps_pri: 0.0,
                eps_dual: 0.0,
                converged: true,
            },
            state,
        });
    }
    let mut rho = state.rho;
    let mut fact = factorize(problem, rho)?;
    let x = &problem.x;
    let base_rhs = {
        let d0 = design_matrix(problem, 0.0);
        d0.tr_mul(&response_vector(problem, &state, 0.0))
    };
    let mut last = Convergence {
        primal: f64::INFINITY,
        dual: f64::INFINITY,
        eps_pri: 0.0,
        eps_dual: 0.0,
        converged: false,
    };
    let mut iterations = 0;
    for it in 1..=config.max_iter {
        iterations = it;
        let rhs = normal_rhs(&base_rhs, &state, x, rho);
        state.b = fact.chol.solve(&rhs);
        let (_, beta) = unpack_b(&state.b, p, d);
        let prev_z = state.z.clone();
        let prev_w = state.w.clone();
        let xb = x * &beta;
        state.z = project_ball(&(&xb + &state.u_z / rho), problem.radius);
        state.w = soft_threshold(&(&beta + &state.u_w / rho), problem.lambda / rho);
        dual_updates(&mut state, x, &beta, rho);
        last = convergence_check(&state, &prev_z, &prev_w, x, &beta, rho, config.eps_rel, config.eps_abs);
        if !(last.primal.is_finite() && last.dual.is_finite()) {
            return Err(Error::NonFinite(format!(
                "ADMM residuals for cluster {}",
                problem.cluster
            )));
        }
        if last.converged {
            break;
        }
        if config.adaptive_rho && it <= config.adapt_until {
            let new_rho = if last.primal > 10.0 * last.dual {
                rho * 2.0
            } else if last.dual > 10.0 * last.primal {
                rho / 2.0
            } else {
                rho
            };
            if new_rho != rho && (1e-6..=1e6).contains(&new_rho) {
                rho = new_rho;
                state.rho = rho;
                fact = factorize(problem, rho)?;
            }
        }
    }
    let mut out = state.w.clone();
    let dev = max_row_norm(&(x * &out));
    if dev > problem.radius {
        out *= problem.radius / dev;
    }
    let beta0 = problem.optimal_intercept(&out);
    Ok(BetaSolution {
        beta0,
        beta: out,
        iterations,
        converged: last.converged,
        last,
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Frame;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem(seed: u64, t: usize, p: usize, d: usize, lambda: f64, radius: f64) -> BetaProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..t)
            .map(|_| (0..p).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let x = CovariateSeries::from_rows(&rows).unwrap();
        let mut frames = Vec::new();
        let mut weights = Vec::new();
        for _ in 0..t {
            let n = 4;
            let coords: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
            frames.push(Frame::unweighted(d, coords).unwrap());
            weights.push((0..n).map(|_| rng.random_range(0.1..1.0)).collect::<Vec<_>>());
        }
        let y = CytogramSeries::new(d, frames).unwrap();
        let mut sigma = DMatrix::identity(d, d);
        if d > 1 {
            sigma[(0, 1)] = 0.3;
            sigma[(1, 0)] = 0.3;
        }
        BetaProblem::new(0, &x, &y, &weights, &sigma, (t * 4) as f64, lambda, radius).unwrap()
    }

    #[test]
    fn null_solution_is_certified_without_iterating() {
        let probe = random_problem(12, 6, 3, 1, 0.0, 10.0);
        let zero = DMatrix::zeros(3, 1);
        let gmax = probe.smooth_gradient(&probe.optimal_intercept(&zero), &zero).amax();
        let config = AdmmConfig::default();

        let above = random_problem(12, 6, 3, 1, 1.01 * gmax, 10.0);
        let sol = solve_beta(&above, &config, None).unwrap();
        assert_eq!((sol.iterations, sol.converged), (0, true));
        assert!(sol.beta.iter().all(|v| *v == 0.0));
        assert_eq!(sol.beta0, above.optimal_intercept(&zero));

        let below = random_problem(12, 6, 3, 1, 0.9 * gmax, 10.0);
        let sol = solve_beta(&below, &config, None).unwrap();
        assert!(sol.iterations > 0 && sol.beta.iter().any(|v| *v != 0.0));
        assert!(below.objective(&sol.beta0, &sol.beta, 1e-9) < below.objective(&below.optimal_intercept(&zero), &zero, 0.0));
    }

    #[test]
    fn smooth_gradient_matches_differences() {
        let problem = random_problem(11, 6, 3, 2, 0.0, 10.0);
        let beta0 = DVector::from_vec(vec![0.2, -0.4]);
        let beta = DMatrix::from_fn(3, 2, |i, j| 0.1 * (i as f64) - 0.2 * (j as f64));
        let g = problem.smooth_gradient(&beta0, &beta);
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..2 {
                let (mut up, mut down) = (beta.clone(), beta.clone());
                up[(i, j)] += h;
                down[(i, j)] -= h;
                let fd = (problem.smooth_value(&beta0, &up) - problem.smooth_value(&beta0, &down)) / (2.0 * h);
                assert!((fd - g[(i, j)]).abs() < 1e-7, "({i}, {j}): {fd} vs {}", g[(i, j)]);
            }
        }
    }

    #[test]
    fn ball_projection_examples() {
        let v = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
        assert_eq!(project_ball(&v, 10.0), v);
        let p = project_ball(&v, 1.0);
        assert!((p[(0, 0)] - 0.6).abs() < 1e-15 && (p[(0, 1)] - 0.8).abs() < 1e-15);
        let zero = DMatrix::zeros(3, 2);
        assert_eq!(project_ball(&zero, 0.5), zero);
    }

    #[test]
    fn soft_threshold_examples() {
        let a = DMatrix::from_row_slice(1, 2, &[1.2, -0.3]);
        let s = soft_threshold(&a, 0.5);
        assert!((s[(0, 0)] - 0.7).abs() < 1e-15);
        assert_eq!(s[(0, 1)], 0.0);
        assert_eq!(soft_threshold(&a, 0.0), a);
    }

    #[test]
    fn dual_update_fixed_point_and_increment() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let beta = DMatrix::from_row_slice(1, 1, &[0.5]);
        let mut s = AdmmState::zeros(2, 1, 1, 1.0);
        s.z = &x * &beta;
        s.w = beta.clone();
        s.u_z = DMatrix::from_row_slice(2, 1, &[0.1, -0.2]);
        let before = s.clone();
        dual_updates(&mut s, &x, &beta, 1.0);
        assert_eq!(s, before);
        s.z = DMatrix::zeros(2, 1);
        dual_updates(&mut s, &x, &beta, 1.0);
        assert_eq!(s.u_z, &before.u_z + &x * &beta);
    }

    #[test]
    fn dual_update_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (t, p, d, rho) = (6, 3, 2, 1.7);
        let x = DMatrix::from_fn(t, p, |_, _| rng.random_range(-1.0..1.0));
        let beta = DMatrix::from_fn(p, d, |_, _| rng.random_range(-1.0..1.0));
        let mut s = AdmmState::zeros(t, p, d, rho);
        s.z = DMatrix::from_fn(t, d, |_, _| rng.random_range(-1.0..1.0));
        s.w = DMatrix::from_fn(p, d, |_, _| rng.random_range(-1.0..1.0));
        s.u_z = DMatrix::from_fn(t, d, |_, _| rng.random_range(-1.0..1.0));
        let before = s.clone();
        dual_updates(&mut s, &x, &beta, rho);
        for ti in 0..t {
            for j in 0..d {
                let xb: f64 = (0..p).map(|i| x[(ti, i)] * beta[(i, j)]).sum();
                let expect = before.u_z[(ti, j)] + rho * (xb - before.z[(ti, j)]);
                assert!((s.u_z[(ti, j)] - expect).abs() < 1e-14);
            }
        }
        for i in 0..p {
            for j in 0..d {
                let expect = before.u_w[(i, j)] + rho * (beta[(i, j)] - before.w[(i, j)]);
                assert!((s.u_w[(i, j)] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn convergence_at_exact_fixed_point() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let beta = DMatrix::from_row_slice(1, 1, &[0.5]);
        let mut s = AdmmState::zeros(2, 1, 1, 1.0);
        s.z = &x * &beta;
        s.w = beta.clone();
        let c = convergence_check(&s, &s.z.clone(), &s.w.clone(), &x, &beta, 1.0, 1e-3, 0.0);
        assert_eq!((c.primal, c.dual), (0.0, 0.0));
        assert!(c.converged);
        let c = convergence_check(&s, &s.z.clone(), &s.w.clone(), &x, &beta, 1.0, 0.0, 0.0);
        assert!(c.converged);
        let mut off = s.clone();
        off.w[(0, 0)] += 1e-9;
        let c = convergence_check(&off, &s.z, &off.w.clone(), &x, &beta, 1.0, 0.0, 0.0);
        assert!(!c.converged);
    }

    #[test]
    fn zero_rho_reduces_to_regression_block() {
        let prob = random_problem(1, 5, 2, 1, 0.1, 1.0);
        let state = AdmmState::zeros(5, 2, 1, 1.0);
        let (c, dm) = assemble_least_squares(&prob, &state, 0.0);
        assert!(dm.rows(5, 2 + 5).iter().all(|&v| v == 0.0));
        assert!(c.rows(5, 7).iter().all(|&v| v == 0.0));
        // d = 1: first block is sqrt(1/2N) sigma^(-1/2) W^(1/2) (1 X).
        let s1 = (1.0 / (2.0 * prob.total_weight)).sqrt();
        let inv_sd = prob.root[(0, 0)];
        for t in 0..5 {
            let sw = prob.weight_sums[t].sqrt();
            assert!((dm[(t, 0)] - s1 * inv_sd * sw).abs() < 1e-15);
            for i in 0..2 {
                assert!((dm[(t, 1 + i)] - s1 * inv_sd * sw * prob.x[(t, i)]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn shortcut_rhs_matches_assembled_system() {
        let prob = random_problem(4, 6, 3, 2, 0.1, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rho = 0.7;
        let mut state = AdmmState::zeros(6, 3, 2, rho);
        state.z = DMatrix::from_fn(6, 2, |_, _| rng.random_range(-1.0..1.0));
        state.w = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
        state.u_z = DMatrix::from_fn(6, 2, |_, _| rng.random_range(-1.0..1.0));
        state.u_w = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
        let (c, dm) = assemble_least_squares(&prob, &state, rho);
        let full = dm.tr_mul(&c);
        let base = design_matrix(&prob, 0.0).tr_mul(&response_vector(&prob, &state, 0.0));
        let fast = normal_rhs(&base, &state, &prob.x, rho);
        assert!((full - fast).norm() < 1e-12);
    }

    #[test]
    fn least_squares_residual_matches_lagrangian() {
        let prob = random_problem(2, 6, 3, 2, 0.1, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rho = 1.3;
        let mut state = AdmmState::zeros(6, 3, 2, rho);
        state.z = DMatrix::from_fn(6, 2, |_, _| rng.random_range(-1.0..1.0));
        state.w = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
        state.u_z = DMatrix::from_fn(6, 2, |_, _| rng.random_range(-1.0..1.0));
        state.u_w = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
        let (c, dm) = assemble_least_squares(&prob, &state, rho);
        let lagr = |b: &DVector<f64>| {
            let (b0, bt) = unpack_b(b, 3, 2);
            let xb = &prob.x * &bt;
            prob.smooth_value(&b0, &bt)
                + (&state.u_z.component_mul(&(&xb - &state.z))).sum()
                + rho / 2.0 * (&xb - &state.z).norm_squared()
                + (&state.u_w.component_mul(&(&bt - &state.w))).sum()
                + rho / 2.0 * (&bt - &state.w).norm_squared()
        };
        let ls = |b: &DVector<f64>| (&c - &dm * b).norm_squared();
        // Differences between two points must agree (constants cancel).
        let b1 = DVector::from_fn(8, |_, _| rng.random_range(-1.0..1.0));
        let b2 = DVector::from_fn(8, |_, _| rng.random_range(-1.0..1.0));
        let dl = lagr(&b1) - lagr(&b2);
        let dq = ls(&b1) - ls(&b2);
        assert!((dl - dq).abs() < 1e-10 * (1.0 + dl.abs()), "{dl} vs {dq}");
    }

    #[test]
    fn normal_equations_match_qr() {
        let prob = random_problem(3, 5, 2, 2, 0.1, 1.0);
        let state = AdmmState::zeros(5, 2, 2, 1.0);
        let (c, dm) = assemble_least_squares(&prob, &state, 1.0);
        let gram = dm.tr_mul(&dm);
        let normal = gram.cholesky().unwrap().solve(&dm.tr_mul(&c));
        let qr = dm.clone().qr();
        let qtc = qr.q().tr_mul(&c);
        let via_qr = qr.r().solve_upper_triangular(&qtc).unwrap();
        assert!((normal - via_qr).norm() < 1e-10);
    }

    #[test]
    fn full_shrinkage_gives_weighted_mean() {
        let prob = random_problem(4, 8, 3, 2, 1e6, 100.0);
        let sol = solve_beta(&prob, &AdmmConfig::default(), None).unwrap();
        assert!(sol.beta.iter().all(|&v| v == 0.0));
        let tot: f64 = prob.weight_sums.iter().sum();
        for j in 0..2 {
            let mean: f64 = (0..8).map(|t| prob.weighted_sums[(t, j)]).sum::<f64>() / tot;
            assert!((sol.beta0[j] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn returned_beta_is_feasible() {
        for seed in 0..10 {
            let prob = random_problem(seed, 10, 3, 2, 0.01, 0.2);
            let sol = solve_beta(&prob, &AdmmConfig::default(), None).unwrap();
            let dev = max_row_norm(&(&prob.x * &sol.beta));
            assert!(dev <= 0.2 * (1.0 + 1e-12), "seed {seed}: {dev}");
        }
    }
}
