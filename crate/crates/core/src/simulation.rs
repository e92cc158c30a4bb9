//! Sampling from the model and the two synthetic studies: obscured covariates
//! and a misspecified number of clusters.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::binning::{bin_particles, BinGrid, BinMode};
use crate::cv::{select_lambdas, CvConfig, CvResult, GridSpec};
use crate::em::EmConfig;
use crate::error::{Error, Result};
use crate::math::derive_seed;
use crate::model::{
    mixture_weights, weighted_log_likelihood, ClusterParams, CovariateSeries, CytogramSeries,
    Frame, ModelParams,
};

/// Draw `sizes[t]` particles at each time point, multiplicity one.
///
/// Each time point uses its own RNG stream derived from `seed`, so the output
/// does not depend on thread scheduling.
pub fn generate_from_model(
    params: &ModelParams,
    x: &CovariateSeries,
    sizes: &[usize],
    seed: u64,
) -> Result<CytogramSeries> {
    params.validate()?;
    if x.p() != params.p() {
        return Err(Error::dim(format!("model has p = {}, covariates p = {}", params.p(), x.p())));
    }
    if sizes.len() != x.len() {
        return Err(Error::dim(format!("{} sample sizes for {} time points", sizes.len(), x.len())));
    }
    let d = params.d();
    let lowers: Vec<DMatrix<f64>> = params
        .clusters
        .iter()
        .enumerate()
        .map(|(k, c)| {
            c.sigma
                .clone()
                .cholesky()
                .map(|ch| ch.l())
                .ok_or(Error::NotPositiveDefinite { cluster: k })
        })
        .collect::<Result<_>>()?;
    let frames: Vec<Frame> = (0..x.len())
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, t as u64));
            let xt = x.row(t);
            let pi = mixture_weights(params, &xt);
            let means: Vec<DVector<f64>> = params.clusters.iter().map(|c| c.mean_at(&xt)).collect();
            let mut coords = Vec::with_capacity(sizes[t] * d);
            let mut z = DVector::zeros(d);
            for _ in 0..sizes[t] {
                let k = sample_categorical(&pi, &mut rng);
                for j in 0..d {
                    z[j] = rng.sample(StandardNormal);
                }
                let v = &means[k] + &lowers[k] * &z;
                coords.extend(v.iter());
            }
            Frame::unweighted(d, coords)
        })
        .collect::<Result<_>>()?;
    CytogramSeries::new(d, frames)
}

fn sample_categorical(p: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &pk) in p.iter().enumerate() {
        acc += pk;
        if u < acc {
            return k;
        }
    }
    p.iter().rposition(|&v| v > 0.0).unwrap_or(p.len() - 1)
}

/// Generating model plus the clean covariates it was evaluated on.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTruth {
    pub params: ModelParams,
    pub covariates: CovariateSeries,
    pub sigma_add: f64,
    pub sizes: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub truth: SyntheticTruth,
    /// What the estimator sees.
    pub observed: CovariateSeries,
    pub cytograms: CytogramSeries,
}

pub const NOISY_T: usize = 100;
pub const NOISY_P: usize = 10;
pub const DIEL_PERIOD: usize = 24;
/// Changepoint slope of the second cluster's log-odds.
pub const CHANGEPOINT_LOGIT: f64 = 8.61;

/// Smoothed, rectified sinusoid with a 24-step period, standardized to mean
/// zero and unit sample variance. Stands in for a diel light signal.
pub fn sunlight_covariate(t_len: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..t_len)
        .map(|t| (2.0 * std::f64::consts::PI * t as f64 / DIEL_PERIOD as f64).sin().max(0.0))
        .collect();
    let half = 2usize;
    let smooth: Vec<f64> = (0..t_len)
        .map(|t| {
            let lo = t.saturating_sub(half);
            let hi = (t + half + 1).min(t_len);
            raw[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect();
    let n = t_len as f64;
    let mean = smooth.iter().sum::<f64>() / n;
    let sd = (smooth.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    smooth.iter().map(|v| (v - mean) / sd).collect()
}

/// Two 1-d clusters whose means track sunlight in opposite directions. The
/// second appears only after the changepoint, at a quarter of the first
/// cluster's population.
pub fn noisy_covariates_truth_params() -> ModelParams {
    let p = NOISY_P;
    let mut c1 = ClusterParams::zeros(p, 1);
    c1.beta[(0, 0)] = 0.3;
    let mut c2 = ClusterParams::zeros(p, 1);
    c2.alpha0 = 0.25f64.ln() - CHANGEPOINT_LOGIT;
    c2.alpha[1] = CHANGEPOINT_LOGIT;
    c2.beta0[0] = 3.0;
    c2.beta[(0, 0)] = -0.3;
    ModelParams::new(vec![c1, c2]).expect("static parameters")
}

fn covariate_names(p: usize) -> Vec<String> {
    let mut names = vec!["sunlight".to_string(), "changepoint".to_string()];
    names.extend((3..=p).map(|j| format!("spurious{}", j - 2)));
    names
}

fn normal_draws(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Build one obscured-covariates dataset.
///
/// The cytograms and the standard-normal noise draws depend only on `seed`;
/// `sigma_add` just rescales them. Datasets at different noise levels with the
/// same seed therefore share everything except the noise magnitude.
pub fn make_noisy_covariates_experiment(sigma_add: f64, seed: u64) -> Result<Experiment> {
    if !(sigma_add >= 0.0 && sigma_add.is_finite()) {
        return Err(Error::invalid("sigma_add must be finite and nonnegative"));
    }
    let (t_len, p) = (NOISY_T, NOISY_P);
    let sun = sunlight_covariate(t_len);
    let change: Vec<f64> = (1..=t_len).map(|t| if t > t_len / 2 { 1.0 } else { 0.0 }).collect();
    let truth_spurious = normal_draws(derive_seed(seed, 1), t_len * (p - 2));
    let eps = normal_draws(derive_seed(seed, 2), t_len);
    let obs_spurious = normal_draws(derive_seed(seed, 3), t_len * (p - 2));
    let spread = (1.0 + sigma_add * sigma_add).sqrt();

    let clean = DMatrix::from_fn(t_len, p, |t, j| match j {
        0 => sun[t],
        1 => change[t],
        _ => truth_spurious[t * (p - 2) + j - 2],
    });
    let observed = DMatrix::from_fn(t_len, p, |t, j| match j {
        0 => sun[t] + sigma_add * eps[t],
        1 => change[t],
        _ => spread * obs_spurious[t * (p - 2) + j - 2],
    });
    let clean = CovariateSeries::new(clean, covariate_names(p))?;
    let observed = CovariateSeries::new(observed, covariate_names(p))?;
    let params = noisy_covariates_truth_params();
    let sizes: Vec<usize> = (1..=t_len).map(|t| if t > t_len / 2 { 250 } else { 200 }).collect();
    let cytograms = generate_from_model(&params, &clean, &sizes, derive_seed(seed, 4))?;
    Ok(Experiment {
        truth: SyntheticTruth {
            params,
            covariates: clean,
            sigma_add,
            sizes,
        },
        observed,
        cytograms,
    })
}

/// Three well-separated 1-d clusters driven by sunlight, a changepoint and one
/// irrelevant covariate.
pub fn misspec_truth_params() -> ModelParams {
    let p = 3;
    let var = 0.36;
    let mut c1 = ClusterParams::zeros(p, 1);
    c1.beta[(0, 0)] = 0.4;
    let mut c2 = ClusterParams::zeros(p, 1);
    c2.alpha[0] = 0.5;
    c2.beta0[0] = 3.0;
    c2.beta[(0, 0)] = -0.3;
    let mut c3 = ClusterParams::zeros(p, 1);
    c3.alpha0 = -0.5;
    c3.alpha[1] = 1.0;
    c3.beta0[0] = 6.0;
    c3.beta[(1, 0)] = 0.5;
    for c in [&mut c1, &mut c2, &mut c3] {
        c.sigma[(0, 0)] = var;
    }
    ModelParams::new(vec![c1, c2, c3]).expect("static parameters")
}

pub const MISSPEC_T: usize = 100;
pub const MISSPEC_N: usize = 200;

pub fn make_misspec_experiment(seed: u64) -> Result<Experiment> {
    let t_len = MISSPEC_T;
    let sun = sunlight_covariate(t_len);
    let noise = normal_draws(derive_seed(seed, 1), t_len);
    let x = DMatrix::from_fn(t_len, 3, |t, j| match j {
        0 => sun[t],
        1 => {
            if t + 1 > t_len / 2 {
                1.0
            } else {
                0.0
            }
        }
        _ => noise[t],
    });
    let names = vec!["sunlight".into(), "changepoint".into(), "spurious1".into()];
    let x = CovariateSeries::new(x, names)?;
    let params = misspec_truth_params();
    let sizes = vec![MISSPEC_N; t_len];
    let cytograms = generate_from_model(&params, &x, &sizes, derive_seed(seed, 2))?;
    Ok(Experiment {
        truth: SyntheticTruth {
            params,
            covariates: x.clone(),
            sigma_add: 0.0,
            sizes,
        },
        observed: x,
        cytograms,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub reps: usize,
    pub seed: u64,
    pub grid: GridSpec,
    pub nfolds: usize,
    pub radius: f64,
    pub em: EmConfig,
    /// Test-set particles per time point, as a multiple of the training count.
    pub test_multiplier: usize,
    /// Fit on cytograms binned to this many bins per axis (`None` fits the raw
    /// particles). Test likelihoods always use raw particles.
    pub bins_per_axis: Option<usize>,
}

impl StudyConfig {
    /// 20 reps, 10x10 data-scaled grid, 5 restarts.
    pub fn full() -> Self {
        StudyConfig {
            reps: 20,
            seed: 0,
            grid: GridSpec::Scaled { n: 10 },
            nfolds: 5,
            radius: 1.0,
            em: EmConfig::default(),
            test_multiplier: 10,
            bins_per_axis: Some(40),
        }
    }

    /// 5x5 grid, a single restart and a looser EM tolerance.
    pub fn quick() -> Self {
        StudyConfig {
            grid: GridSpec::Scaled { n: 5 },
            em: EmConfig {
                restarts: 1,
                rel_tol: 1e-5,
                max_iter: 200,
                ..EmConfig::default()
            },
            ..Self::full()
        }
    }

    fn training_data(&self, y: &CytogramSeries) -> Result<CytogramSeries> {
        match self.bins_per_axis {
            None => Ok(y.clone()),
            Some(b) => {
                let grid = BinGrid::covering(y, b)?;
                bin_particles(y, &grid, BinMode::Counts)?.to_cytograms()
            }
        }
    }

    fn cross_validate(&self, exp: &Experiment, k: usize, seed: u64) -> Result<CvResult> {
        let y = self.training_data(&exp.cytograms)?;
        let cv = self.cv(seed);
        let grid = self.grid.resolve(&exp.observed, &y, k, &cv)?;
        select_lambdas(&grid, &exp.observed, &y, k, &cv)
    }

    fn cv(&self, seed: u64) -> CvConfig {
        CvConfig {
            nfolds: self.nfolds,
            radius: self.radius,
            em: EmConfig { seed, ..self.em },
            scaling: Default::default(),
        }
    }
}

/// `-l / N` of `params` on a fresh sample from `truth`, evaluated with the
/// covariates `x_eval` the estimator had access to.
fn test_nll(
    params: &ModelParams,
    truth: &SyntheticTruth,
    x_eval: &CovariateSeries,
    multiplier: usize,
    seed: u64,
) -> Result<f64> {
    let sizes: Vec<usize> = truth.sizes.iter().map(|n| n * multiplier).collect();
    let test = generate_from_model(&truth.params, &truth.covariates, &sizes, seed)?;
    let ll = weighted_log_likelihood(params, x_eval, &test)?;
    Ok(-ll / test.total_weight())
}

/// Permutation of fitted clusters minimizing the total intercept distance to
/// the truth. `out[j]` is the fitted cluster matched to true cluster `j`.
pub fn match_clusters(fitted: &ModelParams, truth: &ModelParams) -> Vec<usize> {
    let (kf, kt) = (fitted.k(), truth.k());
    let dist = |a: usize, b: usize| (&fitted.clusters[a].beta0 - &truth.clusters[b].beta0).norm();
    let mut best = (f64::INFINITY, Vec::new());
    let mut perm: Vec<usize> = Vec::with_capacity(kt);
    fn recurse(
        perm: &mut Vec<usize>,
        kf: usize,
        kt: usize,
        dist: &dyn Fn(usize, usize) -> f64,
        best: &mut (f64, Vec<usize>),
    ) {
        if perm.len() == kt.min(kf) {
            let cost: f64 = perm.iter().enumerate().map(|(j, &a)| dist(a, j)).sum();
            if cost < best.0 {
                *best = (cost, perm.clone());
            }
            return;
        }
        for a in 0..kf {
            if !perm.contains(&a) {
                perm.push(a);
                recurse(perm, kf, kt, dist, best);
                perm.pop();
            }
        }
    }
    recurse(&mut perm, kf, kt, &dist, &mut best);
    best.1
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisyRep {
    pub sigma_add: f64,
    pub rep: usize,
    pub test_nll: f64,
    /// `selected[j][c]`: covariate `c` has a nonzero coefficient in the fitted
    /// cluster matched to true cluster `j`.
    pub selected: Vec<Vec<bool>>,
    pub lambda_alpha: f64,
    pub lambda_beta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisyRow {
    pub sigma_add: f64,
    pub reps_ok: usize,
    pub reps_failed: usize,
    pub mean_test_nll: f64,
    pub se_test_nll: f64,
    /// Per true cluster.
    pub sunlight_rate: Vec<f64>,
    /// Mean over the eight spurious covariates, per true cluster.
    pub spurious_rate: Vec<f64>,
    /// `[cluster][spurious index]`.
    pub spurious_rates: Vec<Vec<f64>>,
}

pub fn noisy_covariates_rep(sigma_add: f64, rep: usize, config: &StudyConfig) -> Result<NoisyRep> {
    let data_seed = derive_seed(config.seed, rep as u64);
    let exp = make_noisy_covariates_experiment(sigma_add, data_seed)?;
    let cv = config.cross_validate(&exp, 2, derive_seed(data_seed, 100))?;
    let fit = &cv.refit.params;
    let nll = test_nll(fit, &exp.truth, &exp.observed, config.test_multiplier, derive_seed(data_seed, 200))?;
    let matched = match_clusters(fit, &exp.truth.params);
    let selected = matched
        .iter()
        .map(|&k| {
            let b = &fit.clusters[k].beta;
            (0..b.nrows()).map(|c| b.row(c).iter().any(|v| *v != 0.0)).collect()
        })
        .collect();
    Ok(NoisyRep {
        sigma_add,
        rep,
        test_nll: nll,
        selected,
        lambda_alpha: cv.lambda_alpha,
        lambda_beta: cv.lambda_beta,
    })
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, f64::NAN);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Run the obscured-covariate study. Reps are parallel; a failed rep is
/// logged and excluded from the averages.
pub fn run_noisy_covariates_study(sigma_adds: &[f64], config: &StudyConfig) -> Result<(Vec<NoisyRow>, Vec<NoisyRep>)> {
    if config.reps == 0 {
        return Err(Error::invalid("reps must be at least 1"));
    }
    let tasks: Vec<(f64, usize)> = sigma_adds
        .iter()
        .flat_map(|&s| (0..config.reps).map(move |r| (s, r)))
        .collect();
    let results: Vec<Result<NoisyRep>> = tasks
        .par_iter()
        .map(|&(s, r)| noisy_covariates_rep(s, r, config))
        .collect();
    let mut rows = Vec::new();
    let mut reps = Vec::new();
    let mut iter = results.into_iter();
    for &s in sigma_adds {
        let mut ok = Vec::new();
        let mut failed = 0;
        for (r, res) in iter.by_ref().take(config.reps).enumerate() {
            match res {
                Ok(rep) => ok.push(rep),
                Err(e) => {
                    log::warn!("noisy-covariates sigma_add={s} rep {r} failed: {e}");
                    failed += 1;
                }
            }
        }
        let (mean, se) = mean_se(&ok.iter().map(|r| r.test_nll).collect::<Vec<_>>());
        let n = ok.len().max(1) as f64;
        let rate = |j: usize, c: usize| ok.iter().filter(|r| r.selected[j][c]).count() as f64 / n;
        let sunlight_rate = (0..2).map(|j| rate(j, 0)).collect();
        let spurious_rates: Vec<Vec<f64>> = (0..2).map(|j| (2..NOISY_P).map(|c| rate(j, c)).collect()).collect();
        let spurious_rate = spurious_rates
            .iter()
            .map(|v| v.iter().sum::<f64>() / v.len() as f64)
            .collect();
        rows.push(NoisyRow {
            sigma_add: s,
            reps_ok: ok.len(),
            reps_failed: failed,
            mean_test_nll: mean,
            se_test_nll: se,
            sunlight_rate,
            spurious_rate,
            spurious_rates,
        });
        reps.extend(ok);
    }
    Ok((rows, reps))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MisspecRep {
    pub k: usize,
    pub rep: usize,
    pub test_nll: f64,
    pub truth_nll: f64,
    pub near_zero: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MisspecRow {
    pub k: usize,
    pub reps_ok: usize,
    pub reps_failed: usize,
    pub mean_test_nll: f64,
    pub se_test_nll: f64,
    pub mean_truth_nll: f64,
    pub mean_near_zero: f64,
}

/// Clusters whose time-averaged probability is under `0.01 / K`.
pub fn near_zero_clusters(params: &ModelParams, x: &CovariateSeries) -> usize {
    let k = params.k();
    let mut avg = vec![0.0; k];
    for t in 0..x.len() {
        for (a, p) in avg.iter_mut().zip(mixture_weights(params, &x.row(t))) {
            *a += p / x.len() as f64;
        }
    }
    avg.iter().filter(|&&a| a < 0.01 / k as f64).count()
}

pub fn misspec_rep(k: usize, rep: usize, config: &StudyConfig) -> Result<MisspecRep> {
    let data_seed = derive_seed(config.seed, rep as u64);
    let exp = make_misspec_experiment(data_seed)?;
    let cv = config.cross_validate(&exp, k, derive_seed(data_seed, 100 + k as u64))?;
    let test_seed = derive_seed(data_seed, 200);
    let fit = &cv.refit.params;
    Ok(MisspecRep {
        k,
        rep,
        test_nll: test_nll(fit, &exp.truth, &exp.observed, config.test_multiplier, test_seed)?,
        truth_nll: test_nll(&exp.truth.params, &exp.truth, &exp.observed, config.test_multiplier, test_seed)?,
        near_zero: near_zero_clusters(fit, &exp.observed),
    })
}

pub fn run_cluster_misspec_study(ks: &[usize], config: &StudyConfig) -> Result<(Vec<MisspecRow>, Vec<MisspecRep>)> {
    if ks.is_empty() {
        return Err(Error::invalid("K list is empty"));
    }
    if config.reps == 0 {
        return Err(Error::invalid("reps must be at least 1"));
    }
    let tasks: Vec<(usize, usize)> = ks.iter().flat_map(|&k| (0..config.reps).map(move |r| (k, r))).collect();
    let results: Vec<Result<MisspecRep>> = tasks.par_iter().map(|&(k, r)| misspec_rep(k, r, config)).collect();
    let mut rows = Vec::new();
    let mut reps = Vec::new();
    let mut iter = results.into_iter();
    for &k in ks {
        let mut ok = Vec::new();
        let mut failed = 0;
        for (r, res) in iter.by_ref().take(config.reps).enumerate() {
            match res {
                Ok(rep) => ok.push(rep),
                Err(e) => {
                    log::warn!("misspecification K={k} rep {r} failed: {e}");
                    failed += 1;
                }
            }
        }
        let (mean, se) = mean_se(&ok.iter().map(|r| r.test_nll).collect::<Vec<_>>());
        let n = ok.len().max(1) as f64;
        rows.push(MisspecRow {
            k,
            reps_ok: ok.len(),
            reps_failed: failed,
            mean_test_nll: mean,
            se_test_nll: se,
            mean_truth_nll: ok.iter().map(|r| r.truth_nll).sum::<f64>() / n,
            mean_near_zero: ok.iter().map(|r| r.near_zero as f64).sum::<f64>() / n,
        });
        reps.extend(ok);
    }
    Ok((rows, reps))
}

pub fn write_noisy_csv<W: Write>(rows: &[NoisyRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![
        "sigma_add".to_string(),
        "reps_ok".into(),
        "reps_failed".into(),
        "mean_test_nll".into(),
        "se_test_nll".into(),
    ];
    for j in 1..=2 {
        header.push(format!("sunlight_rate_c{j}"));
        header.push(format!("spurious_rate_c{j}"));
        for s in 1..=NOISY_P - 2 {
            header.push(format!("spurious{s}_rate_c{j}"));
        }
    }
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![
            r.sigma_add.to_string(),
            r.reps_ok.to_string(),
            r.reps_failed.to_string(),
            r.mean_test_nll.to_string(),
            r.se_test_nll.to_string(),
        ];
        for j in 0..2 {
            rec.push(r.sunlight_rate[j].to_string());
            rec.push(r.spurious_rate[j].to_string());
            rec.extend(r.spurious_rates[j].iter().map(f64::to_string));
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::InvalidInput(format!("writing CSV: {e}")))?;
    Ok(())
}

pub fn write_misspec_csv<W: Write>(rows: &[MisspecRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "k",
        "reps_ok",
        "reps_failed",
        "mean_test_nll",
        "se_test_nll",
        "mean_truth_nll",
        "mean_near_zero_clusters",
    ])
    .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.k.to_string(),
            r.reps_ok.to_string(),
            r.reps_failed.to_string(),
            r.mean_test_nll.to_string(),
            r.se_test_nll.to_string(),
            r.mean_truth_nll.to_string(),
            r.mean_near_zero.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::InvalidInput(format!("writing CSV: {e}")))?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidInput(format!("writing CSV: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_spread_hugs_the_mean() {
        let mut c = ClusterParams::zeros(1, 2);
        c.beta0 = DVector::from_vec(vec![1.0, -2.0]);
        c.beta[(0, 1)] = 0.5;
        c.sigma = DMatrix::identity(2, 2) * 1e-12;
        let m = ModelParams::new(vec![c.clone()]).unwrap();
        let x = CovariateSeries::from_rows(&[vec![0.0], vec![2.0]]).unwrap();
        let y = generate_from_model(&m, &x, &[50, 50], 3).unwrap();
        for t in 0..2 {
            let mu = c.mean_at(&x.row(t));
            for (p, _) in y.frame(t).iter() {
                assert!((p[0] - mu[0]).abs() < 1e-5 && (p[1] - mu[1]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let exp_a = make_noisy_covariates_experiment(0.6, 9).unwrap();
        let exp_b = make_noisy_covariates_experiment(0.6, 9).unwrap();
        assert_eq!(exp_a.cytograms, exp_b.cytograms);
        assert_eq!(exp_a.observed, exp_b.observed);
    }

    #[test]
    fn zero_noise_keeps_sunlight_exact() {
        let exp = make_noisy_covariates_experiment(0.0, 1).unwrap();
        assert_eq!(exp.observed.values().column(0), exp.truth.covariates.values().column(0));
        assert_eq!(exp.cytograms.len(), NOISY_T);
        assert_eq!(exp.cytograms.frame(0).len(), 200);
        assert_eq!(exp.cytograms.frame(99).len(), 250);
    }

    #[test]
    fn second_cluster_is_quarter_after_changepoint() {
        let m = noisy_covariates_truth_params();
        let exp = make_noisy_covariates_experiment(0.0, 1).unwrap();
        let late = mixture_weights(&m, &exp.truth.covariates.row(80));
        assert!((late[1] / late[0] - 0.25).abs() < 1e-12);
        let early = mixture_weights(&m, &exp.truth.covariates.row(10));
        assert!(early[1] < 1e-4);
    }

    #[test]
    fn sunlight_is_standardized_and_periodic() {
        let s = sunlight_covariate(NOISY_T);
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        assert!(mean.abs() < 1e-12);
        assert!((s[30] - s[54]).abs() < 1e-12);
    }

    #[test]
    fn cluster_frequencies_match_probabilities() {
        let mut a = ClusterParams::zeros(1, 1);
        a.alpha0 = 0.7;
        let mut b = ClusterParams::zeros(1, 1);
        b.beta0[0] = 1000.0;
        let m = ModelParams::new(vec![a, b]).unwrap();
        let x = CovariateSeries::from_rows(&[vec![0.0]]).unwrap();
        let n = 100_000;
        let y = generate_from_model(&m, &x, &[n], 5).unwrap();
        let pi = mixture_weights(&m, &[0.0])[1];
        let hits = y.frame(0).iter().filter(|(p, _)| p[0] > 500.0).count() as f64 / n as f64;
        assert!((hits - pi).abs() < 3.0 * (pi * (1.0 - pi) / n as f64).sqrt());
    }

    #[test]
    fn matching_recovers_permutation() {
        let truth = misspec_truth_params();
        let mut fitted = truth.clone();
        fitted.clusters.rotate_left(1);
        assert_eq!(match_clusters(&fitted, &truth), vec![2, 0, 1]);
    }
}
