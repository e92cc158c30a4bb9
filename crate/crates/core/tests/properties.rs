use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use flowfit_core::admm::{project_ball, soft_threshold, solve_beta, AdmmConfig, BetaProblem};
use flowfit_core::binning::{bin_particles, BinMode};
use flowfit_core::cv::make_folds;
use flowfit_core::em::{e_step, m_step_sigma};
use flowfit_core::io::ModelDocument;
use flowfit_core::math::{log_sum_exp, soft_threshold_scalar, SigmaFloor};
use flowfit_core::simulation::generate_from_model;
use flowfit_core::{BinGrid, ClusterParams, ColumnScaling, CovariateSeries, CytogramSeries, Hyperparams, ModelParams};

struct Instance {
    x: CovariateSeries,
    y: CytogramSeries,
    params: ModelParams,
}

fn instance(seed: u64, k: usize, p: usize, d: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { rng.sample(StandardNormal) };
    let t = 8;
    let rows: Vec<Vec<f64>> = (0..t).map(|_| (0..p).map(|_| normal()).collect()).collect();
    let x = CovariateSeries::from_rows(&rows).unwrap();
    let clusters = (0..k)
        .map(|c| {
            let mut cp = ClusterParams::zeros(p, d);
            if c + 1 < k {
                cp.alpha0 = normal();
                cp.alpha = DVector::from_fn(p, |_, _| normal());
            }
            cp.beta0 = DVector::from_fn(d, |_, _| 2.0 * normal());
            cp.beta = DMatrix::from_fn(p, d, |_, _| 0.5 * normal());
            let a = DMatrix::from_fn(d, d, |_, _| normal());
            cp.sigma = &a * a.transpose() * 0.5 + DMatrix::identity(d, d) * 0.1;
            cp
        })
        .collect();
    let params = ModelParams::new(clusters).unwrap();
    let y = generate_from_model(&params, &x, &[15; 8], seed ^ 0x5eed).unwrap();
    Instance { x, y, params }
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-10.0f64..10.0, rows * cols).prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn responsibilities_sum_to_one(seed in any::<u64>(), k in 1usize..4, p in 1usize..4, d in 1usize..3) {
        let inst = instance(seed, k, p, d);
        let resp = e_step(&inst.params, &inst.x, &inst.y).unwrap();
        for t in 0..inst.y.len() {
            for i in 0..inst.y.frame(t).len() {
                let row = resp.row(t, i);
                prop_assert!(row.iter().all(|&g| (0.0..=1.0).contains(&g)));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sigma_update_is_symmetric_positive_definite(seed in any::<u64>(), k in 1usize..4, d in 1usize..4) {
        let inst = instance(seed, k, 2, d);
        let resp = e_step(&inst.params, &inst.x, &inst.y).unwrap();
        let floor = SigmaFloor::from_ranges(&inst.y.axis_ranges());
        let (sigmas, _) = m_step_sigma(&resp, &inst.x, &inst.y, &inst.params, &floor);
        for s in sigmas {
            prop_assert_eq!(&s, &s.transpose());
            prop_assert!(s.clone().cholesky().is_some());
            prop_assert!(floor.is_satisfied(&s, 1e-9));
        }
    }

    #[test]
    fn beta_solution_respects_ball(seed in any::<u64>(), d in 1usize..3, radius in 0.01f64..3.0, lambda in 0.0f64..0.5) {
        let inst = instance(seed, 2, 3, d);
        let resp = e_step(&inst.params, &inst.x, &inst.y).unwrap();
        let weights = resp.cluster_weights(&inst.y, 0);
        let sigma = &inst.params.clusters[0].sigma;
        let problem = BetaProblem::new(0, &inst.x, &inst.y, &weights, sigma, inst.y.total_weight(), lambda, radius).unwrap();
        let sol = solve_beta(&problem, &AdmmConfig { max_iter: 200, ..AdmmConfig::default() }, None).unwrap();
        for t in 0..inst.x.len() {
            let dev = (sol.beta.transpose() * DVector::from_vec(inst.x.row(t))).norm();
            prop_assert!(dev <= radius * (1.0 + 1e-9), "t = {}: {} > {}", t, dev, radius);
        }
    }

    #[test]
    fn ball_projection_is_nonexpansive(a in matrix(4, 3), b in matrix(4, 3), r in 0.01f64..5.0) {
        let (pa, pb) = (project_ball(&a, r), project_ball(&b, r));
        prop_assert!((&pa - &pb).norm() <= (&a - &b).norm() + 1e-12);
        for t in 0..4 {
            prop_assert!(pa.row(t).norm() <= r * (1.0 + 1e-12));
        }
        prop_assert!((project_ball(&pa, r) - &pa).norm() <= 1e-12);
    }

    #[test]
    fn soft_threshold_is_the_l1_prox(a in -50.0f64..50.0, t in 0.0f64..10.0) {
        let s = soft_threshold_scalar(a, t);
        prop_assert!(s.abs() <= a.abs());
        prop_assert!(s == 0.0 || s.signum() == a.signum());
        prop_assert_eq!(s == 0.0, a.abs() <= t);
        // Optimality: a - s lies in t * subgradient of |.| at s.
        if s != 0.0 {
            prop_assert!(((a - s) - t * s.signum()).abs() < 1e-12);
        } else {
            prop_assert!((a - s).abs() <= t);
        }
        let m = soft_threshold(&DMatrix::from_element(1, 1, a), t);
        prop_assert_eq!(m[(0, 0)], s);
    }

    #[test]
    fn folds_partition_time_points(t in 1usize..200, nfolds in 1usize..12) {
        prop_assume!(nfolds <= t);
        let folds = make_folds(t, nfolds).unwrap();
        prop_assert_eq!(folds.len(), nfolds);
        let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..t).collect::<Vec<_>>());
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn log_sum_exp_is_shift_equivariant(v in prop::collection::vec(-700.0f64..700.0, 1..10), c in -300.0f64..300.0) {
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let (a, b) = (log_sum_exp(&v), log_sum_exp(&shifted));
        prop_assert!((b - a - c).abs() <= 1e-9 * (1.0 + a.abs()));
        prop_assert!(a >= v.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }

    #[test]
    fn binning_conserves_mass(seed in any::<u64>(), d in 1usize..3, bins in 1usize..30) {
        let inst = instance(seed, 2, 1, d);
        let grid = BinGrid::covering(&inst.y, bins).unwrap();
        let binned = bin_particles(&inst.y, &grid, BinMode::Weights).unwrap();
        let total = inst.y.total_weight();
        prop_assert!((binned.total_weight() - total).abs() <= 1e-12 * total);
        prop_assert!(binned.frames().iter().flatten().all(|&(b, c)| b < grid.total_bins() && c > 0.0));
    }

    #[test]
    fn model_document_round_trip_is_exact(seed in any::<u64>(), k in 1usize..4, p in 1usize..4, d in 1usize..3) {
        let inst = instance(seed, k, p, d);
        let doc = ModelDocument::new(
            &inst.params,
            inst.x.names().to_vec(),
            inst.x.len(),
            &Hyperparams::new(0.1, 0.2, 1.5).unwrap(),
            ColumnScaling::identity(p),
            Default::default(),
        );
        let back = ModelDocument::from_json(&doc.to_json().unwrap()).unwrap();
        prop_assert_eq!(back.params().unwrap(), inst.params);
    }
}
