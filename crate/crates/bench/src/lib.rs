//! Shared fixtures for the benchmarks.

use flowfit_core::simulation::{make_misspec_experiment, misspec_truth_params, Experiment};
use flowfit_core::ModelParams;

/// The three-cluster synthetic dataset (T = 100, 200 particles per time).
pub fn misspec_fixture(seed: u64) -> (Experiment, ModelParams) {
    let exp = make_misspec_experiment(seed).expect("fixed synthetic design");
    (exp, misspec_truth_params())
}
