//! Sparse mixtures of multivariate Gaussian regressions for time series of
//! cytograms, fit by penalized EM.

pub mod admm;
pub mod binning;
pub mod cv;
pub mod em;
pub mod error;
pub mod io;
pub mod math;
pub mod model;
pub mod scaling;
pub mod simulation;

pub use error::{Error, ErrorKind, Result};
pub use model::{
    cluster_means, gaussian_log_density, mixture_weights, penalized_objective,
    weighted_log_likelihood, ClusterParams, CovariateSeries, CytogramSeries, Frame, Hyperparams,
    ModelParams,
};
pub use em::{fit_em, EmConfig, FitResult};
pub use cv::{select_lambdas, CvConfig, CvGrid, CvResult, GridSpec};
pub use scaling::ColumnScaling;
pub use binning::{BinGrid, BinMode, BinnedCytogramSeries};
pub use io::ModelDocument;
