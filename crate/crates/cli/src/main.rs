use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use flowfit_core::binning::{bin_particles, with_biomass};
use flowfit_core::cv::CvScaling;
use flowfit_core::io::{
    load_binned, load_covariates, load_model, load_particles, predict_document, save_binned,
    save_covariates, save_model, save_particles, write_predictions, CovariateOptions, ModelDocument,
    TimedFrames,
};
use flowfit_core::simulation::{
    make_misspec_experiment, make_noisy_covariates_experiment, run_cluster_misspec_study,
    run_noisy_covariates_study, write_misspec_csv, write_noisy_csv, StudyConfig,
};
use flowfit_core::{
    fit_em, select_lambdas, BinGrid, BinMode, CovariateSeries, CvConfig, CvGrid, CytogramSeries, GridSpec, EmConfig,
    Error, ErrorKind, Hyperparams,
};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

/// Sparse mixtures of Gaussian regressions for cytogram time series.
///
/// Exit status: 0 on success, 1 for usage errors, 2 for unreadable or
/// inconsistent data, 3 when the fit fails numerically. FLOWFIT_THREADS caps
/// the number of worker threads.
#[derive(Debug, Parser)]
#[command(name = "flowfit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a model with fixed regularization.
    Fit(FitArgs),
    /// Choose regularization by cross-validation, then refit.
    Cv(CvArgs),
    /// Aggregate particles onto a regular grid.
    Bin(BinArgs),
    /// Run a simulation study, or write one synthetic dataset.
    Simulate(SimulateArgs),
    /// Cluster probabilities and means over time from a saved model.
    Predict(PredictArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CytogramFormat {
    Particles,
    Binned,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Covariate CSV: `time` then one column per covariate.
    #[arg(long)]
    covariates: PathBuf,
    /// Cytogram CSV, either particles or binned (with `<file>.grid.json`).
    #[arg(long)]
    cytograms: PathBuf,
    #[arg(long, value_enum, default_value = "particles")]
    format: CytogramFormat,
    /// Standardize covariates to mean 0 and sample sd 1.
    #[arg(long)]
    standardize: bool,
    /// Columns left unscaled by --standardize.
    #[arg(long, value_delimiter = ',')]
    exclude: Vec<String>,
    /// Lagged copies, e.g. `par:3,par:6`; the first max-lag rows are dropped.
    #[arg(long, value_delimiter = ',', value_parser = parse_lag)]
    lag: Vec<(String, usize)>,
}

#[derive(Debug, Args)]
struct SolverArgs {
    #[arg(long)]
    k: usize,
    /// Bound on the deviation of each cluster mean from its intercept.
    #[arg(long)]
    radius: f64,
    #[arg(long, default_value_t = 5)]
    restarts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
    /// Relative objective change that ends EM.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Output model document (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    lambda_alpha: f64,
    #[arg(long)]
    lambda_beta: f64,
}

#[derive(Debug, Args)]
struct CvArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// Comma-separated candidate values. When omitted, each axis is a 10-point
    /// log grid reaching down from the smallest penalty that zeroes every slope.
    #[arg(long, value_delimiter = ',')]
    grid_alpha: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    grid_beta: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Also write the score matrix as CSV.
    #[arg(long)]
    scores: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Counts,
    Weights,
}

#[derive(Debug, Args)]
struct BinArgs {
    /// Particle CSV.
    #[arg(long)]
    cytograms: PathBuf,
    #[arg(long, default_value_t = 40)]
    d_per_axis: usize,
    #[arg(long, value_enum, default_value = "counts")]
    mode: ModeArg,
    /// Replace multiplicities by biomass computed from this (1-based) axis.
    #[arg(long)]
    biomass_axis: Option<usize>,
    /// The biomass axis holds log10 diameters.
    #[arg(long, requires = "biomass_axis")]
    log_diameter: bool,
    /// Binned CSV; the grid goes to `<out>.grid.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Study {
    Noisy,
    Misspec,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    study: Study,
    /// Noise levels added to the observed covariates (noisy study).
    #[arg(long, value_delimiter = ',', default_value = "0,0.9,1.8,2.7")]
    sigma_add: Vec<f64>,
    /// Numbers of clusters to fit (misspec study).
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    k: Vec<usize>,
    #[arg(long)]
    reps: Option<usize>,
    /// Smaller grid, one restart, looser tolerance.
    #[arg(long)]
    quick: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write one synthetic dataset (covariates.csv, cytograms.csv) into this
    /// directory instead of running the study.
    #[arg(long, conflicts_with = "out")]
    dataset: Option<PathBuf>,
    /// Summary CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Raw covariates; the model's stored scaling is applied.
    #[arg(long)]
    covariates: PathBuf,
    #[arg(long, value_delimiter = ',', value_parser = parse_lag)]
    lag: Vec<(String, usize)>,
    /// Long-format CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_lag(s: &str) -> Result<(String, usize), String> {
    let (col, h) = s
        .rsplit_once(':')
        .ok_or_else(|| format!("`{s}`: expected COLUMN:LAG"))?;
    let h: usize = h.parse().map_err(|_| format!("`{s}`: lag must be a nonnegative integer"))?;
    if col.is_empty() || h == 0 {
        return Err(format!("`{s}`: expected a column name and a positive lag"));
    }
    Ok((col.to_string(), h))
}

/// Failure of a subcommand, tagged with the exit status to use.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CmdResult = Result<(), Failure>;

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, Error> {
    Ok(match path {
        None => Box::new(io::stdout().lock()),
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|source| Error::Io {
            path: p.to_path_buf(),
            source,
        })?)),
    })
}

fn load_data(args: &DataArgs) -> Result<(CovariateSeries, CytogramSeries, flowfit_core::ColumnScaling), Error> {
    let options = CovariateOptions {
        standardize: args.standardize,
        exclude: args.exclude.clone(),
        lags: args.lag.clone(),
    };
    let (x, scaling) = load_covariates(&args.covariates, &options)?;
    let frames = match args.format {
        CytogramFormat::Particles => load_particles(&args.cytograms)?,
        CytogramFormat::Binned => {
            let (times, binned) = load_binned(&args.cytograms)?;
            TimedFrames::from_binned(&times, &binned)?
        }
    };
    // Lags trim leading covariate rows; particles from those times are dropped.
    let frames = if args.lag.is_empty() {
        frames
    } else {
        let first = x.times().first().copied().unwrap_or(i64::MAX);
        let dropped = frames.frames.range(..first).count();
        if dropped > 0 {
            info!("dropping {dropped} cytograms before the first lagged time {first}");
        }
        TimedFrames {
            d: frames.d,
            frames: frames.frames.into_iter().filter(|(t, _)| *t >= first).collect(),
        }
    };
    let y = frames.align(&x)?;
    info!(
        "loaded T = {}, p = {}, d = {}, {} particles",
        x.len(),
        x.p(),
        y.dim(),
        y.particle_count()
    );
    Ok((x, y, scaling))
}

fn em_config(s: &SolverArgs) -> EmConfig {
    EmConfig {
        max_iter: s.max_iter,
        rel_tol: s.tol,
        restarts: s.restarts,
        seed: s.seed,
        ..EmConfig::default()
    }
}

fn report_fit(fit: &flowfit_core::FitResult) {
    if !fit.converged {
        warn!("EM stopped at max_iter without meeting the tolerance");
    }
    if fit.diagnostics.admm_unconverged > 0 {
        warn!("{} beta solves hit the ADMM iteration cap", fit.diagnostics.admm_unconverged);
    }
    info!(
        "objective {:.6} after {} iterations (restart {})",
        fit.objective,
        fit.objective_trace.len(),
        fit.winner
    );
}

fn cmd_fit(args: &FitArgs) -> CmdResult {
    let (x, y, scaling) = load_data(&args.data)?;
    let hyper = Hyperparams::new(args.lambda_alpha, args.lambda_beta, args.solver.radius)?;
    let config = em_config(&args.solver);
    let fit = fit_em(&x, &y, args.solver.k, &hyper, &config)?;
    report_fit(&fit);
    let doc = ModelDocument::from_fit(&fit, &x, &hyper, scaling, config.restarts);
    save_model(&args.solver.out, &doc)?;
    Ok(())
}

fn cmd_cv(args: &CvArgs) -> CmdResult {
    let (x, y, scaling) = load_data(&args.data)?;
    let spec = match (args.grid_alpha.is_empty(), args.grid_beta.is_empty()) {
        (true, true) => GridSpec::Scaled { n: 10 },
        (false, false) => GridSpec::Fixed(CvGrid::new(args.grid_alpha.clone(), args.grid_beta.clone())?),
        _ => return Err(Failure::Usage("--grid-alpha and --grid-beta go together".into())),
    };
    let config = CvConfig {
        nfolds: args.folds,
        radius: args.solver.radius,
        em: em_config(&args.solver),
        scaling: CvScaling::None,
    };
    let grid = spec.resolve(&x, &y, args.solver.k, &config)?;
    let cv = select_lambdas(&grid, &x, &y, args.solver.k, &config)?;
    for f in &cv.failures {
        warn!("{f}");
    }
    info!("selected lambda_alpha = {}, lambda_beta = {}", cv.lambda_alpha, cv.lambda_beta);
    report_fit(&cv.refit);
    let hyper = Hyperparams::new(cv.lambda_alpha, cv.lambda_beta, config.radius)?;
    let doc = ModelDocument::from_fit(&cv.refit, &x, &hyper, scaling, config.em.restarts);
    save_model(&args.solver.out, &doc)?;
    if let Some(path) = &args.scores {
        let mut w = csv::Writer::from_writer(output(Some(path))?);
        let werr = |e: csv::Error| Error::Io {
            path: path.clone(),
            source: io::Error::other(e.to_string()),
        };
        w.write_record(["lambda_alpha", "lambda_beta", "score"]).map_err(werr)?;
        for (i, la) in cv.grid.lambda_alpha().iter().enumerate() {
            for (j, lb) in cv.grid.lambda_beta().iter().enumerate() {
                w.write_record([la.to_string(), lb.to_string(), cv.scores[(i, j)].to_string()])
                    .map_err(werr)?;
            }
        }
        w.flush().map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
    }
    Ok(())
}

fn cmd_bin(args: &BinArgs) -> CmdResult {
    let frames = load_particles(&args.cytograms)?;
    let times = frames.times();
    let mut y = frames.series()?;
    if let Some(axis) = args.biomass_axis {
        if axis == 0 || axis > y.dim() {
            return Err(Failure::Usage(format!("--biomass-axis must be in 1..={}", y.dim())));
        }
        y = with_biomass(&y, axis - 1, args.log_diameter)?;
    }
    let grid = BinGrid::covering(&y, args.d_per_axis)?;
    let mode = match args.mode {
        ModeArg::Counts => BinMode::Counts,
        ModeArg::Weights => BinMode::Weights,
    };
    let binned = bin_particles(&y, &grid, mode)?;
    let occupied: usize = binned.frames().iter().map(Vec::len).sum();
    info!("{} particles into {occupied} occupied bins of {}", y.particle_count(), grid.total_bins());
    save_binned(&args.out, &times, &binned)?;
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs) -> CmdResult {
    if let Some(dir) = &args.dataset {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.clone(),
            source,
        })?;
        let exp = match args.study {
            Study::Noisy => {
                let sigma = match args.sigma_add.as_slice() {
                    [s] => *s,
                    _ => return Err(Failure::Usage("--dataset needs a single --sigma-add".into())),
                };
                make_noisy_covariates_experiment(sigma, args.seed)?
            }
            Study::Misspec => make_misspec_experiment(args.seed)?,
        };
        save_covariates(&dir.join("covariates.csv"), &exp.observed)?;
        save_particles(&dir.join("cytograms.csv"), exp.observed.times(), &exp.cytograms)?;
        return Ok(());
    }
    let mut config = if args.quick { StudyConfig::quick() } else { StudyConfig::full() };
    config.seed = args.seed;
    if let Some(r) = args.reps {
        config.reps = r;
    }
    let out = output(args.out.as_deref())?;
    match args.study {
        Study::Noisy => {
            let (rows, _) = run_noisy_covariates_study(&args.sigma_add, &config)?;
            write_noisy_csv(&rows, out)?;
        }
        Study::Misspec => {
            let (rows, _) = run_cluster_misspec_study(&args.k, &config)?;
            write_misspec_csv(&rows, out)?;
        }
    }
    Ok(())
}

fn cmd_predict(args: &PredictArgs) -> CmdResult {
    let doc = load_model(&args.model)?;
    let options = CovariateOptions {
        lags: args.lag.clone(),
        ..Default::default()
    };
    let (raw, _) = load_covariates(&args.covariates, &options)?;
    let rows = predict_document(&doc, &raw)?;
    write_predictions(&rows, doc.d, output(args.out.as_deref())?)?;
    Ok(())
}

fn configure_threads() -> Result<(), String> {
    let Ok(value) = std::env::var("FLOWFIT_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("FLOWFIT_THREADS must be a positive integer, got `{value}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(EXIT_USAGE);
    }
    let result = match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Cv(a) => cmd_cv(a),
        Command::Bin(a) => cmd_bin(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Predict(a) => cmd_predict(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            match e.kind() {
                ErrorKind::Data => ExitCode::from(EXIT_DATA),
                ErrorKind::Numerical => ExitCode::from(EXIT_NUMERICAL),
            }
        }
    }
}
