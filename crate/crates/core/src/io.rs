//! File formats: covariate and cytogram CSVs, grid sidecars, model documents
//! and prediction tables.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::binning::{BinGrid, BinnedCytogramSeries};
use crate::em::FitResult;
use crate::error::{Error, Result};
use crate::model::{
    cluster_means, mixture_weights, ClusterParams, CovariateSeries, CytogramSeries, Frame,
    Hyperparams, ModelParams,
};
use crate::scaling::ColumnScaling;

pub const SCHEMA_VERSION: u32 = 1;

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Header and data rows of a CSV file, each row tagged with its 1-based line
/// number. Ragged rows are rejected here.
struct Table {
    header: Vec<String>,
    rows: Vec<(usize, Vec<String>)>,
}

fn read_table<R: Read>(reader: R, path: &Path) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut records = rdr.records();
    let header: Vec<String> = match records.next() {
        None => return Err(parse_err(path, 1, "empty file")),
        Some(r) => r
            .map_err(|e| parse_err(path, 1, e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect(),
    };
    let mut rows = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() == 1 && rec.get(0) == Some("") {
            continue;
        }
        if rec.len() != header.len() {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        rows.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok(Table { header, rows })
}

fn parse_f64(cell: &str, path: &Path, line: usize, column: &str) -> Result<f64> {
    let v: f64 = cell
        .parse()
        .map_err(|_| parse_err(path, line, format!("column `{column}`: `{cell}` is not a number")))?;
    if !v.is_finite() {
        return Err(parse_err(path, line, format!("column `{column}`: non-finite value")));
    }
    Ok(v)
}

fn parse_time(cell: &str, path: &Path, line: usize) -> Result<i64> {
    cell.parse()
        .map_err(|_| parse_err(path, line, format!("time `{cell}` is not an integer")))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CovariateOptions {
    /// Centre and scale every column not listed in `exclude`.
    pub standardize: bool,
    /// Column names left unscaled, typically indicators.
    pub exclude: Vec<String>,
    /// `(column, lag)` pairs; see [`add_lags`].
    pub lags: Vec<(String, usize)>,
}

/// Read a covariate table: header `time,name1,...`, one row per time point.
///
/// Returns the (possibly lagged and standardized) series and the scaling that
/// was applied.
pub fn load_covariates(path: &Path, options: &CovariateOptions) -> Result<(CovariateSeries, ColumnScaling)> {
    let table = read_table(open(path)?, path)?;
    let x = parse_covariates(&table, path)?;
    let x = if options.lags.is_empty() {
        x
    } else {
        add_lags(&x, &options.lags)?
    };
    if !options.standardize {
        let p = x.p();
        return Ok((x, ColumnScaling::identity(p)));
    }
    let mut exclude = Vec::with_capacity(options.exclude.len());
    for name in &options.exclude {
        let j = x
            .names()
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::invalid(format!("excluded column `{name}` not found")))?;
        exclude.push(j);
    }
    let scaling = ColumnScaling::fit(&x, &exclude)?;
    Ok((scaling.apply(&x)?, scaling))
}

fn parse_covariates(table: &Table, path: &Path) -> Result<CovariateSeries> {
    if table.header.first().map(String::as_str) != Some("time") {
        return Err(parse_err(path, 1, "first column must be `time`"));
    }
    let names: Vec<String> = table.header[1..].to_vec();
    let p = names.len();
    let mut times = Vec::with_capacity(table.rows.len());
    let mut seen: HashMap<i64, usize> = HashMap::new();
    let mut values = Vec::with_capacity(table.rows.len() * p);
    for (line, row) in &table.rows {
        let t = parse_time(&row[0], path, *line)?;
        if let Some(prev) = seen.insert(t, *line) {
            return Err(parse_err(path, *line, format!("duplicate time {t} (first seen on line {prev})")));
        }
        times.push(t);
        for (j, cell) in row[1..].iter().enumerate() {
            values.push(parse_f64(cell, path, *line, &names[j])?);
        }
    }
    let t_len = times.len();
    let m = DMatrix::from_row_slice(t_len, p, &values);
    CovariateSeries::with_times(m, names, times)
}

/// Append lagged copies `name_lag{h}` of the listed columns, dropping the
/// first `max h` rows so every lag is defined.
pub fn add_lags(x: &CovariateSeries, lags: &[(String, usize)]) -> Result<CovariateSeries> {
    let max_lag = lags.iter().map(|l| l.1).max().unwrap_or(0);
    if max_lag >= x.len() {
        return Err(Error::invalid(format!("lag {max_lag} leaves no rows (T = {})", x.len())));
    }
    let mut cols = Vec::with_capacity(lags.len());
    let mut names: Vec<String> = x.names().to_vec();
    for (name, h) in lags {
        let j = x
            .names()
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::invalid(format!("lagged column `{name}` not found")))?;
        cols.push((j, *h));
        names.push(format!("{name}_lag{h}"));
    }
    let keep = x.len() - max_lag;
    let p = x.p();
    let v = x.values();
    let m = DMatrix::from_fn(keep, p + cols.len(), |r, c| {
        let t = r + max_lag;
        if c < p {
            v[(t, c)]
        } else {
            let (j, h) = cols[c - p];
            v[(t - h, j)]
        }
    });
    CovariateSeries::with_times(m, names, x.times()[max_lag..].to_vec())
}

pub fn save_covariates(path: &Path, x: &CovariateSeries) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["time".to_string()];
    header.extend(x.names().iter().cloned());
    let werr = |e: csv::Error| write_err(path, e);
    w.write_record(&header).map_err(werr)?;
    for t in 0..x.len() {
        let mut rec = vec![x.times()[t].to_string()];
        rec.extend(x.row(t).iter().map(f64::to_string));
        w.write_record(&rec).map_err(werr)?;
    }
    w.flush().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_err(path: &Path, e: csv::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    }
}

/// Cytograms keyed by their time labels, in increasing time order.
#[derive(Debug, Clone, PartialEq)]
pub struct TimedFrames {
    pub d: usize,
    pub frames: BTreeMap<i64, Frame>,
}

/// Particle table: `time,y1,...,yd[,multiplicity]`.
pub fn load_particles(path: &Path) -> Result<TimedFrames> {
    let table = read_table(open(path)?, path)?;
    let h = &table.header;
    if h.first().map(String::as_str) != Some("time") {
        return Err(parse_err(path, 1, "first column must be `time`"));
    }
    let has_mult = h.last().map(String::as_str) == Some("multiplicity");
    let d = h.len() - 1 - usize::from(has_mult);
    if d == 0 {
        return Err(parse_err(path, 1, "no coordinate columns"));
    }
    let mut acc: BTreeMap<i64, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (line, row) in &table.rows {
        let t = parse_time(&row[0], path, *line)?;
        let entry = acc.entry(t).or_default();
        for j in 0..d {
            entry.0.push(parse_f64(&row[1 + j], path, *line, &h[1 + j])?);
        }
        let c = if has_mult {
            parse_f64(&row[1 + d], path, *line, "multiplicity")?
        } else {
            1.0
        };
        if !(c > 0.0) {
            return Err(parse_err(path, *line, format!("multiplicity must be positive, got {c}")));
        }
        entry.1.push(c);
    }
    let frames = acc
        .into_iter()
        .map(|(t, (coords, w))| Ok((t, Frame::new(d, coords, w)?)))
        .collect::<Result<_>>()?;
    Ok(TimedFrames { d, frames })
}

pub fn save_particles(path: &Path, times: &[i64], y: &CytogramSeries) -> Result<()> {
    if times.len() != y.len() {
        return Err(Error::dim("time labels and frames disagree"));
    }
    let mut w = csv::Writer::from_writer(create(path)?);
    let werr = |e: csv::Error| write_err(path, e);
    let mut header = vec!["time".to_string()];
    header.extend((1..=y.dim()).map(|j| format!("y{j}")));
    header.push("multiplicity".into());
    w.write_record(&header).map_err(werr)?;
    for (t, f) in times.iter().zip(y.frames()) {
        for (p, c) in f.iter() {
            let mut rec = vec![t.to_string()];
            rec.extend(p.iter().map(f64::to_string));
            rec.push(c.to_string());
            w.write_record(&rec).map_err(werr)?;
        }
    }
    w.flush().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Grid descriptor stored next to a binned table.
pub fn grid_sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".grid.json");
    PathBuf::from(s)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GridDocument {
    lower: Vec<f64>,
    upper: Vec<f64>,
    #[serde(rename = "D")]
    bins_per_axis: usize,
}

pub fn save_grid(path: &Path, grid: &BinGrid) -> Result<()> {
    let doc = GridDocument {
        lower: grid.lower.clone(),
        upper: grid.upper.clone(),
        bins_per_axis: grid.bins_per_axis,
    };
    let f = create(path)?;
    serde_json::to_writer_pretty(f, &doc).map_err(|e| Error::Document(format!("{}: {e}", path.display())))
}

pub fn load_grid(path: &Path) -> Result<BinGrid> {
    let doc: GridDocument = serde_json::from_reader(open(path)?)
        .map_err(|e| Error::Document(format!("{}: {e}", path.display())))?;
    BinGrid::new(doc.lower, doc.upper, doc.bins_per_axis)
}

/// Binned table `time,bin_index,multiplicity`; the grid comes from the
/// sidecar file `<path>.grid.json`.
pub fn load_binned(path: &Path) -> Result<(Vec<i64>, BinnedCytogramSeries)> {
    let grid = load_grid(&grid_sidecar_path(path))?;
    let total = grid.total_bins();
    let table = read_table(open(path)?, path)?;
    if table.header != ["time", "bin_index", "multiplicity"] {
        return Err(parse_err(path, 1, "header must be `time,bin_index,multiplicity`"));
    }
    let mut acc: BTreeMap<i64, BTreeMap<usize, f64>> = BTreeMap::new();
    for (line, row) in &table.rows {
        let t = parse_time(&row[0], path, *line)?;
        let b: usize = row[1]
            .parse()
            .map_err(|_| parse_err(path, *line, format!("bin index `{}` is not a nonnegative integer", row[1])))?;
        if b >= total {
            return Err(parse_err(path, *line, format!("bin index {b} out of range (B = {total})")));
        }
        let c = parse_f64(&row[2], path, *line, "multiplicity")?;
        if !(c > 0.0) {
            return Err(parse_err(path, *line, format!("multiplicity must be positive, got {c}")));
        }
        let slot = acc.entry(t).or_default().entry(b).or_insert(0.0);
        if *slot != 0.0 {
            return Err(parse_err(path, *line, format!("bin {b} repeated at time {t}")));
        }
        *slot = c;
    }
    let times: Vec<i64> = acc.keys().copied().collect();
    let frames = acc.into_values().map(|m| m.into_iter().collect()).collect();
    Ok((times, BinnedCytogramSeries::new(grid, frames)?))
}

pub fn save_binned(path: &Path, times: &[i64], binned: &BinnedCytogramSeries) -> Result<()> {
    if times.len() != binned.len() {
        return Err(Error::dim("time labels and frames disagree"));
    }
    let mut w = csv::Writer::from_writer(create(path)?);
    let werr = |e: csv::Error| write_err(path, e);
    w.write_record(["time", "bin_index", "multiplicity"]).map_err(werr)?;
    for (t, f) in times.iter().zip(binned.frames()) {
        for &(b, c) in f {
            w.write_record([t.to_string(), b.to_string(), c.to_string()]).map_err(werr)?;
        }
    }
    w.flush().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    save_grid(&grid_sidecar_path(path), binned.grid())
}

impl TimedFrames {
    pub fn from_binned(times: &[i64], binned: &BinnedCytogramSeries) -> Result<Self> {
        let series = binned.to_cytograms()?;
        Ok(TimedFrames {
            d: series.dim(),
            frames: times.iter().copied().zip(series.frames().iter().cloned()).collect(),
        })
    }

    /// Cytograms ordered like the covariate rows. Every cytogram time must
    /// be a covariate time; covariate times without particles get an empty
    /// frame.
    pub fn align(&self, x: &CovariateSeries) -> Result<CytogramSeries> {
        let index: HashMap<i64, usize> = x.times().iter().enumerate().map(|(i, &t)| (t, i)).collect();
        if let Some(t) = self.frames.keys().find(|t| !index.contains_key(t)) {
            return Err(Error::invalid(format!("cytogram time {t} has no covariate row")));
        }
        let frames = x
            .times()
            .iter()
            .map(|t| self.frames.get(t).cloned().unwrap_or_else(|| Frame::empty(self.d)))
            .collect();
        CytogramSeries::new(self.d, frames)
    }

    pub fn times(&self) -> Vec<i64> {
        self.frames.keys().copied().collect()
    }

    pub fn series(&self) -> Result<CytogramSeries> {
        CytogramSeries::new(self.d, self.frames.values().cloned().collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterDocument {
    pub alpha0: f64,
    pub alpha: Vec<f64>,
    pub beta0: Vec<f64>,
    /// `p` rows of length `d`.
    pub beta: Vec<Vec<f64>>,
    /// `d` rows of length `d`.
    pub sigma: Vec<Vec<f64>>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], nrows: usize, ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Document(format!("`{what}` must be {nrows} x {ncols}")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl ClusterDocument {
    pub fn from_params(c: &ClusterParams) -> Self {
        ClusterDocument {
            alpha0: c.alpha0,
            alpha: c.alpha.iter().copied().collect(),
            beta0: c.beta0.iter().copied().collect(),
            beta: rows_of(&c.beta),
            sigma: rows_of(&c.sigma),
        }
    }

    pub fn to_params(&self, p: usize, d: usize) -> Result<ClusterParams> {
        if self.alpha.len() != p || self.beta0.len() != d {
            return Err(Error::Document(format!("`alpha` must have length {p} and `beta0` length {d}")));
        }
        Ok(ClusterParams {
            alpha0: self.alpha0,
            alpha: DVector::from_vec(self.alpha.clone()),
            beta0: DVector::from_vec(self.beta0.clone()),
            beta: matrix_from_rows(&self.beta, p, d, "beta")?,
            sigma: matrix_from_rows(&self.sigma, d, d, "sigma")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperDocument {
    pub lambda_alpha: f64,
    pub lambda_beta: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct FitMetadata {
    pub seed: u64,
    pub restarts: usize,
    pub winner: usize,
    pub objective: f64,
    pub objective_trace: Vec<f64>,
    /// `null` marks a restart that failed.
    pub restart_objectives: Vec<Option<f64>>,
    pub converged: bool,
    pub admm_unconverged: usize,
    pub empty_cluster_events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    pub schema_version: u32,
    pub k: usize,
    pub p: usize,
    pub d: usize,
    pub t: usize,
    pub covariate_names: Vec<String>,
    pub clusters: Vec<ClusterDocument>,
    pub hyperparams: HyperDocument,
    /// Applied to raw covariates before the model sees them.
    pub scaling: ColumnScaling,
    pub fit: FitMetadata,
}

impl ModelDocument {
    pub fn new(
        params: &ModelParams,
        covariate_names: Vec<String>,
        t: usize,
        hyper: &Hyperparams,
        scaling: ColumnScaling,
        fit: FitMetadata,
    ) -> Self {
        ModelDocument {
            schema_version: SCHEMA_VERSION,
            k: params.k(),
            p: params.p(),
            d: params.d(),
            t,
            covariate_names,
            clusters: params.clusters.iter().map(ClusterDocument::from_params).collect(),
            hyperparams: HyperDocument {
                lambda_alpha: hyper.lambda_alpha,
                lambda_beta: hyper.lambda_beta,
                radius: hyper.radius,
            },
            scaling,
            fit,
        }
    }

    pub fn from_fit(fit: &FitResult, x: &CovariateSeries, hyper: &Hyperparams, scaling: ColumnScaling, restarts: usize) -> Self {
        let meta = FitMetadata {
            seed: fit.seed,
            restarts,
            winner: fit.winner,
            objective: fit.objective,
            objective_trace: fit.objective_trace.clone(),
            restart_objectives: fit
                .restart_objectives
                .iter()
                .map(|&v| v.is_finite().then_some(v))
                .collect(),
            converged: fit.converged,
            admm_unconverged: fit.diagnostics.admm_unconverged,
            empty_cluster_events: fit.diagnostics.empty_cluster_events,
        };
        Self::new(&fit.params, x.names().to_vec(), x.len(), hyper, scaling, meta)
    }

    /// Parameters after checking the document's shape and invariants.
    pub fn params(&self) -> Result<ModelParams> {
        if self.clusters.len() != self.k {
            return Err(Error::Document(format!("k = {} but {} clusters listed", self.k, self.clusters.len())));
        }
        if self.covariate_names.len() != self.p {
            return Err(Error::Document(format!(
                "p = {} but {} covariate names",
                self.p,
                self.covariate_names.len()
            )));
        }
        if self.scaling.means.len() != self.p || self.scaling.scales.len() != self.p {
            return Err(Error::Document("scaling length differs from p".into()));
        }
        if self.scaling.scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Document("scaling factors must be finite and positive".into()));
        }
        let clusters = self
            .clusters
            .iter()
            .map(|c| c.to_params(self.p, self.d))
            .collect::<Result<Vec<_>>>()?;
        ModelParams::new(clusters).map_err(|e| Error::Document(format!("invalid parameters: {e}")))
    }

    pub fn hyperparams(&self) -> Result<Hyperparams> {
        let h = &self.hyperparams;
        Hyperparams::new(h.lambda_alpha, h.lambda_beta, h.radius)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Document(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Document(e.to_string()))?;
        match value.get("schema_version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(SCHEMA_VERSION) => {}
            Some(v) => {
                return Err(Error::Document(format!(
                    "unsupported schema version {v} (expected {SCHEMA_VERSION})"
                )))
            }
            None => return Err(Error::Document("missing field `schema_version`".into())),
        }
        let doc: ModelDocument = serde_json::from_value(value).map_err(|e| Error::Document(e.to_string()))?;
        doc.params()?;
        doc.hyperparams().map_err(|e| Error::Document(e.to_string()))?;
        Ok(doc)
    }
}

pub fn save_model(path: &Path, doc: &ModelDocument) -> Result<()> {
    let mut f = create(path)?;
    f.write_all(doc.to_json()?.as_bytes()).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_model(path: &Path) -> Result<ModelDocument> {
    let mut text = String::new();
    open(path)?.read_to_string(&mut text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    ModelDocument::from_json(&text).map_err(|e| match e {
        Error::Document(m) => Error::Document(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Full fitted state, including responsibilities, as canonical JSON. Two
/// fits agree bit-for-bit exactly when these strings are equal.
pub fn fit_result_json(fit: &FitResult) -> Result<String> {
    #[derive(Serialize)]
    struct Snapshot<'a> {
        clusters: Vec<ClusterDocument>,
        objective: f64,
        objective_trace: &'a [f64],
        converged: bool,
        winner: usize,
        restart_objectives: Vec<Option<f64>>,
        responsibilities: &'a [Vec<f64>],
        seed: u64,
    }
    let snap = Snapshot {
        clusters: fit.params.clusters.iter().map(ClusterDocument::from_params).collect(),
        objective: fit.objective,
        objective_trace: &fit.objective_trace,
        converged: fit.converged,
        winner: fit.winner,
        restart_objectives: fit
            .restart_objectives
            .iter()
            .map(|&v| v.is_finite().then_some(v))
            .collect(),
        responsibilities: fit.responsibilities.frames(),
        seed: fit.seed,
    };
    serde_json::to_string(&snap).map_err(|e| Error::Document(e.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub time: i64,
    /// 1-based.
    pub cluster: usize,
    pub probability: f64,
    pub mean: Vec<f64>,
    /// `mean -/+ 2 sqrt(diag Sigma_k)`.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Per-time cluster probabilities and means for covariates laid out like the
/// model's (same names, same order, already scaled).
pub fn predict(params: &ModelParams, names: &[String], x: &CovariateSeries) -> Result<Vec<PredictionRow>> {
    if x.names() != names {
        return Err(Error::invalid(format!(
            "covariate columns {:?} do not match the model's {:?}",
            x.names(),
            names
        )));
    }
    let sds: Vec<Vec<f64>> = params
        .clusters
        .iter()
        .map(|c| (0..c.sigma.nrows()).map(|j| c.sigma[(j, j)].sqrt()).collect())
        .collect();
    let mut rows = Vec::with_capacity(x.len() * params.k());
    for t in 0..x.len() {
        let xt = x.row(t);
        let pi = mixture_weights(params, &xt);
        let mu = cluster_means(params, &xt);
        for k in 0..params.k() {
            let mean: Vec<f64> = mu.row(k).iter().copied().collect();
            rows.push(PredictionRow {
                time: x.times()[t],
                cluster: k + 1,
                probability: pi[k],
                lower: mean.iter().zip(&sds[k]).map(|(m, s)| m - 2.0 * s).collect(),
                upper: mean.iter().zip(&sds[k]).map(|(m, s)| m + 2.0 * s).collect(),
                mean,
            });
        }
    }
    Ok(rows)
}

/// Predictions from a model document applied to raw covariates: the stored
/// scaling is applied first.
pub fn predict_document(doc: &ModelDocument, raw: &CovariateSeries) -> Result<Vec<PredictionRow>> {
    let params = doc.params()?;
    if raw.names() != doc.covariate_names.as_slice() {
        return Err(Error::invalid(format!(
            "covariate columns {:?} do not match the model's {:?}",
            raw.names(),
            doc.covariate_names
        )));
    }
    let x = doc.scaling.apply(raw)?;
    predict(&params, &doc.covariate_names, &x)
}

pub fn write_predictions<W: Write>(rows: &[PredictionRow], d: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let werr = |e: csv::Error| Error::Io {
        path: PathBuf::from("<predictions>"),
        source: std::io::Error::other(e.to_string()),
    };
    let mut header = vec!["time".to_string(), "cluster".into(), "probability".into()];
    for j in 1..=d {
        header.push(format!("mean_y{j}"));
        header.push(format!("lower_y{j}"));
        header.push(format!("upper_y{j}"));
    }
    w.write_record(&header).map_err(werr)?;
    for r in rows {
        let mut rec = vec![r.time.to_string(), r.cluster.to_string(), r.probability.to_string()];
        for j in 0..d {
            rec.push(r.mean[j].to_string());
            rec.push(r.lower[j].to_string());
            rec.push(r.upper[j].to_string());
        }
        w.write_record(&rec).map_err(werr)?;
    }
    w.flush().map_err(|e| Error::Io {
        path: PathBuf::from("<predictions>"),
        source: e,
    })
}
