//! Per-column centring and scaling of covariates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CovariateSeries;

/// Affine map `x -> (x - mean) / scale` per column. Excluded columns (e.g.
/// indicators) carry `mean = 0`, `scale = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScaling {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl ColumnScaling {
    pub fn identity(p: usize) -> Self {
        ColumnScaling {
            means: vec![0.0; p],
            scales: vec![1.0; p],
        }
    }

    /// Mean and sample standard deviation of each non-excluded column.
    pub fn fit(x: &CovariateSeries, exclude: &[usize]) -> Result<Self> {
        let p = x.p();
        if let Some(&bad) = exclude.iter().find(|&&j| j >= p) {
            return Err(Error::invalid(format!("excluded column {bad} out of range (p = {p})")));
        }
        let t = x.len();
        let mut out = Self::identity(p);
        for j in 0..p {
            if exclude.contains(&j) {
                continue;
            }
            let name = &x.names()[j];
            if t < 2 {
                return Err(Error::invalid(format!(
                    "cannot standardize column `{name}` from fewer than two rows"
                )));
            }
            let col = x.values().column(j);
            let mean = col.sum() / t as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (t - 1) as f64;
            let sd = var.sqrt();
            if !(sd > 1e-12 * mean.abs().max(1.0)) {
                return Err(Error::invalid(format!("column `{name}` has zero variance")));
            }
            out.means[j] = mean;
            out.scales[j] = sd;
        }
        Ok(out)
    }

    pub fn apply(&self, x: &CovariateSeries) -> Result<CovariateSeries> {
        if x.p() != self.means.len() {
            return Err(Error::dim(format!(
                "scaling built for {} columns, series has {}",
                self.means.len(),
                x.p()
            )));
        }
        let mut out = x.clone();
        let v = out.values_mut();
        for j in 0..self.means.len() {
            for t in 0..v.nrows() {
                v[(t, j)] = (v[(t, j)] - self.means[j]) / self.scales[j];
            }
        }
        Ok(out)
    }

    pub fn is_identity(&self) -> bool {
        self.means.iter().all(|&m| m == 0.0) && self.scales.iter().all(|&s| s == 1.0)
    }
}
