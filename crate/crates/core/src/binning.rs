//! Lattice coarsening of cytograms.
//!
//! Bin indices are linearized with axis 0 varying fastest:
//! `b = i_0 + D * i_1 + D^2 * i_2 + ...`. Bins are half-open `[lo, hi)` along
//! every axis, except that the top edge of the domain belongs to the last bin.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{weighted_log_likelihood, CovariateSeries, CytogramSeries, Frame, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinGrid {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Bins per axis (`D`).
    pub bins_per_axis: usize,
}

impl BinGrid {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, bins_per_axis: usize) -> Result<Self> {
        let g = BinGrid {
            lower,
            upper,
            bins_per_axis,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.is_empty() || self.lower.len() != self.upper.len() {
            return Err(Error::dim("grid bounds must be nonempty and of equal length"));
        }
        if self.bins_per_axis == 0 {
            return Err(Error::invalid("bins per axis must be at least 1"));
        }
        for (j, (lo, hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::invalid(format!("axis {j}: need lower < upper")));
            }
        }
        if self.try_total_bins().is_none() {
            return Err(Error::invalid("too many bins"));
        }
        Ok(())
    }

    /// Bounds spanning every particle in `y`, widened by 1% of the range on
    /// each side.
    pub fn covering(y: &CytogramSeries, bins_per_axis: usize) -> Result<Self> {
        let (lower, upper) = y
            .axis_bounds()
            .into_iter()
            .map(|(lo, hi)| {
                let pad = if hi > lo { 0.01 * (hi - lo) } else { 0.01 * lo.abs().max(1.0) };
                (lo - pad, hi + pad)
            })
            .unzip();
        Self::new(lower, upper, bins_per_axis)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    fn try_total_bins(&self) -> Option<usize> {
        self.bins_per_axis.checked_pow(self.dim() as u32)
    }

    /// `B = D^d`.
    pub fn total_bins(&self) -> usize {
        self.try_total_bins().expect("validated grid")
    }

    pub fn width(&self, axis: usize) -> f64 {
        (self.upper[axis] - self.lower[axis]) / self.bins_per_axis as f64
    }

    /// Per-axis lattice coordinates of bin `b`.
    pub fn unravel(&self, mut b: usize) -> Vec<usize> {
        let dd = self.bins_per_axis;
        (0..self.dim())
            .map(|_| {
                let i = b % dd;
                b /= dd;
                i
            })
            .collect()
    }

    pub fn center(&self, b: usize) -> Vec<f64> {
        self.unravel(b)
            .into_iter()
            .enumerate()
            .map(|(j, i)| self.lower[j] + (i as f64 + 0.5) * self.width(j))
            .collect()
    }

    /// The bin containing `y`, or `None` when `y` lies outside the domain.
    pub fn locate(&self, y: &[f64]) -> Option<usize> {
        if y.len() != self.dim() {
            return None;
        }
        let dd = self.bins_per_axis;
        let mut b = 0usize;
        let mut stride = 1usize;
        for (j, &v) in y.iter().enumerate() {
            let (lo, hi) = (self.lower[j], self.upper[j]);
            if !(v >= lo && v <= hi) {
                return None;
            }
            let raw = ((v - lo) / (hi - lo) * dd as f64).floor();
            let i = (raw.max(0.0) as usize).min(dd - 1);
            b += i * stride;
            stride *= dd;
        }
        Some(b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinMode {
    /// Every particle contributes one.
    Counts,
    /// Every particle contributes its multiplicity.
    Weights,
}

/// Sparse per-time bin multiplicities on a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedCytogramSeries {
    grid: BinGrid,
    /// Per time point, `(bin, multiplicity)` sorted by bin with strictly
    /// positive multiplicities.
    frames: Vec<Vec<(usize, f64)>>,
}

impl BinnedCytogramSeries {
    pub fn new(grid: BinGrid, mut frames: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        grid.validate()?;
        let total = grid.total_bins();
        for (t, f) in frames.iter_mut().enumerate() {
            f.retain(|&(_, c)| c != 0.0);
            f.sort_by_key(|&(b, _)| b);
            for w in f.windows(2) {
                if w[0].0 == w[1].0 {
                    return Err(Error::invalid(format!("time {t}: bin {} repeated", w[0].0)));
                }
            }
            for &(b, c) in f.iter() {
                if b >= total {
                    return Err(Error::invalid(format!(
                        "time {t}: bin index {b} out of range (B = {total})"
                    )));
                }
                if !(c > 0.0) || !c.is_finite() {
                    return Err(Error::invalid(format!("time {t}: invalid multiplicity {c}")));
                }
            }
        }
        Ok(BinnedCytogramSeries { grid, frames })
    }

    pub fn grid(&self) -> &BinGrid {
        &self.grid
    }

    pub fn frames(&self) -> &[Vec<(usize, f64)>] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.frames.iter().flatten().map(|&(_, c)| c).sum()
    }

    /// Replace every bin by a particle at its center carrying the bin's
    /// multiplicity.
    pub fn to_cytograms(&self) -> Result<CytogramSeries> {
        let d = self.grid.dim();
        let frames = self
            .frames
            .iter()
            .map(|f| {
                let mut coords = Vec::with_capacity(f.len() * d);
                let mut weights = Vec::with_capacity(f.len());
                for &(b, c) in f {
                    coords.extend(self.grid.center(b));
                    weights.push(c);
                }
                Frame::new(d, coords, weights)
            })
            .collect::<Result<Vec<_>>>()?;
        CytogramSeries::new(d, frames)
    }
}

fn bin_frame(frame: &Frame, grid: &BinGrid, mode: BinMode) -> (Vec<(usize, f64)>, usize, Option<usize>) {
    let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
    let mut skipped = 0;
    let mut first_bad = None;
    for (i, (y, w)) in frame.iter().enumerate() {
        match grid.locate(y) {
            Some(b) => {
                let c = match mode {
                    BinMode::Counts => 1.0,
                    BinMode::Weights => w,
                };
                *acc.entry(b).or_insert(0.0) += c;
            }
            None => {
                skipped += 1;
                first_bad.get_or_insert(i);
            }
        }
    }
    (acc.into_iter().collect(), skipped, first_bad)
}

/// Aggregate particles into bins. Any out-of-domain particle is an error.
pub fn bin_particles(y: &CytogramSeries, grid: &BinGrid, mode: BinMode) -> Result<BinnedCytogramSeries> {
    if y.dim() != grid.dim() {
        return Err(Error::dim("grid and cytogram dimensions differ"));
    }
    let results: Vec<_> = y
        .frames()
        .par_iter()
        .map(|f| bin_frame(f, grid, mode))
        .collect();
    let mut frames = Vec::with_capacity(results.len());
    for (t, (bins, _, first_bad)) in results.into_iter().enumerate() {
        if let Some(i) = first_bad {
            return Err(Error::invalid(format!(
                "time {t}: particle {i} lies outside the grid domain"
            )));
        }
        frames.push(bins);
    }
    BinnedCytogramSeries::new(grid.clone(), frames)
}

/// Like [`bin_particles`], but drops out-of-domain particles and reports how
/// many were dropped.
pub fn bin_particles_tolerant(
    y: &CytogramSeries,
    grid: &BinGrid,
    mode: BinMode,
) -> Result<(BinnedCytogramSeries, usize)> {
    if y.dim() != grid.dim() {
        return Err(Error::dim("grid and cytogram dimensions differ"));
    }
    let results: Vec<_> = y
        .frames()
        .par_iter()
        .map(|f| bin_frame(f, grid, mode))
        .collect();
    let skipped = results.iter().map(|r| r.1).sum();
    if skipped > 0 {
        log::warn!("{skipped} particles outside the grid domain were skipped");
    }
    let frames = results.into_iter().map(|r| r.0).collect();
    Ok((BinnedCytogramSeries::new(grid.clone(), frames)?, skipped))
}

/// Carbon biomass of a particle, `diameter^3` with unit proportionality.
pub fn biomass_multiplicity(y: &[f64], diameter_axis: usize, log_scale: bool) -> Result<f64> {
    let v = *y
        .get(diameter_axis)
        .ok_or_else(|| Error::dim(format!("no axis {diameter_axis} in a {}-vector", y.len())))?;
    if log_scale {
        if !v.is_finite() {
            return Err(Error::NonFinite("log diameter".into()));
        }
        Ok((3.0 * v).exp())
    } else {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::invalid(format!("nonpositive diameter {v}")));
        }
        Ok(v * v * v)
    }
}

/// Multiply every particle's multiplicity by its biomass.
pub fn with_biomass(y: &CytogramSeries, diameter_axis: usize, log_scale: bool) -> Result<CytogramSeries> {
    let frames = y
        .frames()
        .iter()
        .map(|f| {
            let weights = f
                .iter()
                .map(|(p, w)| biomass_multiplicity(p, diameter_axis, log_scale).map(|b| b * w))
                .collect::<Result<Vec<_>>>()?;
            Frame::new(f.dim(), f.coords().to_vec(), weights)
        })
        .collect::<Result<Vec<_>>>()?;
    CytogramSeries::new(y.dim(), frames)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinningBoundRow {
    pub total_bins: usize,
    /// `|f_B - f|` at the supplied parameters.
    pub gap: f64,
    /// `R sqrt(d) B^(-1/d)`, the bin diagonal with `R` the largest grid side.
    pub displacement_bound: f64,
    /// `sqrt(particle count) * displacement_bound`; the objective gap is at
    /// most a Lipschitz constant times this.
    pub bound_factor: f64,
}

pub fn displacement_bound(side: f64, d: usize, total_bins: usize) -> f64 {
    side * (d as f64).sqrt() * (total_bins as f64).powf(-1.0 / d as f64)
}

/// Binned-versus-exact objective gap for each grid, at fixed parameters.
pub fn verify_binning_bound(
    params: &ModelParams,
    x: &CovariateSeries,
    y: &CytogramSeries,
    grids: &[BinGrid],
) -> Result<Vec<BinningBoundRow>> {
    let n = y.total_weight();
    let exact = -weighted_log_likelihood(params, x, y)? / n;
    let count = y.particle_count() as f64;
    grids
        .iter()
        .map(|g| {
            let binned = bin_particles(y, g, BinMode::Weights)?.to_cytograms()?;
            let approx = -weighted_log_likelihood(params, x, &binned)? / binned.total_weight();
            let side = (0..g.dim())
                .map(|j| g.upper[j] - g.lower[j])
                .fold(0.0, f64::max);
            let disp = displacement_bound(side, g.dim(), g.total_bins());
            Ok(BinningBoundRow {
                total_bins: g.total_bins(),
                gap: (approx - exact).abs(),
                displacement_bound: disp,
                bound_factor: count.sqrt() * disp,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ClusterParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(d: usize, bins: usize) -> BinGrid {
        BinGrid::new(vec![0.0; d], vec![1.0; d], bins).unwrap()
    }

    #[test]
    fn locate_examples() {
        let g = unit(1, 2);
        assert_eq!(g.locate(&[0.3]), Some(0));
        assert_eq!(g.center(0), vec![0.25]);
        assert_eq!(g.locate(&[1.0]), Some(1));
        assert_eq!(g.locate(&[0.5]), Some(1));
        assert_eq!(g.locate(&[0.0]), Some(0));
        assert_eq!(g.locate(&[1.0001]), None);
        assert_eq!(g.locate(&[-0.1]), None);
        let g2 = unit(2, 2);
        let b = g2.locate(&[0.6, 0.1]).unwrap();
        assert_eq!(g2.center(b), vec![0.75, 0.25]);
    }

    #[test]
    fn locate_inverts_center() {
        for d in 1..=3 {
            for bins in [1, 2, 3, 7, 16, 40, 64] {
                let g = BinGrid::new(vec![-2.5; d], vec![3.1; d], bins).unwrap();
                let total = g.total_bins();
                let step = (total / 500).max(1);
                for b in (0..total).step_by(step) {
                    assert_eq!(g.locate(&g.center(b)), Some(b));
                }
            }
        }
    }

    #[test]
    fn d40_grid_in_3d_has_64000_bins() {
        assert_eq!(unit(3, 40).total_bins(), 64_000);
    }

    #[test]
    fn counts_and_conservation() {
        let y = CytogramSeries::new(
            1,
            vec![Frame::new(1, vec![0.1, 0.12, 0.2, 0.9], vec![2.0, 1.0, 0.5, 1.0]).unwrap()],
        )
        .unwrap();
        let g = unit(1, 4);
        let counts = bin_particles(&y, &g, BinMode::Counts).unwrap();
        assert_eq!(counts.frames()[0], vec![(0, 3.0), (3, 1.0)]);
        let weights = bin_particles(&y, &g, BinMode::Weights).unwrap();
        assert_eq!(weights.frames()[0], vec![(0, 3.5), (3, 1.0)]);
        assert_eq!(weights.total_weight(), y.total_weight());
    }

    #[test]
    fn strict_mode_rejects_outside_particles() {
        let y = CytogramSeries::new(1, vec![Frame::unweighted(1, vec![0.5, 1.5]).unwrap()]).unwrap();
        assert!(bin_particles(&y, &unit(1, 4), BinMode::Counts).is_err());
        let (b, skipped) = bin_particles_tolerant(&y, &unit(1, 4), BinMode::Counts).unwrap();
        assert_eq!(skipped, 1);
        assert_eq!(b.total_weight(), 1.0);
    }

    #[test]
    fn displacement_within_half_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = BinGrid::new(vec![-1.0, 0.0], vec![1.0, 5.0], 13).unwrap();
        for _ in 0..2000 {
            let y = [rng.random_range(-1.0..=1.0), rng.random_range(0.0..=5.0)];
            let c = g.center(g.locate(&y).unwrap());
            for j in 0..2 {
                assert!((y[j] - c[j]).abs() <= 0.5 * g.width(j) * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn biomass_examples() {
        assert_eq!(biomass_multiplicity(&[2.0], 0, false).unwrap(), 8.0);
        assert_eq!(biomass_multiplicity(&[0.0], 0, true).unwrap(), 1.0);
        assert!((biomass_multiplicity(&[1.0, 2f64.ln()], 1, true).unwrap() - 8.0).abs() < 1e-12);
        assert!(biomass_multiplicity(&[-1.0], 0, false).is_err());
        assert!(biomass_multiplicity(&[0.0], 0, false).is_err());
    }

    #[test]
    fn doubling_bins_halves_displacement_bound() {
        let a = displacement_bound(2.0, 1, 10);
        let b = displacement_bound(2.0, 1, 20);
        assert!((a / b - 2.0).abs() < 1e-12);
    }

    fn one_cluster(p: usize) -> ModelParams {
        let mut c = ClusterParams::zeros(p, 1);
        c.beta0[0] = 0.5;
        c.sigma[(0, 0)] = 0.04;
        ModelParams::new(vec![c]).unwrap()
    }

    #[test]
    fn centered_particles_have_zero_gap() {
        let g = unit(1, 10);
        let coords: Vec<f64> = (0..10).map(|b| g.center(b)[0]).collect();
        let y = CytogramSeries::new(1, vec![Frame::unweighted(1, coords).unwrap()]).unwrap();
        let x = CovariateSeries::from_rows(&[vec![0.0]]).unwrap();
        let rows = verify_binning_bound(&one_cluster(1), &x, &y, &[g]).unwrap();
        assert!(rows[0].gap <= 1e-12);
    }

    #[test]
    fn gap_shrinks_with_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let normal = rand_distr::Normal::new(0.5, 0.2).unwrap();
        let coords: Vec<f64> = (0..4000).map(|_| rng.sample(normal)).collect();
        let y = CytogramSeries::new(1, vec![Frame::unweighted(1, coords).unwrap()]).unwrap();
        let x = CovariateSeries::from_rows(&[vec![0.0]]).unwrap();
        let base = BinGrid::covering(&y, 1).unwrap();
        let grids: Vec<_> = [8, 16, 32, 64]
            .iter()
            .map(|&dd| BinGrid::new(base.lower.clone(), base.upper.clone(), dd).unwrap())
            .collect();
        let rows = verify_binning_bound(&one_cluster(1), &x, &y, &grids).unwrap();
        for w in rows.windows(2) {
            assert!(w[1].gap < w[0].gap, "{rows:?}");
        }
    }
}
