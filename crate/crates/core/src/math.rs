//! Small numerical helpers shared across the solvers.

use nalgebra::{DMatrix, SymmetricEigen};

/// `log(sum(exp(v)))` with the usual max shift. Returns `-inf` for an empty
/// slice or when every entry is `-inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Softmax of `logits`, written into `out`. Both slices must have equal length.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn soft_threshold_scalar(a: f64, t: f64) -> f64 {
    if a > t {
        a - t
    } else if a < -t {
        a + t
    } else {
        0.0
    }
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Per-axis lower bound on cluster covariances.
///
/// A covariance `S` is floored by clamping the eigenvalues of
/// `D^{-1/2} S D^{-1/2}` at one, where `D = diag(scale)`. That is the exact
/// maximizer of the Gaussian likelihood over `{S : S >= D}`, so the EM ascent
/// property survives the floor.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaFloor {
    scale: Vec<f64>,
}

pub const SIGMA_FLOOR_FACTOR: f64 = 1e-6;

impl SigmaFloor {
    /// Floor at `1e-6 * range^2` per axis. Constant axes fall back to `1e-6`.
    pub fn from_ranges(ranges: &[f64]) -> Self {
        let scale = ranges
            .iter()
            .map(|&r| {
                let sq = r * r;
                SIGMA_FLOOR_FACTOR * if sq > 0.0 && sq.is_finite() { sq } else { 1.0 }
            })
            .collect();
        SigmaFloor { scale }
    }

    pub fn uniform(d: usize, value: f64) -> Self {
        SigmaFloor {
            scale: vec![value; d],
        }
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn apply(&self, sigma: &DMatrix<f64>) -> DMatrix<f64> {
        let d = sigma.nrows();
        let inv_sqrt: Vec<f64> = self.scale.iter().map(|s| 1.0 / s.sqrt()).collect();
        let mut scaled = DMatrix::from_fn(d, d, |i, j| sigma[(i, j)] * inv_sqrt[i] * inv_sqrt[j]);
        symmetrize(&mut scaled);
        let eig = SymmetricEigen::new(scaled);
        if eig.eigenvalues.iter().all(|&l| l >= 1.0) {
            let mut out = sigma.clone();
            symmetrize(&mut out);
            return out;
        }
        let clamped = eig.eigenvalues.map(|l| l.max(1.0));
        let v = &eig.eigenvectors;
        let mut rebuilt = v * DMatrix::from_diagonal(&clamped) * v.transpose();
        for i in 0..d {
            for j in 0..d {
                rebuilt[(i, j)] /= inv_sqrt[i] * inv_sqrt[j];
            }
        }
        symmetrize(&mut rebuilt);
        rebuilt
    }

    /// True when every eigenvalue of the scaled matrix is at least `1 - slack`.
    pub fn is_satisfied(&self, sigma: &DMatrix<f64>, slack: f64) -> bool {
        let d = sigma.nrows();
        let inv_sqrt: Vec<f64> = self.scale.iter().map(|s| 1.0 / s.sqrt()).collect();
        let mut scaled = DMatrix::from_fn(d, d, |i, j| sigma[(i, j)] * inv_sqrt[i] * inv_sqrt[j]);
        symmetrize(&mut scaled);
        SymmetricEigen::new(scaled)
            .eigenvalues
            .iter()
            .all(|&l| l >= 1.0 - slack)
    }
}

/// Splitmix64 step, used to derive independent child seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
