//! Synthetic Gaussian graphical models with known ground truth.
//!
//! Graphs are generated by the geometric scheme: node positions are sampled
//! uniformly on the unit square, a pair is connected with probability
//! `phi(d / sqrt(p))` (standard normal density of the scaled distance), edges
//! are randomly removed until every node has at most `m` neighbors, and the
//! surviving off-diagonal precision entries are drawn from `Unif(0, c/m)`
//! with unit diagonal. Samples are i.i.d. `N_p(0, theta^{-1})` rows.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::linalg;
use crate::rng::stream_rng;
use crate::{Error, Result};

/// An n-by-p data matrix with observations in rows.
pub type Dataset = DMatrix<f64>;

// Distinct sub-streams so that graph generation and sampling never share
// draws even when called with the same seed.
const STREAM_GRAPH: u64 = 0x6772_6170;
const STREAM_DATA: u64 = 0x6461_7461;

/// Eigenvalue floor below which the generated precision matrix is rescaled.
const PD_FLOOR: f64 = 1e-6;
/// Off-diagonal shrink factor used by the positive-definiteness repair.
const PD_SHRINK: f64 = 0.9;
const PD_REPAIR_MAX: usize = 20;

/// A sparse precision matrix together with its covariance and edge set.
#[derive(Debug, Clone)]
pub struct GraphSpec {
    /// Node count.
    pub p: usize,
    /// Maximum number of edges per node.
    pub m: usize,
    /// Signal-magnitude parameter in (0, 1].
    pub c: f64,
    /// Precision matrix, symmetric positive definite with unit diagonal.
    pub theta: DMatrix<f64>,
    /// Covariance matrix, the inverse of `theta`.
    pub sigma: DMatrix<f64>,
    /// Unordered node pairs (j, k), j < k, with a nonzero precision entry.
    pub true_edges: BTreeSet<(usize, usize)>,
    // Node positions on [0,1]^2; kept so a generation is fully reproducible
    // from its GraphSpec, but not part of any output.
    #[allow(dead_code)]
    positions: Vec<(f64, f64)>,
}

impl GraphSpec {
    /// Precision entry for an unordered pair.
    pub fn theta_entry(&self, j: usize, k: usize) -> f64 {
        self.theta[(j, k)]
    }

    /// Number of off-diagonal nonzeros in row `i`.
    pub fn degree(&self, i: usize) -> usize {
        (0..self.p)
            .filter(|&j| j != i && self.theta[(i, j)] != 0.0)
            .count()
    }
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Generate a sparse precision matrix by the geometric scheme.
///
/// Deterministic given `seed`. Fails only if the input parameters are out of
/// range or the positive-definiteness repair cannot succeed (which does not
/// happen for `c <= 1`: row sums of off-diagonal magnitudes stay below the
/// unit diagonal, so the matrix is strictly diagonally dominant).
pub fn generate_precision(p: usize, m: usize, c: f64, seed: u64) -> Result<GraphSpec> {
    if p < 2 {
        return Err(Error::InvalidArgument(format!("p must be >= 2, got {p}")));
    }
    if m == 0 {
        return Err(Error::InvalidArgument("m must be positive".into()));
    }
    if !(c > 0.0 && c <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "c must lie in (0, 1], got {c}"
        )));
    }

    let mut rng = stream_rng(seed, STREAM_GRAPH);

    let positions: Vec<(f64, f64)> = (0..p)
        .map(|_| (rng.gen::<f64>(), rng.gen::<f64>()))
        .collect();

    // Candidate edges: pair (j, k) connected with probability phi(d/sqrt(p)).
    let mut edges: Vec<(usize, usize)> = Vec::new();
    let sqrt_p = (p as f64).sqrt();
    for j in 0..p {
        for k in (j + 1)..p {
            let dx = positions[j].0 - positions[k].0;
            let dy = positions[j].1 - positions[k].1;
            let dist = (dx * dx + dy * dy).sqrt();
            let prob = std_normal_pdf(dist / sqrt_p);
            if rng.gen::<f64>() < prob {
                edges.push((j, k));
            }
        }
    }

    // Remove edges uniformly at random among those incident to a node that
    // still exceeds the degree cap, until the cap holds everywhere. The cap
    // applies to the symmetric graph: an edge counts toward both endpoints.
    let mut degree = vec![0usize; p];
    for &(j, k) in &edges {
        degree[j] += 1;
        degree[k] += 1;
    }
    loop {
        let violating: Vec<usize> = edges
            .iter()
            .enumerate()
            .filter(|(_, &(j, k))| degree[j] > m || degree[k] > m)
            .map(|(idx, _)| idx)
            .collect();
        if violating.is_empty() {
            break;
        }
        let pick = violating[rng.gen_range(0..violating.len())];
        let (j, k) = edges.swap_remove(pick);
        degree[j] -= 1;
        degree[k] -= 1;
    }
    edges.sort_unstable();

    let mut theta = DMatrix::<f64>::identity(p, p);
    for &(j, k) in &edges {
        let w = rng.gen_range(0.0..c / m as f64);
        theta[(j, k)] = w;
        theta[(k, j)] = w;
    }

    // Repair: shrink off-diagonals until the smallest eigenvalue clears the
    // floor. Support is preserved because entries are scaled, never zeroed.
    let mut repairs = 0;
    while linalg::smallest_eigenvalue(&theta) <= PD_FLOOR {
        if repairs == PD_REPAIR_MAX {
            return Err(Error::NotPositiveDefinite(
                "precision repair failed after 20 rescalings".into(),
            ));
        }
        for &(j, k) in &edges {
            theta[(j, k)] *= PD_SHRINK;
            theta[(k, j)] *= PD_SHRINK;
        }
        repairs += 1;
    }

    let mut sigma = linalg::spd_inverse(&theta).ok_or_else(|| {
        Error::NotPositiveDefinite("theta passed the eigenvalue floor but Cholesky failed".into())
    })?;
    linalg::symmetrize(&mut sigma);

    let true_edges: BTreeSet<(usize, usize)> = edges
        .iter()
        .copied()
        .filter(|&(j, k)| theta[(j, k)] != 0.0)
        .collect();

    Ok(GraphSpec {
        p,
        m,
        c,
        theta,
        sigma,
        true_edges,
        positions,
    })
}

/// Draw `n` i.i.d. rows from `N_p(0, spec.sigma)`.
///
/// Requires `n >= p + 1` so the Wishart exponent `(n - p - 1)/2` stays
/// nonnegative; inference itself later insists on the strict `n > p + 1`.
/// Deterministic given `seed`; rows are generated in order, entries within a
/// row in column order.
pub fn sample_data(spec: &GraphSpec, n: usize, seed: u64) -> Result<Dataset> {
    let p = spec.p;
    if n <= p {
        return Err(Error::Dimension(format!(
            "need n >= p + 1 observations, got n = {n}, p = {p}"
        )));
    }
    let l = linalg::cholesky_lower(&spec.sigma, 0.0).ok_or_else(|| {
        Error::NotPositiveDefinite("covariance matrix is not positive definite".into())
    })?;

    let mut rng = stream_rng(seed, STREAM_DATA);
    let mut data = DMatrix::<f64>::zeros(n, p);
    let mut z = vec![0.0f64; p];
    for r in 0..n {
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        // x = L z so that Cov(x) = L Lᵀ = sigma.
        for i in 0..p {
            let mut acc = 0.0;
            for k in 0..=i {
                acc += l[(i, k)] * z[k];
            }
            data[(r, i)] = acc;
        }
    }
    Ok(data)
}
