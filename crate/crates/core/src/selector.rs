//! Randomized neighborhood selection.
//!
//! For every node `i` the module solves
//!
//! ```text
//! minimize  0.5 ||X[i] - X[-i] b||^2 + lambda_i ||b||_1
//!           + (eps/2) ||b||^2 - b' omega[i]
//! ```
//!
//! over `b in R^{p-1}`, where `omega[i] ~ N(0, Omega[i])` is an externally
//! drawn randomization variable. The objective touches the data only through
//! the cross-product matrix `S = X'X`, so the solver works directly on
//! [`SuffStat`]. The ridge term makes the problem strongly convex: the
//! solution, its active set, signs and inactive subgradient are unique and
//! deterministic.
//!
//! The stationarity identity at the solution,
//!
//! ```text
//! omega = T + U (b; z) + V,
//!   T = -s_{-i,i},
//!   U = [[s_EE + eps I, 0], [s_{Ebar,E}, lambda I]],
//!   V = lambda (signs; 0),
//! ```
//!
//! is what inference later conditions on; [`verify_kkt`] reports the max-abs
//! residual of that identity in the original (unstacked) coordinate order.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::linalg;
use crate::rng::stream_rng;
use crate::simdata::Dataset;
use crate::{Error, Result};

const STREAM_OMEGA: u64 = 0x6f6d_6567;

/// Sweep cap for the coordinate-descent solver.
const MAX_SWEEPS: usize = 50_000;
/// Per-sweep coefficient-change tolerance, relative to max(1, ||b||_inf).
const SWEEP_TOL: f64 = 1e-10;
/// Stationarity residual required before a solve counts as converged. Kept a
/// shade under the 1e-8 contract so downstream re-checks have headroom.
const KKT_TOL: f64 = 0.9e-8;

/// The cross-product matrix `S = X'X` with its sample count.
#[derive(Debug, Clone)]
pub struct SuffStat {
    s: DMatrix<f64>,
    n: usize,
    p: usize,
}

impl SuffStat {
    /// Build from an n-by-p dataset. Exact symmetry is enforced by averaging
    /// `S` with its transpose.
    pub fn from_data(data: &Dataset) -> Result<Self> {
        let (n, p) = data.shape();
        if n <= p + 1 {
            return Err(Error::Dimension(format!(
                "need n > p + 1 observations, got n = {n}, p = {p}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "dataset contains non-finite entries".into(),
            ));
        }
        let mut s = data.transpose() * data;
        linalg::symmetrize(&mut s);
        Ok(SuffStat { s, n, p })
    }

    /// Wrap an already-computed cross-product matrix.
    pub fn from_matrix(s: DMatrix<f64>, n: usize) -> Result<Self> {
        let p = s.nrows();
        if s.ncols() != p {
            return Err(Error::Dimension("cross-product matrix must be square".into()));
        }
        if n <= p + 1 {
            return Err(Error::Dimension(format!(
                "need n > p + 1 observations, got n = {n}, p = {p}"
            )));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "cross-product matrix contains non-finite entries".into(),
            ));
        }
        let mut s = s;
        linalg::symmetrize(&mut s);
        Ok(SuffStat { s, n, p })
    }

    pub fn s(&self) -> &DMatrix<f64> {
        &self.s
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn entry(&self, j: usize, k: usize) -> f64 {
        self.s[(j, k)]
    }

    /// Positive definiteness via Cholesky.
    pub fn is_pd(&self) -> bool {
        linalg::cholesky_lower(&self.s, 0.0).is_some()
    }
}

/// Shorthand for the operation name used in the pipeline description.
pub fn suff_stat(data: &Dataset) -> Result<SuffStat> {
    SuffStat::from_data(data)
}

/// Penalty weights with degenerate-column diagnostics.
#[derive(Debug, Clone)]
pub struct PenaltyWeights {
    /// Per-node penalty `lambda_i = kappa_i * 2 sqrt(n) * sigma_hat_i *
    /// Phibar^{-1}(alpha / (2 p^2))`.
    pub lambda: Vec<f64>,
    /// Columns with zero sample variance; their lambda is zero and they
    /// cannot be used in a nodewise solve.
    pub degenerate: Vec<usize>,
}

/// Upper-tail standard normal quantile.
pub fn normal_upper_quantile(q: f64) -> f64 {
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    -std.inverse_cdf(q)
}

/// Tuning-formula penalty weights.
pub fn penalty_weights(data: &Dataset, alpha: f64, kappa: &[f64]) -> Result<PenaltyWeights> {
    let (n, p) = data.shape();
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    if kappa.len() != p {
        return Err(Error::Dimension(format!(
            "kappa has {} entries for p = {p}",
            kappa.len()
        )));
    }
    if kappa.iter().any(|&k| !(k > 0.0)) {
        return Err(Error::InvalidArgument("kappa entries must be positive".into()));
    }
    let z = normal_upper_quantile(alpha / (2.0 * (p * p) as f64));
    let mut lambda = Vec::with_capacity(p);
    let mut degenerate = Vec::new();
    for i in 0..p {
        let ss: f64 = data.column(i).iter().map(|v| v * v).sum();
        let sigma_hat = (ss / n as f64).sqrt();
        if sigma_hat == 0.0 {
            degenerate.push(i);
        }
        lambda.push(kappa[i] * 2.0 * (n as f64).sqrt() * sigma_hat * z);
    }
    Ok(PenaltyWeights { lambda, degenerate })
}

/// Rule for combining the p estimated neighborhoods into one edge set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rule {
    /// Edge (j,k) kept only when j selects k AND k selects j.
    And,
    /// Edge (j,k) kept when either node selects the other.
    Or,
}

impl std::fmt::Display for Rule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Rule::And => write!(f, "and"),
            Rule::Or => write!(f, "or"),
        }
    }
}

impl std::str::FromStr for Rule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "and" => Ok(Rule::And),
            "or" => Ok(Rule::Or),
            other => Err(Error::InvalidArgument(format!("unknown rule '{other}'"))),
        }
    }
}

/// One node's randomized-Lasso outcome.
///
/// Coordinates are "reduced": index `r` in `0..p-1` refers to original node
/// `r` when `r < node` and `r + 1` otherwise. `active_set` lists original
/// indices in ascending order; `inactive_subgrad` follows the ascending
/// order of the remaining original indices.
#[derive(Debug, Clone)]
pub struct NodewiseSolution {
    pub node: usize,
    pub lambda: f64,
    pub ridge: f64,
    pub omega: DVector<f64>,
    pub active_set: Vec<usize>,
    pub signs: Vec<i8>,
    pub active_coef: DVector<f64>,
    pub inactive_subgrad: DVector<f64>,
}

impl NodewiseSolution {
    /// Active-set size `q_i`.
    pub fn q(&self) -> usize {
        self.active_set.len()
    }

    /// Inactive count `p - 1 - q_i`.
    pub fn qbar(&self) -> usize {
        self.omega.len() - self.active_set.len()
    }

    /// Total node count of the underlying problem.
    pub fn p(&self) -> usize {
        self.omega.len() + 1
    }

    /// Original index of reduced coordinate `r`.
    pub fn reduced_to_orig(&self, r: usize) -> usize {
        if r < self.node {
            r
        } else {
            r + 1
        }
    }

    /// Reduced coordinate of original index `j != node`.
    pub fn orig_to_reduced(&self, j: usize) -> usize {
        debug_assert_ne!(j, self.node);
        if j < self.node {
            j
        } else {
            j - 1
        }
    }

    /// Original indices outside the active set, ascending.
    pub fn inactive_set(&self) -> Vec<usize> {
        let p = self.p();
        (0..p)
            .filter(|&j| j != self.node && !self.is_active(j))
            .collect()
    }

    /// Whether original index `j` is in the active set.
    pub fn is_active(&self, j: usize) -> bool {
        self.active_set.binary_search(&j).is_ok()
    }

    /// Position of original index `j` within the active set.
    pub fn active_pos(&self, j: usize) -> Option<usize> {
        self.active_set.binary_search(&j).ok()
    }
}

/// All p nodewise solutions plus the combined edge set.
#[derive(Debug, Clone)]
pub struct SelectionEvent {
    pub solutions: Vec<NodewiseSolution>,
    pub rule: Rule,
    pub edges: BTreeSet<(usize, usize)>,
}

impl SelectionEvent {
    pub fn p(&self) -> usize {
        self.solutions.len()
    }

    /// Edges in deterministic (lexicographic) order.
    pub fn edges_sorted(&self) -> Vec<(usize, usize)> {
        self.edges.iter().copied().collect()
    }
}

/// Per-node randomization covariances `Omega[i]` plus the draw seed.
#[derive(Debug, Clone)]
pub struct RandomizationSpec {
    covs: Vec<DMatrix<f64>>,
    chols: Vec<DMatrix<f64>>,
    pub seed: u64,
}

impl RandomizationSpec {
    /// `Omega[i] = scale^2 I` for every node; `scale` is the randomization
    /// standard deviation.
    pub fn isotropic(p: usize, scale: f64, seed: u64) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "omega scale must be positive, got {scale}"
            )));
        }
        let covs: Vec<_> = (0..p)
            .map(|_| DMatrix::<f64>::identity(p - 1, p - 1) * (scale * scale))
            .collect();
        Self::from_covs(covs, seed)
    }

    /// Arbitrary per-node covariances; each must be symmetric PD.
    pub fn from_covs(covs: Vec<DMatrix<f64>>, seed: u64) -> Result<Self> {
        let mut chols = Vec::with_capacity(covs.len());
        for (i, c) in covs.iter().enumerate() {
            if c.nrows() != c.ncols() {
                return Err(Error::Dimension(format!(
                    "randomization covariance {i} is not square"
                )));
            }
            let l = linalg::cholesky_lower(c, 0.0).ok_or_else(|| {
                Error::NotPositiveDefinite(format!("randomization covariance {i}"))
            })?;
            chols.push(l);
        }
        Ok(RandomizationSpec { covs, chols, seed })
    }

    pub fn p(&self) -> usize {
        self.covs.len()
    }

    pub fn cov(&self, node: usize) -> &DMatrix<f64> {
        &self.covs[node]
    }

    /// The realized draw for a node: deterministic given (seed, node) and
    /// independent across nodes.
    pub fn draw(&self, node: usize) -> DVector<f64> {
        let dim = self.covs[node].nrows();
        let mut rng = stream_rng(self.seed, STREAM_OMEGA.wrapping_add(node as u64));
        let z = DVector::<f64>::from_iterator(dim, (0..dim).map(|_| rng.sample(StandardNormal)));
        &self.chols[node] * z
    }
}

/// Solve the randomized nodewise Lasso for one node by cyclic coordinate
/// descent. Each coordinate update is the closed-form soft-threshold of a
/// quadratic with curvature `s_jj + eps`, so zeros are exact and the active
/// set needs no magnitude cutoff.
pub fn solve_node(
    suff: &SuffStat,
    node: usize,
    lambda: f64,
    eps: f64,
    omega: &DVector<f64>,
) -> Result<NodewiseSolution> {
    solve_node_impl(suff, node, lambda, eps, omega, None)
}

/// Same as [`solve_node`] but records the objective value after every sweep.
pub fn solve_node_traced(
    suff: &SuffStat,
    node: usize,
    lambda: f64,
    eps: f64,
    omega: &DVector<f64>,
    trace: &mut Vec<f64>,
) -> Result<NodewiseSolution> {
    solve_node_impl(suff, node, lambda, eps, omega, Some(trace))
}

fn solve_node_impl(
    suff: &SuffStat,
    node: usize,
    lambda: f64,
    eps: f64,
    omega: &DVector<f64>,
    mut trace: Option<&mut Vec<f64>>,
) -> Result<NodewiseSolution> {
    let p = suff.p;
    if node >= p {
        return Err(Error::Dimension(format!("node {node} out of range for p = {p}")));
    }
    if omega.len() != p - 1 {
        return Err(Error::Dimension(format!(
            "omega has {} entries, expected {}",
            omega.len(),
            p - 1
        )));
    }
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "ridge eps must be positive, got {eps}"
        )));
    }

    let s = &suff.s;
    let d = p - 1;
    let orig = |r: usize| if r < node { r } else { r + 1 };

    // Diagonal curvatures and the response cross-products s_{-i,i}.
    let mut diag = vec![0.0f64; d];
    let mut sxi = vec![0.0f64; d];
    for r in 0..d {
        let j = orig(r);
        diag[r] = s[(j, j)];
        sxi[r] = s[(j, node)];
    }

    let mut b = vec![0.0f64; d];
    // g = S_{-i,-i} b, maintained incrementally.
    let mut g = vec![0.0f64; d];

    if let Some(t) = trace.as_deref_mut() {
        t.push(objective_parts(s, node, lambda, eps, omega, &b));
    }

    let mut converged = false;
    for _sweep in 0..MAX_SWEEPS {
        let mut max_change = 0.0f64;
        let mut max_b = 0.0f64;
        for r in 0..d {
            let u = omega[r] + sxi[r] - (g[r] - diag[r] * b[r]);
            let new = soft_threshold(u, lambda) / (diag[r] + eps);
            let delta = new - b[r];
            if delta != 0.0 {
                let j = orig(r);
                for t in 0..d {
                    g[t] += delta * s[(orig(t), j)];
                }
                b[r] = new;
            }
            max_change = max_change.max(delta.abs());
            max_b = max_b.max(new.abs());
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(objective_parts(s, node, lambda, eps, omega, &b));
        }
        if max_change <= SWEEP_TOL * max_b.max(1.0) {
            // Sweep changes are tiny; accept only if the stationarity
            // residual (recomputed from scratch, clearing incremental
            // drift in g) meets the contract.
            let resid = kkt_residual_from_raw(s, node, lambda, eps, omega, &b);
            if resid <= KKT_TOL {
                for r in 0..d {
                    g[r] = 0.0;
                    for t in 0..d {
                        g[r] += s[(orig(r), orig(t))] * b[t];
                    }
                }
                converged = true;
                break;
            }
            // Refresh g before continuing so drift cannot stall progress.
            for r in 0..d {
                g[r] = 0.0;
                for t in 0..d {
                    g[r] += s[(orig(r), orig(t))] * b[t];
                }
            }
        }
    }
    if !converged {
        return Err(Error::NoConvergence(format!(
            "node {node}: coordinate descent hit the {MAX_SWEEPS}-sweep cap"
        )));
    }

    // Extract the event: exact nonzeros, their signs, and the inactive
    // subgradient z_r = u_r / lambda (clamped into [-1, 1]).
    let mut active_set = Vec::new();
    let mut signs = Vec::new();
    let mut active_coef = Vec::new();
    let mut inactive_subgrad = Vec::new();
    for r in 0..d {
        let j = orig(r);
        if b[r] != 0.0 {
            active_set.push(j);
            signs.push(if b[r] > 0.0 { 1i8 } else { -1i8 });
            active_coef.push(b[r]);
        } else {
            let u = omega[r] + sxi[r] - g[r];
            inactive_subgrad.push((u / lambda).clamp(-1.0, 1.0));
        }
    }

    Ok(NodewiseSolution {
        node,
        lambda,
        ridge: eps,
        omega: omega.clone(),
        active_set,
        signs,
        active_coef: DVector::from_vec(active_coef),
        inactive_subgrad: DVector::from_vec(inactive_subgrad),
    })
}

#[inline]
fn soft_threshold(u: f64, lambda: f64) -> f64 {
    if u > lambda {
        u - lambda
    } else if u < -lambda {
        u + lambda
    } else {
        0.0
    }
}

/// Objective value of the randomized nodewise problem at `b`, expressed
/// through the cross-product matrix.
pub fn nodewise_objective(
    suff: &SuffStat,
    node: usize,
    lambda: f64,
    eps: f64,
    omega: &DVector<f64>,
    b: &DVector<f64>,
) -> f64 {
    objective_parts(&suff.s, node, lambda, eps, omega, b.as_slice())
}

fn objective_parts(
    s: &DMatrix<f64>,
    node: usize,
    lambda: f64,
    eps: f64,
    omega: &DVector<f64>,
    b: &[f64],
) -> f64 {
    let d = b.len();
    let orig = |r: usize| if r < node { r } else { r + 1 };
    let mut quad = 0.0;
    let mut lin = 0.0;
    let mut l1 = 0.0;
    let mut l2 = 0.0;
    let mut dot_omega = 0.0;
    for r in 0..d {
        if b[r] == 0.0 {
            continue;
        }
        let j = orig(r);
        let mut gr = 0.0;
        for t in 0..d {
            if b[t] != 0.0 {
                gr += s[(j, orig(t))] * b[t];
            }
        }
        quad += b[r] * gr;
        lin += b[r] * s[(j, node)];
        l1 += b[r].abs();
        l2 += b[r] * b[r];
        dot_omega += b[r] * omega[r];
    }
    0.5 * (s[(node, node)] - 2.0 * lin + quad) + lambda * l1 + 0.5 * eps * l2 - dot_omega
}

fn kkt_residual_from_raw(
    s: &DMatrix<f64>,
    node: usize,
    lambda: f64,
    eps: f64,
    omega: &DVector<f64>,
    b: &[f64],
) -> f64 {
    let d = b.len();
    let orig = |r: usize| if r < node { r } else { r + 1 };
    let mut worst = 0.0f64;
    for r in 0..d {
        let j = orig(r);
        let mut u = omega[r] + s[(j, node)];
        for t in 0..d {
            if t != r && b[t] != 0.0 {
                u -= s[(j, orig(t))] * b[t];
            }
        }
        let resid = if b[r] != 0.0 {
            let sign = if b[r] > 0.0 { 1.0 } else { -1.0 };
            (u - (s[(j, j)] + eps) * b[r] - lambda * sign).abs()
        } else {
            (u.abs() - lambda).max(0.0)
        };
        worst = worst.max(resid);
    }
    worst
}

/// Max-abs residual of the stationarity identity `omega = T + U (b; z) + V`
/// at the stored solution. Converged solves keep this at or below 1e-8; a
/// large value signals solver failure upstream.
pub fn verify_kkt(sol: &NodewiseSolution, suff: &SuffStat) -> f64 {
    let s = &suff.s;
    let d = sol.omega.len();
    let mut worst = 0.0f64;
    let inactive = sol.inactive_set();
    for r in 0..d {
        let j = sol.reduced_to_orig(r);
        // eta_r = -s_{j,i} + sum_{t in E} s_{j,t} b_t (+ eps b_j if j active)
        //         + lambda * sign_j            (active)
        //         + lambda * z_j               (inactive)
        let mut eta = -s[(j, sol.node)];
        for (t, &a) in sol.active_set.iter().enumerate() {
            eta += s[(j, a)] * sol.active_coef[t];
        }
        if let Some(pos) = sol.active_pos(j) {
            eta += sol.ridge * sol.active_coef[pos] + sol.lambda * sol.signs[pos] as f64;
        } else {
            let pos = inactive.binary_search(&j).expect("inactive index");
            eta += sol.lambda * sol.inactive_subgrad[pos];
        }
        worst = worst.max((sol.omega[r] - eta).abs());
    }
    worst
}

/// Combine the p neighborhoods into an edge set under the AND/OR rule.
pub fn combine(solutions: Vec<NodewiseSolution>, rule: Rule) -> Result<SelectionEvent> {
    let p = solutions.len();
    if p == 0 {
        return Err(Error::Dimension("no nodewise solutions given".into()));
    }
    for (i, sol) in solutions.iter().enumerate() {
        if sol.node != i {
            return Err(Error::Dimension(format!(
                "solution {i} is for node {}, expected one solution per node in order",
                sol.node
            )));
        }
        if sol.p() != p {
            return Err(Error::Dimension(format!(
                "solution {i} was solved for p = {}, expected {p}",
                sol.p()
            )));
        }
    }
    let mut edges = BTreeSet::new();
    for j in 0..p {
        for k in (j + 1)..p {
            let j_picks_k = solutions[j].is_active(k);
            let k_picks_j = solutions[k].is_active(j);
            let keep = match rule {
                Rule::And => j_picks_k && k_picks_j,
                Rule::Or => j_picks_k || k_picks_j,
            };
            if keep {
                edges.insert((j, k));
            }
        }
    }
    Ok(SelectionEvent {
        solutions,
        rule,
        edges,
    })
}

/// Configuration for a full randomized fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    /// False-inclusion level in the penalty-weight formula.
    pub alpha: f64,
    /// Scalar multiplier on every penalty weight.
    pub kappa: f64,
    /// Ridge parameter.
    pub eps: f64,
    /// Randomization standard deviation (Omega = omega_scale^2 I).
    pub omega_scale: f64,
    pub rule: Rule,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            alpha: 0.1,
            kappa: 1.0,
            eps: 1.0,
            omega_scale: 1.0,
            rule: Rule::Or,
            seed: 0,
        }
    }
}

/// Output of [`fit`]: everything inference needs to condition on.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub suff: SuffStat,
    pub event: SelectionEvent,
    pub rand: RandomizationSpec,
    pub lambda: Vec<f64>,
    /// Worst stationarity residual across the p solves.
    pub max_kkt_residual: f64,
}

/// Run the full randomized neighborhood selection: penalty weights, one
/// randomized Lasso per node (in parallel), and the AND/OR combination.
pub fn fit(data: &Dataset, cfg: &FitConfig) -> Result<FitResult> {
    let suff = SuffStat::from_data(data)?;
    let p = suff.p();
    let weights = penalty_weights(data, cfg.alpha, &vec![cfg.kappa; p])?;
    if !weights.degenerate.is_empty() {
        return Err(Error::Degenerate(format!(
            "columns {:?} have zero sample variance",
            weights.degenerate
        )));
    }
    let rand = RandomizationSpec::isotropic(p, cfg.omega_scale, cfg.seed)?;
    let solutions: Vec<NodewiseSolution> = (0..p)
        .into_par_iter()
        .map(|i| {
            let omega = rand.draw(i);
            solve_node(&suff, i, weights.lambda[i], cfg.eps, &omega)
        })
        .collect::<Result<Vec<_>>>()?;
    let max_kkt_residual = solutions
        .iter()
        .map(|sol| verify_kkt(sol, &suff))
        .fold(0.0f64, f64::max);
    let event = combine(solutions, cfg.rule)?;
    Ok(FitResult {
        suff,
        event,
        rand,
        lambda: weights.lambda,
        max_kkt_residual,
    })
}
