//! Selection-adjusted density machinery for one selected edge.
//!
//! Inference for the precision entry theta_{j0,k0} conditions on the full
//! selection event and on every cross-product entry except s_{j0,k0}. The
//! resulting one-dimensional conditional density at a replacement value `c`
//! is, up to normalization,
//!
//! ```text
//! (det Gamma(c))^{(n-p-1)/2} * exp(-theta * c) * LambdaHat(c) * 1{Gamma(c) PD}
//! ```
//!
//! where `Gamma(c)` swaps the (j0,k0) entry of the observed matrix for `c`
//! and `LambdaHat` collects the per-node selection factors: one
//! sign-constrained Gaussian integral for every node whose KKT map touches
//! `c` (the set F together with j0 and k0), and one Jacobian determinant
//! `det(Gamma(c)_{E_i,E_i} + eps I)` for every node selecting both endpoints
//! (the set G). Factors constant in `c` cancel in the normalization and are
//! dropped.
//!
//! The Gaussian integrals are evaluated by a Laplace approximation: minimize
//! the quadratic form of the KKT map over the sign orthant, with a log
//! barrier keeping the iterates strictly feasible.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linalg;
use crate::selector::{NodewiseSolution, RandomizationSpec, SelectionEvent, SuffStat};
use crate::{Error, Result};

/// Relative pivot floor for the positive-definiteness test.
const PD_REL_TOL: f64 = 1e-12;

/// Replace the (j0,k0) and (k0,j0) entries of `s` with `c`.
///
/// All other entries pass through, so calling this with the observed matrix
/// and `c = s_obs` reproduces the observed matrix exactly.
pub fn gamma_replace(s: &DMatrix<f64>, j0: usize, k0: usize, c: f64) -> Result<DMatrix<f64>> {
    if j0 == k0 {
        return Err(Error::InvalidArgument(
            "gamma replacement needs two distinct indices".into(),
        ));
    }
    let p = s.nrows();
    if j0 >= p || k0 >= p {
        return Err(Error::Dimension(format!(
            "indices ({j0}, {k0}) out of range for p = {p}"
        )));
    }
    let mut out = s.clone();
    out[(j0, k0)] = c;
    out[(k0, j0)] = c;
    Ok(out)
}

/// Positive definiteness with a relative pivot floor: every Cholesky pivot
/// must exceed `1e-12 * trace / p`.
pub fn pd_check(m: &DMatrix<f64>) -> bool {
    let p = m.nrows();
    if p == 0 {
        return false;
    }
    let floor = PD_REL_TOL * m.trace() / p as f64;
    linalg::cholesky_lower(m, floor).is_some()
}

/// The target of inference: one selected edge plus everything held fixed.
#[derive(Debug, Clone)]
pub struct EdgeTarget {
    pub j0: usize,
    pub k0: usize,
    /// Observed value of s_{j0,k0}.
    pub s_obs: f64,
    /// The conditioning entries: the observed matrix with the two target
    /// slots zeroed out. `gamma_replace(&s_bar, j0, k0, c)` rebuilds the
    /// matrix the density evaluates.
    pub s_bar: DMatrix<f64>,
    /// Nodes (other than j0, k0) selecting j0 or k0.
    pub f_nodes: Vec<usize>,
    /// Nodes selecting both j0 and k0.
    pub g_nodes: Vec<usize>,
    /// F together with j0 and k0: every node contributing a Gaussian factor.
    pub contributing: Vec<usize>,
}

/// Build the per-edge node sets from a selection event.
///
/// Only selected edges have a conditional density, so unselected pairs are
/// rejected.
pub fn target_sets(
    event: &SelectionEvent,
    suff: &SuffStat,
    j0: usize,
    k0: usize,
) -> Result<EdgeTarget> {
    let p = event.p();
    if j0 == k0 || j0 >= p || k0 >= p {
        return Err(Error::InvalidArgument(format!(
            "invalid edge ({j0}, {k0}) for p = {p}"
        )));
    }
    let (j0, k0) = if j0 < k0 { (j0, k0) } else { (k0, j0) };
    if !event.edges.contains(&(j0, k0)) {
        return Err(Error::EdgeNotSelected(j0, k0));
    }
    if suff.p() != p {
        return Err(Error::Dimension(format!(
            "cross-product matrix has p = {}, selection has p = {p}",
            suff.p()
        )));
    }
    let mut f_nodes = Vec::new();
    let mut g_nodes = Vec::new();
    for i in 0..p {
        if i == j0 || i == k0 {
            continue;
        }
        let sol = &event.solutions[i];
        let picks_j = sol.is_active(j0);
        let picks_k = sol.is_active(k0);
        if picks_j || picks_k {
            f_nodes.push(i);
        }
        if picks_j && picks_k {
            g_nodes.push(i);
        }
    }
    let mut contributing = f_nodes.clone();
    contributing.push(j0);
    contributing.push(k0);
    contributing.sort_unstable();

    let mut s_bar = suff.s().clone();
    let s_obs = s_bar[(j0, k0)];
    s_bar[(j0, k0)] = 0.0;
    s_bar[(k0, j0)] = 0.0;

    Ok(EdgeTarget {
        j0,
        k0,
        s_obs,
        s_bar,
        f_nodes,
        g_nodes,
        contributing,
    })
}

/// Log barrier enforcing the sign constraints: sum_j log(1 + scale/(s_j b_j)),
/// +infinity outside the orthant. Empty constraint sets cost zero.
pub fn barrier(b: &DVector<f64>, signs: &[i8], scale: f64) -> f64 {
    debug_assert_eq!(b.len(), signs.len());
    let mut acc = 0.0;
    for (bj, &sj) in b.iter().zip(signs.iter()) {
        let u = sj as f64 * bj;
        if u <= 0.0 {
            return f64::INFINITY;
        }
        acc += (1.0 + scale / u).ln();
    }
    acc
}

/// KKT map of node `sol` evaluated with entry (j0,k0) of the conditioning
/// matrix replaced by `c`, at arbitrary points (b, z).
///
/// Coordinates follow the solution's natural reduced order, so at
/// `c = s_obs`, `b = active_coef`, `z = inactive_subgrad` the output equals
/// the realized randomization draw `sol.omega`.
pub fn eta_map(
    c: f64,
    target: &EdgeTarget,
    sol: &NodewiseSolution,
    b: &DVector<f64>,
    z: &DVector<f64>,
) -> Result<DVector<f64>> {
    if b.len() != sol.q() || z.len() != sol.qbar() {
        return Err(Error::Dimension(format!(
            "node {}: expected (b, z) of sizes ({}, {}), got ({}, {})",
            sol.node,
            sol.q(),
            sol.qbar(),
            b.len(),
            z.len()
        )));
    }
    let gamma = gamma_replace(&target.s_bar, target.j0, target.k0, c)?;
    let i = sol.node;
    let d = sol.omega.len();
    let inactive = sol.inactive_set();
    let mut eta = DVector::<f64>::zeros(d);
    for r in 0..d {
        let j = sol.reduced_to_orig(r);
        let mut v = -gamma[(j, i)];
        for (t, &a) in sol.active_set.iter().enumerate() {
            v += gamma[(j, a)] * b[t];
        }
        if let Some(pos) = sol.active_pos(j) {
            v += sol.ridge * b[pos] + sol.lambda * sol.signs[pos] as f64;
        } else {
            let pos = inactive.binary_search(&j).expect("inactive index");
            v += sol.lambda * z[pos];
        }
        eta[r] = v;
    }
    Ok(eta)
}

/// Log determinant of the Jacobian block `mat_ee + eps I`.
///
/// The full change-of-variables Jacobian is `lambda^{qbar} det(mat_ee + eps I)`;
/// the power of lambda depends on neither the replacement value nor the
/// parameter of interest, so relative weights drop it.
pub fn jacobian_logdet(mat_ee: &DMatrix<f64>, eps: f64) -> Result<f64> {
    let q = mat_ee.nrows();
    let mut block = mat_ee.clone();
    for i in 0..q {
        block[(i, i)] += eps;
    }
    linalg::cholesky_lower(&block, 0.0)
        .map(|l| linalg::logdet_from_lower(&l))
        .ok_or_else(|| Error::NotPositiveDefinite("Jacobian block is singular".into()))
}

/// Outcome of one barrier-penalized Laplace minimization.
#[derive(Debug, Clone)]
pub struct LaplaceResult {
    pub node: usize,
    pub grid_value: f64,
    /// Minimized value of the penalized objective; `-optimum` is the log of
    /// the node's selection factor.
    pub optimum: f64,
    /// Minimizer, strictly inside the sign orthant when q >= 1.
    pub minimizer: DVector<f64>,
    pub converged: bool,
}

/// Settings for the damped-Newton barrier solver.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LaplaceConfig {
    /// Barrier scale; the penalty per coordinate is log(1 + scale/(s_j b_j)).
    pub barrier_scale: f64,
    pub max_iters: usize,
    /// Stop once half the squared Newton decrement falls below this.
    pub decrement_tol: f64,
    pub max_halvings: usize,
}

impl Default for LaplaceConfig {
    fn default() -> Self {
        LaplaceConfig {
            barrier_scale: 1.0,
            max_iters: 200,
            decrement_tol: 1e-12,
            max_halvings: 30,
        }
    }
}

/// One node's contribution to the adjustment, compiled for fast evaluation
/// along the replacement-value axis.
///
/// At fixed inactive subgradient the KKT map is affine in both `c` and `b`:
/// `eta(c, b) = t0 + c t1 + (M0 + c M1) b`. The quadratic form
/// `0.5 eta' W eta` with `W = Omega^{-1}` therefore has coefficients that are
/// quadratic polynomials in `c`, precomputed here once per edge.
#[derive(Debug, Clone)]
pub struct NodeFactor {
    node: usize,
    q: usize,
    signs: Vec<i8>,
    b_obs: DVector<f64>,
    t0: DVector<f64>,
    t1: DVector<f64>,
    m0: DMatrix<f64>,
    m1: DMatrix<f64>,
    omega_inv: DMatrix<f64>,
    // A(c) = a[0] + c a[1] + c^2 a[2]; r(c) and k(c) likewise.
    a: [DMatrix<f64>; 3],
    r: [DVector<f64>; 3],
    k: [f64; 3],
}

impl NodeFactor {
    pub fn new(
        target: &EdgeTarget,
        sol: &NodewiseSolution,
        omega_cov: &DMatrix<f64>,
    ) -> Result<Self> {
        let d = sol.omega.len();
        if omega_cov.nrows() != d || omega_cov.ncols() != d {
            return Err(Error::Dimension(format!(
                "node {}: randomization covariance must be {d}x{d}",
                sol.node
            )));
        }
        let mut omega_inv = linalg::spd_inverse(omega_cov).ok_or_else(|| {
            Error::NotPositiveDefinite(format!("randomization covariance of node {}", sol.node))
        })?;
        linalg::symmetrize(&mut omega_inv);

        let i = sol.node;
        let (j0, k0) = (target.j0, target.k0);
        let is_target = |a: usize, b: usize| (a == j0 && b == k0) || (a == k0 && b == j0);
        let q = sol.q();
        let inactive = sol.inactive_set();

        let mut t0 = DVector::<f64>::zeros(d);
        let mut t1 = DVector::<f64>::zeros(d);
        let mut m0 = DMatrix::<f64>::zeros(d, q);
        let mut m1 = DMatrix::<f64>::zeros(d, q);
        for r in 0..d {
            let j = sol.reduced_to_orig(r);
            t0[r] = -target.s_bar[(j, i)];
            if is_target(j, i) {
                t1[r] = -1.0;
            }
            if let Some(pos) = sol.active_pos(j) {
                t0[r] += sol.lambda * sol.signs[pos] as f64;
            } else {
                let pos = inactive.binary_search(&j).expect("inactive index");
                t0[r] += sol.lambda * sol.inactive_subgrad[pos];
            }
            for (a, &e) in sol.active_set.iter().enumerate() {
                m0[(r, a)] = target.s_bar[(j, e)];
                if j == e {
                    m0[(r, a)] += sol.ridge;
                }
                if is_target(j, e) {
                    m1[(r, a)] = 1.0;
                }
            }
        }

        let w = &omega_inv;
        let wm0 = w * &m0;
        let wm1 = w * &m1;
        let wt0 = w * &t0;
        let wt1 = w * &t1;
        let a0 = m0.transpose() * &wm0;
        let a1 = m0.transpose() * &wm1 + m1.transpose() * &wm0;
        let a2 = m1.transpose() * &wm1;
        let r0 = m0.transpose() * &wt0;
        let r1 = m0.transpose() * &wt1 + m1.transpose() * &wt0;
        let r2 = m1.transpose() * &wt1;
        let k0c = t0.dot(&wt0);
        let k1c = 2.0 * t0.dot(&wt1);
        let k2c = t1.dot(&wt1);

        Ok(NodeFactor {
            node: i,
            q,
            signs: sol.signs.clone(),
            b_obs: sol.active_coef.clone(),
            t0,
            t1,
            m0,
            m1,
            omega_inv,
            a: [a0, a1, a2],
            r: [r0, r1, r2],
            k: [k0c, k1c, k2c],
        })
    }

    pub fn node(&self) -> usize {
        self.node
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn signs(&self) -> &[i8] {
        &self.signs
    }

    pub fn b_obs(&self) -> &DVector<f64> {
        &self.b_obs
    }

    pub fn omega_inv(&self) -> &DMatrix<f64> {
        &self.omega_inv
    }

    /// Constant part of the KKT map at replacement value `c`.
    pub fn eta_offset(&self, c: f64) -> DVector<f64> {
        &self.t0 + &self.t1 * c
    }

    /// Coefficient matrix of the KKT map at replacement value `c`.
    pub fn eta_matrix(&self, c: f64) -> DMatrix<f64> {
        &self.m0 + &self.m1 * c
    }

    fn quad_at(&self, c: f64) -> (DMatrix<f64>, DVector<f64>, f64) {
        let a = &self.a[0] + &self.a[1] * c + &self.a[2] * (c * c);
        let r = &self.r[0] + &self.r[1] * c + &self.r[2] * (c * c);
        let k = self.k[0] + self.k[1] * c + self.k[2] * c * c;
        (a, r, k)
    }

    /// `0.5 eta(c, b)' Omega^{-1} eta(c, b)` through the compiled polynomials.
    pub fn gaussian_exponent(&self, c: f64, b: &DVector<f64>) -> f64 {
        let (a, r, k) = self.quad_at(c);
        0.5 * (b.dot(&(&a * b)) + k) + r.dot(b)
    }

    /// Minimize the barrier-penalized quadratic over the sign orthant.
    ///
    /// Starts from the observed coefficients (feasible for every `c` because
    /// the orthant does not depend on `c`) and runs damped Newton with step
    /// halving that keeps iterates strictly feasible. A failed solve is
    /// retried once from a perturbed start before being reported.
    pub fn laplace_min(&self, c: f64, cfg: &LaplaceConfig) -> LaplaceResult {
        if self.q == 0 {
            // Zero-dimensional integral: the factor is the Gaussian weight of
            // the KKT point itself.
            let (_, _, k) = self.quad_at(c);
            return LaplaceResult {
                node: self.node,
                grid_value: c,
                optimum: 0.5 * k,
                minimizer: DVector::zeros(0),
                converged: true,
            };
        }
        if let Some(res) = self.newton_from(c, self.b_obs.clone(), cfg) {
            return res;
        }
        // Perturbed restart, deterministic and strictly feasible.
        let mean_abs = self.b_obs.amax().max(1e-3);
        let restart = DVector::from_iterator(
            self.q,
            self.signs
                .iter()
                .enumerate()
                .map(|(j, &s)| s as f64 * (self.b_obs[j].abs() * 0.5 + 0.1 * mean_abs)),
        );
        self.newton_from(c, restart, cfg).unwrap_or(LaplaceResult {
            node: self.node,
            grid_value: c,
            optimum: f64::INFINITY,
            minimizer: DVector::zeros(self.q),
            converged: false,
        })
    }

    fn newton_from(
        &self,
        c: f64,
        mut b: DVector<f64>,
        cfg: &LaplaceConfig,
    ) -> Option<LaplaceResult> {
        let (a, r, k) = self.quad_at(c);
        let scale = cfg.barrier_scale;
        let obj = |b: &DVector<f64>| {
            0.5 * (b.dot(&(&a * b)) + k) + r.dot(b) + barrier(b, &self.signs, scale)
        };
        let mut f = obj(&b);
        if !f.is_finite() {
            return None;
        }
        for _ in 0..cfg.max_iters {
            let mut grad = &a * &b + &r;
            let mut hess = a.clone();
            for j in 0..self.q {
                let u = self.signs[j] as f64 * b[j];
                grad[j] += -scale * self.signs[j] as f64 / (u * (u + scale));
                hess[(j, j)] += scale * (2.0 * u + scale) / (u * (u + scale)).powi(2);
            }
            let chol = nalgebra::Cholesky::new(hess)?;
            let dir = -chol.solve(&grad);
            let decrement = -grad.dot(&dir);
            if 0.5 * decrement <= cfg.decrement_tol {
                return Some(LaplaceResult {
                    node: self.node,
                    grid_value: c,
                    optimum: f,
                    minimizer: b,
                    converged: true,
                });
            }
            let slope = grad.dot(&dir);
            let mut step = 1.0;
            let mut accepted = false;
            for _ in 0..=cfg.max_halvings {
                let cand = &b + &dir * step;
                let feasible = cand
                    .iter()
                    .zip(self.signs.iter())
                    .all(|(v, &s)| s as f64 * v > 0.0);
                if feasible {
                    let fc = obj(&cand);
                    if fc <= f + 1e-4 * step * slope {
                        b = cand;
                        f = fc;
                        accepted = true;
                        break;
                    }
                }
                step *= 0.5;
            }
            if !accepted {
                // Fully damped out; accept the point when the decrement is
                // already negligible, otherwise fail.
                if 0.5 * decrement <= 1e-8 {
                    return Some(LaplaceResult {
                        node: self.node,
                        grid_value: c,
                        optimum: f,
                        minimizer: b,
                        converged: true,
                    });
                }
                return None;
            }
        }
        None
    }
}

/// One-off form of the Laplace minimization for a single node.
pub fn laplace_min(
    c: f64,
    target: &EdgeTarget,
    sol: &NodewiseSolution,
    omega_cov: &DMatrix<f64>,
) -> Result<LaplaceResult> {
    let factor = NodeFactor::new(target, sol, omega_cov)?;
    Ok(factor.laplace_min(c, &LaplaceConfig::default()))
}

/// Strategy for evaluating one node's sign-constrained Gaussian factor.
///
/// Production inference uses [`LaplaceIntegrator`]; the test suite swaps in
/// an adaptive-quadrature oracle through this trait.
pub trait NodeIntegrator: Sync {
    /// Log of the node's factor at replacement value `c`, or `None` when the
    /// evaluation failed and the grid point must be marked invalid.
    fn log_factor(&self, factor: &NodeFactor, c: f64) -> Option<f64>;
}

/// The production integrator: `log factor = -laplace_min`.
#[derive(Debug, Clone, Default)]
pub struct LaplaceIntegrator {
    pub cfg: LaplaceConfig,
}

impl NodeIntegrator for LaplaceIntegrator {
    fn log_factor(&self, factor: &NodeFactor, c: f64) -> Option<f64> {
        let res = factor.laplace_min(c, &self.cfg);
        res.converged.then_some(-res.optimum)
    }
}

/// The one-dimensional Wishart slice shared by all inference paths: the
/// conditional law of a single off-diagonal entry given every other entry,
/// before any selection adjustment.
#[derive(Debug, Clone)]
pub struct WishartSlice {
    s_bar: DMatrix<f64>,
    j0: usize,
    k0: usize,
    s_obs: f64,
    n: usize,
    p: usize,
    pivot_floor: f64,
}

impl WishartSlice {
    pub fn new(s: &DMatrix<f64>, n: usize, j0: usize, k0: usize) -> Result<Self> {
        let p = s.nrows();
        if j0 == k0 || j0 >= p || k0 >= p {
            return Err(Error::InvalidArgument(format!(
                "invalid entry ({j0}, {k0}) for p = {p}"
            )));
        }
        if n <= p + 1 {
            return Err(Error::Dimension(format!(
                "need n > p + 1 for the Wishart exponent, got n = {n}, p = {p}"
            )));
        }
        let (j0, k0) = if j0 < k0 { (j0, k0) } else { (k0, j0) };
        let s_obs = s[(j0, k0)];
        let mut s_bar = s.clone();
        s_bar[(j0, k0)] = 0.0;
        s_bar[(k0, j0)] = 0.0;
        // The trace of Gamma(c) never involves the replaced off-diagonal
        // entry, so the PD pivot floor is one number per slice.
        let pivot_floor = PD_REL_TOL * s_bar.trace() / p as f64;
        Ok(WishartSlice {
            s_bar,
            j0,
            k0,
            s_obs,
            n,
            p,
            pivot_floor,
        })
    }

    pub fn s_obs(&self) -> f64 {
        self.s_obs
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn edge(&self) -> (usize, usize) {
        (self.j0, self.k0)
    }

    pub fn exponent(&self) -> f64 {
        0.5 * (self.n - self.p - 1) as f64
    }

    /// The matrix the density evaluates at `c`.
    pub fn gamma(&self, c: f64) -> DMatrix<f64> {
        let mut g = self.s_bar.clone();
        g[(self.j0, self.k0)] = c;
        g[(self.k0, self.j0)] = c;
        g
    }

    /// `exponent * log det Gamma(c)` when `Gamma(c)` is PD, `-inf` otherwise.
    pub fn log_wishart_part(&self, c: f64) -> f64 {
        let g = self.gamma(c);
        match linalg::cholesky_lower(&g, self.pivot_floor) {
            Some(l) => self.exponent() * linalg::logdet_from_lower(&l),
            None => f64::NEG_INFINITY,
        }
    }

    pub fn is_pd_at(&self, c: f64) -> bool {
        linalg::cholesky_lower(&self.gamma(c), self.pivot_floor).is_some()
    }

    /// The contiguous replacement interval on which `Gamma(c)` stays PD.
    ///
    /// The observed value sits strictly inside. Bounds are located by
    /// bisection against the 2x2-minor envelope |c| <= sqrt(s_jj s_kk), which
    /// always contains the PD region.
    pub fn pd_support(&self) -> (f64, f64) {
        let minor_bound = (self.s_bar[(self.j0, self.j0)] * self.s_bar[(self.k0, self.k0)])
            .abs()
            .sqrt()
            + 1.0;
        let hi = self.bisect_boundary(self.s_obs, minor_bound);
        let lo = self.bisect_boundary(self.s_obs, -minor_bound);
        (lo, hi)
    }

    fn bisect_boundary(&self, inside: f64, outside: f64) -> f64 {
        let mut a = inside;
        let mut b = outside;
        if self.is_pd_at(b) {
            return b;
        }
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if self.is_pd_at(mid) {
                a = mid;
            } else {
                b = mid;
            }
            if (b - a).abs() <= 1e-12 * (1.0 + mid.abs()) {
                break;
            }
        }
        a
    }

    /// Local standard deviation of the unadjusted slice at the observed
    /// value, from a numerically differentiated curvature of the Wishart
    /// log-density part. Falls back to a fraction of the PD support when the
    /// difference quotient is unusable.
    pub fn curvature_sd(&self, pd_lo: f64, pd_hi: f64) -> f64 {
        let margin = (self.s_obs - pd_lo).min(pd_hi - self.s_obs);
        let fallback = ((pd_hi - pd_lo) / 16.0).max(f64::MIN_POSITIVE);
        let mut h = (1e-3 * (1.0 + self.s_obs.abs())).min(0.25 * margin);
        for _ in 0..8 {
            if h <= 0.0 {
                break;
            }
            let f0 = self.log_wishart_part(self.s_obs);
            let fp = self.log_wishart_part(self.s_obs + h);
            let fm = self.log_wishart_part(self.s_obs - h);
            if f0.is_finite() && fp.is_finite() && fm.is_finite() {
                let f2 = (fp - 2.0 * f0 + fm) / (h * h);
                if f2 < 0.0 && f2.is_finite() {
                    return (-1.0 / f2).sqrt();
                }
            }
            h *= 0.5;
        }
        fallback
    }
}

struct GBlock {
    base: DMatrix<f64>,
    pos_j: usize,
    pos_k: usize,
}

/// Everything needed to evaluate the selection-adjusted log density of one
/// edge at arbitrary replacement values. Immutable once built; evaluations at
/// different grid points are independent and safe to run in parallel.
pub struct EdgeDensity {
    target: EdgeTarget,
    slice: WishartSlice,
    factors: Vec<NodeFactor>,
    g_blocks: Vec<GBlock>,
}

impl EdgeDensity {
    pub fn new(
        event: &SelectionEvent,
        suff: &SuffStat,
        rand: &RandomizationSpec,
        j0: usize,
        k0: usize,
    ) -> Result<Self> {
        let target = target_sets(event, suff, j0, k0)?;
        if rand.p() != event.p() {
            return Err(Error::Dimension(
                "randomization spec and selection event disagree on p".into(),
            ));
        }
        let slice = WishartSlice::new(suff.s(), suff.n(), target.j0, target.k0)?;
        let mut factors = Vec::with_capacity(target.contributing.len());
        for &i in &target.contributing {
            factors.push(NodeFactor::new(&target, &event.solutions[i], rand.cov(i))?);
        }
        let mut g_blocks = Vec::with_capacity(target.g_nodes.len());
        for &i in &target.g_nodes {
            let sol = &event.solutions[i];
            let e = &sol.active_set;
            let q = e.len();
            let mut base = DMatrix::<f64>::zeros(q, q);
            for (r, &er) in e.iter().enumerate() {
                for (col, &ec) in e.iter().enumerate() {
                    base[(r, col)] = target.s_bar[(er, ec)];
                }
                base[(r, r)] += sol.ridge;
            }
            let pos_j = e.binary_search(&target.j0).expect("node in G selects j0");
            let pos_k = e.binary_search(&target.k0).expect("node in G selects k0");
            g_blocks.push(GBlock { base, pos_j, pos_k });
        }
        Ok(EdgeDensity {
            target,
            slice,
            factors,
            g_blocks,
        })
    }

    pub fn target(&self) -> &EdgeTarget {
        &self.target
    }

    pub fn slice(&self) -> &WishartSlice {
        &self.slice
    }

    pub fn factors(&self) -> &[NodeFactor] {
        &self.factors
    }

    /// Log of the approximate adjustment factor: the per-node Gaussian
    /// factors of every contributing node plus the Jacobian determinants of
    /// the G nodes. `-inf` marks a singular determinant block, `None` a
    /// failed node evaluation.
    pub fn log_lambda_hat_with(&self, c: f64, integrator: &dyn NodeIntegrator) -> Option<f64> {
        let mut acc = 0.0;
        for factor in &self.factors {
            acc += integrator.log_factor(factor, c)?;
        }
        for gb in &self.g_blocks {
            let mut block = gb.base.clone();
            block[(gb.pos_j, gb.pos_k)] += c;
            block[(gb.pos_k, gb.pos_j)] += c;
            match linalg::cholesky_lower(&block, 0.0) {
                Some(l) => acc += linalg::logdet_from_lower(&l),
                None => return Some(f64::NEG_INFINITY),
            }
        }
        Some(acc)
    }

    /// Laplace-based adjustment factor.
    pub fn log_lambda_hat(&self, c: f64) -> f64 {
        self.log_lambda_hat_with(c, &LaplaceIntegrator::default())
            .unwrap_or(f64::NEG_INFINITY)
    }

    /// Selection-adjusted log weight at parameter `theta0`:
    /// `exponent * logdet Gamma(c) - theta0 * c + log_lambda_hat(c)` on the
    /// PD region, `-inf` outside it or on any failed evaluation.
    pub fn log_weight_with(&self, c: f64, theta0: f64, integrator: &dyn NodeIntegrator) -> f64 {
        let wishart = self.slice.log_wishart_part(c);
        if wishart == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        match self.log_lambda_hat_with(c, integrator) {
            Some(adj) => wishart - theta0 * c + adj,
            None => f64::NEG_INFINITY,
        }
    }

    pub fn log_weight(&self, c: f64, theta0: f64) -> f64 {
        self.log_weight_with(c, theta0, &LaplaceIntegrator::default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selector::{fit, solve_node, FitConfig, FitResult, Rule};
    use crate::simdata::{generate_precision, sample_data};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn fitted(seed: u64, n: usize, p: usize, kappa: f64, rule: Rule) -> FitResult {
        let spec = generate_precision(p, 2, 0.8, seed).unwrap();
        let data = sample_data(&spec, n, seed + 1).unwrap();
        let cfg = FitConfig {
            kappa,
            rule,
            seed: seed + 2,
            ..FitConfig::default()
        };
        fit(&data, &cfg).unwrap()
    }

    fn first_edge(res: &FitResult) -> (usize, usize) {
        *res.event.edges.iter().next().expect("nonempty selection")
    }

    /// Search seeds until the fit satisfies `want`; selection is random, so
    /// individual seeds may produce empty or unsuitable events.
    fn fitted_where(
        seed0: u64,
        n: usize,
        p: usize,
        kappa: f64,
        rule: Rule,
        want: impl Fn(&FitResult) -> bool,
    ) -> FitResult {
        for s in 0..40 {
            let res = fitted(seed0 + s, n, p, kappa, rule);
            if want(&res) {
                return res;
            }
        }
        panic!("no fit with the required structure in 40 seeds");
    }

    fn fitted_nonempty(seed0: u64, n: usize, p: usize, kappa: f64, rule: Rule) -> FitResult {
        fitted_where(seed0, n, p, kappa, rule, |r| !r.event.edges.is_empty())
    }

    #[test]
    fn gamma_replace_basics() {
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let g = gamma_replace(&s, 0, 1, 0.0).unwrap();
        assert_eq!(g, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 2.0]));
        let g = gamma_replace(&s, 0, 1, 1.0).unwrap();
        assert_eq!(g, s);
        let g = gamma_replace(&s, 1, 0, 7.0).unwrap();
        for j in 0..2 {
            for k in 0..2 {
                if j != k {
                    assert_eq!(g[(j, k)], 7.0);
                } else {
                    assert_eq!(g[(j, k)], s[(j, k)]);
                }
            }
        }
        assert!(gamma_replace(&s, 1, 1, 0.0).is_err());
    }

    #[test]
    fn pd_check_basics() {
        assert!(pd_check(&DMatrix::<f64>::identity(3, 3)));
        assert!(!pd_check(&DMatrix::from_row_slice(
            2,
            2,
            &[1.0, 0.0, 0.0, -1.0]
        )));
    }

    #[test]
    fn pd_region_is_an_interval() {
        // Sweep c over a grid; the PD region of Gamma(c) must be contiguous
        // and must agree with a dense eigensolver oracle.
        let res = fitted(3, 120, 6, 1.0, Rule::Or);
        let slice = WishartSlice::new(res.suff.s(), res.suff.n(), 0, 1).unwrap();
        let (lo, hi) = slice.pd_support();
        assert!(lo < slice.s_obs() && slice.s_obs() < hi);
        let span = hi - lo;
        let mut flags = Vec::new();
        for i in 0..200 {
            let c = lo - 0.5 * span + (2.0 * span) * i as f64 / 199.0;
            let got = slice.is_pd_at(c);
            let oracle = linalg::smallest_eigenvalue(&slice.gamma(c)) > 1e-9 * span;
            if got != oracle {
                assert!(
                    (c - lo).abs() < 1e-6 * span || (c - hi).abs() < 1e-6 * span,
                    "PD disagreement far from the boundary at c = {c}"
                );
            }
            flags.push(got);
        }
        let first = flags.iter().position(|&f| f).unwrap();
        let last = flags.iter().rposition(|&f| f).unwrap();
        assert!(
            flags[first..=last].iter().all(|&f| f),
            "PD region not contiguous"
        );
    }

    #[test]
    fn target_sets_definitions_and_oracle() {
        let res = fitted_nonempty(9, 200, 10, 0.8, Rule::Or);
        let (j0, k0) = first_edge(&res);
        let target = target_sets(&res.event, &res.suff, j0, k0).unwrap();

        assert!(!target.f_nodes.contains(&j0));
        assert!(!target.f_nodes.contains(&k0));
        for g in &target.g_nodes {
            assert!(target.f_nodes.contains(g), "G not inside F");
        }
        assert!(target.contributing.contains(&j0));
        assert!(target.contributing.contains(&k0));

        // Brute-force scan over all neighborhoods.
        for i in 0..10 {
            if i == j0 || i == k0 {
                continue;
            }
            let sol = &res.event.solutions[i];
            let in_f = sol.is_active(j0) || sol.is_active(k0);
            let in_g = sol.is_active(j0) && sol.is_active(k0);
            assert_eq!(target.f_nodes.contains(&i), in_f);
            assert_eq!(target.g_nodes.contains(&i), in_g);
            assert_eq!(target.contributing.contains(&i), in_f);
        }

        // Unselected edges are rejected.
        let unselected = (0..10)
            .flat_map(|a| ((a + 1)..10).map(move |b| (a, b)))
            .find(|e| !res.event.edges.contains(e))
            .unwrap();
        assert!(target_sets(&res.event, &res.suff, unselected.0, unselected.1).is_err());
    }

    #[test]
    fn barrier_edge_cases() {
        assert_eq!(barrier(&DVector::zeros(0), &[], 1.0), 0.0);
        let b = DVector::from_row_slice(&[1e9, -1e9]);
        assert!(barrier(&b, &[1, -1], 1.0) < 1e-8);
        let b = DVector::from_row_slice(&[1.0, 2.0]);
        assert_eq!(barrier(&b, &[1, -1], 1.0), f64::INFINITY);
        let b = DVector::from_row_slice(&[0.0]);
        assert_eq!(barrier(&b, &[1], 1.0), f64::INFINITY);
    }

    #[test]
    fn eta_map_reproduces_omega_at_observed_point() {
        let res = fitted_nonempty(15, 150, 8, 0.8, Rule::Or);
        let (j0, k0) = first_edge(&res);
        let target = target_sets(&res.event, &res.suff, j0, k0).unwrap();
        for sol in &res.event.solutions {
            let eta = eta_map(
                target.s_obs,
                &target,
                sol,
                &sol.active_coef,
                &sol.inactive_subgrad,
            )
            .unwrap();
            let diff = (&eta - &sol.omega).amax();
            assert!(diff <= 1e-8, "node {}: eta misses omega by {diff}", sol.node);
        }
    }

    #[test]
    fn eta_map_constant_outside_contributing() {
        let res = fitted_nonempty(21, 150, 8, 0.8, Rule::Or);
        let (j0, k0) = first_edge(&res);
        let target = target_sets(&res.event, &res.suff, j0, k0).unwrap();
        for sol in &res.event.solutions {
            if target.contributing.contains(&sol.node) {
                continue;
            }
            let e1 = eta_map(
                target.s_obs - 5.0,
                &target,
                sol,
                &sol.active_coef,
                &sol.inactive_subgrad,
            )
            .unwrap();
            let e2 = eta_map(
                target.s_obs + 5.0,
                &target,
                sol,
                &sol.active_coef,
                &sol.inactive_subgrad,
            )
            .unwrap();
            assert!(
                (&e1 - &e2).amax() <= 1e-12,
                "node {} depends on c",
                sol.node
            );
        }
    }

    #[test]
    fn eta_map_derivative_matches_finite_differences() {
        // For i = j0 with k0 active, only the offset moves with c: the
        // derivative is the negative unit vector at k0's reduced position.
        let res = fitted_where(33, 200, 10, 0.7, Rule::Or, |r| {
            r.event
                .edges_sorted()
                .into_iter()
                .any(|(j0, k0)| r.event.solutions[j0].is_active(k0))
        });
        let target = res
            .event
            .edges_sorted()
            .into_iter()
            .find_map(|(j0, k0)| {
                let t = target_sets(&res.event, &res.suff, j0, k0).unwrap();
                res.event.solutions[j0].is_active(k0).then_some(t)
            })
            .expect("an edge with k0 in the neighborhood of j0");
        let sol = &res.event.solutions[target.j0];
        let h = 1e-5 * (1.0 + target.s_obs.abs());
        let ep = eta_map(
            target.s_obs + h,
            &target,
            sol,
            &sol.active_coef,
            &sol.inactive_subgrad,
        )
        .unwrap();
        let em = eta_map(
            target.s_obs - h,
            &target,
            sol,
            &sol.active_coef,
            &sol.inactive_subgrad,
        )
        .unwrap();
        let deriv = (&ep - &em) / (2.0 * h);
        let kred = sol.orig_to_reduced(target.k0);
        for r in 0..deriv.len() {
            let expect = if r == kred { -1.0 } else { 0.0 };
            assert_relative_eq!(deriv[r], expect, epsilon = 1e-6);
        }
    }

    #[test]
    fn jacobian_logdet_closed_forms() {
        let one = DMatrix::from_row_slice(1, 1, &[3.5]);
        assert_relative_eq!(
            jacobian_logdet(&one, 1.0).unwrap(),
            (4.5f64).ln(),
            epsilon = 1e-14
        );

        let block = DMatrix::from_row_slice(2, 2, &[4.0, 1.2, 1.2, 3.0]);
        let eps = 0.7;
        let expect = ((4.0 + eps) * (3.0 + eps) - 1.2 * 1.2f64).ln();
        assert_relative_eq!(
            jacobian_logdet(&block, eps).unwrap(),
            expect,
            epsilon = 1e-12
        );

        let sing = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(jacobian_logdet(&sing, 0.0).is_err());
    }

    #[test]
    fn laplace_zero_dimensional_is_exact_quadratic_form() {
        let has_zero_dim = |r: &FitResult| {
            r.event.edges_sorted().into_iter().any(|(j0, k0)| {
                let t = target_sets(&r.event, &r.suff, j0, k0).unwrap();
                t.contributing
                    .iter()
                    .any(|&i| r.event.solutions[i].q() == 0)
            })
        };
        let res = (0..120)
            .flat_map(|s| [1.0, 1.5, 2.0].map(|k| (s, k)))
            .map(|(s, k)| fitted(27 + s, 150, 8, k, Rule::Or))
            .find(has_zero_dim)
            .expect("a fit with a zero-dimensional contributing node");
        let (j0, k0) = res
            .event
            .edges_sorted()
            .into_iter()
            .find(|&(j0, k0)| {
                let t = target_sets(&res.event, &res.suff, j0, k0).unwrap();
                t.contributing
                    .iter()
                    .any(|&i| res.event.solutions[i].q() == 0)
            })
            .unwrap();
        let target = target_sets(&res.event, &res.suff, j0, k0).unwrap();
        let sol = target
            .contributing
            .iter()
            .map(|&i| &res.event.solutions[i])
            .find(|sol| sol.q() == 0)
            .unwrap();
        let cov = res.rand.cov(sol.node).clone();
        let c = target.s_obs + 3.0;
        let out = laplace_min(c, &target, sol, &cov).unwrap();
        assert!(out.converged);
        let eta = eta_map(c, &target, sol, &DVector::zeros(0), &sol.inactive_subgrad).unwrap();
        let w = linalg::spd_inverse(&cov).unwrap();
        let direct = 0.5 * eta.dot(&(&w * &eta));
        assert_relative_eq!(out.optimum, direct, max_relative = 1e-10);
    }

    #[test]
    fn laplace_minimizer_feasible_and_bracketed() {
        let res = fitted_nonempty(29, 200, 10, 0.7, Rule::Or);
        let (j0, k0) = first_edge(&res);
        let target = target_sets(&res.event, &res.suff, j0, k0).unwrap();
        let cfg = LaplaceConfig::default();
        for &i in &target.contributing {
            let sol = &res.event.solutions[i];
            if sol.q() == 0 {
                continue;
            }
            let factor = NodeFactor::new(&target, sol, res.rand.cov(i)).unwrap();
            let out = factor.laplace_min(target.s_obs, &cfg);
            assert!(out.converged, "node {i} failed to converge");
            for (v, &s) in out.minimizer.iter().zip(sol.signs.iter()) {
                assert!(s as f64 * v > 0.0, "minimizer left the orthant");
            }
            // Feasible-start upper bound at the observed point.
            let start_obj = factor.gaussian_exponent(target.s_obs, &sol.active_coef)
                + barrier(&sol.active_coef, &sol.signs, cfg.barrier_scale);
            assert!(out.optimum <= start_obj + 1e-9);
            // Never below the unconstrained quadratic minimum.
            let (a, r, _) = factor.quad_at(target.s_obs);
            let chol = nalgebra::Cholesky::new(a).unwrap();
            let bstar = -chol.solve(&r);
            let unconstrained = factor.gaussian_exponent(target.s_obs, &bstar);
            assert!(out.optimum >= unconstrained - 1e-9);
        }
    }

    #[test]
    fn laplace_objective_convex_along_feasible_segments() {
        let res = fitted_nonempty(37, 180, 8, 0.7, Rule::Or);
        let (j0, k0) = first_edge(&res);
        let target = target_sets(&res.event, &res.suff, j0, k0).unwrap();
        let sol = target
            .contributing
            .iter()
            .map(|&i| &res.event.solutions[i])
            .find(|s| s.q() >= 1)
            .expect("a node with active coordinates");
        let factor = NodeFactor::new(&target, sol, res.rand.cov(sol.node)).unwrap();
        let scale = 1.0;
        let c = target.s_obs * 1.01;
        let f =
            |b: &DVector<f64>| factor.gaussian_exponent(c, b) + barrier(b, factor.signs(), scale);
        let mut rng = crate::rng::stream_rng(37, 99);
        let mut random_feasible = |rng: &mut rand_chacha::ChaCha8Rng| {
            DVector::from_iterator(
                factor.q(),
                factor.signs().iter().map(|&s| {
                    let mag: f64 = rng.sample::<f64, _>(StandardNormal).abs() + 0.05;
                    s as f64 * mag
                }),
            )
        };
        for _ in 0..50 {
            let x = random_feasible(&mut rng);
            let y = random_feasible(&mut rng);
            let mid = (&x + &y) * 0.5;
            assert!(f(&mid) <= 0.5 * (f(&x) + f(&y)) + 1e-10);
        }
    }

    #[test]
    fn log_weight_tilt_is_exact() {
        let res = fitted_nonempty(43, 150, 8, 0.8, Rule::Or);
        let (j0, k0) = first_edge(&res);
        let dens = EdgeDensity::new(&res.event, &res.suff, &res.rand, j0, k0).unwrap();
        let c = dens.slice().s_obs() + 2.5;
        let w0 = dens.log_weight(c, 0.0);
        assert!(w0.is_finite());
        for theta in [-0.4, -0.1, 0.2, 0.9] {
            let wt = dens.log_weight(c, theta);
            assert_relative_eq!(w0 - wt, theta * c, max_relative = 1e-12, epsilon = 1e-12);
        }
    }

    #[test]
    fn log_weight_outside_pd_is_neg_infinity() {
        let res = fitted_nonempty(47, 150, 8, 0.8, Rule::Or);
        let (j0, k0) = first_edge(&res);
        let dens = EdgeDensity::new(&res.event, &res.suff, &res.rand, j0, k0).unwrap();
        let (lo, hi) = dens.slice().pd_support();
        assert_eq!(dens.log_weight(hi + (hi - lo), 0.0), f64::NEG_INFINITY);
        assert_eq!(dens.log_weight(lo - (hi - lo), 0.0), f64::NEG_INFINITY);
    }

    #[test]
    fn log_lambda_hat_without_g_nodes_is_pure_laplace_sum() {
        let res = fitted_nonempty(53, 150, 8, 0.8, Rule::Or);
        let found = res.event.edges_sorted().into_iter().find_map(|(j0, k0)| {
            let dens = EdgeDensity::new(&res.event, &res.suff, &res.rand, j0, k0).unwrap();
            dens.target().g_nodes.is_empty().then_some(dens)
        });
        let Some(dens) = found else { return };
        let c = dens.slice().s_obs() - 1.0;
        let integ = LaplaceIntegrator::default();
        let mut manual = 0.0;
        for f in dens.factors() {
            manual += integ.log_factor(f, c).unwrap();
        }
        assert_relative_eq!(
            dens.log_lambda_hat(c),
            manual,
            max_relative = 1e-12,
            epsilon = 1e-12
        );
    }

    #[test]
    fn case_analysis_two_point_constancy() {
        // Full-product oracle: loop over ALL nodes; factors outside
        // contributing/G must be constant in c, and the change of
        // log_lambda_hat across two c values must match the change of the
        // full product.
        let res = fitted_nonempty(59, 200, 10, 0.7, Rule::Or);
        let (j0, k0) = first_edge(&res);
        let dens = EdgeDensity::new(&res.event, &res.suff, &res.rand, j0, k0).unwrap();
        let target = dens.target();
        let integ = LaplaceIntegrator::default();
        let c1 = dens.slice().s_obs() - 2.0;
        let c2 = dens.slice().s_obs() + 2.0;

        let mut full = [0.0f64; 2];
        for (slot, &c) in [c1, c2].iter().enumerate() {
            for i in 0..10 {
                let sol = &res.event.solutions[i];
                let factor = NodeFactor::new(target, sol, res.rand.cov(i)).unwrap();
                full[slot] += integ.log_factor(&factor, c).unwrap();
                if sol.q() > 0 {
                    let gamma = gamma_replace(&target.s_bar, j0, k0, c).unwrap();
                    let mut block = DMatrix::<f64>::zeros(sol.q(), sol.q());
                    for (r, &er) in sol.active_set.iter().enumerate() {
                        for (cc, &ec) in sol.active_set.iter().enumerate() {
                            block[(r, cc)] = gamma[(er, ec)];
                        }
                    }
                    full[slot] += jacobian_logdet(&block, sol.ridge).unwrap();
                }
            }
        }
        let lhs = dens.log_lambda_hat(c1) - dens.log_lambda_hat(c2);
        let rhs = full[0] - full[1];
        assert!(
            (lhs - rhs).abs() <= 1e-8 * (1.0 + rhs.abs()),
            "lambda-hat difference {lhs} vs full-product {rhs}"
        );

        for i in 0..10 {
            let sol = &res.event.solutions[i];
            if target.contributing.contains(&i) {
                continue;
            }
            let factor = NodeFactor::new(target, sol, res.rand.cov(i)).unwrap();
            let f1 = integ.log_factor(&factor, c1).unwrap();
            let f2 = integ.log_factor(&factor, c2).unwrap();
            assert!(
                (f1 - f2).abs() <= 1e-10 * (1.0 + f1.abs()),
                "node {i} factor moved with c"
            );
        }
    }

    #[test]
    fn compiled_eta_agrees_with_direct_map() {
        let res = fitted_nonempty(61, 150, 8, 0.8, Rule::Or);
        let (j0, k0) = first_edge(&res);
        let target = target_sets(&res.event, &res.suff, j0, k0).unwrap();
        for &i in &target.contributing {
            let sol = &res.event.solutions[i];
            let factor = NodeFactor::new(&target, sol, res.rand.cov(i)).unwrap();
            let mut rng = crate::rng::stream_rng(61, 1000 + i as u64);
            for _ in 0..5 {
                let c = target.s_obs + 4.0 * rng.sample::<f64, _>(StandardNormal);
                let b = DVector::from_iterator(
                    sol.q(),
                    (0..sol.q()).map(|_| rng.sample::<f64, _>(StandardNormal)),
                );
                let direct = eta_map(c, &target, sol, &b, &sol.inactive_subgrad).unwrap();
                let compiled = factor.eta_offset(c) + factor.eta_matrix(c) * &b;
                assert!((direct - &compiled).amax() < 1e-9);
            }
        }
    }

    #[test]
    fn smallest_graph_density_is_finite_at_observed_value() {
        let spec = generate_precision(2, 1, 0.9, 2).unwrap();
        let data = sample_data(&spec, 40, 3).unwrap();
        let suff = SuffStat::from_data(&data).unwrap();
        let rand = RandomizationSpec::isotropic(2, 1.0, 7).unwrap();
        let sols: Vec<_> = (0..2)
            .map(|i| solve_node(&suff, i, 0.5, 1.0, &rand.draw(i)).unwrap())
            .collect();
        let event = crate::selector::combine(sols, Rule::Or).unwrap();
        if event.edges.contains(&(0, 1)) {
            let dens = EdgeDensity::new(&event, &suff, &rand, 0, 1).unwrap();
            assert!(dens.log_weight(dens.slice().s_obs(), 0.0).is_finite());
        }
    }
}
