//! Gaussian linear mixed model with a unit-level random intercept, fitted by
//! maximum likelihood, and the post-period ordinary least squares fit.
//!
//! Every cluster holds two rows, so the per-cluster covariance is
//! `σ_e² (I₂ + λ 𝟙𝟙ᵀ)` with `λ = σ_u² / σ_e²`. For fixed `λ` the GLS problem
//! splits into within-cluster and between-cluster cross products:
//! `XᵀV⁻¹X ∝ W + B / (1 + 2λ)`. The fixed effects and `σ_e²` are profiled
//! out and the remaining one-dimensional likelihood in `log λ` is maximized
//! with Brent's method.

use std::collections::HashMap;
use std::hash::Hash;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{brent_minimize, brent_root, check_full_rank, SpdSolver};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FitOptions {
    pub log_lambda_min: f64,
    pub log_lambda_max: f64,
    /// Relative tolerance of the scalar search in `log λ`.
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { log_lambda_min: -12.0, log_lambda_max: 12.0, rel_tol: 1e-8, max_iter: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LmmFit {
    /// Coefficients aligned with the design columns.
    pub fixed_effects: Vec<f64>,
    pub se_fixed: Vec<f64>,
    pub sigma_u2: f64,
    pub sigma_e2: f64,
    /// Variance ratio `σ_u² / σ_e²`.
    pub lambda: f64,
    pub loglik: f64,
    pub converged: bool,
}

impl LmmFit {
    /// Fixed-effect linear predictor `Xβ̂` for each row of `x`.
    pub fn linear_predictor(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let beta = DVector::from_column_slice(&self.fixed_effects);
        (x * beta).iter().copied().collect()
    }

    /// Wald z statistic of each coefficient.
    pub fn z_scores(&self) -> Vec<f64> {
        self.fixed_effects.iter().zip(&self.se_fixed).map(|(b, s)| b / s).collect()
    }
}

/// Profiled log-likelihood of the two-row random-intercept model.
#[derive(Debug, Clone)]
pub struct ProfiledLikelihood {
    within_xx: DMatrix<f64>,
    between_xx: DMatrix<f64>,
    within_xy: DVector<f64>,
    between_xy: DVector<f64>,
    within_yy: f64,
    between_yy: f64,
    n_clusters: usize,
}

struct GlsSolution {
    beta: DVector<f64>,
    solver: SpdSolver,
    rss: f64,
    within: f64,
    between: f64,
}

impl ProfiledLikelihood {
    pub fn new<C: Eq + Hash>(design: &DMatrix<f64>, response: &[f64], cluster_ids: &[C]) -> Result<Self> {
        let (n_obs, p) = design.shape();
        if response.len() != n_obs || cluster_ids.len() != n_obs {
            return Err(Error::DimensionMismatch(format!(
                "{n_obs} design rows, {} responses, {} cluster ids",
                response.len(),
                cluster_ids.len()
            )));
        }
        let mut groups: HashMap<&C, Vec<usize>> = HashMap::new();
        let mut order = Vec::new();
        for (row, id) in cluster_ids.iter().enumerate() {
            let entry = groups.entry(id).or_default();
            if entry.is_empty() {
                order.push(id);
            }
            entry.push(row);
        }
        if let Some(bad) = groups.values().find(|rows| rows.len() != 2) {
            return Err(Error::UnbalancedClusters(format!("found a cluster with {} rows", bad.len())));
        }

        let mut within_xx = DMatrix::zeros(p, p);
        let mut between_xx = DMatrix::zeros(p, p);
        let mut within_xy = DVector::zeros(p);
        let mut between_xy = DVector::zeros(p);
        let (mut within_yy, mut between_yy) = (0.0, 0.0);
        let mut diff = DVector::zeros(p);
        let mut avg = DVector::zeros(p);
        for id in &order {
            let rows = &groups[*id];
            let (a, b) = (rows[0], rows[1]);
            for j in 0..p {
                diff[j] = design[(a, j)] - design[(b, j)];
                avg[j] = 0.5 * (design[(a, j)] + design[(b, j)]);
            }
            let dy = response[a] - response[b];
            let my = 0.5 * (response[a] + response[b]);
            // within: sum of squared deviations from the cluster mean = d dᵀ / 2
            within_xx.ger(0.5, &diff, &diff, 1.0);
            within_xy.axpy(0.5 * dy, &diff, 1.0);
            within_yy += 0.5 * dy * dy;
            between_xx.ger(2.0, &avg, &avg, 1.0);
            between_xy.axpy(2.0 * my, &avg, 1.0);
            between_yy += 2.0 * my * my;
        }
        check_full_rank(&(&within_xx + &between_xx))?;
        Ok(Self { within_xx, between_xx, within_xy, between_xy, within_yy, between_yy, n_clusters: order.len() })
    }

    fn solve(&self, lambda: f64) -> Result<GlsSolution> {
        let s = 1.0 / (1.0 + 2.0 * lambda);
        let m = &self.within_xx + &self.between_xx * s;
        let r = &self.within_xy + &self.between_xy * s;
        let solver = SpdSolver::new(&m)?;
        let beta = solver.solve(&r);
        let within = (self.within_yy - 2.0 * beta.dot(&self.within_xy) + beta.dot(&(&self.within_xx * &beta))).max(0.0);
        let between =
            (self.between_yy - 2.0 * beta.dot(&self.between_xy) + beta.dot(&(&self.between_xx * &beta))).max(0.0);
        let rss = within + s * between;
        Ok(GlsSolution { beta, solver, rss, within, between })
    }

    fn loglik_from(&self, lambda: f64, rss: f64) -> f64 {
        let n_obs = 2.0 * self.n_clusters as f64;
        let sigma_e2 = rss / n_obs;
        -0.5 * n_obs * (LN_2PI + 1.0 + sigma_e2.ln()) - 0.5 * self.n_clusters as f64 * (1.0 + 2.0 * lambda).ln()
    }

    /// Profiled log-likelihood at variance ratio `λ = exp(log_lambda)`.
    pub fn loglik(&self, log_lambda: f64) -> f64 {
        let lambda = log_lambda.exp();
        match self.solve(lambda) {
            Ok(sol) => self.loglik_from(lambda, sol.rss),
            Err(_) => f64::NAN,
        }
    }

    /// Profiled log-likelihood at `λ = 0` (no random effect).
    pub fn loglik_at_zero(&self) -> f64 {
        self.solve(0.0).map(|sol| self.loglik_from(0.0, sol.rss)).unwrap_or(f64::NAN)
    }

    /// Sign-carrying score in `log λ`: positive where the likelihood increases.
    /// Zero exactly when the between-cluster residual share balances the
    /// within-cluster one.
    fn score_sign(&self, log_lambda: f64) -> f64 {
        let lambda = log_lambda.exp();
        match self.solve(lambda) {
            Ok(sol) => {
                let s = 1.0 / (1.0 + 2.0 * lambda);
                let sb = s * sol.between;
                (sb - sol.within) / (sb + sol.within)
            }
            Err(_) => f64::NAN,
        }
    }
}

/// Maximum likelihood fit of the random-intercept model.
///
/// `cluster_ids` labels the unit of each row; every unit must own exactly
/// two rows.
pub fn fit_lmm<C: Eq + Hash>(
    design: &DMatrix<f64>,
    response: &[f64],
    cluster_ids: &[C],
    opts: &FitOptions,
) -> Result<LmmFit> {
    let profile = ProfiledLikelihood::new(design, response, cluster_ids)?;
    let (lo, hi) = (opts.log_lambda_min, opts.log_lambda_max);

    let mut evals_ok = true;
    let (mut x, neg_ll, evals) = brent_minimize(
        |x| {
            let ll = profile.loglik(x);
            if ll.is_finite() {
                -ll
            } else {
                evals_ok = false;
                f64::INFINITY
            }
        },
        lo,
        hi,
        opts.rel_tol,
        opts.max_iter,
    );
    if !evals_ok || !neg_ll.is_finite() {
        return Err(Error::NonFiniteLikelihood);
    }
    let converged = evals < opts.max_iter;

    // Refine the stationary point by root finding on the analytic score so the
    // variance ratio does not carry the search tolerance.
    let delta = 1e-3 * x.abs().max(1.0);
    let (a, b) = ((x - delta).max(lo), (x + delta).min(hi));
    if a < b {
        let (fa, fb) = (profile.score_sign(a), profile.score_sign(b));
        if fa > 0.0 && fb < 0.0 {
            if let Some(root) = brent_root(|t| profile.score_sign(t), a, b, 1e-15, 200) {
                x = root;
            }
        }
    }

    let interior_ll = profile.loglik(x);
    let boundary_ll = profile.loglik_at_zero();
    let lambda = if x <= lo + 1e-6 || boundary_ll >= interior_ll { 0.0 } else { x.exp() };

    let sol = profile.solve(lambda)?;
    let loglik = profile.loglik_from(lambda, sol.rss);
    if !loglik.is_finite() {
        return Err(Error::NonFiniteLikelihood);
    }
    let sigma_e2 = sol.rss / (2.0 * profile.n_clusters as f64);
    let cov = sol.solver.inverse() * sigma_e2;
    Ok(LmmFit {
        fixed_effects: sol.beta.iter().copied().collect(),
        se_fixed: (0..cov.nrows()).map(|j| cov[(j, j)].sqrt()).collect(),
        sigma_u2: lambda * sigma_e2,
        sigma_e2,
        lambda,
        loglik,
        converged,
    })
}

/// Ordinary least squares, returned in the mixed-model shape with no random
/// effect. `sigma_e2` is the ML residual variance `RSS / n`; standard errors
/// use `RSS / (n - p)`.
pub fn fit_or(design: &DMatrix<f64>, response: &[f64]) -> Result<LmmFit> {
    let (n, p) = design.shape();
    if response.len() != n {
        return Err(Error::DimensionMismatch(format!("{n} design rows, {} responses", response.len())));
    }
    if n <= p {
        return Err(Error::RankDeficientDesign);
    }
    let gram = design.tr_mul(design);
    check_full_rank(&gram)?;
    let y = DVector::from_column_slice(response);
    let solver = SpdSolver::new(&gram)?;
    let beta = solver.solve(&design.tr_mul(&y));
    let resid = &y - design * &beta;
    let rss = resid.norm_squared();
    let sigma_e2 = rss / n as f64;
    let cov = solver.inverse() * (rss / (n - p) as f64);
    let loglik = -0.5 * n as f64 * (LN_2PI + 1.0 + sigma_e2.ln());
    Ok(LmmFit {
        fixed_effects: beta.iter().copied().collect(),
        se_fixed: (0..p).map(|j| cov[(j, j)].sqrt()).collect(),
        sigma_u2: 0.0,
        sigma_e2,
        lambda: 0.0,
        loglik,
        converged: true,
    })
}
