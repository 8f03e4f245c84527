//! Logistic propensity model fitted by iteratively reweighted least squares,
//! plus the propensity-quantile dummies used for doubly robust augmentation.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result, Warning};
use crate::linalg::{check_full_rank, SpdSolver};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IrlsOptions {
    pub max_iter: usize,
    /// Convergence threshold on the absolute change in deviance.
    pub tol: f64,
    /// Scores outside `[eps, 1 - eps]` raise an extreme-weight warning.
    pub extreme_eps: f64,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        Self { max_iter: 100, tol: 1e-10, extreme_eps: 0.01 }
    }
}

/// Fitted logistic propensity model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PsFit {
    pub alpha_hat: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub fitted_ps: Vec<f64>,
    pub n_iter: usize,
    pub converged: bool,
    pub deviance: f64,
    pub warnings: Vec<Warning>,
}

impl PsFit {
    /// Propensity model that assigns every unit the same score. Mostly useful
    /// for tests and for the intercept-only identities.
    pub fn constant(p: f64, n: usize) -> Self {
        Self {
            alpha_hat: vec![(p / (1.0 - p)).ln()],
            std_errors: vec![f64::NAN],
            fitted_ps: vec![p; n],
            n_iter: 0,
            converged: true,
            deviance: f64::NAN,
            warnings: Vec::new(),
        }
    }
}

pub(crate) fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn deviance(y: &[f64], eta: &DVector<f64>) -> f64 {
    // -2 log L, written with softplus for stability
    y.iter()
        .zip(eta.iter())
        .map(|(&yi, &e)| {
            let softplus = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
            2.0 * (softplus - yi * e)
        })
        .sum()
}

/// Maximum likelihood logistic regression of a binary `outcome` on `design`.
pub fn fit_logistic(design: &DMatrix<f64>, outcome: &[f64], opts: &IrlsOptions) -> Result<PsFit> {
    let (n, p) = design.shape();
    if outcome.len() != n {
        return Err(Error::DimensionMismatch(format!("{n} design rows, {} outcomes", outcome.len())));
    }
    if outcome.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::NonBinaryOutcome);
    }
    let n1 = outcome.iter().filter(|&&y| y == 1.0).count();
    if n1 == 0 || n1 == n {
        return Err(Error::NoVariationInOutcome);
    }
    check_full_rank(&design.tr_mul(design))?;

    let y = DVector::from_column_slice(outcome);
    let mut alpha = DVector::zeros(p);
    let mut eta = design * &alpha;
    let mut dev = deviance(outcome, &eta);
    let mut converged = false;
    let mut n_iter = 0;
    let mut polish = false;
    let mut last_shift = f64::INFINITY;
    while n_iter < opts.max_iter {
        n_iter += 1;
        let mu = eta.map(expit);
        let w = mu.map(|m| (m * (1.0 - m)).max(1e-300));
        let score = design.tr_mul(&(&y - &mu));
        let mut weighted = design.clone();
        for (mut row, &wi) in weighted.row_iter_mut().zip(w.iter()) {
            row *= wi;
        }
        let info = design.tr_mul(&weighted);
        let step = SpdSolver::new(&info)?.solve(&score);

        // Newton step with halving when the deviance goes up
        let mut scale = 1.0;
        let (mut new_alpha, mut new_eta, mut new_dev);
        loop {
            new_alpha = &alpha + &step * scale;
            new_eta = design * &new_alpha;
            new_dev = deviance(outcome, &new_eta);
            if new_dev.is_finite() && new_dev <= dev + 1e-12 * dev.abs().max(1.0) || scale < 1e-10 {
                break;
            }
            scale *= 0.5;
        }
        let change = (dev - new_dev).abs();
        last_shift = (&new_eta - &eta).amax();
        alpha = new_alpha;
        eta = new_eta;
        dev = new_dev;
        if polish {
            converged = true;
            break;
        }
        if change < opts.tol {
            // one more Newton step drives the score to rounding level
            polish = true;
        }
    }
    if polish {
        converged = true;
    }

    let fitted: Vec<f64> = eta.iter().map(|&e| expit(e)).collect();
    // Without a finite maximizer the separated units run off to 0 or 1 and
    // every Newton step still moves their linear predictor by about one.
    // A finite maximizer can also sit next to the boundary, but there the
    // last step barely moves.
    let at_boundary = fitted.iter().any(|&m| m < 1e-8 || m > 1.0 - 1e-8);
    if at_boundary && (last_shift > 1e-3 || !converged) {
        return Err(Error::Separation);
    }

    let w: Vec<f64> = fitted.iter().map(|m| m * (1.0 - m)).collect();
    let mut weighted = design.clone();
    for (mut row, &wi) in weighted.row_iter_mut().zip(w.iter()) {
        row *= wi;
    }
    let cov = SpdSolver::new(&design.tr_mul(&weighted))?.inverse();
    let std_errors = (0..p).map(|j| cov[(j, j)].sqrt()).collect();

    let mut warnings = Vec::new();
    if !converged {
        warnings.push(Warning::NotConverged);
    }
    let eps = opts.extreme_eps;
    let extreme = fitted.iter().filter(|&&m| m < eps || m > 1.0 - eps).count();
    if extreme > 0 {
        warnings.push(Warning::ExtremeWeights { count: extreme, eps });
    }
    Ok(PsFit {
        alpha_hat: alpha.iter().copied().collect(),
        std_errors,
        fitted_ps: fitted,
        n_iter,
        converged,
        deviance: dev,
        warnings,
    })
}

/// Equal-frequency classification of the propensity score.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PsDummies {
    /// Interior cut points after collapsing duplicates. A unit with score
    /// `<= edge` falls at or below that edge's bin.
    pub bin_edges: Vec<f64>,
    /// Bin index per unit, 0 = lowest (reference) bin.
    pub bin: Vec<usize>,
    /// Number of non-empty bins.
    pub k: usize,
    pub requested_k: usize,
    pub degenerate: bool,
}

impl PsDummies {
    pub fn n_columns(&self) -> usize {
        self.k - 1
    }

    /// Indicator for bin `column + 1` of unit `unit`.
    pub fn dummy(&self, unit: usize, column: usize) -> f64 {
        if self.bin[unit] == column + 1 {
            1.0
        } else {
            0.0
        }
    }

    /// `n × (k-1)` indicator matrix with the lowest bin as reference.
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.bin.len(), self.n_columns(), |i, j| self.dummy(i, j))
    }
}

/// Splits units into `k` equal-frequency bins of the score.
///
/// The j-th cut point is the `ceil(j n / k)`-th order statistic, so bins hold
/// `floor(n/k)` or `ceil(n/k)` units when scores are distinct. Ties at a cut
/// point go to the lower bin; duplicated cut points are collapsed.
pub fn ps_quantile_dummies(ps: &[f64], k: usize) -> Result<PsDummies> {
    let n = ps.len();
    if !(2..=10).contains(&k) || n < k {
        return Err(Error::InvalidBinCount(k));
    }
    let mut sorted = ps.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let max = sorted[n - 1];
    let mut edges: Vec<f64> = Vec::with_capacity(k - 1);
    for j in 1..k {
        let pos = (j * n).div_ceil(k) - 1;
        let e = sorted[pos];
        // an edge at the maximum would leave the upper bins empty
        if e < max && edges.last().is_none_or(|&last| e > last) {
            edges.push(e);
        }
    }
    let bin = ps.iter().map(|&p| edges.iter().filter(|&&e| p > e).count()).collect();
    let effective = edges.len() + 1;
    let degenerate = effective < k;
    if degenerate {
        log::warn!("{}", Warning::DegenerateBins { requested: k, effective });
    }
    Ok(PsDummies { bin_edges: edges, bin, k: effective, requested_k: k, degenerate })
}
