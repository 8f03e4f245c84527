//! Cluster bootstrap, doubly robust specification tests, the propensity
//! balance diagnostic and backward elimination.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result, Warning};
use crate::estimators::{
    estimate_drglmm, estimate_glmm, estimate_ipwdid, estimate_one, fit_propensity, Estimand, EstimatorOptions, Method,
};
use crate::glm::{fit_logistic, IrlsOptions};
use crate::linalg::{mean, quantile_sorted, two_sided_p};
use crate::lmm::{fit_lmm, fit_or, FitOptions};
use crate::panel::{build_terms_design, ps_design, ModelSpec, PanelDataset, RandomEffect, Term};
use crate::rng::stream_rng;

/// Share of failed replicates above which a warning is attached.
const FAILED_WARN_SHARE: f64 = 0.05;
/// Two-sided 5% critical value.
pub const CRITICAL_Z: f64 = 1.96;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapResult {
    pub point: f64,
    pub boot_mean: f64,
    /// Standard deviation of the replicate estimates (denominator `B - 1`).
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    #[serde(rename = "B")]
    pub b: usize,
    pub n_failed: usize,
    pub warnings: Vec<Warning>,
}

/// Unit indices drawn with replacement for replicate `replicate`.
pub fn bootstrap_indices(n: usize, seed: u64, replicate: u64) -> Vec<usize> {
    let mut rng = stream_rng(seed, replicate);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Evaluates `statistic` on `b` cluster resamples. Replicate `r` draws from
/// stream `r` of `seed`, and results come back in replicate order, so the
/// output does not depend on the thread pool. Failed replicates are `None`.
pub fn bootstrap_replicates<T, F>(data: &PanelDataset, b: usize, seed: u64, statistic: F) -> Vec<Option<T>>
where
    T: Send,
    F: Fn(&PanelDataset) -> Result<T> + Sync,
{
    let n = data.n_units();
    (0..b)
        .into_par_iter()
        .map(|r| {
            let idx = bootstrap_indices(n, seed, r as u64);
            data.resample(&idx).and_then(|d| statistic(&d)).ok()
        })
        .collect()
}

fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn failed_warning(failed: usize, total: usize) -> Option<Warning> {
    (failed as f64 >= FAILED_WARN_SHARE * total as f64 && failed > 0)
        .then_some(Warning::FailedReplicates { failed, total })
}

/// Percentile bootstrap of a scalar statistic.
pub fn bootstrap_statistic<F>(data: &PanelDataset, b: usize, seed: u64, statistic: F) -> Result<BootstrapResult>
where
    F: Fn(&PanelDataset) -> Result<f64> + Sync,
{
    if b < 2 {
        return Err(Error::InvalidArgument(format!("bootstrap needs B >= 2, got {b}")));
    }
    let point = statistic(data)?;
    let reps = bootstrap_replicates(data, b, seed, &statistic);
    let mut values: Vec<f64> = reps.into_iter().flatten().filter(|v| v.is_finite()).collect();
    let n_failed = b - values.len();
    if values.is_empty() {
        return Err(Error::AllReplicatesFailed(b));
    }
    let boot_mean = mean(&values);
    let se = sample_sd(&values);
    values.sort_by(|a, b| a.total_cmp(b));
    let warnings = failed_warning(n_failed, b).into_iter().collect();
    Ok(BootstrapResult {
        point,
        boot_mean,
        se,
        ci_lower: quantile_sorted(&values, 0.025),
        ci_upper: quantile_sorted(&values, 0.975),
        b,
        n_failed,
        warnings,
    })
}

/// Cluster bootstrap of one estimator. Each replicate resamples units with
/// both periods and reruns the propensity fit, outcome fit and estimate.
pub fn cluster_bootstrap(
    data: &PanelDataset,
    spec: &ModelSpec,
    method: Method,
    estimand: Estimand,
    opts: &EstimatorOptions,
    b: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    if !method.supports(estimand) {
        return Err(Error::UnsupportedEstimand { method: method.to_string(), estimand: estimand.to_string() });
    }
    bootstrap_statistic(data, b, seed, |d| estimate_one(d, spec, method, estimand, opts).map(|e| e.value))
}

/// Effect as a percentage of the mean pre-intervention response.
pub fn relative_effect(value: f64, data: &PanelDataset) -> f64 {
    value / data.pre_period_mean() * 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DrTestResult {
    pub estimand: Estimand,
    /// `|DR − IPWDID| / σ̂_DRI`; large values reject the propensity model.
    pub z_ps: f64,
    /// `|DR − GLMM| / σ̂_DRG`; large values reject the outcome model.
    pub z_or: f64,
    pub reject_ps: bool,
    pub reject_or: bool,
    pub diff_ps: f64,
    pub diff_or: f64,
    pub sd_ps: f64,
    pub sd_or: f64,
    pub n_failed: usize,
    pub warnings: Vec<Warning>,
}

fn dr_differences(data: &PanelDataset, spec: &ModelSpec, estimand: Estimand, opts: &EstimatorOptions) -> Result<(f64, f64)> {
    let ps = fit_propensity(data, &spec.ps_terms, &opts.irls)?;
    let dr = estimate_drglmm(data, spec, &ps, opts)?.get(estimand).value;
    let ipwdid = estimate_ipwdid(data, &ps)?.get(estimand).value;
    let glmm = estimate_glmm(data, spec, opts)?.get(estimand).value;
    Ok((dr - ipwdid, dr - glmm))
}

fn guarded_z(diff: f64, sd: f64, what: &str, warnings: &mut Vec<Warning>) -> Result<f64> {
    if sd > 0.0 {
        return Ok(diff.abs() / sd);
    }
    if diff == 0.0 {
        warnings.push(Warning::DegenerateVariance(what.to_string()));
        Ok(0.0)
    } else {
        Err(Error::DegenerateVariance)
    }
}

/// Bootstrap tests of the propensity and outcome specifications, comparing
/// the doubly robust estimate with IPWDID and GLMM on shared replicates.
pub fn dr_specification_test(
    data: &PanelDataset,
    spec: &ModelSpec,
    estimand: Estimand,
    opts: &EstimatorOptions,
    b: usize,
    seed: u64,
) -> Result<DrTestResult> {
    if b < 2 {
        return Err(Error::InvalidArgument(format!("bootstrap needs B >= 2, got {b}")));
    }
    let (diff_ps, diff_or) = dr_differences(data, spec, estimand, opts)?;
    let reps: Vec<(f64, f64)> = bootstrap_replicates(data, b, seed, |d| dr_differences(d, spec, estimand, opts))
        .into_iter()
        .flatten()
        .filter(|(a, c)| a.is_finite() && c.is_finite())
        .collect();
    let n_failed = b - reps.len();
    if reps.len() < 2 {
        return Err(Error::AllReplicatesFailed(b));
    }
    let sd_ps = sample_sd(&reps.iter().map(|r| r.0).collect::<Vec<_>>());
    let sd_or = sample_sd(&reps.iter().map(|r| r.1).collect::<Vec<_>>());
    let mut warnings: Vec<Warning> = failed_warning(n_failed, b).into_iter().collect();
    let z_ps = guarded_z(diff_ps, sd_ps, "DRGLMM - IPWDID", &mut warnings)?;
    let z_or = guarded_z(diff_or, sd_or, "DRGLMM - GLMM", &mut warnings)?;
    Ok(DrTestResult {
        estimand,
        z_ps,
        z_or,
        reject_ps: z_ps > CRITICAL_Z,
        reject_or: z_or > CRITICAL_Z,
        diff_ps,
        diff_or,
        sd_ps,
        sd_or,
        n_failed,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceReport {
    pub r2_with_covariates: f64,
    pub r2_ps_only: f64,
    pub balanced: bool,
}

fn adjusted_pseudo_r2(outcome: &[f64], fitted: &[f64], predictors: usize) -> f64 {
    let n = outcome.len() as f64;
    let (my, mf) = (mean(outcome), mean(fitted));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (y, f) in outcome.iter().zip(fitted) {
        sxy += (y - my) * (f - mf);
        syy += (y - my).powi(2);
        sxx += (f - mf).powi(2);
    }
    let r2 = if sxx > 0.0 && syy > 0.0 { sxy * sxy / (sxx * syy) } else { 0.0 };
    1.0 - (1.0 - r2) * (n - 1.0) / (n - predictors as f64 - 1.0)
}

/// Regresses treatment on a cubic in the fitted score, with and without the
/// propensity covariates. The propensity model balances the covariates when
/// adding them does not raise the adjusted pseudo-R².
pub fn balance_check(data: &PanelDataset, ps_terms: &[Term], ps: &[f64], opts: &IrlsOptions) -> Result<BalanceReport> {
    let n = data.n_units();
    if ps.len() != n {
        return Err(Error::DimensionMismatch(format!("{} propensity scores for {n} units", ps.len())));
    }
    let covariates = ps_design(data, ps_terms)?;
    let cov_cols: Vec<usize> =
        (0..covariates.ncols()).filter(|&j| ps_terms[j] != Term::Intercept).collect();
    let d = data.treatment();
    let cubic = |i: usize, j: usize| match j {
        0 => 1.0,
        k => ps[i].powi(k as i32),
    };
    let inconclusive = |e: Error| match e {
        Error::Separation | Error::RankDeficientDesign => Error::BalanceInconclusive(e.to_string()),
        other => other,
    };
    let xa = nalgebra::DMatrix::from_fn(n, 4, cubic);
    let xb = nalgebra::DMatrix::from_fn(n, 4 + cov_cols.len(), |i, j| {
        if j < 4 {
            cubic(i, j)
        } else {
            covariates[(i, cov_cols[j - 4])]
        }
    });
    let fa = fit_logistic(&xa, &d, opts).map_err(inconclusive)?;
    let fb = fit_logistic(&xb, &d, opts).map_err(inconclusive)?;
    let r2_ps_only = adjusted_pseudo_r2(&d, &fa.fitted_ps, 3);
    let r2_with_covariates = adjusted_pseudo_r2(&d, &fb.fitted_ps, 3 + cov_cols.len());
    Ok(BalanceReport { r2_with_covariates, r2_ps_only, balanced: r2_with_covariates <= r2_ps_only })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EliminationTarget {
    Propensity,
    Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EliminationStep {
    pub dropped: Term,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EliminationResult {
    pub spec: ModelSpec,
    pub steps: Vec<EliminationStep>,
    pub warnings: Vec<Warning>,
}

fn term_p_values(
    data: &PanelDataset,
    spec: &ModelSpec,
    target: EliminationTarget,
    irls: &IrlsOptions,
    lmm: &FitOptions,
) -> Result<Vec<f64>> {
    let (beta, se) = match target {
        EliminationTarget::Propensity => {
            let fit = fit_propensity(data, &spec.ps_terms, irls)?;
            (fit.alpha_hat, fit.std_errors)
        }
        EliminationTarget::Outcome => {
            let design = build_terms_design(data, &spec.outcome_terms, true)?;
            let fit = match spec.random_effect {
                RandomEffect::UnitIntercept => fit_lmm(&design.fit, &design.response, &design.cluster, lmm)?,
                RandomEffect::None => fit_or(&design.fit, &design.response)?,
            };
            (fit.fixed_effects, fit.se_fixed)
        }
    };
    Ok(beta.iter().zip(&se).map(|(b, s)| two_sided_p(b / s)).collect())
}

fn is_forced(term: &Term, target: EliminationTarget) -> bool {
    match target {
        EliminationTarget::Propensity => *term == Term::Intercept,
        EliminationTarget::Outcome => matches!(term, Term::Intercept | Term::Time | Term::Treatment),
    }
}

/// Drops the least significant non-forced term one at a time until every
/// remaining candidate has a p-value below `alpha`. Ties go to the earlier
/// term. Intercept, time and treatment are never dropped.
pub fn backward_eliminate(
    data: &PanelDataset,
    full_spec: &ModelSpec,
    target: EliminationTarget,
    alpha: f64,
    opts: &EstimatorOptions,
) -> Result<EliminationResult> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must be in (0, 1], got {alpha}")));
    }
    let mut spec = full_spec.clone();
    let mut steps = Vec::new();
    loop {
        let terms = match target {
            EliminationTarget::Propensity => &spec.ps_terms,
            EliminationTarget::Outcome => &spec.outcome_terms,
        };
        let candidates: Vec<usize> = (0..terms.len()).filter(|&j| !is_forced(&terms[j], target)).collect();
        if candidates.is_empty() {
            break;
        }
        let p = term_p_values(data, &spec, target, &opts.irls, &opts.lmm)?;
        let mut worst = candidates[0];
        for &j in &candidates[1..] {
            if p[j] > p[worst] {
                worst = j;
            }
        }
        if p[worst] < alpha {
            break;
        }
        let terms = match target {
            EliminationTarget::Propensity => &mut spec.ps_terms,
            EliminationTarget::Outcome => &mut spec.outcome_terms,
        };
        steps.push(EliminationStep { dropped: terms.remove(worst), p_value: p[worst] });
    }
    let remaining = match target {
        EliminationTarget::Propensity => &spec.ps_terms,
        EliminationTarget::Outcome => &spec.outcome_terms,
    };
    let had_candidates = match target {
        EliminationTarget::Propensity => &full_spec.ps_terms,
        EliminationTarget::Outcome => &full_spec.outcome_terms,
    }
    .iter()
    .any(|t| !is_forced(t, target));
    let mut warnings = Vec::new();
    if had_candidates && remaining.iter().all(|t| is_forced(t, target)) {
        warnings.push(Warning::EmptyModel);
    }
    Ok(EliminationResult { spec, steps, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_sd_uses_unbiased_denominator() {
        assert!((sample_sd(&[1.0, 2.0, 3.0, 4.0]) - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(sample_sd(&[2.0]), 0.0);
    }

    #[test]
    fn indices_depend_only_on_seed_and_replicate() {
        let a = bootstrap_indices(50, 7, 3);
        let b = bootstrap_indices(50, 7, 3);
        let c = bootstrap_indices(50, 7, 4);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.iter().all(|&i| i < 50));
    }

    #[test]
    fn adjusted_r2_penalizes_predictors() {
        let y = [0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
        let f = [0.2, 0.7, 0.4, 0.6, 0.8, 0.3, 0.5, 0.45];
        assert!(adjusted_pseudo_r2(&y, &f, 1) > adjusted_pseudo_r2(&y, &f, 3));
    }

    #[test]
    fn zero_variance_guard() {
        let mut w = Vec::new();
        assert_eq!(guarded_z(0.0, 0.0, "x", &mut w).unwrap(), 0.0);
        assert_eq!(w.len(), 1);
        assert!(matches!(guarded_z(1.0, 0.0, "x", &mut w), Err(Error::DegenerateVariance)));
    }
}
