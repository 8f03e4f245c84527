use std::fmt;

use rayon::prelude::*;
use serde::Serialize;

use super::scenario::{generate_replicate, true_effects, Scenario, ScenarioId, TrueEffects};
use crate::error::{Error, Result, Warning};
use crate::estimators::{
    estimate_drglmm, estimate_glmm, estimate_ipw, estimate_ipwdid, estimate_or, fit_propensity, EffectPair, Estimand,
    EstimatorOptions, Method,
};
use crate::glm::PsFit;
use crate::panel::{ModelSpec, PanelDataset, RandomEffect, Term};

/// Share of failed replicates above which a cell carries a warning.
const FAILED_WARN_SHARE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum ModelRole {
    Correct,
    Incorrect,
    #[serde(rename = "-")]
    NotUsed,
}

impl fmt::Display for ModelRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelRole::Correct => "Correct",
            ModelRole::Incorrect => "Incorrect",
            ModelRole::NotUsed => "-",
        })
    }
}

impl std::str::FromStr for ModelRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Correct" => Ok(ModelRole::Correct),
            "Incorrect" => Ok(ModelRole::Incorrect),
            "-" => Ok(ModelRole::NotUsed),
            _ => Err(Error::InvalidArgument(format!("unknown model role `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteEntry {
    pub method: Method,
    pub outcome: ModelRole,
    pub ps: ModelRole,
    pub spec: ModelSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorSuite {
    pub entries: Vec<SuiteEntry>,
}

fn outcome_terms(id: ScenarioId, correct: bool) -> Vec<Term> {
    let x2 = || Term::Covariate("x2".into());
    let x2_time = || Term::CovariateTime("x2".into());
    let mut terms = vec![Term::Intercept, Term::Time, Term::Treatment, Term::Covariate("x1".into())];
    if correct {
        match id {
            ScenarioId::Hom => terms.extend([x2(), Term::Log("x2".into())]),
            ScenarioId::HomTi => terms.extend([x2_time(), Term::Log("x2".into())]),
            ScenarioId::Het | ScenarioId::RandCoef => terms.push(x2()),
            ScenarioId::HetTi | ScenarioId::RandCoefTi => terms.push(x2_time()),
        }
    }
    if id.heterogeneous() {
        terms.push(Term::CovariateTreatment("x1".into()));
    }
    terms
}

fn ps_terms(correct: bool) -> Vec<Term> {
    let mut terms = vec![Term::Intercept, Term::Covariate("x1".into())];
    if correct {
        terms.push(Term::Covariate("x2".into()));
    }
    terms.push(Term::Covariate("v".into()));
    terms
}

impl EstimatorSuite {
    /// The twelve estimator / specification pairs compared for each
    /// scenario. "Incorrect" models omit every `x2` term.
    pub fn standard(id: ScenarioId) -> Self {
        use ModelRole::*;
        let rows = [
            (Method::Or, Correct, NotUsed),
            (Method::Or, Incorrect, NotUsed),
            (Method::Glmm, Correct, NotUsed),
            (Method::Glmm, Incorrect, NotUsed),
            (Method::Ipw, NotUsed, Correct),
            (Method::Ipw, NotUsed, Incorrect),
            (Method::IpwDid, NotUsed, Correct),
            (Method::IpwDid, NotUsed, Incorrect),
            (Method::DrGlmm, Correct, Correct),
            (Method::DrGlmm, Correct, Incorrect),
            (Method::DrGlmm, Incorrect, Correct),
            (Method::DrGlmm, Incorrect, Incorrect),
        ];
        let entries = rows
            .into_iter()
            .map(|(method, outcome, ps)| SuiteEntry {
                method,
                outcome,
                ps,
                spec: ModelSpec {
                    outcome_terms: outcome_terms(id, outcome != Incorrect),
                    random_effect: RandomEffect::UnitIntercept,
                    ps_terms: ps_terms(ps != Incorrect),
                },
            })
            .collect();
        Self { entries }
    }

    pub fn empty() -> Self {
        Self { entries: Vec::new() }
    }

    /// Keeps the entries matching `keep`.
    pub fn filter(mut self, keep: impl Fn(&SuiteEntry) -> bool) -> Self {
        self.entries.retain(|e| keep(e));
        self
    }

    /// Sets the random-effect structure of every outcome model.
    pub fn with_random_effect(mut self, random_effect: RandomEffect) -> Self {
        for e in &mut self.entries {
            e.spec.random_effect = random_effect;
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyCell {
    pub method: Method,
    pub outcome: ModelRole,
    pub ps: ModelRole,
    pub estimand: Estimand,
    pub bias_x100: f64,
    /// Population variance of the replicate estimates.
    pub var: f64,
    pub mse: f64,
    pub reps: usize,
    /// Monte Carlo standard error of the bias (not scaled by 100).
    pub mc_se_bias: f64,
    pub n_failed: usize,
}

impl StudyCell {
    pub fn bias(&self) -> f64 {
        self.bias_x100 / 100.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyResult {
    pub scenario: ScenarioId,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub truth: TrueEffects,
    pub cells: Vec<StudyCell>,
    pub warnings: Vec<Warning>,
}

impl StudyResult {
    pub fn cell(&self, method: Method, outcome: ModelRole, ps: ModelRole, estimand: Estimand) -> Option<&StudyCell> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.outcome == outcome && c.ps == ps && c.estimand == estimand)
    }
}

/// Propensity fits shared by all suite entries on one dataset.
struct PsCache {
    fits: Vec<(Vec<Term>, Result<PsFit>)>,
}

impl PsCache {
    fn get(&mut self, data: &PanelDataset, terms: &[Term], opts: &EstimatorOptions) -> Result<&PsFit> {
        let pos = match self.fits.iter().position(|(t, _)| t == terms) {
            Some(p) => p,
            None => {
                self.fits.push((terms.to_vec(), fit_propensity(data, terms, &opts.irls)));
                self.fits.len() - 1
            }
        };
        self.fits[pos].1.as_ref().map_err(|e| Error::InvalidArgument(e.to_string()))
    }
}

fn evaluate_entry(data: &PanelDataset, entry: &SuiteEntry, cache: &mut PsCache, opts: &EstimatorOptions) -> Result<EffectPair> {
    match entry.method {
        Method::Or => estimate_or(data, &entry.spec, opts),
        Method::Glmm => estimate_glmm(data, &entry.spec, opts),
        Method::Ipw => estimate_ipw(data, cache.get(data, &entry.spec.ps_terms, opts)?),
        Method::IpwDid => estimate_ipwdid(data, cache.get(data, &entry.spec.ps_terms, opts)?),
        Method::DrGlmm => {
            let ps = cache.get(data, &entry.spec.ps_terms, opts)?.clone();
            estimate_drglmm(data, &entry.spec, &ps, opts)
        }
        Method::Did => {
            let did = crate::estimators::estimate_did(data)?;
            let mut ate = did.clone();
            ate.estimand = Estimand::Ate;
            ate.value = f64::NAN;
            Ok(EffectPair { ate, att: did })
        }
    }
}

/// Monte Carlo study: `reps` datasets from stream `r` of `seed`, every suite
/// entry evaluated on each, bias / variance / MSE against [`true_effects`].
///
/// Replicates run in parallel and are reduced in replicate order, so the
/// result does not depend on the number of threads.
pub fn run_study(
    scenario: &Scenario,
    suite: &EstimatorSuite,
    reps: usize,
    seed: u64,
    opts: &EstimatorOptions,
) -> Result<StudyResult> {
    if reps < 2 {
        return Err(Error::InvalidArgument(format!("a study needs at least 2 replicates, got {reps}")));
    }
    let truth = true_effects(scenario);
    let per_rep: Vec<Vec<Option<(f64, f64)>>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let Ok(data) = generate_replicate(scenario, seed, r as u64) else {
                return vec![None; suite.entries.len()];
            };
            let mut cache = PsCache { fits: Vec::new() };
            suite
                .entries
                .iter()
                .map(|e| evaluate_entry(&data, e, &mut cache, opts).ok().map(|p| (p.ate.value, p.att.value)))
                .collect()
        })
        .collect();

    let mut cells = Vec::with_capacity(2 * suite.entries.len());
    let mut warnings = Vec::new();
    for estimand in [Estimand::Ate, Estimand::Att] {
        let target = match estimand {
            Estimand::Ate => truth.ate,
            Estimand::Att => truth.att,
        };
        for (k, entry) in suite.entries.iter().enumerate() {
            if !entry.method.supports(estimand) {
                continue;
            }
            let values: Vec<f64> = per_rep
                .iter()
                .filter_map(|row| row[k])
                .map(|(ate, att)| if estimand == Estimand::Ate { ate } else { att })
                .filter(|v| v.is_finite())
                .collect();
            let n_failed = reps - values.len();
            if n_failed as f64 > FAILED_WARN_SHARE * reps as f64 {
                warnings.push(Warning::FailedReplicates { failed: n_failed, total: reps });
            }
            let m = values.len() as f64;
            let mean = values.iter().sum::<f64>() / m;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
            let bias = mean - target;
            cells.push(StudyCell {
                method: entry.method,
                outcome: entry.outcome,
                ps: entry.ps,
                estimand,
                bias_x100: 100.0 * bias,
                var,
                mse: var + bias * bias,
                reps: values.len(),
                mc_se_bias: (var / m).sqrt(),
                n_failed,
            });
        }
    }
    Ok(StudyResult { scenario: scenario.id, n: scenario.n, reps, seed, truth, cells, warnings })
}
