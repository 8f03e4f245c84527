//! ATE and ATT estimators.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Warning};
use crate::glm::{fit_logistic, ps_quantile_dummies, IrlsOptions, PsFit};
use crate::lmm::{fit_lmm, fit_or, FitOptions, LmmFit};
use crate::marginalize::{population_average_contrast, LinkFunction, DEFAULT_ORDER};
use crate::panel::{build_design, build_terms_design, post_period_terms, ps_design, DesignMatrices, ModelSpec,
    PanelDataset, RandomEffect, Term};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "OR")]
    Or,
    #[serde(rename = "GLMM")]
    Glmm,
    #[serde(rename = "IPW")]
    Ipw,
    #[serde(rename = "DID")]
    Did,
    #[serde(rename = "IPWDID")]
    IpwDid,
    #[serde(rename = "DRGLMM")]
    DrGlmm,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Or, Method::Glmm, Method::Ipw, Method::Did, Method::IpwDid, Method::DrGlmm];

    pub fn uses_outcome_model(self) -> bool {
        matches!(self, Method::Or | Method::Glmm | Method::DrGlmm)
    }

    pub fn uses_propensity(self) -> bool {
        matches!(self, Method::Ipw | Method::IpwDid | Method::DrGlmm)
    }

    pub fn supports(self, estimand: Estimand) -> bool {
        self != Method::Did || estimand == Estimand::Att
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Or => "OR",
            Method::Glmm => "GLMM",
            Method::Ipw => "IPW",
            Method::Did => "DID",
            Method::IpwDid => "IPWDID",
            Method::DrGlmm => "DRGLMM",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Estimand {
    #[serde(rename = "ATE")]
    Ate,
    #[serde(rename = "ATT")]
    Att,
}

impl fmt::Display for Estimand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Estimand::Ate => "ATE",
            Estimand::Att => "ATT",
        })
    }
}

impl FromStr for Estimand {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ate" => Ok(Estimand::Ate),
            "att" => Ok(Estimand::Att),
            _ => Err(Error::InvalidArgument(format!("unknown estimand `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectEstimate {
    pub method: Method,
    pub estimand: Estimand,
    pub value: f64,
    /// Method-specific intermediates, e.g. the four weighted means of IPWDID
    /// or the fitted variance components of the mixed model.
    pub components: BTreeMap<String, f64>,
    pub warnings: Vec<Warning>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectPair {
    pub ate: EffectEstimate,
    pub att: EffectEstimate,
}

impl EffectPair {
    pub fn get(&self, estimand: Estimand) -> &EffectEstimate {
        match estimand {
            Estimand::Ate => &self.ate,
            Estimand::Att => &self.att,
        }
    }

    pub fn into_estimate(self, estimand: Estimand) -> EffectEstimate {
        match estimand {
            Estimand::Ate => self.ate,
            Estimand::Att => self.att,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EstimatorOptions {
    /// Propensity bins for the doubly robust augmentation.
    pub bins: usize,
    /// Inverse link applied to the fitted linear predictor when averaging
    /// counterfactuals over the random intercept.
    pub link: LinkFunction,
    pub quadrature_order: usize,
    pub irls: IrlsOptions,
    pub lmm: FitOptions,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            bins: 5,
            link: LinkFunction::Identity,
            quadrature_order: DEFAULT_ORDER,
            irls: IrlsOptions::default(),
            lmm: FitOptions::default(),
        }
    }
}

/// Logistic propensity model of post-period treatment on pre-period terms.
pub fn fit_propensity(data: &PanelDataset, terms: &[Term], opts: &IrlsOptions) -> Result<PsFit> {
    let x = ps_design(data, terms)?;
    fit_logistic(&x, &data.treatment(), opts)
}

fn treated_mean(data: &PanelDataset, per_unit: &[f64]) -> f64 {
    let (sum, count) = data
        .units()
        .iter()
        .zip(per_unit)
        .filter(|(u, _)| u.treated)
        .fold((0.0, 0usize), |(s, c), (_, v)| (s + v, c + 1));
    sum / count as f64
}

fn pair(method: Method, ate: f64, att: f64, components: BTreeMap<String, f64>, warnings: Vec<Warning>) -> EffectPair {
    EffectPair {
        ate: EffectEstimate {
            method,
            estimand: Estimand::Ate,
            value: ate,
            components: components.clone(),
            warnings: warnings.clone(),
        },
        att: EffectEstimate { method, estimand: Estimand::Att, value: att, components, warnings },
    }
}

fn fit_components(fit: &LmmFit, columns: &[String]) -> BTreeMap<String, f64> {
    let mut c = BTreeMap::new();
    for (name, b) in columns.iter().zip(&fit.fixed_effects) {
        c.insert(format!("coef[{name}]"), *b);
    }
    c.insert("sigma_u2".into(), fit.sigma_u2);
    c.insert("sigma_e2".into(), fit.sigma_e2);
    c.insert("loglik".into(), fit.loglik);
    c
}

/// Averages of the per-unit counterfactual contrasts over all units and over
/// the treated.
fn averaged_contrasts(
    data: &PanelDataset,
    fit: &LmmFit,
    treated: &DMatrix<f64>,
    control: &DMatrix<f64>,
    opts: &EstimatorOptions,
) -> Result<(f64, f64)> {
    let eta1 = fit.linear_predictor(treated);
    let eta0 = fit.linear_predictor(control);
    let contrast = population_average_contrast(&eta1, &eta0, fit.sigma_u2, opts.link, opts.quadrature_order)?;
    let ate = contrast.iter().sum::<f64>() / contrast.len() as f64;
    Ok((ate, treated_mean(data, &contrast)))
}

/// Post-period outcome regression.
pub fn estimate_or(data: &PanelDataset, spec: &ModelSpec, opts: &EstimatorOptions) -> Result<EffectPair> {
    let terms = post_period_terms(&spec.outcome_terms);
    let design = build_terms_design(data, &terms, false)?;
    let fit = fit_or(&design.fit, &design.response)?;
    let (ate, att) = averaged_contrasts(data, &fit, &design.treated, &design.control, opts)?;
    Ok(pair(Method::Or, ate, att, fit_components(&fit, &design.columns), Vec::new()))
}

fn fit_outcome(design: &DesignMatrices, spec: &ModelSpec, opts: &EstimatorOptions) -> Result<LmmFit> {
    match spec.random_effect {
        RandomEffect::UnitIntercept => fit_lmm(&design.fit, &design.response, &design.cluster, &opts.lmm),
        RandomEffect::None => fit_or(&design.fit, &design.response),
    }
}

/// Mixed model on both periods, counterfactuals averaged over the random
/// intercept.
pub fn estimate_glmm(data: &PanelDataset, spec: &ModelSpec, opts: &EstimatorOptions) -> Result<EffectPair> {
    let design = build_design(data, spec, true)?;
    let fit = fit_outcome(&design, spec, opts)?;
    let (ate, att) = averaged_contrasts(data, &fit, &design.treated, &design.control, opts)?;
    Ok(pair(Method::Glmm, ate, att, fit_components(&fit, &design.columns), Vec::new()))
}

/// Horvitz–Thompson ATE and odds-weighted ATT on post-period responses.
pub fn estimate_ipw(data: &PanelDataset, ps: &PsFit) -> Result<EffectPair> {
    check_ps(data, ps)?;
    let w = PeriodMeans::new(data, ps, 1);
    let mut components = BTreeMap::new();
    components.insert("ate_treated".into(), w.ate_treated);
    components.insert("ate_control".into(), w.ate_control);
    components.insert("att_treated".into(), w.att_treated);
    components.insert("att_control".into(), w.att_control);
    Ok(pair(
        Method::Ipw,
        w.ate_treated - w.ate_control,
        w.att_treated - w.att_control,
        components,
        ps.warnings.clone(),
    ))
}

/// Classical difference-in-differences of group means (ATT only).
pub fn estimate_did(data: &PanelDataset) -> Result<EffectEstimate> {
    let n1 = data.n_treated();
    let n0 = data.n_units() - n1;
    if n1 == 0 || n0 == 0 {
        return Err(Error::NoOverlap { treated: n1, control: n0 });
    }
    let mut s = [[0.0; 2]; 2];
    for u in data.units() {
        let g = usize::from(u.treated);
        s[g][0] += u.y0;
        s[g][1] += u.y1;
    }
    let (n1, n0) = (n1 as f64, n0 as f64);
    let post = s[1][1] / n1 - s[0][1] / n0;
    let pre = s[1][0] / n1 - s[0][0] / n0;
    let mut components = BTreeMap::new();
    components.insert("treated_post".into(), s[1][1] / n1);
    components.insert("control_post".into(), s[0][1] / n0);
    components.insert("treated_pre".into(), s[1][0] / n1);
    components.insert("control_pre".into(), s[0][0] / n0);
    Ok(EffectEstimate { method: Method::Did, estimand: Estimand::Att, value: post - pre, components, warnings: Vec::new() })
}

/// Weighted means of one period's responses.
struct PeriodMeans {
    ate_treated: f64,
    ate_control: f64,
    att_treated: f64,
    att_control: f64,
}

impl PeriodMeans {
    fn new(data: &PanelDataset, ps: &PsFit, period: u8) -> Self {
        let n = data.n_units() as f64;
        let n1 = data.n_treated() as f64;
        let mut m = Self { ate_treated: 0.0, ate_control: 0.0, att_treated: 0.0, att_control: 0.0 };
        for (u, &p) in data.units().iter().zip(&ps.fitted_ps) {
            let y = u.response(period);
            if u.treated {
                m.ate_treated += y / p;
                m.att_treated += y;
            } else {
                m.ate_control += y / (1.0 - p);
                m.att_control += y * p / (1.0 - p);
            }
        }
        m.ate_treated /= n;
        m.ate_control /= n;
        m.att_treated /= n1;
        m.att_control /= n1;
        m
    }
}

fn check_ps(data: &PanelDataset, ps: &PsFit) -> Result<()> {
    if ps.fitted_ps.len() != data.n_units() {
        return Err(Error::DimensionMismatch(format!(
            "{} propensity scores for {} units",
            ps.fitted_ps.len(),
            data.n_units()
        )));
    }
    if ps.fitted_ps.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
        return Err(Error::InvalidArgument("propensity scores must lie strictly inside (0, 1)".into()));
    }
    Ok(())
}

/// Propensity-weighted difference-in-differences.
///
/// Components `delta{t}_{g}` hold the weighted mean of period `t` responses
/// for group `g`; the estimate is `(Δ₁¹ − Δ₁⁰) − (Δ₀¹ − Δ₀⁰)`.
pub fn estimate_ipwdid(data: &PanelDataset, ps: &PsFit) -> Result<EffectPair> {
    check_ps(data, ps)?;
    let pre = PeriodMeans::new(data, ps, 0);
    let post = PeriodMeans::new(data, ps, 1);
    let mut ate_c = BTreeMap::new();
    ate_c.insert("delta1_treated".into(), post.ate_treated);
    ate_c.insert("delta1_control".into(), post.ate_control);
    ate_c.insert("delta0_treated".into(), pre.ate_treated);
    ate_c.insert("delta0_control".into(), pre.ate_control);
    let mut att_c = BTreeMap::new();
    att_c.insert("delta1_treated".into(), post.att_treated);
    att_c.insert("delta1_control".into(), post.att_control);
    att_c.insert("delta0_treated".into(), pre.att_treated);
    att_c.insert("delta0_control".into(), pre.att_control);
    let ate = (post.ate_treated - post.ate_control) - (pre.ate_treated - pre.ate_control);
    let att = (post.att_treated - post.att_control) - (pre.att_treated - pre.att_control);
    Ok(EffectPair {
        ate: EffectEstimate {
            method: Method::IpwDid,
            estimand: Estimand::Ate,
            value: ate,
            components: ate_c,
            warnings: ps.warnings.clone(),
        },
        att: EffectEstimate {
            method: Method::IpwDid,
            estimand: Estimand::Att,
            value: att,
            components: att_c,
            warnings: ps.warnings.clone(),
        },
    })
}

fn append_columns(base: &DMatrix<f64>, extra: impl Fn(usize, usize) -> f64, k: usize) -> DMatrix<f64> {
    let (rows, p) = base.shape();
    DMatrix::from_fn(rows, p + k, |i, j| if j < p { base[(i, j)] } else { extra(i, j - p) })
}

/// Mixed model augmented with propensity-quantile indicators.
///
/// The indicators are constant within a unit and enter both counterfactual
/// predictors identically, so they affect the contrast only through the
/// refitted coefficients.
pub fn estimate_drglmm(
    data: &PanelDataset,
    spec: &ModelSpec,
    ps: &PsFit,
    opts: &EstimatorOptions,
) -> Result<EffectPair> {
    check_ps(data, ps)?;
    let dummies = ps_quantile_dummies(&ps.fitted_ps, opts.bins)?;
    let mut warnings = ps.warnings.clone();
    if dummies.degenerate {
        warnings.push(Warning::DegenerateBins { requested: dummies.requested_k, effective: dummies.k });
    }
    let mut design = build_design(data, spec, true)?;
    let k = dummies.n_columns();
    if k > 0 {
        let cluster = design.cluster.clone();
        design.fit = append_columns(&design.fit, |i, j| dummies.dummy(cluster[i], j), k);
        design.treated = append_columns(&design.treated, |i, j| dummies.dummy(i, j), k);
        design.control = append_columns(&design.control, |i, j| dummies.dummy(i, j), k);
        design.columns.extend((1..=k).map(|j| format!("ps_bin{}", j + 1)));
    }
    let fit = fit_outcome(&design, spec, opts)?;
    let (ate, att) = averaged_contrasts(data, &fit, &design.treated, &design.control, opts)?;
    let mut components = fit_components(&fit, &design.columns);
    components.insert("ps_bins".into(), dummies.k as f64);
    let p = fit.fixed_effects.len();
    for j in 0..k {
        let idx = p - k + j;
        components.insert(format!("zeta{}", j + 1), fit.fixed_effects[idx]);
        components.insert(format!("zeta{}_z", j + 1), fit.fixed_effects[idx] / fit.se_fixed[idx]);
    }
    Ok(pair(Method::DrGlmm, ate, att, components, warnings))
}

/// Runs one method end to end, fitting the propensity model from
/// `spec.ps_terms` when the method needs it.
pub fn estimate(data: &PanelDataset, spec: &ModelSpec, method: Method, opts: &EstimatorOptions) -> Result<Vec<EffectEstimate>> {
    let ps = if method.uses_propensity() { Some(fit_propensity(data, &spec.ps_terms, &opts.irls)?) } else { None };
    let pair = match method {
        Method::Did => return Ok(vec![estimate_did(data)?]),
        Method::Or => estimate_or(data, spec, opts)?,
        Method::Glmm => estimate_glmm(data, spec, opts)?,
        Method::Ipw => estimate_ipw(data, ps.as_ref().expect("propensity fitted"))?,
        Method::IpwDid => estimate_ipwdid(data, ps.as_ref().expect("propensity fitted"))?,
        Method::DrGlmm => estimate_drglmm(data, spec, ps.as_ref().expect("propensity fitted"), opts)?,
    };
    Ok(vec![pair.ate, pair.att])
}

/// Single estimate of `estimand` by `method`.
pub fn estimate_one(
    data: &PanelDataset,
    spec: &ModelSpec,
    method: Method,
    estimand: Estimand,
    opts: &EstimatorOptions,
) -> Result<EffectEstimate> {
    if !method.supports(estimand) {
        return Err(Error::UnsupportedEstimand { method: method.to_string(), estimand: estimand.to_string() });
    }
    estimate(data, spec, method, opts)?
        .into_iter()
        .find(|e| e.estimand == estimand)
        .ok_or_else(|| Error::UnsupportedEstimand { method: method.to_string(), estimand: estimand.to_string() })
}
