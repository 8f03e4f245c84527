mod common;

use panel_causal::estimators::{
    estimate, estimate_did, estimate_drglmm, estimate_glmm, estimate_ipw, estimate_ipwdid, estimate_or,
    fit_propensity,
};
use panel_causal::simlab::{generate_replicate, EstimatorSuite, Scenario, ScenarioId};
use panel_causal::{
    Estimand, EstimatorOptions, IrlsOptions, LinkFunction, Method, ModelSpec, PanelDataset, PsFit, RandomEffect, Term,
    UnitRecord,
};
use proptest::prelude::*;

fn hom(n: usize, rep: u64) -> PanelDataset {
    generate_replicate(&Scenario::new(ScenarioId::Hom, n), 11, rep).unwrap()
}

fn het_noise_free(n: usize, rep: u64) -> PanelDataset {
    let mut s = Scenario::new(ScenarioId::Het, n);
    s.params.u_var = 0.0;
    s.params.e_var = 0.0;
    generate_replicate(&s, 12, rep).unwrap()
}

fn correct_spec(id: ScenarioId) -> ModelSpec {
    EstimatorSuite::standard(id).entries[2].spec.clone()
}

#[test]
fn noise_free_outcome_regression_recovers_heterogeneous_effects() {
    let data = het_noise_free(400, 0);
    let spec = correct_spec(ScenarioId::Het);
    let treated_x1: Vec<f64> = data.units().iter().filter(|u| u.treated).map(|u| u.x1[0]).collect();
    let all_x1: Vec<f64> = data.units().iter().map(|u| u.x1[0]).collect();
    let att = 15.0 + treated_x1.iter().sum::<f64>() / treated_x1.len() as f64;
    let ate = 15.0 + all_x1.iter().sum::<f64>() / all_x1.len() as f64;
    let or = estimate_or(&data, &spec, &EstimatorOptions::default()).unwrap();
    assert!((or.att.value - att).abs() < 1e-8, "{} vs {att}", or.att.value);
    assert!((or.ate.value - ate).abs() < 1e-8);
    let pooled = ModelSpec { random_effect: RandomEffect::None, ..spec };
    let glmm = estimate_glmm(&data, &pooled, &EstimatorOptions::default()).unwrap();
    assert!((glmm.att.value - att).abs() < 1e-8);
}

#[test]
fn ipw_shift_matches_weight_imbalance() {
    let data = hom(300, 1);
    let ps = fit_propensity(&data, &correct_spec(ScenarioId::Hom).ps_terms, &IrlsOptions::default()).unwrap();
    let c = 7.5;
    let base = estimate_ipw(&data, &ps).unwrap();
    let shifted = estimate_ipw(&data.map_responses(|_, y| y + c), &ps).unwrap();
    let (mut s_ate, mut s_att, mut n1) = (0.0, 0.0, 0.0);
    for (u, &p) in data.units().iter().zip(&ps.fitted_ps) {
        let d = u.d1();
        s_ate += d / p - (1.0 - d) / (1.0 - p);
        s_att += d - (1.0 - d) * p / (1.0 - p);
        n1 += d;
    }
    let n = data.n_units() as f64;
    assert!((shifted.ate.value - base.ate.value - c * s_ate / n).abs() < 1e-9);
    assert!((shifted.att.value - base.att.value - c * s_att / n1).abs() < 1e-9);
}

#[test]
fn constant_propensity_drglmm_equals_glmm() {
    let data = hom(250, 2);
    let spec = correct_spec(ScenarioId::Hom);
    let opts = EstimatorOptions::default();
    let glmm = estimate_glmm(&data, &spec, &opts).unwrap();
    let dr = estimate_drglmm(&data, &spec, &PsFit::constant(0.3, data.n_units()), &opts).unwrap();
    assert_eq!(dr.ate.value, glmm.ate.value);
    assert_eq!(dr.att.value, glmm.att.value);
    assert_eq!(dr.ate.components["ps_bins"], 1.0);
}

#[test]
fn drglmm_reports_bin_coefficients() {
    let data = hom(250, 3);
    let spec = correct_spec(ScenarioId::Hom);
    let ps = fit_propensity(&data, &spec.ps_terms, &IrlsOptions::default()).unwrap();
    let dr = estimate_drglmm(&data, &spec, &ps, &EstimatorOptions::default()).unwrap();
    for j in 1..=4 {
        assert!(dr.ate.components[&format!("zeta{j}")].is_finite());
        assert!(dr.ate.components.contains_key(&format!("zeta{j}_z")));
    }
    assert!(!dr.ate.components.contains_key("zeta5"));
}

#[test]
fn logit_link_stays_in_probability_range() {
    let data = hom(200, 4);
    let spec = correct_spec(ScenarioId::Hom);
    let opts = EstimatorOptions { link: LinkFunction::Logit, ..EstimatorOptions::default() };
    let pair = estimate_glmm(&data, &spec, &opts).unwrap();
    assert!(pair.ate.value.abs() <= 1.0 && pair.att.value.abs() <= 1.0);
}

#[test]
fn dispatch_matches_direct_calls() {
    let data = hom(200, 5);
    let spec = correct_spec(ScenarioId::Hom);
    let opts = EstimatorOptions::default();
    let direct = estimate_glmm(&data, &spec, &opts).unwrap();
    let via = estimate(&data, &spec, Method::Glmm, &opts).unwrap();
    assert_eq!(via[0].value, direct.ate.value);
    assert_eq!(via[1].value, direct.att.value);
    let did = estimate(&data, &spec, Method::Did, &opts).unwrap();
    assert_eq!(did.len(), 1);
    assert_eq!(did[0].estimand, Estimand::Att);
}

#[test]
fn unit_order_does_not_change_estimates() {
    let data = hom(150, 6);
    let mut units: Vec<UnitRecord> = data.units().to_vec();
    units.reverse();
    units.rotate_left(37);
    let shuffled = PanelDataset::new(data.covariate_names().to_vec(), units).unwrap();
    let spec = correct_spec(ScenarioId::Hom);
    let opts = EstimatorOptions::default();
    for m in Method::ALL {
        let a = estimate(&data, &spec, m, &opts).unwrap();
        let b = estimate(&shuffled, &spec, m, &opts).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x.value - y.value).abs() < 1e-9, "{m}: {} vs {}", x.value, y.value);
        }
    }
}

fn arb_dataset() -> impl Strategy<Value = PanelDataset> {
    (0u64..1000, 60usize..160).prop_map(|(rep, n)| hom(n, rep))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn intercept_only_ipwdid_is_did(data in arb_dataset()) {
        let ps = fit_propensity(&data, &[Term::Intercept], &IrlsOptions::default()).unwrap();
        let pair = estimate_ipwdid(&data, &ps).unwrap();
        let did = estimate_did(&data).unwrap().value;
        prop_assert!((pair.ate.value - did).abs() < 1e-10);
        prop_assert!((pair.att.value - did).abs() < 1e-10);
    }

    #[test]
    fn location_equivariance(data in arb_dataset(), c in -1e3f64..1e3) {
        let spec = correct_spec(ScenarioId::Hom);
        let opts = EstimatorOptions::default();
        let shifted = data.map_responses(|_, y| y + c);
        for m in [Method::Or, Method::Glmm, Method::Did, Method::IpwDid, Method::DrGlmm] {
            let a = estimate(&data, &spec, m, &opts).unwrap();
            let b = estimate(&shifted, &spec, m, &opts).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x.value - y.value).abs() < 1e-9, "{} {} vs {}", m, x.value, y.value);
            }
        }
    }

    #[test]
    fn scale_equivariance(data in arb_dataset(), s in 0.1f64..10.0) {
        let spec = correct_spec(ScenarioId::Hom);
        let opts = EstimatorOptions::default();
        let scaled = data.map_responses(|_, y| s * y);
        for m in Method::ALL {
            let a = estimate(&data, &spec, m, &opts).unwrap();
            let b = estimate(&scaled, &spec, m, &opts).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((s * x.value - y.value).abs() < 1e-8 * (1.0 + y.value.abs()), "{}", m);
            }
        }
    }

    #[test]
    fn no_interaction_ate_equals_att(data in arb_dataset()) {
        let spec = correct_spec(ScenarioId::Hom);
        let opts = EstimatorOptions::default();
        for pair in [estimate_or(&data, &spec, &opts).unwrap(), estimate_glmm(&data, &spec, &opts).unwrap()] {
            let beta = pair.ate.components["coef[treat]"];
            prop_assert!((pair.ate.value - beta).abs() < 1e-10);
            prop_assert!((pair.att.value - beta).abs() < 1e-10);
        }
    }

    #[test]
    fn toy_did_ignores_covariates(shift in -50f64..50.0) {
        let data = common::toy().map_responses(|t, y| y + shift * t as f64);
        prop_assert!((estimate_did(&data).unwrap().value - 4.0).abs() < 1e-10);
    }
}
