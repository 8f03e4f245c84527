mod common;

use panel_causal::estimators::{estimate_glmm, fit_propensity};
use panel_causal::inference::{
    backward_eliminate, balance_check, bootstrap_statistic, cluster_bootstrap, dr_specification_test,
    relative_effect, EliminationTarget,
};
use panel_causal::simlab::{generate_replicate, EstimatorSuite, Scenario, ScenarioId};
use panel_causal::{Error, Estimand, EstimatorOptions, IrlsOptions, Method, ModelSpec, PanelDataset, Term, Warning};
use proptest::prelude::*;

fn hom(n: usize, rep: u64) -> PanelDataset {
    generate_replicate(&Scenario::new(ScenarioId::Hom, n), 21, rep).unwrap()
}

fn spec() -> ModelSpec {
    EstimatorSuite::standard(ScenarioId::Hom).entries[2].spec.clone()
}

#[test]
fn bootstrap_is_deterministic_and_brackets_the_point() {
    let data = hom(150, 0);
    let opts = EstimatorOptions::default();
    let a = cluster_bootstrap(&data, &spec(), Method::Glmm, Estimand::Ate, &opts, 60, 9).unwrap();
    let b = cluster_bootstrap(&data, &spec(), Method::Glmm, Estimand::Ate, &opts, 60, 9).unwrap();
    assert_eq!(a, b);
    let c = cluster_bootstrap(&data, &spec(), Method::Glmm, Estimand::Ate, &opts, 60, 10).unwrap();
    assert_ne!(a.se, c.se);
    assert!(a.ci_lower < a.point && a.point < a.ci_upper);
    assert_eq!(a.point, estimate_glmm(&data, &spec(), &opts).unwrap().ate.value);
    assert!(a.se > 0.0 && a.n_failed == 0);
}

#[test]
fn constant_statistic_has_zero_spread() {
    let data = hom(50, 1);
    let res = bootstrap_statistic(&data, 20, 3, |_| Ok(2.5)).unwrap();
    assert_eq!((res.se, res.ci_lower, res.ci_upper, res.boot_mean), (0.0, 2.5, 2.5, 2.5));
}

#[test]
fn failing_statistic_is_reported() {
    let data = hom(50, 2);
    let res = bootstrap_statistic(&data, 5, 3, |_| Err::<f64, _>(Error::Separation));
    assert!(matches!(res, Err(Error::Separation)));
    let res = bootstrap_statistic(&data, 20, 3, |d| {
        if d.units()[0].unit_id == data.units()[0].unit_id {
            Ok(1.0)
        } else {
            Err(Error::Separation)
        }
    });
    assert!(matches!(res, Err(Error::AllReplicatesFailed(20))) || res.unwrap().n_failed > 0);
}

#[test]
fn unsupported_estimand_is_rejected_before_resampling() {
    let data = hom(50, 3);
    let res = cluster_bootstrap(&data, &spec(), Method::Did, Estimand::Ate, &EstimatorOptions::default(), 10, 1);
    assert!(matches!(res, Err(Error::UnsupportedEstimand { .. })));
}

#[test]
fn relative_effect_scales_by_pre_period_mean() {
    let data = common::toy();
    assert_eq!(relative_effect(4.0, &data), 160.0);
    let doubled = data.map_responses(|_, y| 2.0 * y);
    assert_eq!(relative_effect(8.0, &doubled), 160.0);
}

#[test]
fn dr_test_with_constant_scores_has_degenerate_outcome_arm() {
    let data = hom(120, 4);
    let mut s = spec();
    s.ps_terms = vec![Term::Intercept];
    let res = dr_specification_test(&data, &s, Estimand::Att, &EstimatorOptions::default(), 30, 5).unwrap();
    assert_eq!(res.diff_or, 0.0);
    assert_eq!(res.sd_or, 0.0);
    assert_eq!(res.z_or, 0.0);
    assert!(!res.reject_or);
    assert!(res.warnings.iter().any(|w| matches!(w, Warning::DegenerateVariance(_))));
    assert!(res.sd_ps > 0.0);
}

#[test]
fn dr_test_flags_a_wrong_propensity_model() {
    let scenario = Scenario::new(ScenarioId::HomTi, 4000);
    let data = generate_replicate(&scenario, 22, 0).unwrap();
    let mut s = EstimatorSuite::standard(ScenarioId::HomTi).entries[9].spec.clone();
    assert!(s.ps_terms.iter().all(|t| t.covariate() != Some("x2")));
    s.ps_terms = vec![Term::Intercept, Term::Covariate("v".into())];
    let res = dr_specification_test(&data, &s, Estimand::Ate, &EstimatorOptions::default(), 100, 6).unwrap();
    assert!(res.z_ps.is_finite() && res.z_or.is_finite());
    assert!(res.reject_ps, "z_ps = {}", res.z_ps);
}

#[test]
fn balance_check_accepts_the_true_score() {
    let data = hom(2000, 5);
    let terms = spec().ps_terms;
    let ps = fit_propensity(&data, &terms, &IrlsOptions::default()).unwrap();
    let report = balance_check(&data, &terms, &ps.fitted_ps, &IrlsOptions::default()).unwrap();
    assert!(report.balanced, "{report:?}");
    let poor = fit_propensity(&data, &[Term::Intercept, Term::Covariate("v".into())], &IrlsOptions::default()).unwrap();
    let report = balance_check(&data, &terms, &poor.fitted_ps, &IrlsOptions::default()).unwrap();
    assert!(!report.balanced, "{report:?}");
}

#[test]
fn balance_check_accepts_fits_with_an_extreme_probability() {
    // the cubic-plus-covariates fits put one treated unit within 1e-12 of 1,
    // a finite maximizer that must not be read as separation
    for rep in [9, 120] {
        let data = hom(400, rep);
        let terms = spec().ps_terms;
        let ps = fit_propensity(&data, &terms, &IrlsOptions::default()).unwrap();
        assert!(balance_check(&data, &terms, &ps.fitted_ps, &IrlsOptions::default()).is_ok(), "rep {rep}");
    }
}

#[test]
fn balance_check_rejects_length_mismatch() {
    let data = hom(40, 6);
    let res = balance_check(&data, &[Term::Intercept], &[0.5; 3], &IrlsOptions::default());
    assert!(matches!(res, Err(Error::DimensionMismatch(_))));
}

#[test]
fn elimination_with_alpha_one_keeps_everything() {
    let data = hom(300, 7);
    let full = spec();
    for target in [EliminationTarget::Propensity, EliminationTarget::Outcome] {
        let res = backward_eliminate(&data, &full, target, 1.0, &EstimatorOptions::default()).unwrap();
        assert_eq!(res.spec, full);
        assert!(res.steps.is_empty());
    }
    assert!(backward_eliminate(&data, &full, EliminationTarget::Outcome, 0.0, &EstimatorOptions::default()).is_err());
}

#[test]
fn elimination_drops_pure_noise() {
    let base = hom(800, 8);
    let units = base
        .units()
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let noise = ((i * 2654435761) % 1000) as f64 / 1000.0;
            let mut u = u.clone();
            u.x0.push(noise);
            u.x1.push(noise);
            u
        })
        .collect();
    let mut names = base.covariate_names().to_vec();
    names.push("noise".into());
    let data = PanelDataset::new(names, units).unwrap();
    let mut full = spec();
    full.ps_terms.push(Term::Covariate("noise".into()));
    let res = backward_eliminate(&data, &full, EliminationTarget::Propensity, 0.05, &EstimatorOptions::default()).unwrap();
    assert!(res.steps.iter().any(|s| s.dropped == Term::Covariate("noise".into())));
    assert!(res.spec.ps_terms.contains(&Term::Intercept));
    assert!(res.steps.iter().all(|s| s.p_value >= 0.05));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn bootstrap_mean_lies_inside_interval(rep in 0u64..500, seed in 0u64..1_000_000) {
        let data = hom(60, rep);
        let res = bootstrap_statistic(&data, 50, seed, |d| Ok(d.pre_period_mean())).unwrap();
        prop_assert!(res.ci_lower <= res.boot_mean && res.boot_mean <= res.ci_upper);
        prop_assert!(res.se >= 0.0);
    }

    #[test]
    fn balance_ignores_covariate_units(rep in 0u64..500, scale in 0.01f64..100.0) {
        let data = hom(400, rep);
        let terms = spec().ps_terms;
        let ps = fit_propensity(&data, &terms, &IrlsOptions::default()).unwrap();
        let a = balance_check(&data, &terms, &ps.fitted_ps, &IrlsOptions::default()).unwrap();
        let units = data
            .units()
            .iter()
            .map(|u| {
                let mut u = u.clone();
                u.x0[1] = scale * u.x0[1] - 3.0;
                u.x1[1] = scale * u.x1[1] - 3.0;
                u
            })
            .collect();
        let moved = PanelDataset::new(data.covariate_names().to_vec(), units).unwrap();
        let b = balance_check(&moved, &terms, &ps.fitted_ps, &IrlsOptions::default()).unwrap();
        prop_assert!((a.r2_with_covariates - b.r2_with_covariates).abs() < 1e-8);
        prop_assert_eq!(a.r2_ps_only, b.r2_ps_only);
        prop_assert!(a.r2_with_covariates <= 1.0);
    }
}
