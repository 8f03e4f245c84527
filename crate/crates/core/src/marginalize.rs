//! Population-averaged counterfactual contrasts over a Gaussian random
//! intercept: `∫ [g⁻¹(η₁ + u) − g⁻¹(η₀ + u)] N(u; 0, σ²) du`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::expit;

/// Default starting order of the Gauss–Hermite rule.
pub const DEFAULT_ORDER: usize = 20;
/// Largest order the doubling loop will try.
pub const MAX_ORDER: usize = 1024;
/// Absolute change between successive orders accepted as converged.
const ORDER_TOL: f64 = 1e-11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LinkFunction {
    #[default]
    Identity,
    Logit,
}

impl LinkFunction {
    /// Inverse link `μ = g⁻¹(η)`.
    pub fn inverse(self, eta: f64) -> f64 {
        match self {
            LinkFunction::Identity => eta,
            LinkFunction::Logit => expit(eta),
        }
    }
}

/// Gauss–Hermite rule for the weight `exp(-x²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    /// Golub–Welsch: nodes are the eigenvalues of the Jacobi matrix of the
    /// Hermite recurrence, weights are `√π` times the squared first
    /// components of the normalized eigenvectors.
    pub fn gauss_hermite(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidQuadratureOrder);
        }
        let mut d = vec![0.0; k];
        let mut e: Vec<f64> = (0..k).map(|i| if i + 1 < k { ((i + 1) as f64 / 2.0).sqrt() } else { 0.0 }).collect();
        let mut z = vec![0.0; k];
        z[0] = 1.0;
        tridiagonal_ql(&mut d, &mut e, &mut z);

        let mut pairs: Vec<(f64, f64)> =
            d.into_iter().zip(z).map(|(x, v)| (x, std::f64::consts::PI.sqrt() * v * v)).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        // enforce exact symmetry about zero
        let mut nodes = vec![0.0; k];
        let mut weights = vec![0.0; k];
        for i in 0..k {
            let j = k - 1 - i;
            nodes[i] = 0.5 * (pairs[i].0 - pairs[j].0);
            weights[i] = 0.5 * (pairs[i].1 + pairs[j].1);
        }
        if k % 2 == 1 {
            nodes[k / 2] = 0.0;
        }
        Ok(Self { nodes, weights })
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// Shared cached rule of order `k`.
    pub fn cached(k: usize) -> Result<Arc<Self>> {
        static CACHE: OnceLock<Mutex<HashMap<usize, Arc<QuadratureRule>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        if let Some(rule) = cache.lock().expect("quadrature cache poisoned").get(&k) {
            return Ok(Arc::clone(rule));
        }
        let rule = Arc::new(Self::gauss_hermite(k)?);
        cache.lock().expect("quadrature cache poisoned").insert(k, Arc::clone(&rule));
        Ok(rule)
    }
}

/// Implicit QL on a symmetric tridiagonal matrix with zero-based
/// sub-diagonal `e[i]` between rows `i` and `i+1`. On return `d` holds the
/// eigenvalues and `z` the first component of each eigenvector.
fn tridiagonal_ql(d: &mut [f64], e: &mut [f64], z: &mut [f64]) {
    let n = d.len();
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 60 {
                break;
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut underflow = false;
            let mut i = m;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                let zf = z[i + 1];
                z[i + 1] = s * z[i] + c * zf;
                z[i] = c * z[i] - s * zf;
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
}

fn contrast_with_rule(rule: &QuadratureRule, eta1: f64, eta0: f64, scale: f64, link: LinkFunction) -> f64 {
    let mut acc = 0.0;
    for (x, w) in rule.nodes.iter().zip(&rule.weights) {
        let u = scale * x;
        acc += w * (link.inverse(eta1 + u) - link.inverse(eta0 + u));
    }
    acc / std::f64::consts::PI.sqrt()
}

/// Per-unit population-averaged contrast.
///
/// The identity link returns `eta1 - eta0` exactly. Otherwise the rule of
/// order `k` is applied and the order doubled until successive results agree
/// to `1e-11` or the order reaches [`MAX_ORDER`].
pub fn population_average_contrast(
    eta1: &[f64],
    eta0: &[f64],
    sigma_u2: f64,
    link: LinkFunction,
    k: usize,
) -> Result<Vec<f64>> {
    if eta1.len() != eta0.len() {
        return Err(Error::DimensionMismatch(format!("{} treated vs {} control predictors", eta1.len(), eta0.len())));
    }
    if !(sigma_u2 >= 0.0) || !sigma_u2.is_finite() {
        return Err(Error::InvalidVariance(sigma_u2));
    }
    if k == 0 {
        return Err(Error::InvalidQuadratureOrder);
    }
    if eta1.iter().chain(eta0).any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLinearPredictor);
    }
    if link == LinkFunction::Identity {
        return Ok(eta1.iter().zip(eta0).map(|(a, b)| a - b).collect());
    }
    if sigma_u2 == 0.0 {
        return Ok(eta1.iter().zip(eta0).map(|(&a, &b)| link.inverse(a) - link.inverse(b)).collect());
    }
    let scale = (2.0 * sigma_u2).sqrt();
    let mut out = Vec::with_capacity(eta1.len());
    for (&a, &b) in eta1.iter().zip(eta0) {
        let mut order = k.min(MAX_ORDER);
        let mut current = contrast_with_rule(&*QuadratureRule::cached(order)?, a, b, scale, link);
        while order < MAX_ORDER {
            let next_order = (2 * order).min(MAX_ORDER);
            let next = contrast_with_rule(&*QuadratureRule::cached(next_order)?, a, b, scale, link);
            let done = (next - current).abs() < ORDER_TOL;
            current = next;
            order = next_order;
            if done {
                break;
            }
        }
        out.push(current);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rule_properties() {
        for k in [1, 2, 5, 20, 40, 101, 256] {
            let rule = QuadratureRule::gauss_hermite(k).unwrap();
            let total: f64 = rule.weights.iter().sum();
            assert!((total - std::f64::consts::PI.sqrt()).abs() < 1e-12, "k={k} sum={total}");
            assert!(rule.weights.iter().all(|&w| w >= 0.0));
            for i in 0..k {
                assert_eq!(rule.nodes[i], -rule.nodes[k - 1 - i]);
            }
        }
    }

    #[test]
    fn low_order_rules_match_closed_form() {
        let r2 = QuadratureRule::gauss_hermite(2).unwrap();
        assert!((r2.nodes[1] - 0.5f64.sqrt()).abs() < 1e-15);
        let r3 = QuadratureRule::gauss_hermite(3).unwrap();
        assert!((r3.nodes[2] - 1.5f64.sqrt()).abs() < 1e-14);
        assert!((r3.weights[1] - 2.0 * std::f64::consts::PI.sqrt() / 3.0).abs() < 1e-14);
    }

    #[test]
    fn integrates_even_moments() {
        // ∫ x^{2m} e^{-x²} dx = Γ(m + 1/2)
        let rule = QuadratureRule::gauss_hermite(20).unwrap();
        for m in 0..10 {
            let q: f64 = rule.nodes.iter().zip(&rule.weights).map(|(x, w)| w * x.powi(2 * m)).sum();
            let exact = statrs::function::gamma::gamma(m as f64 + 0.5);
            assert!(((q - exact) / exact).abs() < 1e-12, "m={m}");
        }
    }

    #[test]
    fn identity_and_point_mass() {
        let e1 = [1.5, -2.0, 7.0];
        let e0 = [0.5, -3.0, 7.25];
        let id = population_average_contrast(&e1, &e0, 12.0, LinkFunction::Identity, 20).unwrap();
        assert_eq!(id, vec![1.0, 1.0, -0.25]);
        let lg = population_average_contrast(&e1, &e0, 0.0, LinkFunction::Logit, 20).unwrap();
        for i in 0..3 {
            assert_eq!(lg[i], expit(e1[i]) - expit(e0[i]));
        }
    }

    #[test]
    fn orders_agree() {
        for &(a, b, s2) in &[(10.0, -10.0, 50.0), (1.0, 0.0, 2.0), (-4.0, 3.0, 25.0), (0.3, 0.1, 0.01)] {
            let r20 = population_average_contrast(&[a], &[b], s2, LinkFunction::Logit, 20).unwrap()[0];
            let r40 = population_average_contrast(&[a], &[b], s2, LinkFunction::Logit, 40).unwrap()[0];
            assert!((r20 - r40).abs() < 1e-9);
        }
    }

    #[test]
    fn errors() {
        assert!(matches!(
            population_average_contrast(&[0.0], &[0.0], -1.0, LinkFunction::Logit, 20),
            Err(Error::InvalidVariance(_))
        ));
        assert!(matches!(
            population_average_contrast(&[f64::NAN], &[0.0], 1.0, LinkFunction::Logit, 20),
            Err(Error::NonFiniteLinearPredictor)
        ));
        assert!(matches!(QuadratureRule::gauss_hermite(0), Err(Error::InvalidQuadratureOrder)));
    }
}
