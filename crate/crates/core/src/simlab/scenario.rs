use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Mutex, OnceLock};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::expit;
use crate::panel::{PanelDataset, UnitRecord};
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScenarioId {
    #[serde(rename = "HOM")]
    Hom,
    #[serde(rename = "HOM_TI")]
    HomTi,
    #[serde(rename = "HET")]
    Het,
    #[serde(rename = "HET_TI")]
    HetTi,
    #[serde(rename = "RANDCOEF")]
    RandCoef,
    #[serde(rename = "RANDCOEF_TI")]
    RandCoefTi,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 6] = [
        ScenarioId::Hom,
        ScenarioId::HomTi,
        ScenarioId::Het,
        ScenarioId::HetTi,
        ScenarioId::RandCoef,
        ScenarioId::RandCoefTi,
    ];

    /// The confounder `x2` enters through its interaction with time.
    pub fn time_interaction(self) -> bool {
        matches!(self, ScenarioId::HomTi | ScenarioId::HetTi | ScenarioId::RandCoefTi)
    }

    /// The treatment effect varies with `x1`.
    pub fn heterogeneous(self) -> bool {
        !matches!(self, ScenarioId::Hom | ScenarioId::HomTi)
    }
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScenarioId::Hom => "HOM",
            ScenarioId::HomTi => "HOM_TI",
            ScenarioId::Het => "HET",
            ScenarioId::HetTi => "HET_TI",
            ScenarioId::RandCoef => "RANDCOEF",
            ScenarioId::RandCoefTi => "RANDCOEF_TI",
        })
    }
}

impl FromStr for ScenarioId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioId::ALL
            .into_iter()
            .find(|id| id.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown scenario `{s}`")))
    }
}

/// Constants of the data-generating process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgpParams {
    /// Means of `x1` at t=0 and t=1.
    pub x1_mean: [f64; 2],
    pub x1_cov: [[f64; 2]; 2],
    /// Mean of the exponential covariate `x2`.
    pub x2_mean: f64,
    pub v_mean: f64,
    pub v_var: f64,
    /// Random-intercept variance.
    pub u_var: f64,
    /// Residual variance.
    pub e_var: f64,
    /// Propensity coefficients on `(1, x1 at t=0, x2, v)`.
    pub ps_coef: [f64; 4],
    /// Means of `(θ₀, θ₁, θ₂, θ₃, γ, β)` in the random-coefficient scenarios.
    pub coef_means: [f64; 6],
    /// Standard deviation of each random coefficient as a share of its mean.
    pub coef_sd_share: f64,
}

impl Default for DgpParams {
    fn default() -> Self {
        Self {
            x1_mean: [15.0, 20.0],
            x1_cov: [[6.0, 5.5], [5.5, 6.0]],
            x2_mean: 2.0,
            v_mean: 1.0,
            v_var: 1.0,
            u_var: 30.0,
            e_var: 20.0,
            ps_coef: [-3.0, 0.2, 0.1, 0.3],
            coef_means: [10.0, 1.0, 3.0, 1.0, 2.0, 15.0],
            coef_sd_share: 0.1,
        }
    }
}

impl DgpParams {
    fn validate(&self) -> Result<()> {
        let [[a, b], [c, d]] = self.x1_cov;
        let finite = self
            .x1_mean
            .iter()
            .chain([a, b, c, d, self.x2_mean, self.v_mean, self.v_var, self.u_var, self.e_var].iter())
            .chain(self.ps_coef.iter())
            .chain(self.coef_means.iter())
            .chain(std::iter::once(&self.coef_sd_share))
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidArgument("non-finite scenario parameter".into()));
        }
        if b != c || a < 0.0 || d < 0.0 || a * d - b * c < 0.0 {
            return Err(Error::InvalidArgument("x1 covariance must be symmetric positive semi-definite".into()));
        }
        if !(self.x2_mean > 0.0) {
            return Err(Error::InvalidArgument("x2 mean must be positive".into()));
        }
        if self.v_var < 0.0 || self.u_var < 0.0 || self.e_var < 0.0 || self.coef_sd_share < 0.0 {
            return Err(Error::InvalidArgument("variances must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: ScenarioId,
    pub n: usize,
    pub params: DgpParams,
}

impl Scenario {
    pub fn new(id: ScenarioId, n: usize) -> Self {
        Self { id, n, params: DgpParams::default() }
    }
}

/// Covariates of one simulated unit.
struct Draw {
    x1: [f64; 2],
    x2: f64,
    v: f64,
    treated: bool,
}

fn draw_covariates(p: &DgpParams, rng: &mut ChaCha8Rng) -> Draw {
    let [[s00, s01], [_, s11]] = p.x1_cov;
    let l00 = s00.sqrt();
    let l10 = if l00 > 0.0 { s01 / l00 } else { 0.0 };
    let l11 = (s11 - l10 * l10).max(0.0).sqrt();
    let z0: f64 = rng.sample(StandardNormal);
    let z1: f64 = rng.sample(StandardNormal);
    let x1 = [p.x1_mean[0] + l00 * z0, p.x1_mean[1] + l10 * z0 + l11 * z1];
    let x2 = Exp::new(1.0 / p.x2_mean).expect("positive rate").sample(rng);
    let v = p.v_mean + p.v_var.sqrt() * rng.sample::<f64, _>(StandardNormal);
    let [a0, a1, a2, a3] = p.ps_coef;
    let prob = expit(a0 + a1 * x1[0] + a2 * x2 + a3 * v);
    let treated = rng.random::<f64>() < prob;
    Draw { x1, x2, v, treated }
}

/// Simulates one dataset of `scenario.n` units from `rng`.
pub fn generate_with_rng(scenario: &Scenario, rng: &mut ChaCha8Rng) -> Result<PanelDataset> {
    let p = &scenario.params;
    p.validate()?;
    if scenario.n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 units, got {}", scenario.n)));
    }
    let id = scenario.id;
    let (sd_u, sd_e) = (p.u_var.sqrt(), p.e_var.sqrt());
    let width = scenario.n.to_string().len();
    let mut units = Vec::with_capacity(scenario.n);
    for i in 0..scenario.n {
        let c = draw_covariates(p, rng);
        let d1 = if c.treated { 1.0 } else { 0.0 };
        let coef: [f64; 6] = if matches!(id, ScenarioId::RandCoef | ScenarioId::RandCoefTi) {
            let mut out = [0.0; 6];
            for (o, m) in out.iter_mut().zip(p.coef_means) {
                *o = m + p.coef_sd_share * m.abs() * rng.sample::<f64, _>(StandardNormal);
            }
            out
        } else {
            [0.0; 6]
        };
        let u = sd_u * rng.sample::<f64, _>(StandardNormal);
        let mut y = [0.0; 2];
        for (t, yt) in y.iter_mut().enumerate() {
            let tf = t as f64;
            let d = if t == 1 { d1 } else { 0.0 };
            let x1 = c.x1[t];
            let mean = match id {
                ScenarioId::Hom => 10.0 + 3.0 * tf + 15.0 * d + x1 + 2.0 * c.x2 + c.x2.ln(),
                ScenarioId::HomTi => 10.0 + 3.0 * tf + 15.0 * d + x1 + 2.0 * tf * c.x2 + c.x2.ln(),
                ScenarioId::Het => 10.0 + 2.0 * tf + 15.0 * d + x1 + 3.0 * c.x2 + d * x1,
                ScenarioId::HetTi => 10.0 + 2.0 * tf + 15.0 * d + x1 + 3.0 * tf * c.x2 + d * x1,
                ScenarioId::RandCoef | ScenarioId::RandCoefTi => {
                    let [th0, th1, th2, th3, gamma, beta] = coef;
                    let x2_term = if id == ScenarioId::RandCoef { c.x2 } else { tf * c.x2 };
                    th0 + gamma * tf + beta * d + th1 * x1 + th2 * x2_term + th3 * d * x1
                }
            };
            *yt = mean + u + sd_e * rng.sample::<f64, _>(StandardNormal);
        }
        units.push(UnitRecord {
            unit_id: format!("u{i:0width$}"),
            y0: y[0],
            y1: y[1],
            treated: c.treated,
            x0: vec![c.x1[0], c.x2, c.v],
            x1: vec![c.x1[1], c.x2, c.v],
        });
    }
    PanelDataset::new(vec!["x1".into(), "x2".into(), "v".into()], units)
}

/// Dataset for replicate `replicate` of `seed`.
pub fn generate_replicate(scenario: &Scenario, seed: u64, replicate: u64) -> Result<PanelDataset> {
    generate_with_rng(scenario, &mut stream_rng(seed, replicate))
}

/// Deterministic dataset for `(scenario, seed)`.
pub fn generate_scenario(scenario: &Scenario, seed: u64) -> Result<PanelDataset> {
    generate_replicate(scenario, seed, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrueEffects {
    pub ate: f64,
    pub att: f64,
    /// Monte Carlo standard error of `att`; zero when it is analytic.
    pub att_mc_se: f64,
}

/// Units in the Monte Carlo oracle for the heterogeneous ATT.
pub const ORACLE_UNITS: usize = 1_000_000;
const ORACLE_SEED: u64 = 0x5EED_A77;

/// Mean and standard error of `x1` at t=1 among treated units, from a large
/// draw of the covariate and assignment model.
fn treated_x1_oracle(p: &DgpParams) -> (f64, f64) {
    static CACHE: OnceLock<Mutex<HashMap<String, (f64, f64)>>> = OnceLock::new();
    let key = format!("{p:?}");
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(v) = cache.lock().expect("oracle cache poisoned").get(&key) {
        return *v;
    }
    let mut rng = stream_rng(ORACLE_SEED, 0);
    let (mut n1, mut sum, mut sq) = (0usize, 0.0, 0.0);
    for _ in 0..ORACLE_UNITS {
        let c = draw_covariates(p, &mut rng);
        if c.treated {
            n1 += 1;
            sum += c.x1[1];
            sq += c.x1[1] * c.x1[1];
        }
    }
    let m = sum / n1 as f64;
    let var = (sq / n1 as f64 - m * m) * n1 as f64 / (n1 as f64 - 1.0);
    let out = (m, (var / n1 as f64).sqrt());
    cache.lock().expect("oracle cache poisoned").insert(key, out);
    out
}

/// Population ATE and ATT of the scenario. Homogeneous effects are analytic;
/// the heterogeneous ATT averages `β + θ₃ x1` over the treated with the
/// conditional mean of `x1` taken from a large Monte Carlo draw (cached).
pub fn true_effects(scenario: &Scenario) -> TrueEffects {
    let p = &scenario.params;
    let (beta, theta3) = match scenario.id {
        ScenarioId::Hom | ScenarioId::HomTi => return TrueEffects { ate: 15.0, att: 15.0, att_mc_se: 0.0 },
        ScenarioId::Het | ScenarioId::HetTi => (15.0, 1.0),
        ScenarioId::RandCoef | ScenarioId::RandCoefTi => (p.coef_means[5], p.coef_means[3]),
    };
    let (m, se) = treated_x1_oracle(p);
    TrueEffects { ate: beta + theta3 * p.x1_mean[1], att: beta + theta3 * m, att_mc_se: theta3.abs() * se }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_round_trip() {
        for id in ScenarioId::ALL {
            assert_eq!(id.to_string().parse::<ScenarioId>().unwrap(), id);
        }
        assert!("nope".parse::<ScenarioId>().is_err());
    }

    #[test]
    fn same_seed_same_data() {
        let s = Scenario::new(ScenarioId::Het, 100);
        assert_eq!(generate_scenario(&s, 3).unwrap(), generate_scenario(&s, 3).unwrap());
        assert_ne!(generate_scenario(&s, 3).unwrap(), generate_scenario(&s, 4).unwrap());
    }

    #[test]
    fn noise_free_response_follows_structural_equation() {
        let mut s = Scenario::new(ScenarioId::Hom, 50);
        s.params.u_var = 0.0;
        s.params.e_var = 0.0;
        let data = generate_scenario(&s, 1).unwrap();
        for u in data.units() {
            let (x2, d) = (u.x0[1], u.d1());
            assert_eq!(u.y0, 10.0 + u.x0[0] + 2.0 * x2 + x2.ln());
            assert_eq!(u.y1, 10.0 + 3.0 + 15.0 * d + u.x1[0] + 2.0 * x2 + x2.ln());
        }
        assert_eq!(data.time_varying_flags(), [true, false, false]);
    }

    #[test]
    fn rejects_bad_parameters() {
        let mut s = Scenario::new(ScenarioId::Hom, 50);
        s.params.e_var = -1.0;
        assert!(generate_scenario(&s, 1).is_err());
    }
}
