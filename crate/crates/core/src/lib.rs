//! Treatment-effect estimation for two-period panel data.
//!
//! Outcome regression, random-intercept mixed models, inverse propensity
//! weighting, difference-in-differences and its propensity-weighted variant,
//! and a doubly robust augmented mixed model, together with bootstrap
//! inference, diagnostics and a simulation harness.

pub mod error;
pub mod estimators;
pub mod glm;
pub mod inference;
mod linalg;
pub mod lmm;
pub mod marginalize;
pub mod panel;
pub mod rng;
pub mod simlab;

pub use error::{Error, Result, Warning};
pub use estimators::{EffectEstimate, EffectPair, Estimand, EstimatorOptions, Method};
pub use glm::{fit_logistic, ps_quantile_dummies, IrlsOptions, PsDummies, PsFit};
pub use linalg::quantile_sorted;
pub use lmm::{fit_lmm, fit_or, FitOptions, LmmFit};
pub use marginalize::{population_average_contrast, LinkFunction, QuadratureRule};
pub use panel::{ColumnMapping, ModelSpec, PanelDataset, RandomEffect, Term, UnitRecord};
