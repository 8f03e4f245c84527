use std::fmt;

use serde::Serialize;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    // Panel data ingestion and validation.
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("unit `{unit}` has no row for period t={time}")]
    MissingRow { unit: String, time: u8 },
    #[error("unit `{unit}` has more than one row for period t={time}")]
    DuplicateRow { unit: String, time: u8 },
    #[error("invalid time value `{value}` on line {line}; expected 0 or 1")]
    InvalidTime { line: usize, value: String },
    #[error("non-binary treatment value `{value}` for unit `{unit}`")]
    NonBinaryTreatment { unit: String, value: String },
    #[error("unit `{unit}` is treated at baseline (t=0)")]
    TreatedAtBaseline { unit: String },
    #[error("missing or non-numeric value in column `{column}` on line {line}")]
    MissingValue { line: usize, column: String },
    #[error("no overlap: {treated} treated and {control} control units")]
    NoOverlap { treated: usize, control: usize },
    #[error("covariate vector of unit `{unit}` has length {got}, expected {expected}")]
    CovariateLength { unit: String, got: usize, expected: usize },
    #[error("duplicate unit id `{0}`")]
    DuplicateUnit(String),

    // Model specification and design construction.
    #[error("unknown covariate `{0}`")]
    UnknownCovariate(String),
    #[error("log of non-positive value of `{covariate}` for unit `{unit}`")]
    NonPositiveLog { covariate: String, unit: String },
    #[error("invalid term `{0}`")]
    InvalidTerm(String),
    #[error("term `{0}` is not allowed in a propensity model")]
    InvalidPsTerm(String),
    #[error("model has no terms")]
    EmptySpec,

    // Fitting.
    #[error("design matrix is rank deficient")]
    RankDeficientDesign,
    #[error("outcome is not binary")]
    NonBinaryOutcome,
    #[error("outcome has no variation")]
    NoVariationInOutcome,
    #[error("complete or quasi-complete separation detected")]
    Separation,
    #[error("non-finite likelihood")]
    NonFiniteLikelihood,
    #[error("clusters are not all of size two ({0})")]
    UnbalancedClusters(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid bin count {0}; expected 2..=10 and at most the number of units")]
    InvalidBinCount(usize),

    // Marginalization.
    #[error("random-effect variance must be non-negative, got {0}")]
    InvalidVariance(f64),
    #[error("non-finite linear predictor")]
    NonFiniteLinearPredictor,
    #[error("quadrature order must be at least 1")]
    InvalidQuadratureOrder,

    // Estimation and inference.
    #[error("{method} does not define the {estimand}")]
    UnsupportedEstimand { method: String, estimand: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("all {0} bootstrap replicates failed")]
    AllReplicatesFailed(usize),
    #[error("balance check inconclusive: {0}")]
    BalanceInconclusive(String),
    #[error("estimator differences have zero bootstrap variance but non-zero point difference")]
    DegenerateVariance,
}

impl Error {
    /// Bad input or arguments, as opposed to a failure during computation.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::RankDeficientDesign
                | Error::NoVariationInOutcome
                | Error::Separation
                | Error::NonFiniteLikelihood
                | Error::NonFiniteLinearPredictor
                | Error::AllReplicatesFailed(_)
                | Error::BalanceInconclusive(_)
                | Error::DegenerateVariance
        )
    }

    /// Short machine-readable kind, used as the `ERROR:<kind>:` prefix on the command line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io(_) => "Io",
            Error::Csv(_) => "Csv",
            Error::Json(_) => "Json",
            Error::MissingColumn(_) => "MissingColumn",
            Error::MissingRow { .. } => "MissingRow",
            Error::DuplicateRow { .. } => "DuplicateRow",
            Error::InvalidTime { .. } => "InvalidTime",
            Error::NonBinaryTreatment { .. } => "NonBinaryTreatment",
            Error::TreatedAtBaseline { .. } => "TreatedAtBaseline",
            Error::MissingValue { .. } => "MissingValue",
            Error::NoOverlap { .. } => "NoOverlap",
            Error::CovariateLength { .. } => "CovariateLength",
            Error::DuplicateUnit(_) => "DuplicateUnit",
            Error::UnknownCovariate(_) => "UnknownCovariate",
            Error::NonPositiveLog { .. } => "NonPositiveLog",
            Error::InvalidTerm(_) => "InvalidTerm",
            Error::InvalidPsTerm(_) => "InvalidPsTerm",
            Error::EmptySpec => "EmptySpec",
            Error::RankDeficientDesign => "RankDeficientDesign",
            Error::NonBinaryOutcome => "NonBinaryOutcome",
            Error::NoVariationInOutcome => "NoVariationInOutcome",
            Error::Separation => "Separation",
            Error::NonFiniteLikelihood => "NonFiniteLikelihood",
            Error::UnbalancedClusters(_) => "UnbalancedClusters",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::InvalidBinCount(_) => "InvalidBinCount",
            Error::InvalidVariance(_) => "InvalidVariance",
            Error::NonFiniteLinearPredictor => "NonFiniteLinearPredictor",
            Error::InvalidQuadratureOrder => "InvalidQuadratureOrder",
            Error::UnsupportedEstimand { .. } => "UnsupportedEstimand",
            Error::InvalidArgument(_) => "InvalidArgument",
            Error::AllReplicatesFailed(_) => "AllReplicatesFailed",
            Error::BalanceInconclusive(_) => "BalanceInconclusive",
            Error::DegenerateVariance => "DegenerateVariance",
        }
    }
}

/// Non-fatal conditions reported alongside results.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Warning {
    /// A covariate declared time-invariant differs between periods.
    TimeVaryingCovariate(String),
    /// Fitted propensity scores outside `[eps, 1 - eps]`.
    ExtremeWeights { count: usize, eps: f64 },
    /// Duplicated propensity quantile edges were collapsed.
    DegenerateBins { requested: usize, effective: usize },
    /// Bootstrap replicates that failed to fit.
    FailedReplicates { failed: usize, total: usize },
    /// Bootstrap variance of an estimator difference is zero.
    DegenerateVariance(String),
    /// Backward elimination removed every candidate term.
    EmptyModel,
    /// IRLS stopped at the iteration cap.
    NotConverged,
}

impl fmt::Display for Warning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Warning::TimeVaryingCovariate(name) => {
                write!(f, "covariate `{name}` declared time-invariant differs across periods; treated as time-varying")
            }
            Warning::ExtremeWeights { count, eps } => {
                write!(f, "{count} propensity scores outside [{eps}, {}]", 1.0 - eps)
            }
            Warning::DegenerateBins { requested, effective } => {
                write!(f, "propensity bins collapsed from {requested} to {effective}")
            }
            Warning::FailedReplicates { failed, total } => {
                write!(f, "{failed} of {total} replicates failed and were dropped")
            }
            Warning::DegenerateVariance(what) => write!(f, "zero bootstrap variance for {what}"),
            Warning::EmptyModel => write!(f, "all candidate terms eliminated"),
            Warning::NotConverged => write!(f, "iteration limit reached before convergence"),
        }
    }
}
