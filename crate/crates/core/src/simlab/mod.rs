//! Simulation scenarios and Monte Carlo studies of the estimators.

mod scenario;
mod study;
mod table;

pub use scenario::{
    generate_replicate, generate_scenario, generate_with_rng, true_effects, DgpParams, Scenario, ScenarioId,
    TrueEffects,
};
pub use study::{run_study, EstimatorSuite, ModelRole, StudyCell, StudyResult, SuiteEntry};
pub use table::{render_table, StudyTable, TableRow};
