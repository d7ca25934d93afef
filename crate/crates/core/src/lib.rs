//! Confirmatory factor analysis engine: patterned-model estimation,
//! chi-square test statistics (ML, RLS, Satorra-Bentler scaled),
//! Lagrange-multiplier modification tests, fit indices with conventional
//! cutoffs, and a seedable Monte Carlo harness.

pub mod datagen;
pub mod error;
pub mod estimation;
pub mod inference;
pub mod model;
pub mod simulation;
pub mod vech;

pub use error::{MatrixRole, Result, SemError};
pub use estimation::{FitMethod, FitSolution, SampleMoments};
pub use inference::{FitIndexSet, LmCandidate, StatKind, TestStatistic};
pub use model::{CfaModel, ParamEntry, ParameterVector, PatternMatrix, PatternPosition};
pub use simulation::{AggregateRow, ModelVariant, Scenario, ScenarioResultRow, SimulationPlan};
