//! Configuration, experiment runners and property suites.
//!
//! Each experiment writes a long-format CSV and a JSON sidecar holding the
//! provenance config, the build identifier, resolved step counts, solver
//! statistics and warnings. Exit codes: 0 success, 1 validation failure,
//! 2 solver failure, 3 suite criterion failure.

pub mod config;
pub mod run;
pub mod suite;

pub use config::{Experiment, ExperimentConfig};
pub use run::{run, RunOutput, BUILD_ID};
pub use suite::{run_suite, CriterionResult, Profile, Suite, SuiteReport};

/// Exit status when a suite criterion fails.
pub const EXIT_CRITERION_FAILED: i32 = 3;
