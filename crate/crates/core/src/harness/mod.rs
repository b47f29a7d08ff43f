//! Configuration, presets, run execution, comparisons and the brute-force
//! oracles behind the command-line tool.

pub mod compare;
pub mod config;
pub mod gradcheck;
pub mod oracle;
pub mod plots;
pub mod run;

pub use compare::{compare, compare_families, Comparison, FamilyComparison, RunSummary};
pub use config::{InitKind, JudgeKind, Method, Preset, RunConfig, SCHEMA_VERSION};
pub use gradcheck::{gradcheck, GradcheckReport};
pub use oracle::{exact_expected_reward, monte_carlo_reward, oracle_suite, OracleCheck};
pub use plots::emit_plots;
pub use run::{evaluate_checkpoint, run, run_in_memory, RunOutcome};
