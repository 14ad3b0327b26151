//! Experiment harness for the selective state-space in-context regression
//! study: figure and table reproductions, verification suites, and the
//! plumbing behind the `mamba-lab` binary (configuration, CSV/JSON
//! artifacts, run manifests).
//!
//! ```
//! use mamba_icl_lab::experiments::baseline_table;
//!
//! let (_, rows) = baseline_table(10, &[10, 80]).unwrap();
//! assert!((rows[1].2 - 0.6044).abs() < 5e-5);
//! ```

pub mod commands;
pub mod config;
pub mod error;
pub mod experiments;
pub mod output;
pub mod population_oracle;
pub mod verify;

pub use config::LabConfig;
pub use error::{LabError, LabResult};
