//! Configuration, ingestion and report plumbing behind the `orthoml` binary.

pub mod config;
pub mod data;
pub mod run;

pub use config::{Estimand, Extra, Roles, RunConfig};
pub use data::{ingest_csv, ingest_reader, Dataset};
pub use run::{did_placebo, estimate, list_dgps, placebo, run_estimate, run_simulation, Estimate, Output, Provenance, Report};
