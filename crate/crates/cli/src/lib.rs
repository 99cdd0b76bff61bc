//! Simulation harness for fractional register counting: scenario configs,
//! Monte-Carlo replication of generate → initiate → roll → count → audit,
//! summary reports and the acceptance suite.

pub mod acceptance;
pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;

pub use config::RunConfig;
pub use error::CliError;
