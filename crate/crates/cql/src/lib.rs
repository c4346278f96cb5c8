//! Files, experiment configs, verification suites and the `cql` command line
//! built on `cql-core`.

pub mod cli;
pub mod config;
pub mod formats;
pub mod suites;
