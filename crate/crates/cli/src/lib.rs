//! Library side of the `qcert` command: figure datasets and configuration.

pub mod config;
pub mod figures;
