//! Experiment harness behind the `cot` binary: built-in instances, convergence reports,
//! output directories and SVG figures.

pub mod experiments;
pub mod instances;
pub mod output;
pub mod svg;

pub use experiments::{
    config_hash, gamma_homog_experiment, gamma_membrane_experiment, ExperimentReport, GammaHomogConfig,
    GammaMembraneConfig,
};
pub use instances::{MembraneShape, TransportInstance};
pub use output::{Format, Output};
