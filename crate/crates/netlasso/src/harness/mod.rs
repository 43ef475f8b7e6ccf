//! Experiment configuration, presets, multi-trial orchestration, and
//! trace emission.

pub mod config;
pub mod output;
pub mod presets;
pub mod runner;

pub use config::{
    CaseConfig, ExperimentConfig, GammaSpec, ModelSpec, RadiusSpec, RoundTableConfig, RunSpec,
    StopSpec, TopologySpec,
};
pub use presets::{er_probability_for_rho, preset, Scale, PRESET_NAMES};
pub use runner::{run_experiment, CaseOutput, DivergenceNote, ExperimentOutput, RoundRow};
