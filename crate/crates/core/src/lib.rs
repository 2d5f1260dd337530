//! Car make/model identification pipeline.

pub mod augment;
pub mod backbones;
pub mod config;
pub mod dataset;
pub mod hpo;
pub mod trainer;
