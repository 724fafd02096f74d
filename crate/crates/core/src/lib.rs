//! Simulation library for partial model personalization of Vision
//! Transformers in federated learning.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`]: a ViT with tagged parameters, exact gradients and the prefix
//!   attention operators.
//! * [`plugins`]: prefixes, generated prefixes, prompts and MLP adapters.
//! * [`strategies`]: the global/local partition and local update rules.
//! * [`federation`]: client sampling, partial aggregation and the round loop.
//! * [`data`]: synthetic data, folder ingestion and non-IID partitioners.
//! * [`metrics`]: accuracy summaries, resource accounting and the layer
//!   sensitivity harness.
//! * [`config`]: the experiment file format.

pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod metrics;
pub mod model;
pub mod params;
pub mod plugins;
pub mod rng;
pub mod strategies;

pub use error::{Error, Result};
pub use params::{Catalog, LayerTag, ParamInfo, Parameter, ParameterSet, Selector};
