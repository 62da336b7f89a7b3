//! Volumetric tumor segmentation toolkit.
//!
//! The pipeline runs preprocessing ([`preprocess`]), slab or whole-volume
//! sampling ([`sampling`]), network training ([`training`], models from
//! `volseg-nn`) and a two-threshold detection/segmentation evaluation
//! ([`evaluation`]). [`dataset`] provides manifests, stratified folds and a
//! synthetic phantom generator for desk-scale runs.

pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod preprocess;
pub mod pipeline;
pub mod sampling;
pub mod training;
pub mod volcore;

pub use error::{Error, Result};
