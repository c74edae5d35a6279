//! Image and text side of the volumetric report-generation pipeline.
//!
//! Volumes and their deterministic pre-processing live in [`volume`],
//! procedural thorax phantoms in [`phantom`], the artificial abnormalities
//! and their label layout in [`abnormality`], dataset assembly in
//! [`dataset`], narrative reports in [`report`], rule-based label mining in
//! [`sarle`] and the evaluation metrics in [`metrics`].

pub mod abnormality;
pub mod dataset;
pub mod error;
pub mod exec;
pub mod io;
pub mod metrics;
pub mod phantom;
pub mod report;
pub mod sarle;
pub mod seed;
pub mod volume;

pub use error::{Error, Result};
pub use exec::Execution;
