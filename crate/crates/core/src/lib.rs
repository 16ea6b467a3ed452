//! Synthetic ultra-wide OCTA generation and evaluation.
//!
//! The generator grows vascular forests for the superficial and deep
//! plexus ([`growth`]), renders them into a grayscale angiogram with a
//! pixel-exact vessel mask ([`raster`]) and degrades the pair with scanner
//! artifacts and training augmentations ([`degrade`]). The evaluation side
//! covers overlap and ordinal metrics, the training losses, model ensembling
//! and stratified folds ([`metrics`], [`ensemble`]).

pub mod commands;
pub mod config;
pub mod dataset;
pub mod degrade;
pub mod ensemble;
pub mod error;
pub mod field;
pub mod geometry;
pub mod growth;
pub mod layout;
pub mod metrics;
pub mod pgm;
pub mod raster;
pub mod rng;

pub use error::{Error, Result};
