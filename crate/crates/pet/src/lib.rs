//! Crowd counting and localization by decomposable point querying.
//!
//! The pipeline: a small convolutional backbone extracts stride-8 features,
//! a transformer encoder with progressive rectangle-window attention encodes
//! context, a learned splitter grows a point-query quadtree over the image,
//! a window-attention decoder classifies and localizes every query, and a
//! set-matching loss trains the whole stack end to end.

pub mod apps;
pub mod attention;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
mod init;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod posembed;
pub mod quadtree;
pub mod selftest;
pub mod trainer;

pub use error::{Error, Result};
