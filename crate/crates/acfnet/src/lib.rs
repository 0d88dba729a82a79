//! Command-line driver, file formats and experiment runners around
//! `acfnet-core`.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod heatmap;
pub mod io;
pub mod paramcount;
pub mod train;
