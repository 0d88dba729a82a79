//! Core numerics for a spatiotemporal-attention prognosis network.
//!
//! Everything here is pure computation over `alloc` collections: dense
//! `f64` tensors with a reverse-mode autodiff tape, the 4D attention
//! pathway, clinical–imaging fusion, prediction heads and metrics, the
//! volumetric preprocessing/augmentation math, a synthetic phantom cohort
//! generator and the optimizer. File formats, the training driver and the
//! command line live in the `acfnet` crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod error;
pub mod tensor;
pub mod kernels;
pub mod graph;
pub mod gradcheck;
pub mod gradsuite;
pub mod params;
pub mod model;
pub mod fusion;
pub mod heads;
pub mod network;
pub mod optim;
pub mod preprocess;
pub mod synth;
pub mod split;
pub mod trainer;

mod rng;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
