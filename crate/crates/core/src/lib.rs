//! Few-shot image classification with dense classification and implants.
//!
//! The crate carries its own small reverse-mode autodiff engine
//! ([`graph`]), convolutional embedding networks ([`models`]), cosine
//! classifiers and prototype inference ([`fewshot`]), stage-1 trainers
//! ([`train`]), implant-based task adaptation ([`implant`]), task sampling
//! and evaluation ([`episodes`]) and a synthetic dataset generator
//! ([`data`]).

pub mod config;
pub mod data;
pub mod episodes;
pub mod error;
pub mod fewshot;
pub mod gradcheck;
pub mod graph;
pub mod implant;
pub mod linalg;
pub mod models;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
