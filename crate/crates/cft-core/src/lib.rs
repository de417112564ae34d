//! Core library for a counterfactual fine-tuning laboratory.
//!
//! The crates in this workspace train small decoder-only language models on
//! synthetic recommendation streams and quantify how much of each prediction
//! is driven by the user's interaction history rather than global popularity.
//! Everything is CPU-only, single-threaded, and bitwise deterministic for a
//! fixed seed.

pub mod autodiff;
pub mod corpus;
pub mod fsutil;
pub mod model;
pub mod objective;
pub mod decode;
pub mod evalkit;
mod stream;
pub mod tensor;
pub mod textenc;
pub mod trainer;
