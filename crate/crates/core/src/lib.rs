//! Fuxi-MME: multi-embedding sequential recommendation over a shared stack
//! of mixture-of-experts Fuxi blocks.

pub mod block;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embedding;
pub mod gradcheck;
mod error;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod optim;
pub mod params;
pub mod seed;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
