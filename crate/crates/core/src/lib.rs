pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod lstm;
pub mod mcl;
pub mod numerics;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod selection;
pub mod seq2seq;

pub use error::{Error, Result};
