//! Multilingual scaling-law toolkit.
//!
//! Fits repetition- and transfer-aware scaling laws to training-run data,
//! evaluates them on held-out axes, estimates cross-lingual transfer scores,
//! plans iso-loss model/data growth when adding languages, and locates
//! pretrain-versus-finetune crossover points.

pub mod capacity;
pub mod cli;
pub mod crossover;
pub mod error;
pub mod fitter;
pub mod forest;
pub mod holdout_eval;
pub mod laws;
pub mod optim;
pub mod run_data;
pub mod synth;
pub mod transfer;

pub use error::{Error, Result};
