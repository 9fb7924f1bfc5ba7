//! Desk-scale experiment harness: synthetic data, a small MLP encoder,
//! training, evaluation, the ablation suite and its configuration.

pub mod ablation;
pub mod config;
pub mod data;
pub mod encoder;
pub mod evaluate;
pub mod train;
