//! Training and evaluation harness around `ukanep-core`: run
//! configuration, the AdamW optimizer with its warmup-cosine schedule,
//! bit-exact checkpointing, the training loop, and metric reports.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod optim;
pub mod train;
