//! Training harness: optimizer, checkpoints, evaluation, sweeps.

pub mod checkpoint;
pub mod evaluate;
pub mod frechet;
pub mod optim;
pub mod sweep;
pub mod train;
