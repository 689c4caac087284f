//! Artifact plumbing: checkpoints, metrics, configuration, oracles and the
//! annotation service.

pub mod gradcheck;
pub mod checkpoint;
pub mod metrics;
pub mod config;
pub mod service;
pub mod pipeline;
