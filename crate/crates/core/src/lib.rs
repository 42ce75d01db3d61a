//! Discrete-event simulation of a serverless media-streaming engine with
//! durable and ephemeral function containers.

pub mod config;
pub mod domain;
pub mod engine;
pub mod estimator;
pub mod experiment;
pub mod metrics;
pub mod provisioner;
pub mod scheduler;
pub mod workload;
