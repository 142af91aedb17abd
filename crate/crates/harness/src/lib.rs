//! Data, evaluation, audits and experiment orchestration for the s2sent selector.

pub mod acceptance;
pub mod audit;
pub mod config;
pub mod data;
pub mod experiment;
pub mod metrics;
