//! Library surface of the `buddies` experiment runner, exposed so
//! integration tests can drive whole experiments in-process.

pub mod config;
pub mod experiment;
pub mod report;
