//! HTTP service and command-line front ends over the retrieval engine.

pub mod api;
pub mod cli;
pub mod config;
