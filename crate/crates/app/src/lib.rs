//! Command-line and HTTP front ends for expressive speech retrieval.

pub mod cli;
pub mod query;
pub mod server;
