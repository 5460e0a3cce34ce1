//! Command-line pipeline and HTTP query service for semantic Gaussian splatting.

pub mod commands;
pub mod project;
pub mod service;
