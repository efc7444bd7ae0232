//! Pipeline CLI and HTTP API over the objfind retrieval engine.

pub mod cli;
pub mod config;
pub mod pipeline;
pub mod service;
