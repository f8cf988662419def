//! Service shell around `aserv-core`: configuration, the simulation loop,
//! and the HTTP API.

pub mod api;
pub mod commands;
pub mod config;
pub mod queries;
pub mod sim;

pub use config::Config;
