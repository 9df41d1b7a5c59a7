//! HTTP API and command line over the `iskg-core` pipeline.

pub mod api;
pub mod cli;
pub mod config;
pub mod error;

pub use api::{router, AppState};
pub use config::ServiceConfig;
pub use error::{ApiError, ErrorCode};
