//! Chat service for crskit pipelines: sessions, SSE streaming, stop/refresh,
//! history download and trace inspection.

pub mod api;
pub mod config;
pub mod state;

pub use api::{router, spawn_sweeper};
pub use config::ServerConfig;
pub use state::{AppState, Mode};
