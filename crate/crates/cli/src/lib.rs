//! Library side of the `p2p` command line, shared with the integration
//! and acceptance tests.

pub mod cli;
pub mod commands;
pub mod data;
pub mod manifest;
pub mod settings;

pub use commands::run;

/// Logs to stderr at `info` unless `RUST_LOG` says otherwise.
pub fn init_logging() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
}
