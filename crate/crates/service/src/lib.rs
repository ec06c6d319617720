//! Command-line tool and HTTP server for recovery-curve models.

pub mod api;
pub mod cli;
pub mod posterior;
pub mod server;
