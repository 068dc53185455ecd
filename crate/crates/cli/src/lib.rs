//! Service, wire protocol and command line for the meta-scheduler.
//!
//! The service keeps one [`metasched_core::Master`] behind a TCP listener
//! speaking newline-delimited JSON. Its event log is the source of truth:
//! on start the latest snapshot is loaded and the log tail replayed.

pub mod cli;
pub mod client;
pub mod config;
pub mod server;
pub mod service;
pub mod wire;
