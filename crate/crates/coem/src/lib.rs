//! Service, command line and file formats for the knowledge pool in
//! `coem-core`: line-delimited event log and snapshots, TOML config,
//! prompt templates, the chat-completion backend and the HTTP API.

pub mod cli;
pub mod config;
pub mod journal;
pub mod judge;
pub mod remote;
pub mod report;
pub mod service;
pub mod snapshot;
pub mod templates;
