//! Command implementations and the HTTP chat service behind the `mmgpt`
//! binary.

pub mod commands;
pub mod server;

/// Bad invocation or configuration; the binary exits with status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}
