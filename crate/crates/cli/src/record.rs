use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Result;
use serde::Serialize;
use serde_json::Value;

use crate::files::write_atomic;

/// Everything needed to rerun a command, plus what it measured.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub command: String,
    pub config: Value,
    pub metrics: Value,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

pub fn now_unix_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

impl RunRecord {
    pub fn new(command: &str, config: Value, metrics: Value, started_unix_ms: u128) -> Self {
        Self { command: command.into(), config, metrics, started_unix_ms, finished_unix_ms: now_unix_ms() }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, (serde_json::to_string_pretty(self)? + "\n").as_bytes())
    }
}
