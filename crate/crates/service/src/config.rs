use std::path::PathBuf;

use csr_core::eval::{ORACLE_ALPHA, ORACLE_THRESHOLD};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    /// Alpha used when an interact request leaves it out.
    pub alpha: f64,
    pub indecision_threshold: f64,
    pub session_ttl_secs: u64,
    /// Where atlas discards are persisted; edits are kept in memory only when unset.
    pub atlas_edits: Option<PathBuf>,
    /// Served under `/static`; defaults to the dataset root.
    pub static_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            alpha: ORACLE_ALPHA,
            indecision_threshold: ORACLE_THRESHOLD,
            session_ttl_secs: 3600,
            atlas_edits: None,
            static_dir: None,
        }
    }
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(format!("alpha must lie in [0, 1), got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.indecision_threshold) {
            return Err(format!("indecision_threshold must lie in [0, 1], got {}", self.indecision_threshold));
        }
        if self.session_ttl_secs == 0 {
            return Err("session_ttl_secs must be positive".into());
        }
        Ok(())
    }
}
