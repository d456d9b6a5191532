//! JSON persistence helpers shared by the model checkpoints.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{CsrError, Result};

pub(crate) fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CsrError::io(parent, e))?;
    }
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| CsrError::Json { path: path.to_path_buf(), source: e })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CsrError::io(path, e))
}

pub(crate) fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| CsrError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CsrError::Json { path: path.to_path_buf(), source: e })
}
