//! Versioned JSON container for models, ensembles and configs.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format: String,
    format_version: u32,
    kind: String,
    payload: T,
}

pub fn save_json<T: Serialize>(path: &Path, kind: &str, payload: &T) -> Result<()> {
    let env = Envelope {
        format: "habmap".to_string(),
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        payload,
    };
    let text = serde_json::to_string(&env)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_json<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let env: Envelope<serde_json::Value> = serde_json::from_str(&text)?;
    if env.format != "habmap" || env.format_version != FORMAT_VERSION {
        return Err(Error::invalid(format!(
            "{}: unsupported container {} v{}",
            path.display(),
            env.format,
            env.format_version
        )));
    }
    if env.kind != kind {
        return Err(Error::invalid(format!(
            "{}: expected a `{kind}` file, found `{}`",
            path.display(),
            env.kind
        )));
    }
    Ok(serde_json::from_value(env.payload)?)
}
