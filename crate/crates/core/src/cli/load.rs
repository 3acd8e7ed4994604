//! Reading key files in any of the shapes the tools write.

use std::path::Path;

use serde_json::Value;

use super::CliError;
use crate::crypto::TemporaryExposureKey;
use crate::keyserver::{parse_public_key, AggregateBody, SignedAggregate};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadedKeys {
    pub teks: Vec<TemporaryExposureKey>,
    /// Whether a signature was checked.
    pub verified: bool,
}

fn decode<T: serde::de::DeserializeOwned>(v: Value, path: &Path) -> Result<T, CliError> {
    serde_json::from_value(v).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// Loads TEKs from a signed aggregate, an aggregate body, a `{"teks": [...]}`
/// object, or a bare TEK array. With `server_key`, only a signed aggregate
/// whose signature verifies is accepted.
pub fn load_teks(path: &Path, server_key: Option<&str>) -> Result<LoadedKeys, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let signed = value.get("payload").is_some() && value.get("signature").is_some();
    if let Some(key) = server_key {
        if !signed {
            return Err(CliError::Runtime(format!(
                "{}: not a signed aggregate, cannot verify",
                path.display()
            )));
        }
        let key = parse_public_key(key)?;
        let agg: SignedAggregate = decode(value, path)?;
        return Ok(LoadedKeys {
            teks: agg.verify(&key)?.teks(),
            verified: true,
        });
    }
    let teks = if signed {
        decode::<SignedAggregate>(value, path)?.body_unverified()?.teks()
    } else if value.get("bundles").is_some() {
        decode::<AggregateBody>(value, path)?.teks()
    } else if let Some(teks) = value.get("teks") {
        decode(teks.clone(), path)?
    } else {
        decode(value, path)?
    };
    for t in &teks {
        t.validate()?;
    }
    Ok(LoadedKeys { teks, verified: false })
}
