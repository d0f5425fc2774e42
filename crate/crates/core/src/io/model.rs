//! JSON model files: `{"format": "bosfv", "version": 1, "kind": ..., "body": ...}`.
//!
//! Floats are written in shortest round-trip form, so a save/load cycle is
//! bit-exact and identical inputs give byte-identical files.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const FORMAT: &str = "bosfv";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope<T> {
    format: String,
    version: u32,
    kind: String,
    body: T,
}

pub fn to_json_string<T: Serialize>(kind: &str, body: &T) -> Result<String> {
    let env = Envelope {
        format: FORMAT.to_string(),
        version: VERSION,
        kind: kind.to_string(),
        body,
    };
    let mut s = serde_json::to_string_pretty(&env)?;
    s.push('\n');
    Ok(s)
}

pub fn from_json_str<T: DeserializeOwned>(kind: &str, s: &str) -> Result<T> {
    let env: Envelope<T> = serde_json::from_str(s)?;
    if env.format != FORMAT || env.version != VERSION {
        return Err(Error::Format(format!(
            "unsupported model file ({} v{})",
            env.format, env.version
        )));
    }
    if env.kind != kind {
        return Err(Error::Format(format!(
            "expected a `{kind}` file, found `{}`",
            env.kind
        )));
    }
    Ok(env.body)
}

pub fn save_model<T: Serialize>(path: impl AsRef<Path>, kind: &str, body: &T) -> Result<()> {
    fs::write(path, to_json_string(kind, body)?)?;
    Ok(())
}

pub fn load_model<T: DeserializeOwned>(path: impl AsRef<Path>, kind: &str) -> Result<T> {
    from_json_str(kind, &fs::read_to_string(path)?)
}

/// Reads just the `kind` field of a model file.
pub fn peek_kind(path: impl AsRef<Path>) -> Result<String> {
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path)?)?;
    v.get("kind")
        .and_then(|k| k.as_str())
        .map(str::to_string)
        .ok_or_else(|| Error::Format("model file has no `kind`".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixtures::DiagonalGmm;
    use nalgebra::DVector;

    #[test]
    fn gmm_round_trip_is_exact() {
        let g = DiagonalGmm::new(
            vec![0.1, 0.9],
            vec![
                DVector::from_column_slice(&[1.0 / 3.0, -2e-300]),
                DVector::from_column_slice(&[std::f64::consts::PI, 0.0]),
            ],
            vec![
                DVector::from_element(2, 0.7),
                DVector::from_element(2, 1e-6),
            ],
        )
        .unwrap();
        let s = to_json_string("gmm", &g).unwrap();
        let back: DiagonalGmm = from_json_str("gmm", &s).unwrap();
        assert_eq!(back, g);
        assert_eq!(to_json_string("gmm", &back).unwrap(), s);
        assert!(from_json_str::<DiagonalGmm>("dmm", &s).is_err());
    }
}
