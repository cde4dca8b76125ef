use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

/// One preference pair: `chosen` was preferred over `rejected` for `prompt`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceExample {
    pub id: String,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
}

impl PreferenceExample {
    pub fn validate(&self) -> std::result::Result<(), String> {
        for (name, value) in [
            ("id", &self.id),
            ("prompt", &self.prompt),
            ("chosen", &self.chosen),
            ("rejected", &self.rejected),
        ] {
            if value.is_empty() {
                return Err(format!("field {name:?} is empty"));
            }
        }
        if self.chosen == self.rejected {
            return Err("chosen and rejected are identical".into());
        }
        Ok(())
    }
}

/// Parse a JSON Lines preference file. Blank lines are skipped; order is kept.
pub fn load_preference_file(path: &Path) -> Result<Vec<PreferenceExample>> {
    let bytes = fsutil::read(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: format!("not UTF-8: {e}"),
    })?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message,
        };
        let ex: PreferenceExample = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        ex.validate().map_err(parse_err)?;
        if !seen.insert(ex.id.clone()) {
            return Err(Error::Integrity(format!(
                "{}:{lineno}: duplicate id {:?}",
                path.display(),
                ex.id
            )));
        }
        out.push(ex);
    }
    Ok(out)
}

/// Canonical JSON Lines encoding; also the input to [`dataset_hash`].
pub fn to_jsonl(examples: &[PreferenceExample]) -> Vec<u8> {
    let mut out = Vec::new();
    for ex in examples {
        serde_json::to_writer(&mut out, ex).expect("example serializes");
        out.push(b'\n');
    }
    out
}

pub fn write_preference_file(path: &Path, examples: &[PreferenceExample]) -> Result<()> {
    fsutil::write_atomic(path, &to_jsonl(examples))
}

/// SHA-256 of the canonical encoding. Any change to any field of any example
/// changes the hash.
pub fn dataset_hash(examples: &[PreferenceExample]) -> String {
    fsutil::sha256_hex(&to_jsonl(examples))
}
