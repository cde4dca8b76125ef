//! Run manifests and output-directory locks.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_VERSION: u32 = 1;

/// Everything needed to reproduce one command: the fully resolved argument
/// list (config files already expanded), the effective configuration, and
/// hashes of every file read and written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    /// Working directory the command ran in; relative paths resolve here.
    pub cwd: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub started_unix: f64,
    pub finished_unix: f64,
}

impl RunManifest {
    pub fn new(command: &str, argv: &[String], config: serde_json::Value, seeds: Vec<u64>) -> Self {
        RunManifest {
            manifest_version: MANIFEST_VERSION,
            tool: "mrpo".into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            cwd: std::env::current_dir()
                .map(|d| d.display().to_string())
                .unwrap_or_default(),
            argv: argv.to_vec(),
            config,
            seeds,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            started_unix: now(),
            finished_unix: 0.0,
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.insert(path.display().to_string(), hash_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<(), CliError> {
        self.outputs.insert(path.display().to_string(), hash_file(path)?);
        Ok(())
    }

    pub fn write(mut self, path: &Path) -> Result<(), CliError> {
        self.finished_unix = now();
        let mut text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        text.push('\n');
        write_file(path, text.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let m: RunManifest = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: not a manifest: {e}", path.display())))?;
        if m.manifest_version != MANIFEST_VERSION {
            return Err(CliError::Integrity(format!(
                "{}: manifest version {} is not supported",
                path.display(),
                m.manifest_version
            )));
        }
        Ok(m)
    }

    /// Fail unless every recorded input still has its recorded hash.
    pub fn check_inputs(&self) -> Result<(), CliError> {
        for (path, hash) in &self.inputs {
            let now = hash_file(Path::new(path))?;
            if &now != hash {
                return Err(CliError::Integrity(format!(
                    "input {path} changed since the manifest was written"
                )));
            }
        }
        Ok(())
    }
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub fn hash_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::Io(format!("{}: {e}", parent.display())))?;
    }
    let tmp = path.with_extension("tmp-write");
    std::fs::write(&tmp, bytes).map_err(|e| CliError::Io(format!("{}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub const FILE_NAME: &'static str = ".mrpo.lock";

    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        let path = dir.join(Self::FILE_NAME);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Io(format!(
                "{} is locked by another run (remove {} if that run is gone)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(CliError::Io(format!("{}: {e}", path.display()))),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// The directory that holds `path` when `path` is a file output.
pub fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Manifest path for a single-file output: `<file>.manifest.json`.
pub fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    path.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = DirLock::acquire(dir.path()).unwrap();
        assert!(matches!(DirLock::acquire(dir.path()), Err(CliError::Io(_))));
        drop(lock);
        DirLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn manifest_roundtrip_and_input_check() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.txt");
        std::fs::write(&input, "a").unwrap();
        let mut m = RunManifest::new("synth", &["mrpo".into()], serde_json::json!({"k": 1}), vec![4]);
        m.input(&input).unwrap();
        let path = dir.path().join("m.json");
        m.clone().write(&path).unwrap();
        let back = RunManifest::read(&path).unwrap();
        assert_eq!(back.inputs, m.inputs);
        back.check_inputs().unwrap();
        std::fs::write(&input, "b").unwrap();
        assert!(matches!(back.check_inputs(), Err(CliError::Integrity(_))));
    }

    #[test]
    fn sidecar_name() {
        assert_eq!(
            sidecar(Path::new("d/ref.ckpt")),
            PathBuf::from("d/ref.ckpt.manifest.json")
        );
    }
}
