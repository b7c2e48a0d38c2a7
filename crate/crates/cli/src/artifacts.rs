//! Output directory handling: exclusive lock, versioned JSON, long-format CSV
//! and the checksummed run manifest.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use ullsnn_core::weights::sha256_hex;

use crate::exit::CliError;

/// Version stamped into every JSON artifact as `schema_version`.
pub const SCHEMA_VERSION: u64 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const LOCK: &str = ".ullsnn.lock";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub wall_clock_seconds: f64,
    pub inputs: Vec<ArtifactRecord>,
    pub outputs: Vec<ArtifactRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u64,
    pub tool: String,
    pub tool_version: String,
    pub config_sha256: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    fn new(config_sha256: &str) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            tool: env!("CARGO_PKG_NAME").into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config_sha256: config_sha256.into(),
            stages: BTreeMap::new(),
        }
    }

    /// Re-hashes every listed output under `root`; returns the mismatches.
    pub fn verify(&self, root: &Path) -> Vec<String> {
        let mut bad = Vec::new();
        for (stage, rec) in &self.stages {
            for a in &rec.outputs {
                match fs::read(root.join(&a.path)) {
                    Ok(bytes) if sha256_hex(&bytes) == a.sha256 => {}
                    _ => bad.push(format!("{stage}: {}", a.path)),
                }
            }
        }
        bad
    }
}

/// An output directory held exclusively for the lifetime of the value.
pub struct RunDir {
    root: PathBuf,
    written: Vec<ArtifactRecord>,
    inputs: Vec<ArtifactRecord>,
}

impl RunDir {
    pub fn open(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::artifact(root.display(), e))?;
        let lock = root.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => {}
            Err(e) if e.kind() == ErrorKind::AlreadyExists => {
                return Err(CliError::Artifact(format!(
                    "{} is locked by another run (delete {} if it is stale)",
                    root.display(),
                    lock.display()
                )))
            }
            Err(e) => return Err(CliError::artifact(lock.display(), e)),
        }
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
            inputs: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Writes via a temporary file and rename so readers never see a partial
    /// artifact.
    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let target = self.path(name);
        let tmp = self.path(&format!(".{name}.tmp"));
        fs::write(&tmp, bytes)
            .and_then(|_| fs::rename(&tmp, &target))
            .map_err(|e| CliError::artifact(target.display(), e))?;
        self.written.retain(|a| a.path != name);
        self.written.push(ArtifactRecord {
            path: name.into(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    /// Serialises `body` (a struct) with `schema_version` and `kind` added.
    pub fn write_json<T: Serialize>(&mut self, name: &str, kind: &str, body: &T) -> Result<(), CliError> {
        let mut value = serde_json::to_value(body).map_err(|e| CliError::artifact(name, e))?;
        let obj = value
            .as_object_mut()
            .ok_or_else(|| CliError::Artifact(format!("{name}: body is not an object")))?;
        obj.insert("schema_version".into(), SCHEMA_VERSION.into());
        obj.insert("kind".into(), kind.into());
        let mut text = serde_json::to_string_pretty(&value).map_err(|e| CliError::artifact(name, e))?;
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    pub fn write_csv<I>(&mut self, name: &str, header: &[&str], rows: I) -> Result<(), CliError>
    where
        I: IntoIterator<Item = Vec<String>>,
    {
        let mut w = csv::Writer::from_writer(Vec::new());
        let fail = |e: csv::Error| CliError::artifact(name, e);
        w.write_record(header).map_err(fail)?;
        for row in rows {
            w.write_record(&row).map_err(fail)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::artifact(name, e))?;
        self.write_bytes(name, &bytes)
    }

    /// Reads an input artifact, recording its checksum for the manifest.
    /// `hint` names the stage that produces it.
    pub fn read_input(&mut self, path: &Path, hint: &str) -> Result<Vec<u8>, CliError> {
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            ErrorKind::NotFound => CliError::Artifact(format!("{} not found; run `{hint}` first", path.display())),
            _ => CliError::artifact(path.display(), e),
        })?;
        let shown = path.strip_prefix(&self.root).unwrap_or(path);
        self.inputs.push(ArtifactRecord {
            path: shown.display().to_string(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
        Ok(bytes)
    }

    pub fn read_json<T: DeserializeOwned>(&mut self, path: &Path, hint: &str) -> Result<T, CliError> {
        let bytes = self.read_input(path, hint)?;
        let value: Value = serde_json::from_slice(&bytes).map_err(|e| CliError::artifact(path.display(), e))?;
        match value.get("schema_version").and_then(Value::as_u64) {
            Some(SCHEMA_VERSION) => {}
            other => {
                return Err(CliError::Artifact(format!(
                    "{}: unsupported schema_version {other:?}",
                    path.display()
                )))
            }
        }
        serde_json::from_value(value).map_err(|e| CliError::artifact(path.display(), e))
    }

    /// Files the outputs and inputs gathered since the last call under
    /// `stage` in the manifest. A manifest from a different config is
    /// replaced.
    pub fn record_stage(&mut self, stage: &str, config_sha256: &str, elapsed: Duration) -> Result<(), CliError> {
        let path = self.path(MANIFEST);
        let mut manifest = match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice::<Manifest>(&bytes)
                .ok()
                .filter(|m| m.config_sha256 == config_sha256 && m.schema_version == SCHEMA_VERSION)
                .unwrap_or_else(|| Manifest::new(config_sha256)),
            Err(_) => Manifest::new(config_sha256),
        };
        manifest.stages.insert(
            stage.into(),
            StageRecord {
                wall_clock_seconds: elapsed.as_secs_f64(),
                inputs: std::mem::take(&mut self.inputs),
                outputs: std::mem::take(&mut self.written),
            },
        );
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::artifact(MANIFEST, e))?;
        text.push('\n');
        let tmp = self.path(".manifest.json.tmp");
        fs::write(&tmp, text)
            .and_then(|_| fs::rename(&tmp, &path))
            .map_err(|e| CliError::artifact(path.display(), e))
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.root.join(LOCK));
    }
}

pub fn read_manifest(root: &Path) -> Result<Manifest, CliError> {
    let bytes = fs::read(root.join(MANIFEST)).map_err(|e| CliError::artifact(MANIFEST, e))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::artifact(MANIFEST, e))
}
