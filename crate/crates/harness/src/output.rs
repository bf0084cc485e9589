//! Output directories, tracked file writes and the run manifest.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::csv_out::{emit_csv, emit_records, Cell, CsvRecord, Schema};
use crate::error::{HarnessError, Result};

/// Environment variable that relocates every output directory.
pub const OUTPUT_ROOT_ENV: &str = "ZSQ_OUTPUT_ROOT";

pub const MANIFEST_NAME: &str = "manifest.json";

/// Resolves the output directory of a command. Relative paths, and the
/// default `zsq-out/<command>`, are placed under `$ZSQ_OUTPUT_ROOT` when set.
pub fn output_dir(explicit: Option<&Path>, command: &str) -> PathBuf {
    let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from);
    match (explicit, root) {
        (Some(p), _) if p.is_absolute() => p.to_path_buf(),
        (Some(p), Some(root)) => root.join(p),
        (Some(p), None) => p.to_path_buf(),
        (None, Some(root)) => root.join(command),
        (None, None) => Path::new("zsq-out").join(command),
    }
}

/// SHA-256 of the canonical JSON form of `value`. Object keys are sorted,
/// so the hash does not depend on the order keys were written in.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let canonical = serde_json::to_value(value)?;
    Ok(hex::encode(Sha256::digest(canonical.to_string().as_bytes())))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn unix_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct OutputEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub versions: BTreeMap<String, String>,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
    pub config: serde_json::Value,
    pub warnings: Vec<String>,
    pub summary: serde_json::Value,
    pub outputs: Vec<OutputEntry>,
}

/// Every file a command writes goes through here so the manifest can list it.
#[derive(Debug)]
pub struct OutputSet {
    dir: PathBuf,
    command: String,
    started: u64,
    files: Vec<PathBuf>,
    warnings: Vec<String>,
}

impl OutputSet {
    pub fn create(dir: PathBuf, command: &str) -> Result<Self> {
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(Self {
            dir,
            command: command.to_string(),
            started: unix_millis(),
            files: Vec::new(),
            warnings: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn warn(&mut self, msg: String) {
        log::warn!("{msg}");
        self.warnings.push(msg);
    }

    fn claim(&mut self, name: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        self.files.push(path.clone());
        Ok(path)
    }

    pub fn write_text(&mut self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.claim(name)?;
        fs::write(&path, contents).map_err(io_err(&path))?;
        Ok(path)
    }

    /// Writes a file outside the output directory and lists it in the manifest.
    pub fn write_external(&mut self, path: &Path, contents: &str) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(path, contents).map_err(io_err(path))?;
        self.files.push(path.to_path_buf());
        Ok(())
    }

    fn with_file(&mut self, name: &str, body: impl FnOnce(BufWriter<File>) -> Result<()>) -> Result<PathBuf> {
        let path = self.claim(name)?;
        let file = File::create(&path).map_err(io_err(&path))?;
        if let Err(e) = body(BufWriter::new(file)) {
            // Drop the partial file; a failed write leaves nothing behind.
            let _ = fs::remove_file(&path);
            self.files.pop();
            return Err(e);
        }
        Ok(path)
    }

    pub fn write_csv(&mut self, name: &str, schema: &Schema, rows: impl IntoIterator<Item = Vec<Cell>>) -> Result<PathBuf> {
        self.with_file(name, |w| emit_csv(schema, rows, w))
    }

    pub fn write_records<'a, R: CsvRecord + 'a>(
        &mut self,
        name: &str,
        schema: &Schema,
        records: impl IntoIterator<Item = &'a R>,
    ) -> Result<PathBuf> {
        self.with_file(name, |w| emit_records(schema, records, w))
    }

    /// Hashes every written file and writes `manifest.json` last.
    pub fn finish<C: Serialize>(
        self,
        config: &C,
        seed: Option<u64>,
        summary: serde_json::Value,
    ) -> Result<RunManifest> {
        let mut outputs = Vec::with_capacity(self.files.len());
        for path in &self.files {
            let bytes = fs::read(path).map_err(io_err(path))?;
            let shown = path.strip_prefix(&self.dir).unwrap_or(path);
            outputs.push(OutputEntry {
                path: shown.to_string_lossy().replace('\\', "/"),
                bytes: bytes.len() as u64,
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
        let versions = BTreeMap::from([
            ("zsq-core".to_string(), zsq_core::VERSION.to_string()),
            ("zsq-harness".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ]);
        let manifest = RunManifest {
            command: self.command,
            config_hash: config_hash(config)?,
            seed,
            versions,
            started_unix_ms: self.started,
            finished_unix_ms: unix_millis(),
            config: serde_json::to_value(config)?,
            warnings: self.warnings,
            summary,
            outputs,
        };
        let path = self.dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        fs::write(&path, text).map_err(io_err(&path))?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Ab {
        a: u32,
        b: &'static str,
    }

    #[derive(Serialize)]
    struct Ba {
        b: &'static str,
        a: u32,
    }

    #[test]
    fn hash_ignores_field_order() {
        let one = config_hash(&Ab { a: 1, b: "x" }).unwrap();
        let two = config_hash(&Ba { b: "x", a: 1 }).unwrap();
        assert_eq!(one, two);
        assert_ne!(one, config_hash(&Ab { a: 2, b: "x" }).unwrap());
        assert_eq!(one.len(), 64);
    }

    #[test]
    fn failed_csv_leaves_no_file() {
        let dir = std::env::temp_dir().join(format!("zsq-output-test-{}", std::process::id()));
        let mut out = OutputSet::create(dir.clone(), "test").unwrap();
        let bad = out.write_csv("bad.csv", &crate::csv_out::GAP, vec![vec![Cell::Missing]]);
        assert!(bad.is_err());
        assert!(!dir.join("bad.csv").exists());
        out.write_csv("good.csv", &crate::csv_out::GAP, vec![]).unwrap();
        let manifest = out.finish(&Ab { a: 1, b: "x" }, None, serde_json::Value::Null).unwrap();
        assert_eq!(manifest.outputs.len(), 1);
        assert_eq!(manifest.outputs[0].path, "good.csv");
        fs::remove_dir_all(dir).unwrap();
    }
}
