//! Run manifests: the resolved configuration, seed and input digests of one
//! invocation. The timestamp lives here and nowhere else.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use mulpro_core::{Error, Result};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

pub struct Manifest {
    fields: Map<String, Value>,
    inputs: Vec<Value>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64) -> Self {
        let mut fields = Map::new();
        fields.insert("tool".into(), json!("mulpro"));
        fields.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
        fields.insert("command".into(), json!(command));
        fields.insert("argv".into(), json!(std::env::args().collect::<Vec<_>>()));
        fields.insert("seed".into(), json!(seed));
        fields.insert("threads".into(), json!(rayon_threads()));
        Self {
            fields,
            inputs: Vec::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: Value) -> &mut Self {
        self.fields.insert(key.into(), value);
        self
    }

    /// Records an input file with its SHA-256.
    pub fn input(&mut self, role: &str, path: &Path) -> Result<&mut Self> {
        self.inputs.push(json!({
            "role": role,
            "path": path.display().to_string(),
            "sha256": sha256_file(path)?,
        }));
        Ok(self)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut fields = self.fields.clone();
        fields.insert("inputs".into(), Value::Array(self.inputs.clone()));
        let secs = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        fields.insert("created_unix".into(), json!(secs));
        let text = serde_json::to_string_pretty(&Value::Object(fields)).expect("manifest serializes");
        write_file(path, format!("{text}\n").as_bytes())
    }
}

fn rayon_threads() -> usize {
    mulpro_core::trainer::current_num_threads()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = read_file(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|source| Error::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// `<path>.<suffix>` next to `path`.
pub fn sidecar(path: &Path, suffix: &str) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    s.into()
}
