//! Run manifests: what was run, on which inputs, producing which files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use spcnn_core::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    /// Effective configuration of the command (flags merged with config files).
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    /// SHA-256 over the input files, see [`content_hash`].
    pub input_hash: String,
    pub inputs: Vec<PathBuf>,
    pub artifacts: Vec<PathBuf>,
    pub threads: usize,
    pub started_at: String,
    pub finished_at: String,
}

impl RunManifest {
    pub fn begin(command: &str, config: serde_json::Value, seed: Option<u64>, inputs: &[PathBuf], threads: usize) -> Result<Self> {
        Ok(RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config,
            seed,
            input_hash: content_hash(inputs)?,
            inputs: inputs.to_vec(),
            artifacts: Vec::new(),
            threads,
            started_at: now(),
            finished_at: String::new(),
        })
    }

    /// Stamps the finish time and writes the manifest as pretty JSON.
    pub fn finish(mut self, path: &Path) -> Result<RunManifest> {
        self.finished_at = now();
        let json = serde_json::to_string_pretty(&self).expect("manifest serialises");
        fs::write(path, json + "\n").map_err(|e| io_err(path, e))?;
        Ok(self)
    }

    /// Equality ignoring timestamps.
    pub fn same_run(&self, other: &RunManifest) -> bool {
        let strip = |m: &RunManifest| RunManifest {
            started_at: String::new(),
            finished_at: String::new(),
            ..m.clone()
        };
        strip(self) == strip(other)
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Git-style content hash: every file contributes `blob <len>\0<bytes>`
/// hashed on its own, and the listing of `relative-path\0file-hash` lines,
/// sorted by path, is hashed again. Directories are walked recursively.
pub fn content_hash(inputs: &[PathBuf]) -> Result<String> {
    let mut entries = Vec::new();
    for root in inputs {
        collect(root, root, &mut entries)?;
    }
    entries.sort();
    let mut outer = Sha256::new();
    for (name, digest) in entries {
        outer.update(name.as_bytes());
        outer.update([0u8]);
        outer.update(digest.as_bytes());
        outer.update(b"\n");
    }
    Ok(hex::encode(outer.finalize()))
}

fn collect(root: &Path, path: &Path, out: &mut Vec<(String, String)>) -> Result<()> {
    let meta = fs::metadata(path).map_err(|e| io_err(path, e))?;
    if meta.is_dir() {
        let mut children: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| io_err(path, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| io_err(path, err)))
            .collect::<Result<_>>()?;
        children.sort();
        for c in children {
            collect(root, &c, out)?;
        }
    } else {
        let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
        let mut h = Sha256::new();
        h.update(format!("blob {}\0", bytes.len()).as_bytes());
        h.update(&bytes);
        let rel = path.strip_prefix(root).unwrap_or(path);
        let name = Path::new(root.file_name().unwrap_or_default()).join(rel);
        out.push((name.to_string_lossy().into_owned(), hex::encode(h.finalize())));
    }
    Ok(())
}
