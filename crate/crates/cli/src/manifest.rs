//! Output files with content hashes, recorded in run metadata.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use fusionet_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const RUN_FILE: &str = "run.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the directory holding the run file.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn unix_time() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

/// Collects every file a command writes under one root directory.
pub struct OutputDir {
    root: PathBuf,
    files: Vec<FileEntry>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(io(root))?;
        Ok(OutputDir {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io(parent))?;
        }
        std::fs::write(&path, bytes).map_err(io(&path))?;
        self.files.push(FileEntry {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf> {
        let mut s = serde_json::to_string_pretty(value).expect("value serialises");
        s.push('\n');
        self.write(rel, s.as_bytes())
    }

    /// Write `run.json` from `meta` plus the manifest.
    pub fn finish(self, command: &str, mut meta: serde_json::Map<String, serde_json::Value>) -> Result<()> {
        meta.insert("command".into(), command.into());
        meta.insert("finished_at_unix".into(), unix_time().into());
        meta.insert("files".into(), serde_json::to_value(&self.files).expect("entries serialise"));
        let path = self.root.join(RUN_FILE);
        let mut s = serde_json::to_string_pretty(&meta).expect("metadata serialises");
        s.push('\n');
        std::fs::write(&path, s).map_err(io(&path))
    }
}

#[derive(Debug, Deserialize)]
pub struct RunFile {
    #[serde(default)]
    pub files: Vec<FileEntry>,
}

/// Fail with an I/O error naming the first listed file that is missing.
pub fn check_listed_files(run_file: &Path) -> Result<RunFile> {
    let text = std::fs::read_to_string(run_file).map_err(io(run_file))?;
    let run: RunFile = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: run_file.to_path_buf(),
        source,
    })?;
    let dir = run_file.parent().unwrap_or(Path::new("."));
    for f in &run.files {
        let p = dir.join(&f.path);
        if !p.is_file() {
            return Err(Error::Io {
                path: p,
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "listed in manifest but missing"),
            });
        }
    }
    Ok(run)
}
