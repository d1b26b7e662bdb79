use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::Failure;

pub const MANIFEST: &str = "manifest.json";

/// Output directory; every file lands via a temp file and a rename.
pub struct OutDir {
    pub dir: PathBuf,
}

impl OutDir {
    pub fn create(dir: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(dir).map_err(|e| Failure::Config(format!("cannot create {}: {e}", dir.display())))?;
        Ok(OutDir { dir: dir.to_path_buf() })
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<PathBuf, Failure> {
        let path = self.dir.join(name);
        let io = |e: std::io::Error| Failure::Compute(format!("writing {}: {e}", path.display()));
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(io)?;
        tmp.write_all(contents.as_bytes()).map_err(io)?;
        tmp.as_file().sync_all().map_err(io)?;
        tmp.persist(&path).map_err(|e| io(e.error))?;
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf, Failure> {
        let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Compute(e.to_string()))?;
        self.write(name, &(text + "\n"))
    }

    pub fn manifest(&self, command: &str, resolved: Value) -> Result<PathBuf, Failure> {
        let m = serde_json::json!({
            "command": command,
            "resolved_config": resolved,
            "version": env!("CARGO_PKG_VERSION"),
            "timestamp": chrono::Utc::now().to_rfc3339(),
        });
        self.write_json(MANIFEST, &m)
    }
}
