use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::error::CliError;

/// Output directory plus the run labels embedded in every file.
pub struct Output {
    pub dir: PathBuf,
    pub config_sha256: String,
    pub seed: u64,
}

impl Output {
    pub fn new(dir: PathBuf, config_sha256: String, seed: u64) -> Result<Self, CliError> {
        std::fs::create_dir_all(&dir)
            .map_err(|e| CliError::io(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self {
            dir,
            config_sha256,
            seed,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>, CliError> {
        let path = self.path(name);
        let file = File::create(&path)
            .map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))?;
        Ok(BufWriter::new(file))
    }

    pub fn metadata(&self) -> Value {
        json!({
            "config_sha256": self.config_sha256,
            "seed": self.seed,
            "version": env!("CARGO_PKG_VERSION"),
        })
    }

    /// Writes a CSV whose first line is `# config_sha256=... seed=...`.
    pub fn csv<F>(&self, name: &str, body: F) -> Result<PathBuf, CliError>
    where
        F: FnOnce(&mut BufWriter<File>) -> Result<(), CliError>,
    {
        let mut w = self.create(name)?;
        writeln!(w, "# config_sha256={} seed={}", self.config_sha256, self.seed)?;
        body(&mut w)?;
        w.flush()?;
        Ok(self.path(name))
    }

    /// Writes `{"metadata": ..., key: value, ...extra}` as pretty JSON.
    pub fn json<T: Serialize>(&self, name: &str, key: &str, value: &T, extra: Value) -> Result<PathBuf, CliError> {
        let mut doc = json!({ "metadata": self.metadata() });
        doc[key] = serde_json::to_value(value)?;
        if let Value::Object(fields) = extra {
            for (k, v) in fields {
                doc[k] = v;
            }
        }
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, &doc)?;
        writeln!(w)?;
        w.flush()?;
        Ok(self.path(name))
    }
}

pub fn announce(path: &Path) {
    println!("wrote {}", path.display());
}
