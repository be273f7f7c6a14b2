//! Output directory bookkeeping. Files written through an [`OutputSet`] are
//! removed again unless the set is committed.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::json;

pub const TOOL_VERSION: &str = concat!("etas ", env!("CARGO_PKG_VERSION"));

pub struct OutputSet {
    dir: PathBuf,
    created_dir: bool,
    files: Vec<PathBuf>,
    committed: bool,
}

impl OutputSet {
    pub fn new(dir: &Path) -> Result<Self> {
        let created_dir = !dir.exists();
        std::fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(OutputSet {
            dir: dir.to_path_buf(),
            created_dir,
            files: Vec::new(),
            committed: false,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Creates (or truncates) `name` and writes it with `body`.
    pub fn write<F>(&mut self, name: &str, body: F) -> Result<PathBuf>
    where
        F: FnOnce(&mut BufWriter<File>) -> Result<()>,
    {
        let path = self.path(name);
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        self.files.push(path.clone());
        let mut w = BufWriter::new(file);
        body(&mut w).with_context(|| format!("writing {}", path.display()))?;
        w.flush().with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        self.write(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            w.write_all(b"\n")?;
            Ok(())
        })
    }

    /// `config.json`: the resolved configuration with the tool version.
    pub fn write_config_echo<T: Serialize>(&mut self, command: &str, config: &T) -> Result<PathBuf> {
        self.write_json(
            "config.json",
            &json!({ "tool": TOOL_VERSION, "command": command, "config": config }),
        )
    }

    /// Checks every written file is present and non-empty, then keeps them.
    pub fn commit(mut self) -> Result<Vec<PathBuf>> {
        for f in &self.files {
            let len = std::fs::metadata(f).with_context(|| format!("validating {}", f.display()))?.len();
            if len == 0 {
                anyhow::bail!("output {} is empty", f.display());
            }
        }
        self.committed = true;
        Ok(std::mem::take(&mut self.files))
    }
}

impl Drop for OutputSet {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for f in &self.files {
            let _ = std::fs::remove_file(f);
        }
        if self.created_dir {
            // only succeeds if nothing else was put there
            let _ = std::fs::remove_dir(&self.dir);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uncommitted_outputs_are_removed() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        {
            let mut out = OutputSet::new(&dir).unwrap();
            out.write_json("a.json", &json!({"x": 1})).unwrap();
            assert!(dir.join("a.json").exists());
        }
        assert!(!dir.exists());

        let mut out = OutputSet::new(&dir).unwrap();
        out.write_json("a.json", &json!({"x": 1})).unwrap();
        out.commit().unwrap();
        assert!(dir.join("a.json").exists());
    }
}
