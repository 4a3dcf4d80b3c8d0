//! The run directory: `config.json`, `data/`, `plans/`, `traces/`, `plots/`
//! and `report.csv` under one root.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

pub const CONFIG: &str = "config.json";
pub const DATASET: &str = "data/dataset.csv";
pub const CHECKPOINT: &str = "data/classifier.json";
pub const HISTORY: &str = "data/history.csv";
pub const DETECTION: &str = "data/detection.csv";
pub const PLANS: &str = "plans";
pub const TRACES: &str = "traces";
pub const PLOTS: &str = "plots";
pub const REPORT: &str = "report.csv";

pub struct Output {
    root: PathBuf,
    force: bool,
}

impl Output {
    pub fn new(root: &Path, force: bool) -> Result<Self> {
        std::fs::create_dir_all(root).with_context(|| format!("cannot create output directory {}", root.display()))?;
        Ok(Self { root: root.to_path_buf(), force })
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    fn ensure_parent(path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display()))?;
        }
        Ok(())
    }

    /// Errors if `rel` exists, unless the run was started with `--force`.
    pub fn check_fresh(&self, rel: impl AsRef<Path>) -> Result<PathBuf> {
        let path = self.path(rel);
        if path.exists() && !self.force {
            bail!("{} already exists; pass --force to overwrite", path.display());
        }
        Ok(path)
    }

    /// Opens a primary artifact for writing, refusing to clobber it without
    /// `--force`.
    pub fn create(&self, rel: impl AsRef<Path>) -> Result<BufWriter<File>> {
        let path = self.check_fresh(rel)?;
        Self::ensure_parent(&path)?;
        let file = File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
        Ok(BufWriter::new(file))
    }

    /// Writes a derived file (config echo, plots) that is always regenerated.
    pub fn overwrite(&self, rel: impl AsRef<Path>, contents: &str) -> Result<PathBuf> {
        let path = self.path(rel);
        Self::ensure_parent(&path)?;
        let mut f = File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
        f.write_all(contents.as_bytes())?;
        Ok(path)
    }

    /// Clears a trace directory before it is rewritten.
    pub fn fresh_dir(&self, rel: impl AsRef<Path>) -> Result<PathBuf> {
        let path = self.check_fresh(rel)?;
        if path.exists() {
            std::fs::remove_dir_all(&path).with_context(|| format!("cannot clear {}", path.display()))?;
        }
        std::fs::create_dir_all(&path)?;
        Ok(path)
    }
}

/// Finishes a buffered artifact so write errors are reported.
pub fn finish(mut w: BufWriter<File>) -> Result<()> {
    w.flush()?;
    Ok(())
}
