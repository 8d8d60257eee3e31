use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use crate::config::ExperimentConfig;

/// What a run produced and how long each stage took.
#[derive(Debug, Clone, Default)]
pub struct RunManifest {
    pub config: String,
    /// `(key, path)` for every artifact, e.g. `model.32` or `codes.CNNBH.32.db`.
    pub files: Vec<(String, PathBuf)>,
    pub timings: Vec<(String, f64)>,
    pub train_errors: Vec<(usize, f64)>,
    /// `(bits, fold, held-out error)`.
    pub cv_errors: Vec<(usize, usize, f64)>,
}

impl RunManifest {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        RunManifest {
            config: cfg.to_text(),
            ..Default::default()
        }
    }

    pub fn file(&self, key: &str) -> Option<&Path> {
        self.files.iter().find(|(k, _)| k == key).map(|(_, p)| p.as_path())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("[config]\n");
        s.push_str(&self.config);
        s.push_str("\n[files]\n");
        for (k, p) in &self.files {
            let _ = writeln!(s, "{k} = {}", p.display());
        }
        s.push_str("\n[training]\n");
        for (bits, e) in &self.train_errors {
            let _ = writeln!(s, "train_error.{bits} = {e}");
        }
        for (bits, fold, e) in &self.cv_errors {
            let _ = writeln!(s, "cv_error.{bits}.{fold} = {e}");
        }
        s.push_str("\n[timings_seconds]\n");
        for (k, t) in &self.timings {
            let _ = writeln!(s, "{k} = {t:.3}");
        }
        s
    }

    /// Fails if any listed file is missing.
    pub fn verify(&self) -> Result<()> {
        for (k, p) in &self.files {
            if !p.is_file() {
                bail!("manifest entry {k} points to missing file {}", p.display());
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.verify()?;
        std::fs::write(path, self.to_text()).with_context(|| format!("writing {}", path.display()))
    }
}
