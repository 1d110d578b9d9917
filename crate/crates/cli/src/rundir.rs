use std::fs;
use std::path::{Path, PathBuf};

use pcn::data::Provenance;

use crate::{ExperimentConfig, Failure};

/// Name of the resolved config written into every run directory.
pub const RESOLVED_CONFIG: &str = "config.toml";

/// A fresh output directory for one subcommand invocation.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
    pub provenance: Provenance,
}

impl RunDir {
    /// Creates `<root>/<command>-<UTC timestamp>`, adding a numeric suffix
    /// rather than reusing an existing directory, and writes the resolved
    /// config into it.
    pub fn create(root: &Path, command: &str, cfg: &ExperimentConfig) -> Result<Self, Failure> {
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
        let base = format!("{command}-{stamp}");
        fs::create_dir_all(root).map_err(|e| Failure::data(format!("cannot create {}: {e}", root.display())))?;
        let mut path = root.join(&base);
        let mut n = 1;
        loop {
            match fs::create_dir(&path) {
                Ok(()) => break,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    n += 1;
                    path = root.join(format!("{base}-{n}"));
                }
                Err(e) => return Err(Failure::data(format!("cannot create {}: {e}", path.display()))),
            }
        }
        let run = Self::at(path, cfg);
        run.write(RESOLVED_CONFIG, cfg.to_toml())?;
        Ok(run)
    }

    /// Uses an existing directory as is.
    pub fn at(path: PathBuf, cfg: &ExperimentConfig) -> Self {
        Self { path, provenance: Provenance { config_hash: cfg.hash(), master_seed: cfg.seed } }
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf, Failure> {
        let p = self.file(name);
        fs::write(&p, contents).map_err(|e| Failure::data(format!("cannot write {}: {e}", p.display())))?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn never_reuses_a_directory() {
        let root = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::default();
        let a = RunDir::create(root.path(), "eval", &cfg).unwrap();
        let b = RunDir::create(root.path(), "eval", &cfg).unwrap();
        assert_ne!(a.path, b.path);
        let back = ExperimentConfig::load(&a.file(RESOLVED_CONFIG)).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(a.provenance.config_hash, cfg.hash());
    }
}
