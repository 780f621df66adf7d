//! TOML run configuration.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use boxmask_core::pipeline::PipelineConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Overrides `pipeline.train.seed` when set.
    pub seed: Option<u64>,
    /// Threads for the validation pass; `--workers` takes precedence.
    pub workers: Option<usize>,
    pub data: DataPaths,
    pub pipeline: PipelineConfig,
}

impl RunConfig {
    /// Parses `path`; relative data paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.train, &mut cfg.data.val].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(seed) = cfg.seed {
            cfg.pipeline.train.seed = seed;
        }
        cfg.pipeline.validate().with_context(|| format!("invalid pipeline settings in {}", path.display()))?;
        if cfg.workers == Some(0) {
            bail!("workers must be at least 1");
        }
        Ok(cfg)
    }
}

pub fn require_dir(path: &Path, what: &str) -> Result<()> {
    if !path.is_dir() {
        bail!("{what} {} is not a directory", path.display());
    }
    Ok(())
}

/// Creates `path` so that later writes cannot fail on a missing directory.
pub fn prepare_out_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating output directory {}", path.display()))
}

pub fn prepare_out_file(path: &Path) -> Result<()> {
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(parent) => prepare_out_dir(parent),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let text = toml::to_string(&RunConfig::default()).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("colour = 3").is_err());
        assert!(toml::from_str::<RunConfig>("[pipeline]\nnum_frame = 3").is_err());
        assert!(toml::from_str::<RunConfig>("[pipeline.train]\nlearn_rate = 0.1").is_err());
        assert!(toml::from_str::<RunConfig>("[pipeline.model]\nwidth = 3").is_err());
    }

    #[test]
    fn relative_paths_and_seed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 9\n[data]\ntrain = \"d/train\"\n[pipeline]\nnum_frames = 5\n").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.data.train.unwrap(), dir.path().join("d/train"));
        assert_eq!(cfg.pipeline.train.seed, 9);
        assert_eq!(cfg.pipeline.num_frames, 5);
        std::fs::write(&path, "[pipeline]\nnum_frames = 0\n").unwrap();
        assert!(RunConfig::load(&path).is_err());
    }
}
