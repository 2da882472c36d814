//! Run configuration files and run manifests.

use std::fs;
use std::path::{Path, PathBuf};

use lidarmix::trainer::{Mode, TrainConfig};
use lidarmix::{Error, Result};
use serde::{Deserialize, Serialize};

/// Dataset locations. Relative paths are resolved against the directory of
/// the config file they were read from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    /// Labeled target-domain frames used for reports.
    pub validation: Option<PathBuf>,
    pub remap: Option<PathBuf>,
    /// One target frame name per line; these frames are used with labels.
    pub labeled_frames: Option<PathBuf>,
    /// Model to start from (finetune, adapt) or to score (eval).
    pub checkpoint: Option<PathBuf>,
}

impl DataConfig {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.source,
            &mut self.target,
            &mut self.validation,
            &mut self.remap,
            &mut self.labeled_frames,
            &mut self.checkpoint,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn require<'a>(field: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
        field.as_deref().ok_or_else(|| Error::Config(format!("data.{name} is not set")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.data.resolve(base);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Sets one numeric training parameter by name.
    pub fn set_param(&mut self, name: &str, value: f64) -> Result<()> {
        let t = &mut self.train;
        match name {
            "zeta" => t.selection.zeta = value,
            "alpha" => t.selection.alpha = value,
            "mu" => t.selection.mu = value,
            "beta" => t.beta = value,
            "gamma" => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::Config(format!("gamma must be a positive integer, got {value}")));
                }
                t.gamma = value as u64;
            }
            _ => return Err(Error::Config(format!("unknown parameter {name:?}"))),
        }
        Ok(())
    }
}

/// Everything needed to rerun a command: the resolved configuration plus
/// the command that consumed it. A manifest is itself a valid config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run: RunInfo,
    pub data: DataConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub mode: Mode,
    pub out_dir: PathBuf,
}

pub fn version_string() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

impl RunManifest {
    pub fn new(command: &str, cfg: &RunConfig, out_dir: &Path) -> Self {
        let mut data = cfg.data.clone();
        data.resolve(&std::env::current_dir().unwrap_or_default());
        Self {
            run: RunInfo {
                command: command.to_string(),
                version: version_string(),
                seed: cfg.train.seed,
                mode: cfg.train.mode,
                out_dir: out_dir.to_path_buf(),
            },
            data,
            train: cfg.train.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest fields are serializable")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml())?;
        Ok(())
    }
}

/// Frame names from a list file: one per line, `#` comments and blank lines
/// skipped.
pub fn read_frame_list(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read frame list {}: {e}", path.display())))?;
    Ok(text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}
