use std::path::{Path, PathBuf};

use roft_core::bench::Shot;
use roft_core::data::{SplitScheme, TaskKind, DEFAULT_FRACTIONS};
use roft_core::pretrain::PretrainConfig;
use roft_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Deserialize;

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    pub hidden: usize,
    pub layers: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self { hidden: 32, layers: 3 }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainRun {
    pub dataset: PathBuf,
    #[serde(default)]
    pub task_kind: Option<TaskKind>,
    #[serde(default)]
    pub encoder: EncoderSpec,
    #[serde(default)]
    pub pretrain: PretrainConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneRun {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    #[serde(default)]
    pub task_kind: Option<TaskKind>,
    #[serde(default = "scaffold")]
    pub split: SplitScheme,
    #[serde(default = "fractions")]
    pub fractions: [f64; 3],
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default = "full")]
    pub shot: Shot,
    /// Parsed separately so that a bad `kind` is reported by name.
    pub strategy: serde_json::Value,
}

fn scaffold() -> SplitScheme {
    SplitScheme::Scaffold
}
fn fractions() -> [f64; 3] {
    DEFAULT_FRACTIONS
}
fn full() -> Shot {
    Shot::Full
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))
}

pub fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

/// `path` resolved against `base`, which must name an existing file.
pub fn existing(base: &Path, path: &Path) -> Result<PathBuf> {
    let p = if path.is_absolute() { path.to_path_buf() } else { base.join(path) };
    if p.is_file() {
        Ok(p)
    } else {
        Err(io(&p, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")))
    }
}

/// Directory of the config file, against which its paths resolve.
pub fn base_dir(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}
