use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cevae::data::SynthConfig;
use cevae::evalkit::EvalConfig;
use cevae::scoring::ScoreConfig;
use cevae::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything a run needs; written next to every output as `run_config.json`.
///
/// A config file holds any subset of the sections. Values resolve as
/// command-line flag, then config file, then built-in default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub score: ScoreConfig,
    pub eval: EvalConfig,
}

pub const RUN_CONFIG_FILE: &str = "run_config.json";

/// A config file as parsed, plus the raw document for presence checks.
pub struct LoadedConfig {
    pub config: RunConfig,
    raw: serde_json::Value,
}

impl LoadedConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(LoadedConfig {
                config: RunConfig::default(),
                raw: serde_json::Value::Null,
            });
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
        // Typed parse first: serde_json reports line and column.
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
        let raw = serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
        Ok(LoadedConfig { config, raw })
    }

    /// Whether the file set the value at a JSON pointer such as `/train/arch/image_size`.
    pub fn sets(&self, pointer: &str) -> bool {
        self.raw.pointer(pointer).is_some()
    }
}

/// The file written into each output directory.
#[derive(Debug, Serialize)]
pub struct RunRecord<'a> {
    pub command: &'a str,
    pub paths: BTreeMap<&'a str, PathBuf>,
    pub config: &'a RunConfig,
}

impl RunRecord<'_> {
    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::data(e.to_string()))?;
        write_file(&dir.join(RUN_CONFIG_FILE), text.as_bytes())
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

pub fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))
}

/// Directory holding `file`, `.` for a bare file name.
pub fn parent_dir(file: &Path) -> PathBuf {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}
