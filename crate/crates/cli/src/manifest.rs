use std::fs;
use std::path::{Path, PathBuf};

use flue_core::checkpoint::file_hash;
use flue_core::config::PipelineConfig;
use serde::Serialize;

use crate::Failure;

#[derive(Debug, Serialize)]
pub struct InputRecord {
    pub path: String,
    pub sha256: String,
}

/// Provenance record written next to every stage's outputs.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub args: Vec<String>,
    pub inputs: Vec<InputRecord>,
    pub outputs: Vec<String>,
    pub config: PipelineConfig,
    pub summary: serde_json::Value,
}

impl Manifest {
    pub fn new(command: &str, config: &PipelineConfig) -> Self {
        Self {
            command: command.to_string(),
            tool_version: flue_core::TOOL_VERSION.to_string(),
            args: std::env::args().skip(1).collect(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            config: config.clone(),
            summary: serde_json::Value::Null,
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), Failure> {
        let sha256 = file_hash(path)?;
        self.inputs.push(InputRecord { path: path.display().to_string(), sha256 });
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Write `manifest.json` and the resolved `config.ini` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<(), Failure> {
        self.write_files(&dir.join("manifest.json"), &dir.join("config.ini"))
    }

    /// For single-file outputs: `<file>.manifest.json` and `<file>.config.ini`.
    pub fn write_beside(&self, file: &Path) -> Result<(), Failure> {
        let with = |ext: &str| -> PathBuf {
            let mut s = file.as_os_str().to_owned();
            s.push(ext);
            PathBuf::from(s)
        };
        self.write_files(&with(".manifest.json"), &with(".config.ini"))
    }

    fn write_files(&self, manifest: &Path, config: &Path) -> Result<(), Failure> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Failure::data(e.to_string()))?;
        write(manifest, &(json + "\n"))?;
        write(config, &self.config.render())
    }
}

pub fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

pub fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}
