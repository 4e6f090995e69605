use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};
use visgeo_core::{io, Result};

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "-", env!("VISGEO_GIT_DESCRIBE"));

#[derive(Clone, Debug, Serialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub seed: u64,
    pub threads: usize,
    pub inputs: Vec<InputFile>,
    pub outputs: Vec<String>,
    pub version: &'static str,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub passed: bool,
}

pub fn now_unix() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn new(command: &str, config_path: Option<&Path>, seed: u64, threads: usize) -> Self {
        Self {
            command: command.to_string(),
            config_path: config_path.map(Path::to_path_buf),
            seed,
            threads,
            inputs: vec![],
            outputs: vec![],
            version: VERSION,
            started_unix: now_unix(),
            finished_unix: 0.0,
            passed: false,
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| visgeo_core::Error::io(path, e))?;
        self.inputs.push(InputFile {
            path: path.to_path_buf(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    pub fn write(mut self, out_dir: &Path, passed: bool) -> Result<()> {
        self.finished_unix = now_unix();
        self.passed = passed;
        let text = serde_json::to_string_pretty(&self).expect("manifest serialises");
        io::write_text(&out_dir.join("manifest.json"), &(text + "\n"))
    }
}
