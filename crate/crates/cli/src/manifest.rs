//! Run manifest: what was run, with which settings, and a checksum of every output.

use std::path::PathBuf;
use std::time::Duration;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{Common, ToleranceOverrides};

#[derive(Debug, Serialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub argv: Vec<String>,
    pub config: String,
    pub config_sha256: Option<String>,
    pub seed: u64,
    pub tolerance_overrides: ToleranceOverrides,
    pub output_dir: String,
    pub outputs: Vec<OutputFile>,
    pub exit_code: u8,
    pub duration_seconds: f64,
    #[serde(skip)]
    dir: PathBuf,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Manifest {
    pub fn new(command: &str, common: &Common, argv: &[String]) -> Manifest {
        Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            argv: argv.to_vec(),
            config: common.config.display().to_string(),
            config_sha256: std::fs::read(&common.config).ok().map(|b| sha256_hex(&b)),
            seed: common.seed,
            tolerance_overrides: common.overrides.clone(),
            output_dir: common.out.display().to_string(),
            outputs: Vec::new(),
            exit_code: 0,
            duration_seconds: 0.0,
            dir: common.out.clone(),
        }
    }

    /// Writes `name` into the output directory and records its checksum.
    pub fn output(&mut self, name: &str, contents: &str) -> std::io::Result<()> {
        std::fs::write(self.dir.join(name), contents)?;
        self.outputs.push(OutputFile {
            path: name.to_string(),
            sha256: sha256_hex(contents.as_bytes()),
            bytes: contents.len(),
        });
        Ok(())
    }

    pub fn finish(&mut self, elapsed: Duration, exit_code: u8) {
        self.duration_seconds = elapsed.as_secs_f64();
        self.exit_code = exit_code;
    }

    pub fn write(&self) -> std::io::Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(self.dir.join("manifest.json"), text)
    }
}
