use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// Provenance block embedded in every JSON file the tool writes.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool: &'static str,
    pub version: &'static str,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    /// Only filled in with `--record-timing`, so that outputs stay byte-stable.
    pub wall_clock_seconds: Option<f64>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: &impl Serialize) -> Result<Self, CliError> {
        Ok(Self {
            command: command.to_string(),
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            seed,
            config: serde_json::to_value(config)
                .map_err(|e| CliError::Usage(format!("config echo: {e}")))?,
            inputs: Vec::new(),
            wall_clock_seconds: None,
        })
    }

    /// Reads `path`, records its digest and returns the contents.
    pub fn read_input(&mut self, path: &Path) -> Result<Vec<u8>, CliError> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(bytes)
    }
}

#[derive(Serialize)]
struct WithManifest<'a, T: Serialize> {
    #[serde(flatten)]
    body: &'a T,
    manifest: &'a RunManifest,
}

/// Writes `body` with a top-level `manifest` key added.
pub fn write_json(
    path: &Path,
    body: &impl Serialize,
    manifest: &RunManifest,
) -> Result<(), CliError> {
    let text = pcis_core::json::to_string(&WithManifest { body, manifest })?;
    std::fs::write(path, text)
        .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}
