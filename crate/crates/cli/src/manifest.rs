use std::path::{Path, PathBuf};

use postedit::error::{Error, Result};
use postedit::training::config_digest;
use serde::Serialize;

/// Provenance record written next to every artifact a command produces.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub command_line: Vec<String>,
    pub tool_version: &'static str,
    pub config_digest: String,
    pub seed: Option<u64>,
    pub started: String,
    pub finished: String,
    pub outputs: Vec<PathBuf>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Collects provenance while a command runs.
pub struct Recorder {
    command: &'static str,
    started: String,
    digest: String,
    seed: Option<u64>,
    outputs: Vec<PathBuf>,
}

impl Recorder {
    /// `settings` is the effective configuration text; its digest is recorded.
    pub fn start(command: &'static str, settings: &str) -> Self {
        Self {
            command,
            started: now(),
            digest: config_digest(settings),
            seed: None,
            outputs: Vec::new(),
        }
    }

    pub fn seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        self.outputs.push(path.into());
    }

    /// Writes the manifest as pretty JSON to `path`.
    pub fn finish(self, path: &Path) -> Result<()> {
        let m = RunManifest {
            command: self.command.to_string(),
            command_line: std::env::args().collect(),
            tool_version: env!("CARGO_PKG_VERSION"),
            config_digest: self.digest,
            seed: self.seed,
            started: self.started,
            finished: now(),
            outputs: self.outputs,
        };
        let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::Storage { path: path.into(), source: e })
    }
}

/// `out.txt` -> `out.txt.manifest.json`.
pub fn beside(file: &Path) -> PathBuf {
    let mut s = file.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}
