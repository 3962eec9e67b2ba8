//! Per-run record of what was run, how long each stage took and what went wrong.

use lidarseg::{Error, Result};
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FrameRecord {
    pub frame: usize,
    pub points_in: usize,
    /// Labels written per mode (or pixels projected, for `project`).
    pub labels_out: usize,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub modes: Vec<String>,
    /// Objectness source per mode: `model`, `scores` or `none`.
    pub scorer: BTreeMap<String, String>,
    /// `ok`, or `failed` with `error` set.
    pub status: String,
    pub error: Option<String>,
    /// Wall-clock seconds per stage, summed over frames.
    pub timings: BTreeMap<String, f64>,
    pub total_seconds: f64,
    pub frames: Vec<FrameRecord>,
    pub warnings: Vec<String>,
    /// Training runs only.
    pub epoch_losses: Vec<f64>,
    pub final_loss: Option<f64>,
}

impl RunManifest {
    pub fn new(command: &str, config_hash: String, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash,
            seed,
            status: "running".into(),
            ..Self::default()
        }
    }

    /// Runs `f`, adding its wall-clock time to `stage`.
    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        *self.timings.entry(stage.to_string()).or_insert(0.0) += start.elapsed().as_secs_f64();
        out
    }

    pub fn warn(&mut self, message: impl Into<String>) {
        let message = message.into();
        log::warn!("{message}");
        self.warnings.push(message);
    }

    pub fn finish(&mut self, outcome: &Result<()>) {
        self.total_seconds = self.timings.values().fold(0.0, |a, b| a + b);
        match outcome {
            Ok(()) => {
                self.status = "ok".into();
                self.error = None;
            }
            Err(e) => {
                self.status = "failed".into();
                self.error = Some(e.to_string());
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }
}
