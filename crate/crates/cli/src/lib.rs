//! Batch front end for the lidarseg pipeline: scans, projection, pixel
//! scoring, rigid flow and the Bayes filter, then evaluation.
//!
//! Every command reads one [`config::PipelineConfig`] and writes its outputs
//! and a `<command>.manifest.json` under the configured output directory.

pub mod config;
pub mod dataset;
pub mod manifest;
pub mod pipeline;
pub mod report;

use config::{Command, PipelineConfig};
use lidarseg::{Error, Result};
use manifest::RunManifest;

/// Process exit code for an error: 1 config, 2 data, 3 numerical.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        Error::Numerical(_) => 3,
        _ => 2,
    }
}

pub fn manifest_path(cfg: &PipelineConfig, command: Command) -> std::path::PathBuf {
    cfg.output
        .dir
        .join(format!("{}.manifest.json", command.name()))
}

/// Validates `cfg` for `command`, runs `body`, and writes the manifest
/// whether or not the run succeeded.
pub fn run<T>(
    command: Command,
    cfg: &PipelineConfig,
    body: impl FnOnce(&PipelineConfig, &mut RunManifest) -> Result<T>,
) -> (RunManifest, Result<T>) {
    let mut manifest = RunManifest::new(command.name(), cfg.hash(), cfg.seed);
    let result = cfg
        .validate(command)
        .and_then(|_| dataset::create_dir(&cfg.output.dir))
        .and_then(|_| body(cfg, &mut manifest));
    let status = result.as_ref().map(|_| ()).map_err(clone_error);
    manifest.finish(&status);
    if cfg.output.dir.is_dir() {
        if let Err(e) = manifest.write(&manifest_path(cfg, command)) {
            log::error!("could not write manifest: {e}");
        }
    }
    (manifest, result)
}

fn clone_error(e: &Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(m.clone()),
        Error::Numerical(m) => Error::Numerical(m.clone()),
        other => Error::InvalidInput(other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::Config("x".into())), 1);
        assert_eq!(exit_code(&Error::Dimension("x".into())), 2);
        assert_eq!(
            exit_code(&Error::Parse {
                line: 1,
                message: "x".into()
            }),
            2
        );
        assert_eq!(exit_code(&Error::Numerical("x".into())), 3);
    }

    #[test]
    fn manifest_written_on_failure() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = PipelineConfig::default();
        cfg.output.dir = dir.path().join("out");
        let empty = dir.path().join("scans");
        std::fs::create_dir(&empty).unwrap();
        cfg.input.scans = Some(empty);
        let (m, r) = run(Command::Project, &cfg, pipeline::project_scans);
        assert!(r.is_err());
        assert_eq!(m.status, "failed");
        let text = std::fs::read_to_string(manifest_path(&cfg, Command::Project)).unwrap();
        assert!(text.contains("\"failed\""));
    }
}
