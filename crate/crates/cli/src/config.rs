//! Single-file run configuration with one section per stage.

use lidarseg::eval::{ApConfig, ClusterConfig};
use lidarseg::filter::{FilterConfig, ObjectUpdate};
use lidarseg::flow::FlowConfig;
use lidarseg::projection::ProjectionConfig;
use lidarseg::scorer::TrainConfig;
use lidarseg::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// How object evidence enters the filter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Recursive object update.
    Exp1,
    /// Instantaneous object score.
    Exp2,
    /// Motion only.
    Exp3,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Exp1, Mode::Exp2, Mode::Exp3];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Exp1 => "exp1",
            Mode::Exp2 => "exp2",
            Mode::Exp3 => "exp3",
        }
    }

    pub fn object_update(self) -> ObjectUpdate {
        match self {
            Mode::Exp1 => ObjectUpdate::Recursive,
            Mode::Exp2 => ObjectUpdate::Instantaneous,
            Mode::Exp3 => ObjectUpdate::Off,
        }
    }

    pub fn uses_scorer(self) -> bool {
        self != Mode::Exp3
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode '{s}' (expected exp1, exp2 or exp3)"))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputConfig {
    /// Directory of `NNNNNN.bin` Velodyne scans.
    pub scans: Option<PathBuf>,
    /// KITTI pose file, one sensor-to-world pose per scan.
    pub poses: Option<PathBuf>,
    /// Directory of `NNNNNN.csv` ground-truth files.
    pub ground_truth: Option<PathBuf>,
    /// Scorer checkpoint.
    pub model: Option<PathBuf>,
    /// Directory of `NNNNNN.bin` objectness score files.
    pub scores: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Also write range/intensity/height PGMs during classify.
    pub debug_images: bool,
    /// Also write the per-point motion field of every frame pair.
    pub motion: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            debug_images: false,
            motion: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Fanned out to every stochastic stage.
    pub seed: u64,
    pub modes: Vec<Mode>,
    pub input: InputConfig,
    pub output: OutputConfig,
    pub projection: ProjectionConfig,
    pub scorer: TrainConfig,
    pub flow: FlowConfig,
    pub filter: FilterConfig,
    pub cluster: ClusterConfig,
    pub eval: ApConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            modes: vec![Mode::Exp1],
            input: InputConfig::default(),
            output: OutputConfig::default(),
            projection: ProjectionConfig::default(),
            scorer: TrainConfig::default(),
            flow: FlowConfig::default(),
            filter: FilterConfig::default(),
            cluster: ClusterConfig::default(),
            eval: ApConfig::default(),
        }
    }
}

/// Which command a configuration is checked for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Project,
    Train,
    Classify,
    Eval,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Project => "project",
            Command::Train => "train",
            Command::Classify => "classify",
            Command::Eval => "eval",
        }
    }
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; relative paths are taken from the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let i = &mut self.input;
        for p in [
            &mut i.scans,
            &mut i.poses,
            &mut i.ground_truth,
            &mut i.model,
            &mut i.scores,
        ] {
            resolve(base, p);
        }
        if self.output.dir.is_relative() {
            self.output.dir = base.join(&self.output.dir);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("pipeline config serializes")
    }

    /// SHA-256 of the canonical serialization, as lowercase hex.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Sub-configs with the top-level seed applied.
    pub fn seeded_flow(&self) -> FlowConfig {
        FlowConfig {
            seed: self.seed,
            ..self.flow.clone()
        }
    }

    pub fn seeded_scorer(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.scorer.clone()
        }
    }

    pub fn filter_for(&self, mode: Mode) -> FilterConfig {
        FilterConfig {
            object_update: mode.object_update(),
            ..self.filter.clone()
        }
    }

    fn require_dir(what: &str, p: &Option<PathBuf>) -> Result<()> {
        match p {
            None => Err(Error::Config(format!("input.{what} is not set"))),
            Some(p) if !p.is_dir() => Err(Error::Config(format!(
                "input.{what} {} is not a directory",
                p.display()
            ))),
            Some(_) => Ok(()),
        }
    }

    fn require_file(what: &str, p: &Option<PathBuf>) -> Result<()> {
        match p {
            None => Err(Error::Config(format!("input.{what} is not set"))),
            Some(p) if !p.is_file() => Err(Error::Config(format!(
                "input.{what} {} does not exist",
                p.display()
            ))),
            Some(_) => Ok(()),
        }
    }

    /// Stage parameters and the inputs `command` reads.
    pub fn validate(&self, command: Command) -> Result<()> {
        self.projection.validate()?;
        self.flow.validate()?;
        self.filter.validate()?;
        self.cluster.validate()?;
        if self.modes.is_empty() {
            return Err(Error::Config("at least one mode is required".into()));
        }
        if !(self.eval.iou_threshold > 0.0 && self.eval.iou_threshold <= 1.0) {
            return Err(Error::Config(
                "eval.iou_threshold must lie in (0, 1]".into(),
            ));
        }
        match command {
            Command::Project => Self::require_dir("scans", &self.input.scans),
            Command::Train => {
                Self::require_dir("scans", &self.input.scans)?;
                Self::require_dir("ground_truth", &self.input.ground_truth)
            }
            Command::Classify => {
                Self::require_dir("scans", &self.input.scans)?;
                Self::require_file("poses", &self.input.poses)?;
                if self.modes.iter().any(|m| m.uses_scorer()) {
                    match (&self.input.model, &self.input.scores) {
                        (Some(_), Some(_)) => {
                            return Err(Error::Config(
                                "set exactly one of input.model and input.scores".into(),
                            ))
                        }
                        (None, None) => {
                            return Err(Error::Config(
                                "object modes need input.model or input.scores".into(),
                            ))
                        }
                        (Some(_), None) => Self::require_file("model", &self.input.model)?,
                        (None, Some(_)) => Self::require_dir("scores", &self.input.scores)?,
                    }
                }
                if let Some(gt) = &self.input.ground_truth {
                    if !gt.is_dir() {
                        return Err(Error::Config(format!(
                            "input.ground_truth {} is not a directory",
                            gt.display()
                        )));
                    }
                }
                Ok(())
            }
            Command::Eval => Self::require_dir("scans", &self.input.scans),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(PipelineConfig::from_toml("sede = 3").is_err());
        assert!(PipelineConfig::from_toml("[flow]\nkk = 3").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn classify_needs_exactly_one_scorer_source() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("poses.txt"), "").unwrap();
        std::fs::write(dir.path().join("m.bin"), "").unwrap();
        let mut cfg = PipelineConfig::default();
        cfg.input.scans = Some(dir.path().to_path_buf());
        cfg.input.poses = Some(dir.path().join("poses.txt"));
        assert!(cfg.validate(Command::Classify).is_err());
        cfg.modes = vec![Mode::Exp3];
        assert!(cfg.validate(Command::Classify).is_ok());
        cfg.modes = vec![Mode::Exp1];
        cfg.input.model = Some(dir.path().join("m.bin"));
        assert!(cfg.validate(Command::Classify).is_ok());
        cfg.input.scores = Some(dir.path().to_path_buf());
        assert!(cfg.validate(Command::Classify).is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let mut cfg = PipelineConfig::from_toml("[input]\nscans = \"seq/scans\"").unwrap();
        cfg.resolve_paths(Path::new("/data/run"));
        assert_eq!(
            cfg.input.scans.unwrap(),
            PathBuf::from("/data/run/seq/scans")
        );
        assert_eq!(cfg.output.dir, PathBuf::from("/data/run/out"));
    }

    #[test]
    fn modes_parse_and_map() {
        assert_eq!("exp2".parse::<Mode>().unwrap(), Mode::Exp2);
        assert!("exp4".parse::<Mode>().is_err());
        assert_eq!(Mode::Exp3.object_update(), ObjectUpdate::Off);
    }
}
