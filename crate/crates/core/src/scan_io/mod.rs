//! Scan, odometry and label files, plus the synthetic scene generator.

mod synth;

pub use synth::{
    benchmark_scene, training_scene, true_motion, GroundConfig, ObjectKind, SceneConfig,
    SceneObject, SensorConfig,
};

use crate::error::{Error, Result};
use crate::geometry::Pose;
use nalgebra::Vector3;
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

/// One LiDAR return in the sensor frame (x forward, y left, z up).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Self { x, y, z, intensity }
    }

    pub fn position(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn range(&self) -> f64 {
        self.position().norm()
    }
}

/// An ordered scan. The index of a point is its identity for the whole pipeline.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub frame_id: u32,
    pub timestamp: f64,
}

impl PointCloud {
    pub fn new(points: Vec<Point>, frame_id: u32, timestamp: f64) -> Self {
        Self {
            points,
            frame_id,
            timestamp,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.points.iter().map(Point::position).collect()
    }

    /// The same cloud with every position mapped through `pose`.
    pub fn transformed(&self, pose: &Pose) -> PointCloud {
        let points = self
            .points
            .iter()
            .map(|p| {
                let q = pose.transform_point(&p.position());
                Point::new(q.x, q.y, q.z, p.intensity)
            })
            .collect();
        PointCloud::new(points, self.frame_id, self.timestamp)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SemanticClass {
    NonMovable = 0,
    Movable = 1,
    Dynamic = 2,
}

impl SemanticClass {
    pub const ALL: [SemanticClass; 3] = [
        SemanticClass::NonMovable,
        SemanticClass::Movable,
        SemanticClass::Dynamic,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            SemanticClass::NonMovable => "non-movable",
            SemanticClass::Movable => "movable",
            SemanticClass::Dynamic => "dynamic",
        }
    }

    /// Movable and dynamic points both belong to objects.
    pub fn is_object(self) -> bool {
        self != SemanticClass::NonMovable
    }
}

impl fmt::Display for SemanticClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SemanticClass {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "non-movable" | "0" => Ok(SemanticClass::NonMovable),
            "movable" | "1" => Ok(SemanticClass::Movable),
            "dynamic" | "2" => Ok(SemanticClass::Dynamic),
            other => Err(format!("unknown class '{other}'")),
        }
    }
}

#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Deserialize, serde::Serialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Moderate => "moderate",
            Difficulty::Hard => "hard",
        }
    }
}

impl FromStr for Difficulty {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "moderate" => Ok(Difficulty::Moderate),
            "hard" => Ok(Difficulty::Hard),
            other => Err(format!("unknown difficulty '{other}'")),
        }
    }
}

/// Per-point ground truth of one frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruth {
    pub labels: Vec<SemanticClass>,
    pub box_ids: Vec<Option<u32>>,
    pub difficulty: BTreeMap<u32, Difficulty>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.box_ids.len() {
            return Err(Error::Dimension(format!(
                "{} labels but {} box ids",
                self.labels.len(),
                self.box_ids.len()
            )));
        }
        for (i, (label, id)) in self.labels.iter().zip(&self.box_ids).enumerate() {
            if label.is_object() && id.is_none() {
                return Err(Error::InvalidInput(format!(
                    "point {i} is {label} but has no box id"
                )));
            }
            if let Some(id) = id {
                if !self.difficulty.contains_key(id) {
                    return Err(Error::InvalidInput(format!(
                        "box {id} has no difficulty tag"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn difficulty_of_point(&self, i: usize) -> Option<Difficulty> {
        self.box_ids[i].and_then(|id| self.difficulty.get(&id).copied())
    }
}

/// Result of decoding a Velodyne scan.
#[derive(Clone, Debug, PartialEq)]
pub struct VelodyneScan {
    pub cloud: PointCloud,
    /// Records dropped because a field was NaN or infinite.
    pub rejected: usize,
}

/// Decodes little-endian `x y z intensity` float32 records.
pub fn decode_velodyne(bytes: &[u8], frame_id: u32) -> Result<VelodyneScan> {
    if !bytes.len().is_multiple_of(16) {
        return Err(Error::format(
            "velodyne scan",
            format!("size {} is not a multiple of 16 bytes", bytes.len()),
        ));
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    let mut rejected = 0;
    for rec in bytes.chunks_exact(16) {
        let f = |o: usize| f32::from_le_bytes([rec[o], rec[o + 1], rec[o + 2], rec[o + 3]]);
        let (x, y, z, i) = (f(0), f(4), f(8), f(12));
        if ![x, y, z, i].iter().all(|v| v.is_finite()) {
            rejected += 1;
            continue;
        }
        points.push(Point::new(
            x as f64,
            y as f64,
            z as f64,
            (i as f64).clamp(0.0, 1.0),
        ));
    }
    Ok(VelodyneScan {
        cloud: PointCloud::new(points, frame_id, 0.0),
        rejected,
    })
}

pub fn encode_velodyne(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn read_velodyne_bin(path: &Path) -> Result<VelodyneScan> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let frame_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let scan = decode_velodyne(&bytes, frame_id).map_err(|e| match e {
        Error::Format { message, .. } => Error::format(path.display().to_string(), message),
        other => other,
    })?;
    if scan.rejected > 0 {
        log::warn!(
            "{}: rejected {} non-finite points",
            path.display(),
            scan.rejected
        );
    }
    Ok(scan)
}

pub fn write_velodyne_bin(path: &Path, cloud: &PointCloud) -> Result<()> {
    fs::write(path, encode_velodyne(cloud)).map_err(|e| Error::io(path, e))
}

/// Drift above which a parsed rotation is projected back onto SO(3).
const POSE_DRIFT_TOL: f64 = 1e-6;

/// Parses KITTI odometry text: 12 reals per line, row-major `[R | t]`.
pub fn parse_poses(text: &str) -> Result<Vec<Pose>> {
    let mut poses = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 12 {
            return Err(Error::Parse {
                line: n + 1,
                message: format!("expected 12 values, found {}", tokens.len()),
            });
        }
        let mut v = [0.0; 12];
        for (slot, tok) in v.iter_mut().zip(&tokens) {
            *slot = tok.parse::<f64>().map_err(|e| Error::Parse {
                line: n + 1,
                message: format!("'{tok}': {e}"),
            })?;
            if !slot.is_finite() {
                return Err(Error::Parse {
                    line: n + 1,
                    message: format!("non-finite value '{tok}'"),
                });
            }
        }
        let mut pose = Pose::from_row_major(&v);
        if pose.orthonormality_error() > POSE_DRIFT_TOL {
            pose = pose.orthonormalized();
        }
        poses.push(pose);
    }
    Ok(poses)
}

pub fn read_poses(path: &Path) -> Result<Vec<Pose>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_poses(&text)
}

pub fn write_poses(path: &Path, poses: &[Pose]) -> Result<()> {
    let mut text = String::new();
    for pose in poses {
        let row: Vec<String> = pose
            .to_row_major()
            .iter()
            .map(|v| format!("{v:.12e}"))
            .collect();
        text.push_str(&row.join(" "));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub const LABELS_HEADER: &str = "index,label,p_nonmov,p_mov,p_dyn";

/// One row of a labels file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelRow {
    pub label: SemanticClass,
    pub belief: [f64; 3],
}

pub fn format_labels(labels: &[SemanticClass], beliefs: &[[f64; 3]]) -> Result<String> {
    if labels.len() != beliefs.len() {
        return Err(Error::Dimension(format!(
            "{} labels but {} beliefs",
            labels.len(),
            beliefs.len()
        )));
    }
    let mut out = String::with_capacity(32 * (labels.len() + 1));
    out.push_str(LABELS_HEADER);
    out.push('\n');
    for (i, (label, b)) in labels.iter().zip(beliefs).enumerate() {
        use std::fmt::Write as _;
        let _ = writeln!(out, "{i},{label},{:.6},{:.6},{:.6}", b[0], b[1], b[2]);
    }
    Ok(out)
}

pub fn write_labels(path: &Path, labels: &[SemanticClass], beliefs: &[[f64; 3]]) -> Result<()> {
    let text = format_labels(labels, beliefs)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn parse_labels(text: &str) -> Result<Vec<LabelRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == LABELS_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header '{LABELS_HEADER}'"),
            })
        }
    }
    let mut rows = Vec::new();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            line: n + 1,
            message,
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", f.len())));
        }
        let index: usize = f[0].parse().map_err(|e| err(format!("index: {e}")))?;
        if index != rows.len() {
            return Err(err(format!("index {index} out of sequence")));
        }
        let label = f[1].parse().map_err(err)?;
        let mut belief = [0.0; 3];
        for (b, s) in belief.iter_mut().zip(&f[2..]) {
            *b = s.parse().map_err(|e| err(format!("belief '{s}': {e}")))?;
        }
        rows.push(LabelRow { label, belief });
    }
    Ok(rows)
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text)
}

pub const GROUND_TRUTH_HEADER: &str = "index,label,box_id,difficulty";

/// Ground truth CSV: `box_id` is -1 and `difficulty` empty for points outside boxes.
pub fn write_ground_truth(path: &Path, gt: &GroundTruth) -> Result<()> {
    gt.validate()?;
    let mut out = String::from(GROUND_TRUTH_HEADER);
    out.push('\n');
    for (i, (label, id)) in gt.labels.iter().zip(&gt.box_ids).enumerate() {
        match id {
            Some(id) => out.push_str(&format!("{i},{label},{id},{}\n", gt.difficulty[id].name())),
            None => out.push_str(&format!("{i},{label},-1,\n")),
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruth> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == GROUND_TRUTH_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header '{GROUND_TRUTH_HEADER}'"),
            })
        }
    }
    let mut gt = GroundTruth::default();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            line: n + 1,
            message,
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", f.len())));
        }
        gt.labels.push(f[1].parse().map_err(err)?);
        let id: i64 = f[2].parse().map_err(|e| err(format!("box id: {e}")))?;
        if id < 0 {
            gt.box_ids.push(None);
        } else {
            let id = id as u32;
            let diff: Difficulty = f[3].parse().map_err(err)?;
            gt.difficulty.insert(id, diff);
            gt.box_ids.push(Some(id));
        }
    }
    gt.validate()?;
    Ok(gt)
}
