//! On-disk sequences: `scans/NNNNNN.bin`, `poses.txt`, `gt/NNNNNN.csv`.

use lidarseg::scan_io::{
    read_ground_truth, read_poses, read_velodyne_bin, training_scene, write_ground_truth,
    write_poses, write_velodyne_bin, SceneConfig,
};
use lidarseg::{Error, GroundTruth, PointCloud, Pose, Result};
use std::fs;
use std::path::{Path, PathBuf};

pub fn frame_name(frame: usize) -> String {
    format!("{frame:06}")
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io(path))
}

/// Files in `dir` with extension `ext`, sorted by name.
pub fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == ext))
        .collect();
    files.sort();
    Ok(files)
}

/// A scan sequence and the per-frame files that go with it.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub scans: Vec<PathBuf>,
    pub poses: Option<Vec<Pose>>,
    /// Ground-truth file per scan, when a ground-truth directory was given.
    pub ground_truth: Option<Vec<PathBuf>>,
    /// Score file per scan, when a score directory was given.
    pub scores: Option<Vec<PathBuf>>,
}

/// Companion file of every scan, matched by file stem.
fn companions(scans: &[PathBuf], dir: &Path, ext: &str, what: &str) -> Result<Vec<PathBuf>> {
    let missing: Vec<String> = scans
        .iter()
        .map(|s| dir.join(s.file_stem().unwrap()).with_extension(ext))
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::InvalidInput(format!(
            "missing {what} files: {}",
            missing.join(", ")
        )));
    }
    Ok(scans
        .iter()
        .map(|s| dir.join(s.file_stem().unwrap()).with_extension(ext))
        .collect())
}

impl Sequence {
    pub fn open(
        scans_dir: &Path,
        poses: Option<&Path>,
        gt_dir: Option<&Path>,
        scores_dir: Option<&Path>,
    ) -> Result<Self> {
        let scans = list_files(scans_dir, "bin")?;
        if scans.is_empty() {
            return Err(Error::InvalidInput(format!(
                "no .bin scans in {}",
                scans_dir.display()
            )));
        }
        let poses = poses.map(read_poses).transpose()?;
        if let Some(p) = &poses {
            if p.len() != scans.len() {
                return Err(Error::InvalidInput(format!(
                    "{} poses for {} scans",
                    p.len(),
                    scans.len()
                )));
            }
        }
        Ok(Self {
            ground_truth: gt_dir
                .map(|d| companions(&scans, d, "csv", "ground truth"))
                .transpose()?,
            scores: scores_dir
                .map(|d| companions(&scans, d, "bin", "score"))
                .transpose()?,
            scans,
            poses,
        })
    }

    pub fn len(&self) -> usize {
        self.scans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scans.is_empty()
    }

    pub fn read_scan(&self, frame: usize) -> Result<(PointCloud, usize)> {
        let scan = read_velodyne_bin(&self.scans[frame])?;
        let mut cloud = scan.cloud;
        cloud.frame_id = frame as u32;
        Ok((cloud, scan.rejected))
    }

    pub fn read_ground_truth(&self, frame: usize) -> Result<Option<GroundTruth>> {
        self.ground_truth
            .as_ref()
            .map(|g| read_ground_truth(&g[frame]))
            .transpose()
    }

    /// Sensor motion taking frame `t - 1` coordinates to frame `t`.
    pub fn odometry(&self, t: usize) -> Option<Pose> {
        let p = self.poses.as_ref()?;
        Some(p[t].inverse().compose(&p[t - 1]))
    }
}

/// Writes every frame of `scene` as a sequence under `dir`.
pub fn write_scene(dir: &Path, scene: &SceneConfig) -> Result<()> {
    scene.validate()?;
    let scans = dir.join("scans");
    let gt = dir.join("gt");
    create_dir(&scans)?;
    create_dir(&gt)?;
    let mut poses = Vec::new();
    for t in 0..scene.frames {
        let (cloud, truth, pose) = scene.render(t)?;
        let name = frame_name(t as usize);
        write_velodyne_bin(&scans.join(format!("{name}.bin")), &cloud)?;
        write_ground_truth(&gt.join(format!("{name}.csv")), &truth)?;
        poses.push(pose);
    }
    write_poses(&dir.join("poses.txt"), &poses)?;
    let path = dir.join("scene.toml");
    fs::write(&path, scene.to_toml()).map_err(io(&path))
}

/// Writes `n` independent single-frame scenes as one sequence, for training.
pub fn write_training_set(dir: &Path, n: usize, seed: u64) -> Result<()> {
    let scans = dir.join("scans");
    let gt = dir.join("gt");
    create_dir(&scans)?;
    create_dir(&gt)?;
    let mut poses = Vec::new();
    for k in 0..n {
        let scene = training_scene(seed.wrapping_mul(1_000_003).wrapping_add(k as u64));
        let (cloud, truth, pose) = scene.render(0)?;
        let name = frame_name(k);
        write_velodyne_bin(&scans.join(format!("{name}.bin")), &cloud)?;
        write_ground_truth(&gt.join(format!("{name}.csv")), &truth)?;
        poses.push(pose);
    }
    write_poses(&dir.join("poses.txt"), &poses)
}
