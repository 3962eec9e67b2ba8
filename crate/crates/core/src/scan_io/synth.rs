//! Ray-cast synthetic scenes with exact per-point ground truth.
//!
//! World frame: ground plane at `z = 0`, z up. Objects are boxes standing on
//! the ground (optionally lifted by `clearance`), described by their footprint
//! center, size `[length, width, height]` and yaw. The sensor casts one ray
//! per (ring, azimuth bin) at the bin centers of the default projection grid,
//! so a static scan projects without pixel collisions.

use super::{Difficulty, GroundTruth, Point, PointCloud, SemanticClass};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

/// Seconds between frames in generated sequences.
const FRAME_PERIOD: f64 = 0.1;
const MIN_RANGE: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorConfig {
    /// Mounting height above the ground plane (m).
    pub height: f64,
    pub rings: usize,
    pub azimuth_bins: usize,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub max_range: f64,
    /// Sensor xy position at frame 0 (m).
    pub start: [f64; 2],
    pub yaw_deg: f64,
    /// World-frame xy displacement per frame (m).
    pub velocity: [f64; 2],
    pub yaw_rate_deg: f64,
    /// Standard deviation of additive intensity noise.
    pub intensity_noise: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            height: 1.73,
            rings: 64,
            azimuth_bins: 870,
            elevation_min_deg: -24.8,
            elevation_max_deg: 2.0,
            max_range: 80.0,
            start: [0.0, 0.0],
            yaw_deg: 0.0,
            velocity: [0.0, 0.0],
            yaw_rate_deg: 0.0,
            intensity_noise: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroundConfig {
    pub enabled: bool,
    pub intensity: f64,
}

impl Default for GroundConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            intensity: 0.15,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectKind {
    /// Permanent structure; labeled non-movable and carries no box id.
    Static,
    /// Movable object at rest.
    Parked,
    /// Movable object translating every frame.
    Moving,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneObject {
    pub kind: ObjectKind,
    /// Footprint center at frame 0 (m).
    pub center: [f64; 2],
    /// `[length, width, height]` (m).
    pub size: [f64; 3],
    #[serde(default)]
    pub yaw_deg: f64,
    /// Height of the box bottom above the ground (m).
    #[serde(default)]
    pub clearance: f64,
    #[serde(default = "default_intensity")]
    pub intensity: f64,
    /// World-frame displacement per frame (m); only used by moving objects.
    #[serde(default)]
    pub velocity: [f64; 2],
    #[serde(default = "default_difficulty")]
    pub difficulty: Difficulty,
}

fn default_intensity() -> f64 {
    0.5
}

fn default_difficulty() -> Difficulty {
    Difficulty::Easy
}

impl SceneObject {
    /// Box frame (center of the volume) to world at frame `t`.
    pub fn pose(&self, t: u32) -> Pose {
        let shift = match self.kind {
            ObjectKind::Moving => [self.velocity[0] * t as f64, self.velocity[1] * t as f64],
            _ => [0.0, 0.0],
        };
        Pose::from_yaw(
            self.yaw_deg.to_radians(),
            Vector3::new(
                self.center[0] + shift[0],
                self.center[1] + shift[1],
                self.clearance + 0.5 * self.size[2],
            ),
        )
    }

    /// World-frame motion of the object between `t - 1` and `t`.
    pub fn step_motion(&self) -> Pose {
        match self.kind {
            ObjectKind::Moving => {
                Pose::from_translation(Vector3::new(self.velocity[0], self.velocity[1], 0.0))
            }
            _ => Pose::identity(),
        }
    }

    fn half_extents(&self) -> Vector3<f64> {
        Vector3::new(self.size[0], self.size[1], self.size[2]) * 0.5
    }

    pub fn label(&self) -> SemanticClass {
        match self.kind {
            ObjectKind::Static => SemanticClass::NonMovable,
            ObjectKind::Parked => SemanticClass::Movable,
            ObjectKind::Moving => SemanticClass::Dynamic,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_frames")]
    pub frames: u32,
    #[serde(default)]
    pub sensor: SensorConfig,
    #[serde(default)]
    pub ground: GroundConfig,
    #[serde(default)]
    pub objects: Vec<SceneObject>,
}

fn default_frames() -> u32 {
    10
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            frames: default_frames(),
            sensor: SensorConfig::default(),
            ground: GroundConfig::default(),
            objects: Vec::new(),
        }
    }
}

impl SceneConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SceneConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.sensor;
        if s.rings == 0 || s.azimuth_bins == 0 {
            return Err(Error::Config(
                "sensor needs at least one ring and one azimuth bin".into(),
            ));
        }
        if s.elevation_max_deg <= s.elevation_min_deg {
            return Err(Error::Config(
                "elevation_max_deg must exceed elevation_min_deg".into(),
            ));
        }
        if !self.ground.enabled && self.objects.is_empty() {
            return Err(Error::Config("scene has no ground and no objects".into()));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.size.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::Config(format!("object {i} has a non-positive size")));
            }
        }
        Ok(())
    }

    /// Sensor-to-world pose at frame `t`.
    pub fn sensor_pose(&self, t: u32) -> Pose {
        let s = &self.sensor;
        let t = t as f64;
        Pose::from_yaw(
            (s.yaw_deg + s.yaw_rate_deg * t).to_radians(),
            Vector3::new(
                s.start[0] + s.velocity[0] * t,
                s.start[1] + s.velocity[1] * t,
                s.height,
            ),
        )
    }

    /// Elevation (rad) of each ring, top ring first, at the grid's bin centers.
    pub fn ring_elevations(&self) -> Vec<f64> {
        let s = &self.sensor;
        let (lo, hi) = (
            s.elevation_min_deg.to_radians(),
            s.elevation_max_deg.to_radians(),
        );
        let step = (hi - lo) / s.rings as f64;
        (0..s.rings).map(|r| hi - (r as f64 + 0.5) * step).collect()
    }

    /// Azimuth (rad) of each column, starting at -180 deg.
    pub fn azimuths(&self) -> Vec<f64> {
        let n = self.sensor.azimuth_bins;
        let step = 2.0 * PI / n as f64;
        (0..n).map(|c| -PI + (c as f64 + 0.5) * step).collect()
    }

    /// Renders frame `t`: cloud in the sensor frame, exact labels, sensor pose.
    pub fn render(&self, t: u32) -> Result<(PointCloud, GroundTruth, Pose)> {
        self.validate()?;
        let pose = self.sensor_pose(t);
        let boxes: Vec<(Pose, Pose, Vector3<f64>)> = self
            .objects
            .iter()
            .map(|o| {
                let p = o.pose(t);
                (p, p.inverse(), o.half_extents())
            })
            .collect();

        let mut rng =
            ChaCha8Rng::seed_from_u64(self.seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let noise = Normal::new(0.0, self.sensor.intensity_noise.max(0.0))
            .map_err(|e| Error::Config(e.to_string()))?;

        let mut points = Vec::new();
        let mut gt = GroundTruth::default();
        for (id, o) in self.objects.iter().enumerate() {
            if o.kind != ObjectKind::Static {
                gt.difficulty.insert(id as u32, o.difficulty);
            }
        }
        let origin = pose.translation;
        for el in self.ring_elevations() {
            for az in self.azimuths() {
                let dir_s = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
                let dir_w = pose.rotation * dir_s;
                let Some((range, surface)) = self.cast(&origin, &dir_w, &boxes) else {
                    continue;
                };
                let (base, label, box_id) = match surface {
                    None => (self.ground.intensity, SemanticClass::NonMovable, None),
                    Some(k) => {
                        let o = &self.objects[k];
                        let id = (o.kind != ObjectKind::Static).then_some(k as u32);
                        (o.intensity, o.label(), id)
                    }
                };
                let intensity = if self.sensor.intensity_noise > 0.0 {
                    base + noise.sample(&mut rng)
                } else {
                    base
                };
                let p = dir_s * range;
                points.push(Point::new(p.x, p.y, p.z, intensity.clamp(0.0, 1.0)));
                gt.labels.push(label);
                gt.box_ids.push(box_id);
            }
        }
        gt.difficulty
            .retain(|id, _| gt.box_ids.contains(&Some(*id)));
        let cloud = PointCloud::new(points, t, t as f64 * FRAME_PERIOD);
        Ok((cloud, gt, pose))
    }

    /// Nearest hit along a world-frame ray: range and surface (`None` = ground).
    fn cast(
        &self,
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
        boxes: &[(Pose, Pose, Vector3<f64>)],
    ) -> Option<(f64, Option<usize>)> {
        let mut best: Option<(f64, Option<usize>)> = None;
        let mut consider = |t: f64, s: Option<usize>| {
            if (MIN_RANGE..=self.sensor.max_range).contains(&t) && best.is_none_or(|(bt, _)| t < bt)
            {
                best = Some((t, s));
            }
        };
        if self.ground.enabled && dir.z < 0.0 {
            consider(-origin.z / dir.z, None);
        }
        for (k, (_, inv, half)) in boxes.iter().enumerate() {
            let o = inv.transform_point(origin);
            let d = inv.transform_vector(dir);
            if let Some(t) = ray_box_entry(&o, &d, half) {
                consider(t, Some(k));
            }
        }
        best
    }

    /// Distance from a world-frame point to the nearest declared surface at frame `t`.
    pub fn surface_distance(&self, world: &Vector3<f64>, t: u32) -> f64 {
        let mut best = f64::INFINITY;
        if self.ground.enabled {
            best = world.z.abs();
        }
        for o in &self.objects {
            let local = o.pose(t).inverse().transform_point(world);
            best = best.min(box_surface_distance(&local, &o.half_extents()));
        }
        best
    }
}

/// Entry distance of a ray into an axis-aligned box centered at the origin.
fn ray_box_entry(o: &Vector3<f64>, d: &Vector3<f64>, half: &Vector3<f64>) -> Option<f64> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            if o[a].abs() > half[a] {
                return None;
            }
            continue;
        }
        let t1 = (-half[a] - o[a]) / d[a];
        let t2 = (half[a] - o[a]) / d[a];
        t_near = t_near.max(t1.min(t2));
        t_far = t_far.min(t1.max(t2));
    }
    // Sensor inside a box sees nothing of that box.
    (t_near <= t_far && t_near > 0.0).then_some(t_near)
}

fn box_surface_distance(p: &Vector3<f64>, half: &Vector3<f64>) -> f64 {
    let q = p.abs() - half;
    let outside = q.sup(&Vector3::zeros()).norm();
    let inside = q.max().min(0.0);
    (outside + inside).abs()
}

/// Ground-truth motion of each point of frame `t - 1` into the sensor frame of `t`.
pub fn true_motion(cfg: &SceneConfig, gt_prev: &GroundTruth, t: u32) -> Vec<Pose> {
    let prev = cfg.sensor_pose(t - 1);
    let cur_inv = cfg.sensor_pose(t).inverse();
    let static_motion = cur_inv.compose(&prev);
    let per_object: BTreeMap<u32, Pose> = cfg
        .objects
        .iter()
        .enumerate()
        .map(|(k, o)| (k as u32, cur_inv.compose(&o.step_motion()).compose(&prev)))
        .collect();
    gt_prev
        .box_ids
        .iter()
        .map(|id| {
            id.and_then(|id| per_object.get(&id).copied())
                .unwrap_or(static_motion)
        })
        .collect()
}

/// Reference scene: ground plane, two buildings, two parked and two moving boxes.
///
/// The sensor drives forward slowly; one box pulls away ahead in the left
/// lane at 1 m/frame and one approaches in the right lane at 1 m/frame.
pub fn benchmark_scene(seed: u64) -> SceneConfig {
    let obj = |kind, center, size, yaw_deg, intensity, velocity, difficulty| SceneObject {
        kind,
        center,
        size,
        yaw_deg,
        clearance: if kind == ObjectKind::Static { 0.0 } else { 0.3 },
        intensity,
        velocity,
        difficulty,
    };
    use Difficulty::*;
    use ObjectKind::*;
    SceneConfig {
        seed,
        frames: 20,
        sensor: SensorConfig {
            velocity: [0.2, 0.0],
            intensity_noise: 0.05,
            ..SensorConfig::default()
        },
        ground: GroundConfig {
            enabled: true,
            intensity: 0.15,
        },
        objects: vec![
            obj(
                Static,
                [20.0, 16.0],
                [30.0, 4.0, 6.0],
                0.0,
                0.40,
                [0.0, 0.0],
                Easy,
            ),
            obj(
                Static,
                [15.0, -15.0],
                [24.0, 3.0, 5.0],
                0.0,
                0.40,
                [0.0, 0.0],
                Easy,
            ),
            obj(
                Parked,
                [14.0, 8.5],
                [4.2, 1.8, 1.4],
                0.0,
                0.75,
                [0.0, 0.0],
                Easy,
            ),
            obj(
                Parked,
                [-9.0, -8.0],
                [4.0, 1.8, 1.5],
                25.0,
                0.75,
                [0.0, 0.0],
                Moderate,
            ),
            obj(
                Moving,
                [7.0, 4.0],
                [4.4, 1.9, 1.5],
                0.0,
                0.75,
                [1.0, 0.0],
                Easy,
            ),
            obj(
                Moving,
                [30.0, -4.0],
                [4.0, 1.8, 1.4],
                0.0,
                0.75,
                [-1.0, 0.0],
                Moderate,
            ),
        ],
    }
}

/// Single-frame scene with random buildings and cars, for scorer training.
///
/// Building and car intensities overlap, so intensity alone does not
/// separate the classes.
pub fn training_scene(seed: u64) -> SceneConfig {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut objects = Vec::new();
    for _ in 0..3 {
        objects.push(SceneObject {
            kind: ObjectKind::Static,
            center: [rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0)],
            size: [
                rng.random_range(8.0..25.0),
                rng.random_range(2.0..5.0),
                rng.random_range(3.0..8.0),
            ],
            yaw_deg: rng.random_range(0.0..180.0),
            clearance: 0.0,
            intensity: rng.random_range(0.25..0.5),
            velocity: [0.0, 0.0],
            difficulty: Difficulty::Easy,
        });
    }
    for _ in 0..4 {
        let r = rng.random_range(6.0..25.0);
        let a: f64 = rng.random_range(0.0..2.0 * PI);
        objects.push(SceneObject {
            kind: ObjectKind::Parked,
            center: [r * a.cos(), r * a.sin()],
            size: [
                rng.random_range(3.8..4.6),
                rng.random_range(1.6..2.0),
                rng.random_range(1.3..1.7),
            ],
            yaw_deg: rng.random_range(0.0..180.0),
            clearance: 0.3,
            intensity: rng.random_range(0.6..0.9),
            velocity: [0.0, 0.0],
            difficulty: Difficulty::Easy,
        });
    }
    SceneConfig {
        seed,
        frames: 1,
        sensor: SensorConfig {
            intensity_noise: 0.05,
            ..SensorConfig::default()
        },
        ground: GroundConfig::default(),
        objects,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rot_z;

    fn ground_only() -> SceneConfig {
        SceneConfig {
            sensor: SensorConfig {
                azimuth_bins: 180,
                ..SensorConfig::default()
            },
            ..SceneConfig::default()
        }
    }

    #[test]
    fn ground_only_is_all_non_movable() {
        let (cloud, gt, _) = ground_only().render(0).unwrap();
        assert!(!cloud.is_empty());
        assert!(gt.labels.iter().all(|&l| l == SemanticClass::NonMovable));
        assert!(gt.box_ids.iter().all(Option::is_none));
    }

    #[test]
    fn moving_box_points_are_dynamic_every_frame() {
        let mut cfg = ground_only();
        cfg.objects.push(SceneObject {
            kind: ObjectKind::Moving,
            center: [8.0, 0.0],
            size: [4.0, 2.0, 1.5],
            yaw_deg: 0.0,
            clearance: 0.0,
            intensity: 0.8,
            velocity: [1.0, 0.0],
            difficulty: Difficulty::Easy,
        });
        for t in 0..4 {
            let (cloud, gt, pose) = cfg.render(t).unwrap();
            let mut on_box = 0;
            for (p, (&l, id)) in cloud.points.iter().zip(gt.labels.iter().zip(&gt.box_ids)) {
                let w = pose.transform_point(&p.position());
                let local = cfg.objects[0].pose(t).inverse().transform_point(&w);
                let d = box_surface_distance(&local, &cfg.objects[0].half_extents());
                if d < 1e-9 && w.z > 1e-6 {
                    on_box += 1;
                    assert_eq!(l, SemanticClass::Dynamic);
                    assert_eq!(*id, Some(0));
                }
            }
            assert!(on_box > 50, "frame {t}: {on_box}");
        }
    }

    #[test]
    fn every_point_lies_on_a_declared_surface() {
        let cfg = benchmark_scene(3);
        for t in [0, 7] {
            let (cloud, _, pose) = cfg.render(t).unwrap();
            for p in &cloud.points {
                let w = pose.transform_point(&p.position());
                assert!(cfg.surface_distance(&w, t) < 1e-9);
            }
        }
    }

    /// Brute-force nearest-hit oracle: march along the ray in small steps and
    /// refine by bisection on the first step that enters any surface.
    fn marched_range(cfg: &SceneConfig, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let inside = |p: &Vector3<f64>| {
            (cfg.ground.enabled && p.z <= 0.0)
                || cfg.objects.iter().any(|o| {
                    let l = o.pose(0).inverse().transform_point(p);
                    let h = o.half_extents();
                    l.x.abs() <= h.x && l.y.abs() <= h.y && l.z.abs() <= h.z
                })
        };
        let step = 0.01;
        let mut t = MIN_RANGE;
        while t <= cfg.sensor.max_range {
            if inside(&(origin + dir * t)) {
                let (mut lo, mut hi) = (t - step, t);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if inside(&(origin + dir * mid)) {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                return Some(hi);
            }
            t += step;
        }
        None
    }

    #[test]
    fn occluded_wall_points_are_absent() {
        let mut cfg = ground_only();
        cfg.sensor.azimuth_bins = 360;
        cfg.objects.push(SceneObject {
            kind: ObjectKind::Static,
            center: [15.0, 0.0],
            size: [0.5, 20.0, 4.0],
            yaw_deg: 0.0,
            clearance: 0.0,
            intensity: 0.4,
            velocity: [0.0, 0.0],
            difficulty: Difficulty::Easy,
        });
        cfg.objects.push(SceneObject {
            kind: ObjectKind::Parked,
            center: [8.0, 0.0],
            size: [2.0, 3.0, 3.5],
            yaw_deg: 0.0,
            clearance: 0.0,
            intensity: 0.8,
            velocity: [0.0, 0.0],
            difficulty: Difficulty::Easy,
        });
        let (cloud, gt, pose) = cfg.render(0).unwrap();
        // No wall point may sit in the box's angular shadow.
        let shadow =
            |p: &Point| p.y.abs() < 1.5 * p.x / 7.0 && p.x > 0.0 && p.z > -1.73 + 1e-6 && p.z < 0.5;
        for (p, l) in cloud.points.iter().zip(&gt.labels) {
            if *l == SemanticClass::NonMovable && p.x > 14.0 {
                assert!(!shadow(p), "wall point visible behind box: {p:?}");
            }
        }
        // Every returned range matches the marched nearest hit.
        let origin = pose.translation;
        for p in cloud.points.iter().step_by(37) {
            let dir = pose.rotation * p.position().normalize();
            let oracle = marched_range(&cfg, &origin, &dir).unwrap();
            assert!(
                (oracle - p.range()).abs() < 1e-6,
                "{} vs {}",
                oracle,
                p.range()
            );
        }
    }

    #[test]
    fn zero_rays_is_config_error() {
        let mut cfg = ground_only();
        cfg.sensor.azimuth_bins = 0;
        assert!(matches!(cfg.render(0), Err(Error::Config(_))));
        let empty = SceneConfig {
            ground: GroundConfig {
                enabled: false,
                intensity: 0.0,
            },
            ..SceneConfig::default()
        };
        assert!(matches!(empty.render(0), Err(Error::Config(_))));
    }

    #[test]
    fn sensor_poses_compose_to_identity() {
        let cfg = benchmark_scene(0);
        for t in 0..cfg.frames {
            let p = cfg.sensor_pose(t);
            let id = p.inverse().compose(&p);
            assert!((id.rotation - nalgebra::Matrix3::identity()).norm() < 1e-9);
            assert!(id.translation.norm() < 1e-9);
        }
    }

    #[test]
    fn toml_round_trip() {
        let cfg = benchmark_scene(11);
        assert_eq!(SceneConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn true_motion_of_static_points_is_odometry() {
        let cfg = benchmark_scene(0);
        let (cloud0, gt0, _) = cfg.render(0).unwrap();
        let (_, _, _) = cfg.render(1).unwrap();
        let motion = true_motion(&cfg, &gt0, 1);
        let odo = cfg.sensor_pose(1).inverse().compose(&cfg.sensor_pose(0));
        for ((m, l), p) in motion.iter().zip(&gt0.labels).zip(&cloud0.points) {
            if *l != SemanticClass::Dynamic {
                assert_eq!(*m, odo);
            } else {
                let d = m.transform_point(&p.position()) - odo.transform_point(&p.position());
                assert!((d.norm() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rot_z_matches_pose_yaw() {
        let p = Pose::from_yaw(0.3, Vector3::zeros());
        assert_eq!(p.rotation, rot_z(0.3));
    }
}
