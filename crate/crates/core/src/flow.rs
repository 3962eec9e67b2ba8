//! Dense rigid motion field between two consecutive scans.
//!
//! Every point of the first scan gets its own rigid transform. Keypoints with
//! distinctive local geometry are tied to correspondences in the second scan,
//! and a pairwise term over a k-nearest-neighbor graph pulls neighboring
//! transforms together, so motion observed at keypoints spreads over the rest
//! of each rigid body. The energy is
//!
//! ```text
//! E = sum_{i in I_d} lambda_d |tau_i(p_i) - q_i|^2
//!   + sum_{<i,j> in N_p} lambda_p |W^1/2 log(tau_i^-1 tau_j)|^2
//!   + sum_{i} |A^1/2 log(tau0_i^-1 tau_i)|^2
//! ```
//!
//! with `W = diag(1, 1, 1, w_r^2, w_r^2, w_r^2)` and `A = diag(a_t I, a_r I)`.
//! The last term is a weak anchor to the initial estimate `tau0`; without it a
//! body whose keypoints lie on one line can rotate freely about that line.

use crate::error::{Error, Result};
use crate::geometry::{skew, Pose, Twist};
use crate::kdtree::{KdTree, KdTreeN};
use crate::scan_io::PointCloud;
use nalgebra::{Matrix3, Matrix6, SVector, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

/// Tolerance used when checking that transforms are proper rotations.
pub const PROPER_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    /// Neighbors per node in the regularization graph.
    pub k: usize,
    /// Longer graph edges are dropped so separate bodies stay decoupled.
    pub max_edge_length: f64,
    /// Neighborhood size for the curvature score.
    pub keypoint_neighbors: usize,
    /// Neighborhood size for the tangent planes of correspondence targets.
    pub normal_neighbors: usize,
    /// Fraction of points kept as keypoints.
    pub keypoint_quantile: f64,
    /// Minimum surface variation for a keypoint; planar patches score ~0.
    pub min_curvature: f64,
    /// Largest angle (seen from the sensor) the curvature neighborhood may
    /// span; wider neighborhoods come from sparse grazing-angle sampling.
    pub max_neighborhood_angle_deg: f64,
    pub min_keypoints: usize,
    /// Scale (m) of the orientation part of the correspondence metric.
    pub feature_weight: f64,
    /// Keypoints whose initial match is farther than this are dropped.
    pub max_correspondence_distance: f64,
    pub lambda_data: f64,
    pub lambda_reg: f64,
    /// Per-node weight of the translation anchor to the initial estimate.
    pub anchor_translation: f64,
    /// Per-node weight of the rotation anchor, per rad^2.
    pub anchor_rotation: f64,
    /// Weight of rotation residuals, m/rad.
    pub rot_weight: f64,
    /// Final stage matches against every point of the second scan and
    /// targets its tangent plane.
    pub dense_refinement: bool,
    /// Data weight of dense-stage matches without a clean tangent plane;
    /// their raw samples are offset by up to one scan step.
    pub crease_weight: f64,
    /// Every n-th planar non-keypoint also gets a data term in the final
    /// stage, pinning flat faces along their normal; 0 disables.
    pub surface_stride: usize,
    /// Regularizer multiplier of the near-rigid pre-alignment stage; 1 skips it.
    pub coarse_stiffness: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub ground_removal: bool,
    pub ground_tolerance: f64,
    pub ground_max_tilt_deg: f64,
    pub ground_iterations: usize,
    pub seed: u64,
    pub cg_max_iters: usize,
    pub cg_tol: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            k: 6,
            max_edge_length: 1.0,
            keypoint_neighbors: 12,
            normal_neighbors: 12,
            keypoint_quantile: 0.1,
            min_curvature: 1e-3,
            max_neighborhood_angle_deg: 2.0,
            min_keypoints: 10,
            feature_weight: 0.3,
            max_correspondence_distance: 2.0,
            lambda_data: 1.0,
            lambda_reg: 5.0,
            anchor_translation: 1e-5,
            anchor_rotation: 1e-2,
            rot_weight: 1.0,
            dense_refinement: true,
            crease_weight: 0.01,
            surface_stride: 8,
            coarse_stiffness: 100.0,
            tol: 1e-4,
            max_iters: 30,
            ground_removal: true,
            ground_tolerance: 0.1,
            ground_max_tilt_deg: 10.0,
            ground_iterations: 100,
            seed: 0,
            cg_max_iters: 300,
            cg_tol: 1e-5,
        }
    }
}

impl FlowConfig {
    fn anchor_weights(&self) -> Twist {
        let (t, r) = (self.anchor_translation, self.anchor_rotation);
        Twist::new(t, t, t, r, r, r)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("flow: {what}")));
        if self.k == 0 {
            return bad("k must be positive");
        }
        if self.keypoint_neighbors < 3 || self.normal_neighbors < 3 {
            return bad("neighborhoods need at least 3 points");
        }
        if !(self.keypoint_quantile > 0.0 && self.keypoint_quantile <= 1.0) {
            return bad("keypoint_quantile must lie in (0, 1]");
        }
        if !(self.max_edge_length > 0.0) || !(self.max_correspondence_distance > 0.0) {
            return bad("distances must be positive");
        }
        if !(self.lambda_data > 0.0
            && self.lambda_reg >= 0.0
            && self.anchor_translation >= 0.0
            && self.anchor_rotation >= 0.0
            && self.rot_weight > 0.0)
        {
            return bad("weights must be positive");
        }
        if !(self.tol >= 0.0) || !(self.feature_weight >= 0.0) || !(self.min_curvature >= 0.0) {
            return bad("tolerances must be non-negative");
        }
        if !(self.crease_weight > 0.0 && self.crease_weight <= 1.0) {
            return bad("crease_weight must lie in (0, 1]");
        }
        if !(self.coarse_stiffness >= 1.0) {
            return bad("coarse_stiffness must be at least 1");
        }
        if !(self.ground_tolerance > 0.0) {
            return bad("ground_tolerance must be positive");
        }
        Ok(())
    }
}

/// One rigid transform per point plus a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionField {
    pub poses: Vec<Pose>,
    pub valid: Vec<bool>,
}

impl MotionField {
    pub fn identity(n: usize) -> Self {
        Self::constant(n, Pose::identity())
    }

    pub fn constant(n: usize, pose: Pose) -> Self {
        Self {
            poses: vec![pose; n],
            valid: vec![true; n],
        }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Every valid entry must be a proper rigid transform.
    pub fn validate(&self) -> Result<()> {
        if self.poses.len() != self.valid.len() {
            return Err(Error::Dimension(format!(
                "motion field has {} poses but {} validity flags",
                self.poses.len(),
                self.valid.len()
            )));
        }
        for (i, (p, &v)) in self.poses.iter().zip(&self.valid).enumerate() {
            if v && !p.is_proper(PROPER_TOL) {
                return Err(Error::Numerical(format!(
                    "transform {i} is not a proper rotation"
                )));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,tx,ty,tz,rx,ry,rz\n");
        for (i, (p, &v)) in self.poses.iter().zip(&self.valid).enumerate() {
            if !v {
                continue;
            }
            let r = p.rotation_vector();
            let t = p.translation;
            let _ = writeln!(out, "{i},{},{},{},{},{},{}", t.x, t.y, t.z, r.x, r.y, r.z);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

/// Result of keypoint selection.
#[derive(Clone, Debug, PartialEq)]
pub struct Keypoints {
    /// Selected cloud indices, ascending.
    pub indices: Vec<usize>,
    /// Least-variance direction of each keypoint's neighborhood (unit).
    pub normals: Vec<Vector3<f64>>,
    /// True when no distinctive geometry was found and points were subsampled uniformly.
    pub fallback: bool,
}

/// Local geometry of one point's k-neighborhood.
struct Shape {
    /// Surface variation `l3 / (l1 + l2 + l3)`.
    variation: f64,
    /// Least-variance direction.
    normal: Vector3<f64>,
    /// Distance to the farthest neighbor.
    radius: f64,
    /// Middle over largest eigenvalue; near zero for points along a line.
    flatness: f64,
}

fn local_shape(
    positions: &[Vector3<f64>],
    subset: &[usize],
    tree: &KdTree,
    k: usize,
) -> Vec<Shape> {
    subset
        .iter()
        .map(|&i| {
            let nb = tree.knn(&positions[i], k);
            let mean =
                nb.iter().map(|n| positions[n.index]).sum::<Vector3<f64>>() / nb.len() as f64;
            let mut cov = Matrix3::zeros();
            for n in &nb {
                let d = positions[n.index] - mean;
                cov += d * d.transpose();
            }
            let eig = SymmetricEigen::new(cov);
            let imin = eig.eigenvalues.imin();
            let imax = eig.eigenvalues.imax();
            let largest = eig.eigenvalues[imax].max(0.0);
            let middle = eig
                .eigenvalues
                .iter()
                .enumerate()
                .find(|&(a, _)| a != imin && a != imax)
                .map_or(0.0, |(_, v)| v.max(0.0));
            let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
            let variation = if total > 0.0 {
                eig.eigenvalues[imin].max(0.0) / total
            } else {
                0.0
            };
            Shape {
                variation,
                normal: eig.eigenvectors.column(imin).into_owned(),
                radius: nb.last().map_or(0.0, |n| n.dist2.sqrt()),
                flatness: if largest > 0.0 { middle / largest } else { 0.0 },
            }
        })
        .collect()
}

/// Keypoints over a whole cloud.
pub fn select_keypoints(cloud: &PointCloud, cfg: &FlowConfig) -> Result<Keypoints> {
    let positions = cloud.positions();
    let subset: Vec<usize> = (0..positions.len()).collect();
    select_keypoints_in(&positions, &subset, cfg)
}

/// Keypoints restricted to `subset` (neighborhoods are also taken within it).
pub fn select_keypoints_in(
    positions: &[Vector3<f64>],
    subset: &[usize],
    cfg: &FlowConfig,
) -> Result<Keypoints> {
    if subset.is_empty() {
        return Err(Error::InvalidInput(
            "keypoint selection on an empty cloud".into(),
        ));
    }
    if cfg.min_keypoints > subset.len() {
        return Err(Error::InvalidInput(format!(
            "min_keypoints {} exceeds point count {}",
            cfg.min_keypoints,
            subset.len()
        )));
    }
    let tree = KdTree::from_subset(positions, subset);
    let shape = local_shape(
        positions,
        subset,
        &tree,
        cfg.keypoint_neighbors.min(subset.len()),
    );
    let quota = ((cfg.keypoint_quantile * subset.len() as f64).ceil() as usize).max(1);

    let max_angle = cfg.max_neighborhood_angle_deg.to_radians();
    let score = |s: usize| {
        let sh = &shape[s];
        if sh.radius > max_angle * positions[subset[s]].norm() {
            0.0
        } else {
            sh.variation
        }
    };
    let mut order: Vec<usize> = (0..subset.len()).collect();
    order.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
    let mut chosen: Vec<usize> = order
        .into_iter()
        .take(quota)
        .take_while(|&s| score(s) >= cfg.min_curvature && score(s) > 0.0)
        .collect();

    let fallback = chosen.len() < cfg.min_keypoints.max(1);
    if fallback {
        let count = quota.max(cfg.min_keypoints).min(subset.len());
        chosen = (0..count).map(|j| j * subset.len() / count).collect();
    }
    chosen.sort_unstable_by_key(|&s| subset[s]);
    Ok(Keypoints {
        indices: chosen.iter().map(|&s| subset[s]).collect(),
        normals: chosen.iter().map(|&s| shape[s].normal).collect(),
        fallback,
    })
}

/// Fits the dominant near-horizontal plane below the sensor with RANSAC and
/// returns a per-point ground mask.
pub fn ground_mask(positions: &[Vector3<f64>], cfg: &FlowConfig) -> Vec<bool> {
    let n = positions.len();
    if !cfg.ground_removal || n < 3 {
        return vec![false; n];
    }
    let cos_tilt = cfg.ground_max_tilt_deg.to_radians().cos();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6772_6f75_6e64);
    let mut best: Option<(usize, Vector3<f64>, f64)> = None;
    for _ in 0..cfg.ground_iterations {
        let a = positions[rng.random_range(0..n)];
        let b = positions[rng.random_range(0..n)];
        let c = positions[rng.random_range(0..n)];
        let normal = (b - a).cross(&(c - a));
        let norm = normal.norm();
        if norm < 1e-9 {
            continue;
        }
        let mut normal = normal / norm;
        if normal.z < 0.0 {
            normal = -normal;
        }
        if normal.z < cos_tilt {
            continue;
        }
        let offset = -normal.dot(&a);
        // The plane must pass below the sensor origin.
        if offset <= 0.0 {
            continue;
        }
        let count = positions
            .iter()
            .filter(|p| (normal.dot(p) + offset).abs() <= cfg.ground_tolerance)
            .count();
        if best.is_none_or(|(c, _, _)| count > c) {
            best = Some((count, normal, offset));
        }
    }
    match best {
        Some((count, normal, offset)) if count >= 3 => positions
            .iter()
            .map(|p| (normal.dot(p) + offset).abs() <= cfg.ground_tolerance)
            .collect(),
        _ => vec![false; n],
    }
}

fn orientation_feature(n: &Vector3<f64>, w: f64) -> [f64; 6] {
    // Embedding of n n^T: squared distance is 2 w^2 sin^2(angle), sign-free.
    let s = std::f64::consts::SQRT_2;
    [
        w * n.x * n.x,
        w * n.y * n.y,
        w * n.z * n.z,
        w * s * n.x * n.y,
        w * s * n.x * n.z,
        w * s * n.y * n.z,
    ]
}

/// Data residual of `moved` against a point target, or its offset along `n`
/// from a plane target.
fn data_residual(moved: &Vector3<f64>, target: &Vector3<f64>, n: &Vector3<f64>) -> Vector3<f64> {
    let d = moved - target;
    if *n == Vector3::zeros() {
        d
    } else {
        n * n.dot(&d)
    }
}

fn feature_point(p: &Vector3<f64>, n: &Vector3<f64>, w: f64) -> SVector<f64, 9> {
    let f = orientation_feature(n, w);
    SVector::<f64, 9>::from_column_slice(&[p.x, p.y, p.z, f[0], f[1], f[2], f[3], f[4], f[5]])
}

// A neighborhood defines a usable tangent plane when it is neither a crease
// nor a single scan line.
const MAX_PLANE_VARIATION: f64 = 0.01;
const MIN_FLATNESS: f64 = 0.05;
// cos 10 deg
const MIN_NORMAL_AGREEMENT: f64 = 0.985;

/// Matching orientation and tangent-plane normal (zero when there is no clean
/// plane) of every subset point.
fn surface_normals(
    positions: &[Vector3<f64>],
    subset: &[usize],
    tree: &KdTree,
    cfg: &FlowConfig,
) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    let n = subset.len();
    let k = cfg.normal_neighbors.min(n);
    let shape = local_shape(positions, subset, tree, cfg.keypoint_neighbors.min(n));
    let planes = local_shape(positions, subset, tree, k);
    let mut slot = vec![usize::MAX; positions.len()];
    for (s, &i) in subset.iter().enumerate() {
        slot[i] = s;
    }
    let planar: Vec<bool> = shape
        .iter()
        .zip(&planes)
        .map(|(s, p)| {
            s.variation.max(p.variation) <= MAX_PLANE_VARIATION && p.flatness >= MIN_FLATNESS
        })
        .collect();
    // Two scan lines on either side of a crease are coplanar too; a real
    // face also agrees with the planes of its neighbors.
    subset
        .iter()
        .enumerate()
        .map(|(s, &i)| {
            let normal = planes[s].normal;
            let agrees = planar[s]
                && tree.knn(&positions[i], k).iter().all(|nb| {
                    let t = slot[nb.index];
                    planar[t] && planes[t].normal.dot(&normal).abs() >= MIN_NORMAL_AGREEMENT
                });
            (
                shape[s].normal,
                if agrees { normal } else { Vector3::zeros() },
            )
        })
        .collect()
}

/// Nearest-neighbor search into the second scan in position + orientation space.
#[derive(Debug)]
struct CorrespondenceIndex {
    /// Second-scan keypoints only.
    sparse: KdTreeN<9>,
    /// Every candidate point of the second scan.
    dense: KdTreeN<9>,
    positions: Vec<Vector3<f64>>,
    /// Tangent-plane normal of each planar candidate, zero elsewhere.
    normals: Vec<Vector3<f64>>,
    feature_weight: f64,
}

impl CorrespondenceIndex {
    fn new(scan2: &TargetScan, cfg: &FlowConfig) -> Self {
        let (positions2, candidates) = (scan2.positions, scan2.candidates);
        let tree3 = KdTree::from_subset(positions2, candidates);
        let mut feats = vec![SVector::<f64, 9>::zeros(); positions2.len()];
        let mut normals = vec![Vector3::zeros(); positions2.len()];
        let surface = surface_normals(positions2, candidates, &tree3, cfg);
        for (&i, (orientation, plane)) in candidates.iter().zip(surface) {
            feats[i] = feature_point(&positions2[i], &orientation, cfg.feature_weight);
            normals[i] = plane;
        }
        // Keypoints keep the orientation they were selected with.
        for (&i, nrm) in scan2.keypoints.indices.iter().zip(&scan2.keypoints.normals) {
            feats[i] = feature_point(&positions2[i], nrm, cfg.feature_weight);
        }
        Self {
            sparse: KdTreeN::from_subset(&feats, &scan2.keypoints.indices),
            dense: KdTreeN::from_subset(&feats, candidates),
            positions: positions2.to_vec(),
            normals,
            feature_weight: cfg.feature_weight,
        }
    }

    /// Best target index for a source point moved by `pose`.
    fn query(&self, p: &Vector3<f64>, n: &Vector3<f64>, pose: &Pose, dense: bool) -> Option<usize> {
        let q = feature_point(
            &pose.transform_point(p),
            &pose.transform_vector(n),
            self.feature_weight,
        );
        let tree = if dense { &self.dense } else { &self.sparse };
        tree.nearest(&q).map(|hit| hit.index)
    }

    /// Candidate `j` and the normal of its tangent plane when asked for and
    /// available; a zero normal makes it a point target.
    fn target(&self, j: usize, on_plane: bool) -> (Vector3<f64>, Vector3<f64>) {
        let n = if on_plane {
            self.normals[j]
        } else {
            Vector3::zeros()
        };
        (self.positions[j], n)
    }
}

/// The scan correspondences are drawn from.
#[derive(Clone, Copy, Debug)]
pub struct TargetScan<'a> {
    pub positions: &'a [Vector3<f64>],
    /// Points that may serve as dense targets.
    pub candidates: &'a [usize],
    /// Distinctive points, a subset of `candidates`.
    pub keypoints: &'a Keypoints,
}

/// Factor graph of data terms (keypoints) and pairwise regularization terms (edges).
#[derive(Debug)]
pub struct FlowGraph {
    /// Number of points in the first scan.
    pub num_points: usize,
    /// Cloud indices that carry an unknown transform, ascending.
    pub nodes: Vec<usize>,
    /// Undirected edges as `(i, j)` cloud indices with `i < j`, sorted.
    pub edges: Vec<(usize, usize)>,
    /// Points holding a data term: the keypoints (ascending), then any
    /// surface points added for the final stage.
    pub keypoints: Vec<usize>,
    /// How many leading entries of `keypoints` are actual keypoints.
    pub num_keypoint_terms: usize,
    /// Source position of each data-term keypoint.
    pub sources: Vec<Vector3<f64>>,
    /// Orientation of each data-term keypoint's neighborhood.
    pub normals: Vec<Vector3<f64>>,
    /// Index into the second scan of each keypoint's correspondence.
    pub target_indices: Vec<usize>,
    pub targets: Vec<Vector3<f64>>,
    /// Plane normal of each target; zero for point-to-point terms.
    pub target_normals: Vec<Vector3<f64>>,
    /// Per-term data weight: 1, `crease_weight` for keypoint point targets
    /// in the dense stage, 0 for surface terms without a plane.
    pub weights: Vec<f64>,
    pub crease_weight: f64,
    pub lambda_data: f64,
    pub lambda_reg: f64,
    pub anchor_weights: Twist,
    pub rot_weight: f64,
    /// Match against every candidate and target its tangent plane, instead
    /// of matching keypoint to keypoint.
    pub dense_targets: bool,
    /// Initial transform of every point, the anchor of the last energy term.
    pub anchor: Vec<Pose>,
    index: CorrespondenceIndex,
}

/// Builds the graph over `nodes` of `scan1` and matches keypoints into `scan2`.
///
/// `keypoints` must be a subset of `nodes`. Initial correspondences are
/// keypoint to keypoint under `init`.
pub fn build_graph(
    positions1: &[Vector3<f64>],
    nodes: &[usize],
    keypoints: &Keypoints,
    scan2: &TargetScan,
    init: &MotionField,
    cfg: &FlowConfig,
) -> Result<FlowGraph> {
    let positions2 = scan2.positions;
    if positions2.is_empty() || scan2.candidates.is_empty() || scan2.keypoints.indices.is_empty() {
        return Err(Error::InvalidInput(
            "second scan has no candidate points".into(),
        ));
    }
    if init.len() != positions1.len() {
        return Err(Error::Dimension(format!(
            "initial field has {} entries for {} points",
            init.len(),
            positions1.len()
        )));
    }
    let mut is_node = vec![false; positions1.len()];
    for &i in nodes {
        let slot = is_node
            .get_mut(i)
            .ok_or_else(|| Error::InvalidInput(format!("node index {i} out of range")))?;
        *slot = true;
    }
    if let Some(&bad) = keypoints
        .indices
        .iter()
        .find(|&&i| !is_node.get(i).copied().unwrap_or(false))
    {
        return Err(Error::InvalidInput(format!(
            "keypoint {bad} is not a graph node"
        )));
    }
    let mut nodes = nodes.to_vec();
    nodes.sort_unstable();
    nodes.dedup();

    let tree = KdTree::from_subset(positions1, &nodes);
    let max2 = cfg.max_edge_length * cfg.max_edge_length;
    let mut edges = Vec::with_capacity(nodes.len() * cfg.k);
    for &i in &nodes {
        for hit in tree.knn(&positions1[i], cfg.k + 1) {
            if hit.index != i && hit.dist2 <= max2 {
                edges.push((i.min(hit.index), i.max(hit.index)));
            }
        }
    }
    edges.sort_unstable();
    edges.dedup();

    let in_range = |j: &&usize| **j >= positions2.len();
    if let Some(&bad) = scan2
        .candidates
        .iter()
        .chain(&scan2.keypoints.indices)
        .find(in_range)
    {
        return Err(Error::InvalidInput(format!(
            "target index {bad} out of range"
        )));
    }
    let index = CorrespondenceIndex::new(scan2, cfg);
    let maxc2 = cfg.max_correspondence_distance * cfg.max_correspondence_distance;
    let mut graph = FlowGraph {
        num_points: positions1.len(),
        nodes,
        edges,
        keypoints: Vec::new(),
        num_keypoint_terms: 0,
        sources: Vec::new(),
        normals: Vec::new(),
        target_indices: Vec::new(),
        targets: Vec::new(),
        target_normals: Vec::new(),
        weights: Vec::new(),
        crease_weight: cfg.crease_weight,
        lambda_data: cfg.lambda_data,
        lambda_reg: cfg.lambda_reg,
        anchor_weights: cfg.anchor_weights(),
        rot_weight: cfg.rot_weight,
        dense_targets: false,
        anchor: init.poses.clone(),
        index,
    };
    for (&i, n) in keypoints.indices.iter().zip(&keypoints.normals) {
        let p = positions1[i];
        let pose = &init.poses[i];
        let Some(j) = graph.index.query(&p, n, pose, false) else {
            continue;
        };
        let moved = pose.transform_point(&p);
        if (moved - positions2[j]).norm_squared() > maxc2 {
            continue;
        }
        graph.keypoints.push(i);
        graph.sources.push(p);
        graph.normals.push(*n);
        graph.target_indices.push(j);
        graph.targets.push(positions2[j]);
        graph.target_normals.push(Vector3::zeros());
        graph.weights.push(1.0);
    }
    graph.num_keypoint_terms = graph.keypoints.len();
    Ok(graph)
}

impl FlowGraph {
    /// Adds a data term for node `i` at `position` with matching orientation
    /// `orientation`. It stays inactive until the next [`FlowGraph::rematch`].
    pub fn add_data_term(&mut self, i: usize, position: Vector3<f64>, orientation: Vector3<f64>) {
        self.keypoints.push(i);
        self.sources.push(position);
        self.normals.push(orientation);
        self.target_indices.push(i);
        self.targets.push(position);
        self.target_normals.push(Vector3::zeros());
        self.weights.push(0.0);
    }

    /// Re-queries every keypoint's correspondence under `field`.
    pub fn rematch(&mut self, field: &MotionField) {
        for m in 0..self.keypoints.len() {
            let pose = &field.poses[self.keypoints[m]];
            if let Some(j) =
                self.index
                    .query(&self.sources[m], &self.normals[m], pose, self.dense_targets)
            {
                self.target_indices[m] = j;
                let (q, n) = self.index.target(j, self.dense_targets);
                self.targets[m] = q;
                self.target_normals[m] = n;
                self.weights[m] = self.term_weight(m, &n);
            }
        }
    }

    fn edge_residual(&self, a: &Pose, b: &Pose) -> f64 {
        let e = a.inverse().compose(b).log();
        let w2 = self.rot_weight * self.rot_weight;
        e.fixed_rows::<3>(0).norm_squared() + w2 * e.fixed_rows::<3>(3).norm_squared()
    }

    /// Weight of term `m` against a target with normal `n`. Surface terms
    /// only count against planes.
    fn term_weight(&self, m: usize, n: &Vector3<f64>) -> f64 {
        if !self.dense_targets || *n != Vector3::zeros() {
            1.0
        } else if m < self.num_keypoint_terms {
            self.crease_weight
        } else {
            0.0
        }
    }

    fn energy_of(&self, pose: impl Fn(usize) -> Pose) -> f64 {
        let data: f64 = (0..self.keypoints.len())
            .map(|m| {
                let moved = pose(self.keypoints[m]).transform_point(&self.sources[m]);
                self.weights[m]
                    * data_residual(&moved, &self.targets[m], &self.target_normals[m])
                        .norm_squared()
            })
            .sum();
        let reg: f64 = self
            .edges
            .iter()
            .map(|&(i, j)| self.edge_residual(&pose(i), &pose(j)))
            .sum();
        let anchor: f64 = if self.anchor_weights.iter().any(|&a| a > 0.0) {
            self.nodes
                .iter()
                .map(|&i| {
                    let e = self.anchor[i].inverse().compose(&pose(i)).log();
                    e.component_mul(&e).dot(&self.anchor_weights)
                })
                .sum()
        } else {
            0.0
        };
        self.lambda_data * data + self.lambda_reg * reg + anchor
    }

    /// Energy of `field` with the graph's current correspondences.
    pub fn energy(&self, field: &MotionField) -> Result<f64> {
        if field.len() != self.num_points {
            return Err(Error::Dimension(format!(
                "field has {} entries for {} points",
                field.len(),
                self.num_points
            )));
        }
        for &i in &self.nodes {
            if !field.valid[i] || !field.poses[i].is_proper(1e-6) {
                return Err(Error::InvalidInput(format!(
                    "invalid transform at node {i}"
                )));
            }
        }
        Ok(self.energy_of(|i| field.poses[i]))
    }
}

/// Convergence record of [`minimize`].
#[derive(Clone, Debug, PartialEq)]
pub struct MinimizeReport {
    /// Energy before the first step and after every accepted iteration.
    pub energies: Vec<f64>,
    pub iterations: usize,
    /// Damping was exhausted without finding a decrease before convergence.
    pub diverged: bool,
}

/// Adjoint of `pose` acting on `(rho, phi)` twists.
fn adjoint(pose: &Pose) -> Matrix6<f64> {
    let r = pose.rotation;
    let mut ad = Matrix6::zeros();
    ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    ad.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(skew(&pose.translation) * r));
    ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
    ad
}

struct NormalEquations {
    diag: Vec<Matrix6<f64>>,
    /// `(a, b, H_ab)` in local node indices.
    off: Vec<(usize, usize, Matrix6<f64>)>,
    grad: Vec<Twist>,
}

impl NormalEquations {
    fn apply(&self, x: &[Twist], mu: f64, y: &mut [Twist]) {
        for ((yi, d), xi) in y.iter_mut().zip(&self.diag).zip(x) {
            *yi = d * xi + xi * mu;
        }
        for &(a, b, ref h) in &self.off {
            y[a] += h * x[b];
            y[b] += h.transpose() * x[a];
        }
    }

    /// Preconditioned conjugate gradients on `(H + mu I) x = -g`.
    fn solve(&self, mu: f64, max_iters: usize, tol: f64) -> Vec<Twist> {
        let n = self.diag.len();
        let precond: Vec<Matrix6<f64>> = self
            .diag
            .iter()
            .map(|d| {
                let m = d + Matrix6::identity() * mu;
                m.try_inverse()
                    .unwrap_or_else(|| Matrix6::identity() / mu.max(1e-12))
            })
            .collect();
        let dot = |a: &[Twist], b: &[Twist]| a.iter().zip(b).map(|(u, v)| u.dot(v)).sum::<f64>();
        let mut x = vec![Twist::zeros(); n];
        let mut r: Vec<Twist> = self.grad.iter().map(|g| -g).collect();
        let b_norm = dot(&r, &r).sqrt();
        if b_norm == 0.0 {
            return x;
        }
        let mut z: Vec<Twist> = precond.iter().zip(&r).map(|(p, ri)| p * ri).collect();
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        let mut ap = vec![Twist::zeros(); n];
        for _ in 0..max_iters {
            self.apply(&p, mu, &mut ap);
            let pap = dot(&p, &ap);
            if pap <= 0.0 {
                break;
            }
            let alpha = rz / pap;
            for i in 0..n {
                x[i] += p[i] * alpha;
                r[i] -= ap[i] * alpha;
            }
            if dot(&r, &r).sqrt() <= tol * b_norm {
                break;
            }
            for i in 0..n {
                z[i] = precond[i] * r[i];
            }
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + p[i] * beta;
            }
        }
        x
    }
}

/// Minimizes the energy over all node transforms, refreshing correspondences
/// after every accepted step.
///
/// Steps are damped Gauss-Newton (Levenberg-Marquardt) over all nodes jointly
/// with right perturbations `tau <- tau exp(dx)`; a step is kept only if it
/// lowers the energy, so the recorded energies never increase.
pub fn minimize(
    graph: &mut FlowGraph,
    init: &MotionField,
    cfg: &FlowConfig,
) -> Result<(MotionField, MinimizeReport)> {
    init.validate()?;
    let mut field = init.clone();
    let mut local = vec![usize::MAX; graph.num_points];
    for (l, &i) in graph.nodes.iter().enumerate() {
        local[i] = l;
    }
    let mut poses: Vec<Pose> = graph.nodes.iter().map(|&i| init.poses[i]).collect();
    let kp_local: Vec<usize> = graph.keypoints.iter().map(|&i| local[i]).collect();
    let edges_local: Vec<(usize, usize)> = graph
        .edges
        .iter()
        .map(|&(i, j)| (local[i], local[j]))
        .collect();

    let energy_local = |g: &FlowGraph, poses: &[Pose]| g.energy_of(|i| poses[local[i]]);
    let mut energy = energy_local(graph, &poses);
    let mut report = MinimizeReport {
        energies: vec![energy],
        iterations: 0,
        diverged: false,
    };
    let w = {
        let w2 = graph.rot_weight * graph.rot_weight;
        Matrix6::from_diagonal(&Twist::new(1.0, 1.0, 1.0, w2, w2, w2))
    };
    let mut mu = 1e-6;

    for _ in 0..cfg.max_iters {
        if energy <= f64::EPSILON {
            break;
        }
        let mut ne = NormalEquations {
            diag: vec![Matrix6::zeros(); poses.len()],
            off: Vec::with_capacity(edges_local.len()),
            grad: vec![Twist::zeros(); poses.len()],
        };
        for (m, &l) in kp_local.iter().enumerate() {
            let w = graph.weights[m];
            if w == 0.0 {
                continue;
            }
            let (p, n) = (&graph.sources[m], &graph.target_normals[m]);
            let pose = &poses[l];
            let r = data_residual(&pose.transform_point(p), &graph.targets[m], n);
            let mut jac = nalgebra::Matrix3x6::zeros();
            jac.fixed_view_mut::<3, 3>(0, 0).copy_from(&pose.rotation);
            jac.fixed_view_mut::<3, 3>(0, 3)
                .copy_from(&(-pose.rotation * skew(p)));
            if *n != Vector3::zeros() {
                jac = n * (n.transpose() * jac);
            }
            ne.diag[l] += jac.transpose() * jac * (w * graph.lambda_data);
            ne.grad[l] += jac.transpose() * r * (w * graph.lambda_data);
        }
        for &(a, b) in &edges_local {
            let d = poses[a].inverse().compose(&poses[b]);
            let e = d.log();
            // d log(tau_a^-1 tau_b): +I in tau_b, -Ad(D^-1) in tau_a (first order).
            let ja = -adjoint(&d.inverse());
            let lam = graph.lambda_reg;
            ne.diag[a] += ja.transpose() * w * ja * lam;
            ne.diag[b] += w * lam;
            ne.off.push((a, b, ja.transpose() * w * lam));
            ne.grad[a] += ja.transpose() * (w * e) * lam;
            ne.grad[b] += w * e * lam;
        }

        let a = Matrix6::from_diagonal(&graph.anchor_weights);
        for (l, &i) in graph.nodes.iter().enumerate() {
            let e = graph.anchor[i].inverse().compose(&poses[l]).log();
            ne.diag[l] += a;
            ne.grad[l] += a * e;
        }

        let mut accepted = None;
        for _ in 0..12 {
            let dx = ne.solve(mu, cfg.cg_max_iters, cfg.cg_tol);
            let candidate: Vec<Pose> = poses
                .iter()
                .zip(&dx)
                .map(|(p, d)| p.compose(&Pose::exp(d)).orthonormalized())
                .collect();
            let e_new = energy_local(graph, &candidate);
            if e_new < energy {
                accepted = Some((candidate, e_new));
                mu = (mu / 3.0).max(1e-12);
                break;
            }
            mu *= 10.0;
        }
        let Some((candidate, e_step)) = accepted else {
            report.diverged = true;
            log::warn!("flow: no decreasing step after damping, keeping best-so-far");
            break;
        };
        poses = candidate;
        for p in &poses {
            if !p.is_proper(PROPER_TOL) {
                return Err(Error::Numerical("flow update left SO(3)".into()));
            }
        }

        // Refresh correspondences; a new target is taken only if it is closer.
        for (m, &l) in kp_local.iter().enumerate() {
            let pose = &poses[l];
            let moved = pose.transform_point(&graph.sources[m]);
            let dense = graph.dense_targets;
            if let Some(j) = graph
                .index
                .query(&graph.sources[m], &graph.normals[m], pose, dense)
            {
                let (q, n) = graph.index.target(j, dense);
                let w = graph.term_weight(m, &n);
                let old = graph.weights[m]
                    * data_residual(&moved, &graph.targets[m], &graph.target_normals[m])
                        .norm_squared();
                // A plane term never falls back to a cheaper crease target.
                let demotes = w < graph.weights[m];
                if !demotes && w * data_residual(&moved, &q, &n).norm_squared() < old {
                    graph.targets[m] = q;
                    graph.target_normals[m] = n;
                    graph.target_indices[m] = j;
                    graph.weights[m] = w;
                }
            }
        }
        let e_new = energy_local(graph, &poses).min(e_step);
        report.iterations += 1;
        report.energies.push(e_new);
        let rel = (energy - e_new) / energy;
        energy = e_new;
        if rel < cfg.tol {
            break;
        }
    }
    for (l, &i) in graph.nodes.iter().enumerate() {
        field.poses[i] = poses[l];
    }
    field.validate()?;
    Ok((field, report))
}

/// Everything produced by [`estimate_flow`].
#[derive(Debug)]
pub struct FlowResult {
    pub field: MotionField,
    pub report: MinimizeReport,
    pub ground: Vec<bool>,
    /// Keypoints that carry a data term, ascending.
    pub data_keypoints: Vec<usize>,
    pub num_keypoints: usize,
    pub num_correspondences: usize,
    pub num_edges: usize,
    pub keypoint_fallback: bool,
    pub warnings: Vec<String>,
}

/// Motion field taking `scan1` onto `scan2`, both in their own sensor frames.
///
/// `init` is applied to every point as the starting estimate (typically the
/// odometry `pose_t^-1 pose_{t-1}`); ground points keep it unchanged.
pub fn estimate_flow(
    scan1: &PointCloud,
    scan2: &PointCloud,
    init: &Pose,
    cfg: &FlowConfig,
) -> Result<FlowResult> {
    cfg.validate()?;
    if scan1.is_empty() || scan2.is_empty() {
        return Err(Error::InvalidInput("flow needs two non-empty scans".into()));
    }
    let pos1 = scan1.positions();
    let pos2 = scan2.positions();
    let ground1 = ground_mask(&pos1, cfg);
    let ground2 = ground_mask(&pos2, cfg);
    let nodes1: Vec<usize> = (0..pos1.len()).filter(|&i| !ground1[i]).collect();
    let nodes2: Vec<usize> = (0..pos2.len()).filter(|&i| !ground2[i]).collect();
    let init_field = MotionField::constant(pos1.len(), *init);

    let mut warnings = Vec::new();
    if nodes1.len() < cfg.min_keypoints.max(1) || nodes2.len() < cfg.min_keypoints.max(1) {
        warnings
            .push("too few non-ground points; motion field left at the initial estimate".into());
        return Ok(FlowResult {
            report: MinimizeReport {
                energies: vec![0.0],
                iterations: 0,
                diverged: false,
            },
            field: init_field,
            ground: ground1,
            data_keypoints: Vec::new(),
            num_keypoints: 0,
            num_correspondences: 0,
            num_edges: 0,
            keypoint_fallback: false,
            warnings,
        });
    }
    let kp1 = select_keypoints_in(&pos1, &nodes1, cfg)?;
    let kp2 = select_keypoints_in(&pos2, &nodes2, cfg)?;
    if kp1.fallback || kp2.fallback {
        warnings.push("no distinctive geometry; keypoints subsampled uniformly".into());
    }
    let mut graph = build_graph(
        &pos1,
        &nodes1,
        &kp1,
        &TargetScan {
            positions: &pos2,
            candidates: &nodes2,
            keypoints: &kp2,
        },
        &init_field,
        cfg,
    )?;
    let start = if cfg.coarse_stiffness > 1.0 {
        // Near-rigid bodies first, so correspondences along edges settle
        // before individual transforms are free to follow them.
        graph.lambda_reg = cfg.lambda_reg * cfg.coarse_stiffness;
        let (coarse, _) = minimize(&mut graph, &init_field, cfg)?;
        graph.lambda_reg = cfg.lambda_reg;
        coarse
    } else {
        init_field
    };
    // Raw samples of a crease rarely coincide between scans; matching onto
    // the local surface removes that sampling offset once motion is close.
    if cfg.dense_refinement {
        graph.dense_targets = true;
        if cfg.surface_stride > 0 {
            let tree1 = KdTree::from_subset(&pos1, &nodes1);
            let surface = surface_normals(&pos1, &nodes1, &tree1, cfg);
            let mut is_key = vec![false; pos1.len()];
            for &i in &kp1.indices {
                is_key[i] = true;
            }
            let flat = nodes1
                .iter()
                .zip(&surface)
                .filter(|(&i, (_, plane))| !is_key[i] && *plane != Vector3::zeros());
            for (&i, (orientation, _)) in flat.step_by(cfg.surface_stride) {
                graph.add_data_term(i, pos1[i], *orientation);
            }
        }
    }
    graph.rematch(&start);
    let (field, report) = minimize(&mut graph, &start, cfg)?;
    if report.diverged {
        warnings.push("flow minimization stopped without a decreasing step".into());
    }
    Ok(FlowResult {
        field,
        report,
        ground: ground1,
        data_keypoints: graph.keypoints[..graph.num_keypoint_terms].to_vec(),
        num_keypoints: kp1.indices.len(),
        num_correspondences: graph.keypoints.len(),
        num_edges: graph.edges.len(),
        keypoint_fallback: kp1.fallback || kp2.fallback,
        warnings,
    })
}
