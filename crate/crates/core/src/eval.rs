//! Boxes from pointwise predictions, and the metrics used to score them:
//! PR curves with their max-F1 point, IoU-matched average precision and
//! pointwise / object-wise recall.

use crate::error::{Error, Result};
use crate::kdtree::KdTree;
use crate::scan_io::{Difficulty, GroundTruth, SemanticClass};
use nalgebra::{Matrix2, SymmetricEigen, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    /// Points closer than this are connected (m).
    pub radius: f64,
    /// Smaller components are discarded.
    pub min_points: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            radius: 0.5,
            min_points: 20,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) || self.min_points == 0 {
            return Err(Error::Config(
                "cluster radius and min_points must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cluster {
    /// Point indices, ascending.
    pub members: Vec<usize>,
    /// Mean confidence of the members.
    pub score: f64,
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut a: usize) -> usize {
        while self.parent[a] != a {
            self.parent[a] = self.parent[self.parent[a]];
            a = self.parent[a];
        }
        a
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Smaller root wins so labels do not depend on merge order.
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.parent[hi] = lo;
        }
    }
}

/// Connected components of the masked points under `distance < radius`.
///
/// Clusters come out ordered by their smallest member. `confidences`, when
/// given, sets each cluster's score; otherwise scores are 1.
pub fn cluster_points(
    positions: &[Vector3<f64>],
    mask: &[bool],
    confidences: Option<&[f64]>,
    cfg: &ClusterConfig,
) -> Result<Vec<Cluster>> {
    cfg.validate()?;
    if mask.len() != positions.len() {
        return Err(Error::Dimension(format!(
            "mask has {} entries for {} points",
            mask.len(),
            positions.len()
        )));
    }
    if let Some(c) = confidences {
        if c.len() != positions.len() {
            return Err(Error::Dimension(format!(
                "{} confidences for {} points",
                c.len(),
                positions.len()
            )));
        }
    }
    let subset: Vec<usize> = (0..positions.len()).filter(|&i| mask[i]).collect();
    if subset.is_empty() {
        return Ok(Vec::new());
    }
    let tree = KdTree::from_subset(positions, &subset);
    let mut uf = UnionFind::new(positions.len());
    for &i in &subset {
        for nb in tree.within_radius(&positions[i], cfg.radius) {
            // within_radius is inclusive; adjacency is strict.
            if nb.index != i && nb.dist2 < cfg.radius * cfg.radius {
                uf.union(i, nb.index);
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for &i in &subset {
        groups.entry(uf.find(i)).or_default().push(i);
    }
    Ok(groups
        .into_values()
        .filter(|m| m.len() >= cfg.min_points)
        .map(|members| {
            let score = confidences.map_or(1.0, |c| {
                members.iter().map(|&i| c[i]).sum::<f64>() / members.len() as f64
            });
            Cluster { members, score }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Box3D {
    pub center: Vector3<f64>,
    /// Length along the yaw axis, width across it, height (m).
    pub extents: Vector3<f64>,
    /// Heading of the length axis, in `[-pi/2, pi/2)`.
    pub yaw: f64,
    pub score: f64,
    /// Ground-truth boxes only.
    pub difficulty: Option<Difficulty>,
}

impl Box3D {
    pub fn volume(&self) -> f64 {
        self.extents.x * self.extents.y * self.extents.z
    }

    /// Footprint corners, counter-clockwise.
    pub fn footprint(&self) -> [Vector2<f64>; 4] {
        let (s, c) = self.yaw.sin_cos();
        let u = Vector2::new(c, s) * (self.extents.x / 2.0);
        let v = Vector2::new(-s, c) * (self.extents.y / 2.0);
        let o = self.center.xy();
        [o - u - v, o + u - v, o + u + v, o - u + v]
    }

    fn z_range(&self) -> (f64, f64) {
        let h = self.extents.z / 2.0;
        (self.center.z - h, self.center.z + h)
    }
}

fn wrap_half_turn(a: f64) -> f64 {
    use std::f64::consts::{FRAC_PI_2, PI};
    (a + FRAC_PI_2).rem_euclid(PI) - FRAC_PI_2
}

/// Andrew's monotone chain; counter-clockwise, no collinear points.
fn convex_hull(mut pts: Vec<Vector2<f64>>) -> Vec<Vector2<f64>> {
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>| (a - o).perp(&(b - o));
    let mut hull: Vec<Vector2<f64>> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Vector2<f64>>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for p in iter {
            while hull.len() >= start + 2
                && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0
            {
                hull.pop();
            }
            hull.push(*p);
        }
        hull.pop();
    }
    hull
}

// Relative eigenvalue gap below which the footprint counts as isotropic.
const ISOTROPIC_GAP: f64 = 1e-3;

/// Oriented box around `members`.
///
/// Yaw follows the principal axis of the footprint covariance. When the
/// covariance is isotropic (a square footprint) that axis is undefined and
/// the minimum-area rectangle over convex-hull edge directions is used.
pub fn fit_box(members: &[usize], positions: &[Vector3<f64>], score: f64) -> Result<Box3D> {
    if members.is_empty() {
        return Err(Error::InvalidInput(
            "cannot fit a box to an empty cluster".into(),
        ));
    }
    if let Some(&bad) = members.iter().find(|&&i| i >= positions.len()) {
        return Err(Error::InvalidInput(format!("member {bad} out of range")));
    }
    let xy: Vec<Vector2<f64>> = members.iter().map(|&i| positions[i].xy()).collect();
    let mean = xy.iter().sum::<Vector2<f64>>() / xy.len() as f64;
    let cov = xy
        .iter()
        .map(|p| (p - mean) * (p - mean).transpose())
        .sum::<Matrix2<f64>>()
        / xy.len() as f64;
    let eig = SymmetricEigen::new(cov);
    let (l0, l1) = (eig.eigenvalues[0], eig.eigenvalues[1]);
    let imax = if l0 >= l1 { 0 } else { 1 };
    let total = l0.abs() + l1.abs();

    let extent_at = |yaw: f64| {
        let (s, c) = yaw.sin_cos();
        let (mut lo, mut hi) = (
            Vector2::repeat(f64::INFINITY),
            Vector2::repeat(f64::NEG_INFINITY),
        );
        for p in &xy {
            let q = Vector2::new(c * p.x + s * p.y, -s * p.x + c * p.y);
            lo = lo.inf(&q);
            hi = hi.sup(&q);
        }
        (lo, hi)
    };
    let yaw = if total > 0.0 && (l0 - l1).abs() / total > ISOTROPIC_GAP {
        let axis = eig.eigenvectors.column(imax);
        axis[1].atan2(axis[0])
    } else {
        let hull = convex_hull(xy.clone());
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..hull.len() {
            let e = hull[(k + 1) % hull.len()] - hull[k];
            let yaw = e.y.atan2(e.x);
            let (lo, hi) = extent_at(yaw);
            let area = (hi.x - lo.x) * (hi.y - lo.y);
            // Ties go to the smallest wrapped yaw so the result is stable.
            if area < best.0 - 1e-12
                || ((area - best.0).abs() <= 1e-12
                    && wrap_half_turn(yaw).abs() < wrap_half_turn(best.1).abs())
            {
                best = (area, yaw);
            }
        }
        best.1
    };
    let yaw = wrap_half_turn(yaw);
    let (lo, hi) = extent_at(yaw);
    let mid = (lo + hi) / 2.0;
    let (s, c) = yaw.sin_cos();
    let (zlo, zhi) = members
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &i| {
            (a.min(positions[i].z), b.max(positions[i].z))
        });
    Ok(Box3D {
        center: Vector3::new(
            c * mid.x - s * mid.y,
            s * mid.x + c * mid.y,
            (zlo + zhi) / 2.0,
        ),
        extents: Vector3::new(hi.x - lo.x, hi.y - lo.y, zhi - zlo),
        yaw,
        score,
        difficulty: None,
    })
}

/// Sutherland-Hodgman clip of a convex polygon against a convex
/// counter-clockwise clip polygon.
fn clip_polygon(subject: &[Vector2<f64>], clip: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
    let mut out = subject.to_vec();
    for k in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[k], clip[(k + 1) % clip.len()]);
        let side = |p: &Vector2<f64>| (b - a).perp(&(p - a));
        let input = std::mem::take(&mut out);
        for i in 0..input.len() {
            let (p, q) = (input[i], input[(i + 1) % input.len()]);
            let (sp, sq) = (side(&p), side(&q));
            if sp >= 0.0 {
                out.push(p);
            }
            if (sp >= 0.0) != (sq >= 0.0) {
                out.push(p + (q - p) * (sp / (sp - sq)));
            }
        }
    }
    out
}

fn polygon_area(poly: &[Vector2<f64>]) -> f64 {
    (0..poly.len())
        .map(|i| poly[i].perp(&poly[(i + 1) % poly.len()]))
        .sum::<f64>()
        .abs()
        / 2.0
}

/// Intersection over union of two yawed boxes.
pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    let (az, bz) = (a.z_range(), b.z_range());
    let dz = az.1.min(bz.1) - az.0.max(bz.0);
    if dz <= 0.0 {
        return 0.0;
    }
    let inter = polygon_area(&clip_polygon(&a.footprint(), &b.footprint())) * dz;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PrPoint {
    /// Points scoring at least this are predicted positive.
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

impl PrPoint {
    pub fn f1(&self) -> f64 {
        let s = self.precision + self.recall;
        if s > 0.0 {
            2.0 * self.precision * self.recall / s
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    /// One point per distinct confidence, thresholds strictly decreasing.
    pub points: Vec<PrPoint>,
    /// Index into `points` of the max-F1 operating point (highest threshold on ties).
    pub best: usize,
}

impl PrCurve {
    pub fn max_f1(&self) -> f64 {
        self.points[self.best].f1()
    }

    pub fn best_point(&self) -> PrPoint {
        self.points[self.best]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,precision,recall,f1\n");
        for p in &self.points {
            let _ = writeln!(
                s,
                "{:.6},{:.6},{:.6},{:.6}",
                p.threshold,
                p.precision,
                p.recall,
                p.f1()
            );
        }
        s
    }
}

/// PR curve of `confidences` against binary ground truth.
pub fn pr_curve(confidences: &[f64], positive: &[bool]) -> Result<PrCurve> {
    if confidences.len() != positive.len() {
        return Err(Error::Dimension(format!(
            "{} confidences for {} labels",
            confidences.len(),
            positive.len()
        )));
    }
    if let Some(c) = confidences.iter().find(|c| !c.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite confidence {c}")));
    }
    let total_pos = positive.iter().filter(|&&p| p).count();
    if total_pos == 0 {
        return Err(Error::InvalidInput(
            "PR curve needs at least one positive".into(),
        ));
    }
    let mut order: Vec<usize> = (0..confidences.len()).collect();
    order.sort_by(|&a, &b| confidences[b].total_cmp(&confidences[a]));
    let mut points = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        let threshold = confidences[order[k]];
        while k < order.len() && confidences[order[k]] == threshold {
            tp += positive[order[k]] as usize;
            seen += 1;
            k += 1;
        }
        points.push(PrPoint {
            threshold,
            precision: tp as f64 / seen as f64,
            recall: tp as f64 / total_pos as f64,
        });
    }
    let mut best = 0;
    for (i, p) in points.iter().enumerate() {
        if p.f1() > points[best].f1() {
            best = i;
        }
    }
    Ok(PrCurve { points, best })
}

/// PR curve for one class of a labeled cloud.
pub fn pr_curve_for_class(
    confidences: &[f64],
    labels: &[SemanticClass],
    class: SemanticClass,
) -> Result<PrCurve> {
    let positive: Vec<bool> = labels.iter().map(|&l| l == class).collect();
    pr_curve(confidences, &positive)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApInterpolation {
    /// Mean of the precision envelope at recall 0, 0.1, ..., 1.
    ElevenPoint,
    /// Area under the precision envelope.
    Continuous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ApConfig {
    pub iou_threshold: f64,
    pub interpolation: ApInterpolation,
}

impl Default for ApConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            interpolation: ApInterpolation::ElevenPoint,
        }
    }
}

/// Greedy matching by descending score; each prediction takes the unmatched
/// ground-truth box of highest IoU at or above the threshold. Returns the
/// matched ground-truth index per prediction, in score order.
pub fn greedy_match(
    preds: &[Box3D],
    gts: &[Box3D],
    iou_threshold: f64,
) -> Vec<(usize, Option<usize>)> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    order
        .into_iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let iou = iou3d(&preds[p], gt);
                if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            (p, best.map(|(g, _)| g))
        })
        .collect()
}

/// Interpolated average precision from a ranked TP/FP sequence.
pub fn ap_from_ranking(hits: &[bool], num_gt: usize, interpolation: ApInterpolation) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let pr: Vec<(f64, f64)> = hits
        .iter()
        .enumerate()
        .map(|(k, &h)| {
            tp += h as usize;
            (tp as f64 / num_gt as f64, tp as f64 / (k + 1) as f64)
        })
        .collect();
    // Precision envelope: best precision at any recall >= r.
    let envelope = |r: f64| {
        pr.iter()
            .filter(|(rec, _)| *rec >= r - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max)
    };
    match interpolation {
        ApInterpolation::ElevenPoint => {
            (0..=10).map(|i| envelope(i as f64 / 10.0)).sum::<f64>() / 11.0
        }
        ApInterpolation::Continuous => {
            let mut area = 0.0;
            let mut prev = 0.0;
            for &(r, _) in &pr {
                if r > prev {
                    area += (r - prev) * envelope(r);
                    prev = r;
                }
            }
            area
        }
    }
}

/// Average precision of `preds` against the ground-truth boxes tagged
/// `difficulty` (all boxes when `None`).
///
/// Predictions matched to a box of another difficulty are ignored rather
/// than counted as false positives. `None` when no box survives the filter.
pub fn average_precision(
    preds: &[Box3D],
    gts: &[Box3D],
    difficulty: Option<Difficulty>,
    cfg: &ApConfig,
) -> Option<f64> {
    average_precision_frames(&[(preds, gts)], difficulty, cfg)
}

/// Scored hits of every frame and the number of counted ground-truth boxes.
fn pooled_hits(
    frames: &[(&[Box3D], &[Box3D])],
    difficulty: Option<Difficulty>,
    iou_threshold: f64,
) -> (Vec<(f64, bool)>, usize) {
    let counts = |g: &Box3D| difficulty.is_none_or(|d| g.difficulty == Some(d));
    let mut hits = Vec::new();
    let mut num_gt = 0;
    for (preds, gts) in frames {
        num_gt += gts.iter().filter(|g| counts(g)).count();
        for (p, g) in greedy_match(preds, gts, iou_threshold) {
            match g {
                Some(g) if !counts(&gts[g]) => {}
                g => hits.push((preds[p].score, g.is_some())),
            }
        }
    }
    // Stable sort keeps frame order among equal scores.
    hits.sort_by(|a, b| b.0.total_cmp(&a.0));
    (hits, num_gt)
}

/// Average precision over several frames: boxes are matched within their
/// frame, then all detections are ranked together.
pub fn average_precision_frames(
    frames: &[(&[Box3D], &[Box3D])],
    difficulty: Option<Difficulty>,
    cfg: &ApConfig,
) -> Option<f64> {
    let (hits, num_gt) = pooled_hits(frames, difficulty, cfg.iou_threshold);
    if num_gt == 0 {
        return None;
    }
    let ranked: Vec<bool> = hits.into_iter().map(|(_, h)| h).collect();
    Some(ap_from_ranking(&ranked, num_gt, cfg.interpolation))
}

/// Share of ground-truth boxes (of `difficulty`) matched by a prediction,
/// pooled over frames.
pub fn objectwise_recall(
    frames: &[(&[Box3D], &[Box3D])],
    difficulty: Option<Difficulty>,
    iou_threshold: f64,
) -> Option<f64> {
    let (hits, num_gt) = pooled_hits(frames, difficulty, iou_threshold);
    if num_gt == 0 {
        return None;
    }
    Some(hits.iter().filter(|(_, h)| *h).count() as f64 / num_gt as f64)
}

/// TP / (TP + FN) over points of `class`, restricted to points whose
/// ground-truth box is tagged `difficulty` when given.
pub fn pointwise_recall(
    predicted: &[SemanticClass],
    gt: &GroundTruth,
    class: SemanticClass,
    difficulty: Option<Difficulty>,
) -> Result<Option<f64>> {
    if predicted.len() != gt.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labeled points",
            predicted.len(),
            gt.len()
        )));
    }
    let (mut tp, mut total) = (0usize, 0usize);
    for (i, (&p, &l)) in predicted.iter().zip(&gt.labels).enumerate() {
        if l != class || difficulty.is_some_and(|d| gt.difficulty_of_point(i) != Some(d)) {
            continue;
        }
        total += 1;
        tp += (p == class) as usize;
    }
    Ok((total > 0).then(|| tp as f64 / total as f64))
}

/// Boxes fitted to the ground-truth objects whose label is one of `classes`.
pub fn ground_truth_boxes(
    positions: &[Vector3<f64>],
    gt: &GroundTruth,
    classes: &[SemanticClass],
) -> Result<Vec<Box3D>> {
    if positions.len() != gt.len() {
        return Err(Error::Dimension(format!(
            "{} points for {} labels",
            positions.len(),
            gt.len()
        )));
    }
    let mut members: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
    for (i, id) in gt.box_ids.iter().enumerate() {
        if let Some(id) = id {
            if classes.contains(&gt.labels[i]) {
                members.entry(*id).or_default().push(i);
            }
        }
    }
    members
        .into_iter()
        .map(|(id, m)| {
            let mut b = fit_box(&m, positions, 1.0)?;
            b.difficulty = gt.difficulty.get(&id).copied();
            Ok(b)
        })
        .collect()
}

/// Line plot of PR curves, recall on x and precision on y.
pub fn pr_svg(curves: &[(&str, &PrCurve)]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 360.0;
    const M: f64 = 50.0;
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
    let x = |r: f64| M + r * (W - 2.0 * M);
    let y = |p: f64| H - M - p * (H - 2.0 * M);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(
        s,
        "<rect x=\"{M}\" y=\"{M}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>",
        W - 2.0 * M,
        H - 2.0 * M
    );
    for i in 0..=10 {
        let v = i as f64 / 10.0;
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{v:.1}</text>",
            x(v),
            H - M + 16.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.1}</text>",
            M - 6.0,
            y(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">Recall</text>",
        W / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.1})\">Precision</text>",
        H / 2.0,
        H / 2.0
    );
    for (k, (name, curve)) in curves.iter().enumerate() {
        let color = colors[k % colors.len()];
        let pts: Vec<String> = curve
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", x(p.recall), y(p.precision)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{color}\">{} (F1 {:.3})</text>",
            M + 8.0,
            M + 16.0 + 14.0 * k as f64,
            escape(name),
            curve.max_f1()
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
