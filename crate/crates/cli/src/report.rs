//! The `eval` stage: pointwise PR curves per class, object boxes and AP per
//! difficulty, and a mode comparison table.

use crate::config::{Mode, PipelineConfig};
use crate::dataset::{create_dir, frame_name, Sequence};
use crate::manifest::RunManifest;
use crate::pipeline::labels_dir;
use lidarseg::eval::{
    average_precision_frames, cluster_points, fit_box, ground_truth_boxes, objectwise_recall,
    pointwise_recall, pr_curve, pr_svg, write_text, Box3D, PrCurve,
};
use lidarseg::scan_io::{read_labels, Difficulty, LabelRow};
use lidarseg::{Error, GroundTruth, Result, SemanticClass};
use nalgebra::Vector3;
use std::collections::BTreeMap;
use std::fmt::Write as _;

/// Difficulty subsets reported for object metrics; `None` is all boxes.
const SUBSETS: [Option<Difficulty>; 4] = [
    Some(Difficulty::Easy),
    Some(Difficulty::Moderate),
    Some(Difficulty::Hard),
    None,
];

fn subset_name(d: Option<Difficulty>) -> &'static str {
    d.map_or("all", Difficulty::name)
}

#[derive(Clone, Debug)]
pub struct ModeMetrics {
    pub mode: Mode,
    /// PR curve per class, in class order; `None` when the class never occurs.
    pub curves: Vec<Option<PrCurve>>,
    pub average_precision: BTreeMap<&'static str, Option<f64>>,
    pub pointwise_recall: BTreeMap<&'static str, Option<f64>>,
    pub objectwise_recall: BTreeMap<&'static str, Option<f64>>,
}

impl ModeMetrics {
    pub fn max_f1(&self, class: SemanticClass) -> Option<f64> {
        self.curves[class.index()].as_ref().map(PrCurve::max_f1)
    }
}

#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    pub modes: Vec<ModeMetrics>,
}

impl EvalReport {
    pub fn mode(&self, mode: Mode) -> Option<&ModeMetrics> {
        self.modes.iter().find(|m| m.mode == mode)
    }

    /// One row per mode with the max-F1 of every class.
    pub fn comparison_csv(&self) -> String {
        let mut s = String::from("mode");
        for c in SemanticClass::ALL {
            let _ = write!(s, ",f1_{}", c.name());
        }
        s.push('\n');
        for m in &self.modes {
            s.push_str(m.mode.name());
            for c in SemanticClass::ALL {
                match m.max_f1(c) {
                    Some(f) => {
                        let _ = write!(s, ",{f:.6}");
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }

    /// Long-format table: `mode,metric,subset,value`.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("mode,metric,subset,value\n");
        let fmt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        for m in &self.modes {
            let name = m.mode.name();
            for c in SemanticClass::ALL {
                if let Some(curve) = &m.curves[c.index()] {
                    let best = curve.best_point();
                    let _ = writeln!(s, "{name},max_f1,{},{:.6}", c.name(), curve.max_f1());
                    let _ = writeln!(
                        s,
                        "{name},precision_at_max_f1,{},{:.6}",
                        c.name(),
                        best.precision
                    );
                    let _ = writeln!(s, "{name},recall_at_max_f1,{},{:.6}", c.name(), best.recall);
                    let _ = writeln!(
                        s,
                        "{name},threshold_at_max_f1,{},{:.6}",
                        c.name(),
                        best.threshold
                    );
                }
            }
            for (metric, table) in [
                ("ap3d", &m.average_precision),
                ("pointwise_recall", &m.pointwise_recall),
                ("objectwise_recall", &m.objectwise_recall),
            ] {
                for d in SUBSETS {
                    let sub = subset_name(d);
                    let _ = writeln!(s, "{name},{metric},{sub},{}", fmt(table[sub]));
                }
            }
        }
        s
    }
}

/// Labels collapsed to object / not object, as the movable class.
fn as_object(c: SemanticClass) -> SemanticClass {
    if c.is_object() {
        SemanticClass::Movable
    } else {
        SemanticClass::NonMovable
    }
}

struct FrameData {
    positions: Vec<Vector3<f64>>,
    gt: GroundTruth,
    gt_boxes: Vec<Box3D>,
}

fn evaluate_mode(
    mode: Mode,
    frames: &[FrameData],
    cfg: &PipelineConfig,
    manifest: &mut RunManifest,
) -> Result<ModeMetrics> {
    let dir = labels_dir(&cfg.output.dir, mode);
    let mut conf: [Vec<f64>; 3] = Default::default();
    let mut truth: [Vec<bool>; 3] = Default::default();
    let mut pred_objects = Vec::new();
    let mut gt_objects = GroundTruth::default();
    let mut pred_boxes: Vec<Vec<Box3D>> = Vec::with_capacity(frames.len());
    for (t, f) in frames.iter().enumerate() {
        let path = dir.join(format!("{}.csv", frame_name(t)));
        let rows: Vec<LabelRow> = manifest.time("read", || read_labels(&path))?;
        if rows.len() != f.gt.len() {
            return Err(Error::Dimension(format!(
                "{}: {} labels for {} points",
                path.display(),
                rows.len(),
                f.gt.len()
            )));
        }
        for (row, &label) in rows.iter().zip(&f.gt.labels) {
            for c in 0..3 {
                conf[c].push(row.belief[c]);
                truth[c].push(label.index() == c);
            }
        }
        let mask: Vec<bool> = rows.iter().map(|r| r.label.is_object()).collect();
        let object_conf: Vec<f64> = rows.iter().map(|r| r.belief[1] + r.belief[2]).collect();
        let boxes = manifest.time("cluster", || -> Result<Vec<Box3D>> {
            cluster_points(&f.positions, &mask, Some(&object_conf), &cfg.cluster)?
                .into_iter()
                .map(|c| fit_box(&c.members, &f.positions, c.score))
                .collect()
        })?;
        pred_boxes.push(boxes);
        pred_objects.extend(rows.iter().map(|r| as_object(r.label)));
        gt_objects
            .labels
            .extend(f.gt.labels.iter().map(|l| as_object(*l)));
        gt_objects.box_ids.extend(&f.gt.box_ids);
        gt_objects.difficulty.extend(&f.gt.difficulty);
    }
    let curves = SemanticClass::ALL
        .iter()
        .map(|c| {
            let k = c.index();
            if truth[k].iter().any(|t| *t) {
                pr_curve(&conf[k], &truth[k]).map(Some)
            } else {
                manifest.warn(format!(
                    "{mode}: no {} points in the ground truth",
                    c.name()
                ));
                Ok(None)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(&[Box3D], &[Box3D])> = pred_boxes
        .iter()
        .zip(frames)
        .map(|(p, f)| (p.as_slice(), f.gt_boxes.as_slice()))
        .collect();
    let mut ap = BTreeMap::new();
    let mut point_rec = BTreeMap::new();
    let mut object_rec = BTreeMap::new();
    for d in SUBSETS {
        let sub = subset_name(d);
        ap.insert(sub, average_precision_frames(&pairs, d, &cfg.eval));
        object_rec.insert(sub, objectwise_recall(&pairs, d, cfg.eval.iou_threshold));
        point_rec.insert(
            sub,
            pointwise_recall(&pred_objects, &gt_objects, SemanticClass::Movable, d)?,
        );
    }
    Ok(ModeMetrics {
        mode,
        curves,
        average_precision: ap,
        pointwise_recall: point_rec,
        objectwise_recall: object_rec,
    })
}

/// Scores the label files of every configured mode against the ground truth.
///
/// Without ground truth nothing can be scored; a warning is recorded and the
/// report is empty.
pub fn evaluate(cfg: &PipelineConfig, manifest: &mut RunManifest) -> Result<EvalReport> {
    let scans = cfg
        .input
        .scans
        .as_deref()
        .ok_or_else(|| Error::Config("input.scans is not set".into()))?;
    let Some(gt_dir) = cfg.input.ground_truth.as_deref() else {
        manifest.warn("no ground truth configured; pointwise metrics skipped");
        return Ok(EvalReport::default());
    };
    let seq = Sequence::open(scans, None, Some(gt_dir), None)?;
    let mut frames = Vec::with_capacity(seq.len());
    for t in 0..seq.len() {
        let (cloud, _) = manifest.time("read", || seq.read_scan(t))?;
        let gt = seq
            .read_ground_truth(t)?
            .expect("ground truth directory is set");
        let positions = cloud.positions();
        let gt_boxes = ground_truth_boxes(
            &positions,
            &gt,
            &[SemanticClass::Movable, SemanticClass::Dynamic],
        )?;
        frames.push(FrameData {
            positions,
            gt,
            gt_boxes,
        });
    }
    let mut modes = cfg.modes.clone();
    modes.sort();
    modes.dedup();
    manifest.modes = modes.iter().map(|m| m.name().to_string()).collect();
    let mut report = EvalReport::default();
    for m in modes {
        report.modes.push(evaluate_mode(m, &frames, cfg, manifest)?);
    }

    let dir = cfg.output.dir.join("eval");
    create_dir(&dir)?;
    write_text(&dir.join("metrics.csv"), &report.metrics_csv())?;
    write_text(&dir.join("modes.csv"), &report.comparison_csv())?;
    for m in &report.modes {
        let mut per_class = Vec::new();
        for c in SemanticClass::ALL {
            if let Some(curve) = &m.curves[c.index()] {
                write_text(
                    &dir.join(format!("pr_{}_{}.csv", m.mode.name(), c.name())),
                    &curve.to_csv(),
                )?;
                per_class.push((c.name(), curve));
            }
        }
        write_text(
            &dir.join(format!("pr_{}.svg", m.mode.name())),
            &pr_svg(&per_class),
        )?;
    }
    let dynamic: Vec<(&str, &PrCurve)> = report
        .modes
        .iter()
        .filter_map(|m| {
            m.curves[SemanticClass::Dynamic.index()]
                .as_ref()
                .map(|c| (m.mode.name(), c))
        })
        .collect();
    if !dynamic.is_empty() {
        write_text(&dir.join("pr_dynamic.svg"), &pr_svg(&dynamic))?;
    }
    Ok(report)
}
