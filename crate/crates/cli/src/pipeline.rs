//! The `project`, `train` and `classify` stages.

use crate::config::{Mode, PipelineConfig};
use crate::dataset::{create_dir, frame_name, Sequence};
use crate::manifest::{FrameRecord, RunManifest};
use lidarseg::filter::{self, associate, Belief, MotionModel};
use lidarseg::flow::estimate_flow;
use lidarseg::projection::{back_project, project, write_debug_pgms, PixelIndexMap};
use lidarseg::scan_io::write_labels;
use lidarseg::scorer::{
    load_model, load_scores, predict, save_model, train as train_model, ScorerModel, TrainingSample,
};
use lidarseg::{Error, GroundTruth, PointCloud, Result};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub fn labels_dir(out: &Path, mode: Mode) -> PathBuf {
    out.join(mode.name()).join("labels")
}

pub fn model_path(out: &Path) -> PathBuf {
    out.join("model.bin")
}

fn open_sequence(cfg: &PipelineConfig, with_poses: bool) -> Result<Sequence> {
    let scans = cfg
        .input
        .scans
        .as_deref()
        .ok_or_else(|| Error::Config("input.scans is not set".into()))?;
    Sequence::open(
        scans,
        if with_poses {
            cfg.input.poses.as_deref()
        } else {
            None
        },
        cfg.input.ground_truth.as_deref(),
        cfg.input.scores.as_deref(),
    )
}

/// Range image channels of every scan as PGM triples under `<out>/project`.
pub fn project_scans(cfg: &PipelineConfig, manifest: &mut RunManifest) -> Result<()> {
    let seq = open_sequence(cfg, false)?;
    let dir = cfg.output.dir.join("project");
    create_dir(&dir)?;
    for t in 0..seq.len() {
        let (cloud, rejected) = manifest.time("read", || seq.read_scan(t))?;
        if rejected > 0 {
            manifest.warn(format!("frame {t}: {rejected} non-finite records dropped"));
        }
        let (img, _, stats) = manifest.time("project", || project(&cloud, &cfg.projection))?;
        manifest.time("write", || write_debug_pgms(&dir, &frame_name(t), &img))?;
        if stats.dropped > 0 {
            log::debug!("frame {t}: {} points outside the image", stats.dropped);
        }
        manifest.frames.push(FrameRecord {
            frame: t,
            points_in: cloud.len(),
            labels_out: img.valid_count(),
        });
    }
    Ok(())
}

/// Movable / not-movable label of every pixel, from the point stored there.
fn pixel_labels(map: &PixelIndexMap, gt: &GroundTruth) -> Vec<Option<bool>> {
    map.pixel_to_point
        .iter()
        .map(|k| k.map(|k| gt.labels[k].is_object()))
        .collect()
}

/// Trains the pixel scorer on every labeled scan and writes `<out>/model.bin`.
pub fn train(cfg: &PipelineConfig, manifest: &mut RunManifest) -> Result<ScorerModel> {
    let seq = open_sequence(cfg, false)?;
    let mut samples = Vec::with_capacity(seq.len());
    for t in 0..seq.len() {
        let (cloud, _) = manifest.time("read", || seq.read_scan(t))?;
        let gt = seq
            .read_ground_truth(t)?
            .ok_or_else(|| Error::Config("training needs input.ground_truth".into()))?;
        if gt.len() != cloud.len() {
            return Err(Error::Dimension(format!(
                "frame {t}: {} labels for {} points",
                gt.len(),
                cloud.len()
            )));
        }
        let (img, map, _) = manifest.time("project", || project(&cloud, &cfg.projection))?;
        let sample = TrainingSample::from_image(&img, &pixel_labels(&map, &gt))?;
        manifest.frames.push(FrameRecord {
            frame: t,
            points_in: cloud.len(),
            labels_out: sample.valid.iter().filter(|v| **v).count(),
        });
        samples.push(sample);
    }
    let (model, report) = manifest.time("train", || train_model(&samples, &cfg.seeded_scorer()))?;
    manifest.epoch_losses = report.epoch_losses;
    manifest.final_loss = Some(model.final_loss);
    create_dir(&cfg.output.dir)?;
    manifest.time("write", || save_model(&model_path(&cfg.output.dir), &model))?;
    Ok(model)
}

enum Scorer {
    Model(Box<ScorerModel>),
    Files(Vec<PathBuf>),
    None,
}

impl Scorer {
    fn name(&self) -> &'static str {
        match self {
            Scorer::Model(_) => "model",
            Scorer::Files(_) => "scores",
            Scorer::None => "none",
        }
    }
}

/// Per-point objectness of one scan; points outside the image get the prior,
/// which leaves the object log-odds unchanged.
fn objectness(
    scorer: &Scorer,
    t: usize,
    cloud: &PointCloud,
    cfg: &PipelineConfig,
    manifest: &mut RunManifest,
) -> Result<Vec<f64>> {
    let prior = cfg.filter.object_prior;
    if let Scorer::None = scorer {
        return Ok(vec![prior; cloud.len()]);
    }
    let (img, map, _) = manifest.time("project", || project(cloud, &cfg.projection))?;
    if cfg.output.debug_images {
        let dir = cfg.output.dir.join("project");
        create_dir(&dir)?;
        write_debug_pgms(&dir, &frame_name(t), &img)?;
    }
    let scores = manifest.time("score", || match scorer {
        Scorer::Model(m) => predict(m, &img),
        Scorer::Files(files) => load_scores(&files[t], img.height, img.width),
        Scorer::None => unreachable!(),
    })?;
    let per_point = back_project(&map, &scores.objectness)?;
    Ok(per_point.into_iter().map(|x| x.unwrap_or(prior)).collect())
}

/// Runs every configured mode over the sequence. Flow is estimated once per
/// frame pair and shared by all modes.
pub fn classify(cfg: &PipelineConfig, manifest: &mut RunManifest) -> Result<()> {
    let seq = open_sequence(cfg, true)?;
    let mut modes = cfg.modes.clone();
    modes.sort();
    modes.dedup();
    let scorer = if modes.iter().any(|m| m.uses_scorer()) {
        match (&cfg.input.model, &seq.scores) {
            (Some(path), _) => Scorer::Model(Box::new(load_model(path)?)),
            (None, Some(files)) => Scorer::Files(files.clone()),
            (None, None) => return Err(Error::Config("no scorer source".into())),
        }
    } else {
        Scorer::None
    };
    manifest.modes = modes.iter().map(|m| m.name().to_string()).collect();
    for m in &modes {
        let name = if m.uses_scorer() {
            scorer.name()
        } else {
            "none"
        };
        manifest.scorer.insert(m.name().into(), name.into());
        create_dir(&labels_dir(&cfg.output.dir, *m))?;
    }
    if cfg.output.motion {
        create_dir(&cfg.output.dir.join("motion"))?;
    }
    let flow_cfg = cfg.seeded_flow();
    let motion_model = MotionModel::new(&cfg.filter.sigma())?;
    let filters: BTreeMap<Mode, _> = modes.iter().map(|m| (*m, cfg.filter_for(*m))).collect();

    let mut beliefs: BTreeMap<Mode, Belief> = BTreeMap::new();
    let mut prev: Option<PointCloud> = None;
    for t in 0..seq.len() {
        let (cloud, rejected) = manifest.time("read", || seq.read_scan(t))?;
        if rejected > 0 {
            manifest.warn(format!("frame {t}: {rejected} non-finite records dropped"));
        }
        let xi = objectness(&scorer, t, &cloud, cfg, manifest)?;
        let (matches, delta) = match &prev {
            None => (None, vec![0.5; cloud.len()]),
            Some(prev_cloud) => {
                let odo = seq.odometry(t).expect("poses are loaded");
                let flow = manifest.time("flow", || {
                    estimate_flow(prev_cloud, &cloud, &odo, &flow_cfg)
                })?;
                for w in &flow.warnings {
                    manifest.warn(format!("frame {t}: {w}"));
                }
                if flow.report.diverged {
                    manifest.warn(format!("frame {t}: flow optimization diverged"));
                }
                if cfg.output.motion {
                    let path = cfg
                        .output
                        .dir
                        .join("motion")
                        .join(format!("{}.csv", frame_name(t - 1)));
                    manifest.time("write", || flow.field.write_csv(&path))?;
                }
                let field = &flow.field;
                let (matches, delta) = manifest.time("associate", || {
                    let transported: Vec<_> = prev_cloud
                        .points
                        .iter()
                        .zip(&field.poses)
                        .map(|(p, pose)| pose.transform_point(&p.position()))
                        .collect();
                    let prev_delta: Vec<f64> = field
                        .poses
                        .iter()
                        .zip(&field.valid)
                        .map(|(pose, &ok)| {
                            if ok {
                                motion_model.dynamicity(pose, &odo)
                            } else {
                                0.5
                            }
                        })
                        .collect();
                    let matches = associate(
                        &transported,
                        &cloud.positions(),
                        cfg.filter.association_radius,
                    );
                    let delta: Vec<f64> = matches
                        .iter()
                        .map(|m| m.map_or(0.5, |k| prev_delta[k]))
                        .collect();
                    (matches, delta)
                });
                (Some(matches), delta)
            }
        };
        let mut labels_out = None;
        for m in &modes {
            let fcfg = &filters[m];
            let start = match (&matches, beliefs.get(m)) {
                (Some(matches), Some(b)) => b.carry_over(matches, fcfg)?,
                _ => Belief::prior(cloud.len(), fcfg, t as u32),
            };
            let (bel, stats) = manifest.time("filter", || {
                filter::step(&start, &delta, &xi, fcfg, t as u32)
            })?;
            if stats.degenerate > 0 {
                manifest.warn(format!(
                    "frame {t} {m}: {} points with a vanishing posterior",
                    stats.degenerate
                ));
            }
            let labels = bel.classify();
            let path = labels_dir(&cfg.output.dir, *m).join(format!("{}.csv", frame_name(t)));
            manifest.time("write", || write_labels(&path, &labels, &bel.probs))?;
            if labels_out.is_some_and(|n| n != labels.len()) {
                return Err(Error::Dimension("modes disagree on label counts".into()));
            }
            labels_out = Some(labels.len());
            beliefs.insert(*m, bel);
        }
        manifest.frames.push(FrameRecord {
            frame: t,
            points_in: cloud.len(),
            labels_out: labels_out.unwrap_or(0),
        });
        prev = Some(cloud);
    }
    Ok(())
}
