//! Per-pixel objectness scoring.
//!
//! A two-class linear softmax classifier over hand-crafted pixel features is
//! trained with class-weighted cross-entropy and SGD with momentum, one image
//! per mini-batch. Scores computed elsewhere (e.g. by a deep network) can be
//! loaded from `OBJSCORE` files and enter the pipeline the same way.

use crate::error::{Error, Result};
use crate::projection::RangeImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

/// Own 3 channels, 4 neighbors x 3 channels, 3 range differences.
pub const FEATURE_DIM: usize = 18;
pub const NUM_CLASSES: usize = 2;

pub type Features = [f64; FEATURE_DIM];

const PROB_FLOOR: f64 = 1e-12;
const SCORE_CLAMP: f64 = 1e-6;
const SCORE_MAGIC: &[u8; 8] = b"OBJSCORE";
const MODEL_MAGIC: &[u8; 8] = b"PXSCORER";
const MODEL_VERSION: u32 = 1;

/// `exp(a1) / (exp(a1) + exp(a0))`, shifted by `max(a0, a1)` so it cannot overflow.
pub fn softmax_objectness(a0: f64, a1: f64) -> Result<f64> {
    if !a0.is_finite() || !a1.is_finite() {
        return Err(Error::InvalidInput(format!(
            "non-finite logits ({a0}, {a1})"
        )));
    }
    Ok(objectness_unchecked(a0, a1))
}

fn objectness_unchecked(a0: f64, a1: f64) -> f64 {
    let m = a0.max(a1);
    let (e0, e1) = ((a0 - m).exp(), (a1 - m).exp());
    e1 / (e0 + e1)
}

fn softmax2(a: [f64; 2]) -> [f64; 2] {
    let q1 = objectness_unchecked(a[0], a[1]);
    [objectness_unchecked(a[1], a[0]), q1]
}

/// `-sum_c w_c p_c ln(max(q_c, 1e-12))`.
pub fn weighted_cross_entropy(truth: &[f64], predicted: &[f64], weights: &[f64]) -> Result<f64> {
    if truth.len() != predicted.len() || truth.len() != weights.len() {
        return Err(Error::Dimension(format!(
            "truth {}, predicted {}, weights {}",
            truth.len(),
            predicted.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0)) {
        return Err(Error::InvalidInput(format!("class weight {w} is negative")));
    }
    let sum: f64 = predicted.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "predicted distribution sums to {sum}"
        )));
    }
    Ok(truth
        .iter()
        .zip(predicted)
        .zip(weights)
        .map(|((p, q), w)| -w * p * q.max(PROB_FLOOR).ln())
        .sum())
}

/// Median-frequency balancing: `w_c = median(freq) / freq_c`.
/// For an even number of classes the median is the mean of the middle two.
pub fn class_balance_weights(counts: &[u64]) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(Error::InvalidInput("empty label histogram".into()));
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::InvalidInput(format!("class {c} has no samples")));
    }
    let total: u64 = counts.iter().sum();
    let freqs: Vec<f64> = counts.iter().map(|&n| n as f64 / total as f64).collect();
    let mut sorted = freqs.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    Ok(freqs.iter().map(|f| median / f).collect())
}

/// Feature vector of every pixel; invalid pixels get zeros.
///
/// Neighbors are up, down, left, right; columns wrap around 360 degrees and
/// missing or invalid neighbors are replaced by the pixel itself.
pub fn extract_features(img: &RangeImage) -> Vec<Features> {
    let (h, w) = (img.height, img.width);
    let mut out = vec![[0.0; FEATURE_DIM]; h * w];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if !img.valid[i] {
                continue;
            }
            let pick = |j: Option<usize>| j.filter(|&j| img.valid[j]).unwrap_or(i);
            let up = pick(r.checked_sub(1).map(|rr| rr * w + c));
            let down = pick((r + 1 < h).then(|| (r + 1) * w + c));
            let left = pick(Some(r * w + (c + w - 1) % w));
            let right = pick(Some(r * w + (c + 1) % w));
            let f = &mut out[i];
            for (slot, j) in [i, up, down, left, right].into_iter().enumerate() {
                f[3 * slot] = img.range[j];
                f[3 * slot + 1] = img.intensity[j];
                f[3 * slot + 2] = img.elevation[j];
            }
            let mean_nb =
                0.25 * (img.range[up] + img.range[down] + img.range[left] + img.range[right]);
            f[15] = img.range[i] - mean_nb;
            f[16] = img.range[left] - img.range[right];
            f[17] = img.range[up] - img.range[down];
        }
    }
    out
}

/// One training image: raw features, binary labels (1 = movable), validity.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub features: Vec<Features>,
    pub labels: Vec<u8>,
    pub valid: Vec<bool>,
}

impl TrainingSample {
    /// `labels[i]` is `Some(movable)` for labeled pixels; only valid pixels keep labels.
    pub fn from_image(img: &RangeImage, labels: &[Option<bool>]) -> Result<Self> {
        if labels.len() != img.len() {
            return Err(Error::Dimension(format!(
                "{} labels for {} pixels",
                labels.len(),
                img.len()
            )));
        }
        let valid: Vec<bool> = img
            .valid
            .iter()
            .zip(labels)
            .map(|(v, l)| *v && l.is_some())
            .collect();
        Ok(Self {
            features: extract_features(img),
            labels: labels.iter().map(|l| l.unwrap_or(false) as u8).collect(),
            valid,
        })
    }

    fn labeled(&self) -> impl Iterator<Item = (&Features, usize)> {
        self.features
            .iter()
            .zip(&self.labels)
            .zip(&self.valid)
            .filter(|(_, ok)| **ok)
            .map(|((f, y), _)| (f, *y as usize))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub class_balancing: bool,
    /// Seeds the per-epoch image order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-6,
            momentum: 0.99,
            epochs: 10,
            class_balancing: true,
            seed: 0,
        }
    }
}

/// Linear softmax model: `a_c = w_c . standardize(x) + b_c`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScorerModel {
    pub weights: [[f64; FEATURE_DIM]; NUM_CLASSES],
    pub bias: [f64; NUM_CLASSES],
    pub feature_mean: Features,
    pub feature_std: Features,
    pub class_weights: [f64; NUM_CLASSES],
    /// Mean weighted loss per labeled pixel after the last epoch.
    pub final_loss: f64,
}

impl ScorerModel {
    /// All-zero weights with identity standardization.
    pub fn zeros() -> Self {
        Self {
            weights: [[0.0; FEATURE_DIM]; NUM_CLASSES],
            bias: [0.0; NUM_CLASSES],
            feature_mean: [0.0; FEATURE_DIM],
            feature_std: [1.0; FEATURE_DIM],
            class_weights: [1.0; NUM_CLASSES],
            final_loss: f64::NAN,
        }
    }

    pub fn logits(&self, x: &Features) -> [f64; 2] {
        let mut a = self.bias;
        for (d, xv) in x.iter().enumerate() {
            let z = (xv - self.feature_mean[d]) / self.feature_std[d];
            a[0] += self.weights[0][d] * z;
            a[1] += self.weights[1][d] * z;
        }
        a
    }

    fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(NUM_CLASSES * (FEATURE_DIM + 1));
        for c in 0..NUM_CLASSES {
            p.extend_from_slice(&self.weights[c]);
            p.push(self.bias[c]);
        }
        p
    }

    fn set_params(&mut self, p: &[f64]) {
        for c in 0..NUM_CLASSES {
            let row = &p[c * (FEATURE_DIM + 1)..(c + 1) * (FEATURE_DIM + 1)];
            self.weights[c].copy_from_slice(&row[..FEATURE_DIM]);
            self.bias[c] = row[FEATURE_DIM];
        }
    }

    pub fn num_params() -> usize {
        NUM_CLASSES * (FEATURE_DIM + 1)
    }

    /// Weighted training loss of one image and its gradient w.r.t. the
    /// flattened parameters `[w_0, b_0, w_1, b_1]`.
    pub fn loss_and_gradient(&self, sample: &TrainingSample) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; Self::num_params()];
        let mut loss = 0.0;
        let stride = FEATURE_DIM + 1;
        for (x, y) in sample.labeled() {
            let q = softmax2(self.logits(x));
            let w = self.class_weights[y];
            loss += -w * q[y].max(PROB_FLOOR).ln();
            for c in 0..NUM_CLASSES {
                let g = w * (q[c] - if c == y { 1.0 } else { 0.0 });
                let row = &mut grad[c * stride..(c + 1) * stride];
                for d in 0..FEATURE_DIM {
                    row[d] += g * (x[d] - self.feature_mean[d]) / self.feature_std[d];
                }
                row[FEATURE_DIM] += g;
            }
        }
        (loss, grad)
    }

    /// Loss only, for a flattened parameter vector.
    pub fn loss_at(&self, params: &[f64], sample: &TrainingSample) -> f64 {
        let mut m = self.clone();
        m.set_params(params);
        m.loss_and_gradient(sample).0
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params()
    }

    pub fn with_flat_params(&self, params: &[f64]) -> Self {
        let mut m = self.clone();
        m.set_params(params);
        m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingReport {
    /// Mean weighted loss per labeled pixel before training and after each epoch.
    pub epoch_losses: Vec<f64>,
    pub class_counts: [u64; NUM_CLASSES],
}

fn mean_loss(model: &ScorerModel, samples: &[TrainingSample], n_labeled: u64) -> f64 {
    let total: f64 = samples.iter().map(|s| model.loss_and_gradient(s).0).sum();
    total / n_labeled.max(1) as f64
}

/// Per-feature mean and standard deviation over labeled pixels.
fn standardization(samples: &[TrainingSample]) -> (Features, Features) {
    let mut n = 0.0;
    let mut mean = [0.0; FEATURE_DIM];
    let mut m2 = [0.0; FEATURE_DIM];
    for s in samples {
        for (x, _) in s.labeled() {
            n += 1.0;
            for d in 0..FEATURE_DIM {
                let delta = x[d] - mean[d];
                mean[d] += delta / n;
                m2[d] += delta * (x[d] - mean[d]);
            }
        }
    }
    let mut std = [1.0; FEATURE_DIM];
    for d in 0..FEATURE_DIM {
        let v = if n > 1.0 { m2[d] / (n - 1.0) } else { 0.0 };
        if v > 1e-18 {
            std[d] = v.sqrt();
        }
    }
    (mean, std)
}

pub fn train(
    samples: &[TrainingSample],
    cfg: &TrainConfig,
) -> Result<(ScorerModel, TrainingReport)> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("no training samples".into()));
    }
    if !(cfg.learning_rate >= 0.0) || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(Error::Config(format!(
            "learning rate {} / momentum {} out of range",
            cfg.learning_rate, cfg.momentum
        )));
    }
    let mut counts = [0u64; NUM_CLASSES];
    for s in samples {
        if s.features.len() != s.labels.len() || s.labels.len() != s.valid.len() {
            return Err(Error::Dimension(
                "training sample arrays differ in length".into(),
            ));
        }
        for (_, y) in s.labeled() {
            counts[y] += 1;
        }
    }
    if counts.contains(&0) {
        return Err(Error::InvalidInput(format!(
            "training set has a single class (counts {counts:?}); balancing is undefined"
        )));
    }
    let class_weights = if cfg.class_balancing {
        let w = class_balance_weights(&counts)?;
        [w[0], w[1]]
    } else {
        [1.0; NUM_CLASSES]
    };
    let (feature_mean, feature_std) = standardization(samples);
    let mut model = ScorerModel {
        feature_mean,
        feature_std,
        class_weights,
        ..ScorerModel::zeros()
    };
    let n_labeled = counts.iter().sum();
    let mut report = TrainingReport {
        epoch_losses: vec![mean_loss(&model, samples, n_labeled)],
        class_counts: counts,
    };
    let mut theta = model.params();
    let mut velocity = vec![0.0; theta.len()];
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            model.set_params(&theta);
            let (_, grad) = model.loss_and_gradient(&samples[i]);
            for ((v, t), g) in velocity.iter_mut().zip(theta.iter_mut()).zip(&grad) {
                *v = cfg.momentum * *v - cfg.learning_rate * g;
                *t += *v;
            }
        }
        model.set_params(&theta);
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::Numerical(
                "training diverged to non-finite weights".into(),
            ));
        }
        report
            .epoch_losses
            .push(mean_loss(&model, samples, n_labeled));
    }
    model.final_loss = *report.epoch_losses.last().unwrap();
    Ok((model, report))
}

/// Per-pixel logits and objectness.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub height: usize,
    pub width: usize,
    pub a0: Vec<f64>,
    pub a1: Vec<f64>,
    pub objectness: Vec<f64>,
    pub valid: Vec<bool>,
}

impl ScoreMap {
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Scores with logits `(0, logit(xi))`, `xi` clamped away from 0 and 1.
    pub fn from_objectness(height: usize, width: usize, xi: &[f64], valid: Vec<bool>) -> Self {
        let objectness: Vec<f64> = xi
            .iter()
            .map(|x| x.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP))
            .collect();
        Self {
            height,
            width,
            a0: vec![0.0; xi.len()],
            a1: objectness.iter().map(|x| (x / (1.0 - x)).ln()).collect(),
            objectness,
            valid,
        }
    }
}

pub fn predict(model: &ScorerModel, img: &RangeImage) -> Result<ScoreMap> {
    let features = extract_features(img);
    let n = img.len();
    let (mut a0, mut a1, mut objectness) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for i in 0..n {
        if !img.valid[i] {
            continue;
        }
        let a = model.logits(&features[i]);
        if !a[0].is_finite() || !a[1].is_finite() {
            return Err(Error::Numerical(format!("non-finite logits at pixel {i}")));
        }
        a0[i] = a[0];
        a1[i] = a[1];
        objectness[i] = objectness_unchecked(a[0], a[1]);
    }
    Ok(ScoreMap {
        height: img.height,
        width: img.width,
        a0,
        a1,
        objectness,
        valid: img.valid.clone(),
    })
}

/// `OBJSCORE` + row-major little-endian float32 objectness. Invalid pixels are written as 0.5.
pub fn encode_scores(scores: &ScoreMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * scores.len());
    out.extend_from_slice(SCORE_MAGIC);
    for (x, ok) in scores.objectness.iter().zip(&scores.valid) {
        let v = if *ok { *x as f32 } else { 0.5 };
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a score grid. The file carries no dimensions, so the caller
/// supplies them; every pixel is marked valid.
pub fn decode_scores(bytes: &[u8], height: usize, width: usize) -> Result<ScoreMap> {
    if bytes.len() < 8 || &bytes[..8] != SCORE_MAGIC {
        return Err(Error::format("score file", "missing OBJSCORE header"));
    }
    let body = &bytes[8..];
    if body.len() != 4 * height * width {
        return Err(Error::format(
            "score file",
            format!("{} payload bytes for a {height}x{width} grid", body.len()),
        ));
    }
    let mut xi = Vec::with_capacity(height * width);
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::format(
                "score file",
                format!("pixel {i}: score {v} outside [0, 1]"),
            ));
        }
        xi.push(v);
    }
    Ok(ScoreMap::from_objectness(
        height,
        width,
        &xi,
        vec![true; height * width],
    ))
}

pub fn save_scores(path: &Path, scores: &ScoreMap) -> Result<()> {
    fs::write(path, encode_scores(scores)).map_err(|e| Error::io(path, e))
}

pub fn load_scores(path: &Path, height: usize, width: usize) -> Result<ScoreMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_scores(&bytes, height, width).map_err(|e| match e {
        Error::Format { message, .. } => Error::format(path.display().to_string(), message),
        other => other,
    })
}

/// Checkpoint layout (little-endian): magic, version u32, feature dim u32,
/// then f64 weights (class-major), biases, feature means, feature stds,
/// class weights and final loss.
pub fn encode_model(model: &ScorerModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(FEATURE_DIM as u32).to_le_bytes());
    let mut put = |v: f64| out.extend_from_slice(&v.to_le_bytes());
    model.weights.iter().flatten().for_each(|v| put(*v));
    model.bias.iter().for_each(|v| put(*v));
    model.feature_mean.iter().for_each(|v| put(*v));
    model.feature_std.iter().for_each(|v| put(*v));
    model.class_weights.iter().for_each(|v| put(*v));
    put(model.final_loss);
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<ScorerModel> {
    let n_f64 = NUM_CLASSES * FEATURE_DIM + NUM_CLASSES + 2 * FEATURE_DIM + NUM_CLASSES + 1;
    if bytes.len() < 16 || &bytes[..8] != MODEL_MAGIC {
        return Err(Error::format("model checkpoint", "missing PXSCORER header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if version != MODEL_VERSION {
        return Err(Error::format(
            "model checkpoint",
            format!("unsupported version {version}"),
        ));
    }
    if dim != FEATURE_DIM {
        return Err(Error::format(
            "model checkpoint",
            format!("feature dim {dim}, expected {FEATURE_DIM}"),
        ));
    }
    if bytes.len() != 16 + 8 * n_f64 {
        return Err(Error::format(
            "model checkpoint",
            format!("unexpected size {}", bytes.len()),
        ));
    }
    let mut vals = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut model = ScorerModel::zeros();
    for row in model.weights.iter_mut() {
        row.iter_mut().for_each(|v| *v = vals.next().unwrap());
    }
    model
        .bias
        .iter_mut()
        .for_each(|v| *v = vals.next().unwrap());
    model
        .feature_mean
        .iter_mut()
        .for_each(|v| *v = vals.next().unwrap());
    model
        .feature_std
        .iter_mut()
        .for_each(|v| *v = vals.next().unwrap());
    model
        .class_weights
        .iter_mut()
        .for_each(|v| *v = vals.next().unwrap());
    model.final_loss = vals.next().unwrap();
    Ok(model)
}

pub fn save_model(path: &Path, model: &ScorerModel) -> Result<()> {
    fs::write(path, encode_model(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<ScorerModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}
