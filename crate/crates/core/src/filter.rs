//! Recursive per-point Bayes filter over {non-movable, movable, dynamic}.
//!
//! Each frame a point's belief is predicted through the transition matrix,
//! then multiplied by a motion likelihood (from the dynamicity score) and an
//! object likelihood (from the accumulated objectness log-odds) and
//! renormalized.

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::kdtree::KdTree;
use crate::scan_io::SemanticClass;
use nalgebra::{Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};

/// Objectness scores are clamped to `[XI_CLAMP, 1 - XI_CLAMP]` before entering log-odds.
pub const XI_CLAMP: f64 = 1e-6;

/// How the object variable is updated each frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectUpdate {
    /// Accumulate objectness in log-odds across frames.
    Recursive,
    /// Use only the current frame's objectness.
    Instantaneous,
    /// Ignore objectness; motion alone drives the belief.
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    /// Motion covariance over `(translation m, rotation rad)`.
    pub motion_covariance: [[f64; 6]; 6],
    /// Prior probability that a point belongs to an object.
    pub object_prior: f64,
    /// Share of object evidence credited to the dynamic state.
    pub dynamic_scale: f64,
    /// Row-stochastic `p(x_t = j | x_{t-1} = i)` in class order.
    pub transition: [[f64; 3]; 3],
    pub object_update: ObjectUpdate,
    /// Max distance (m) between a motion-transported point and its match in the next scan.
    pub association_radius: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        let rot = 1f64.to_radians().powi(2);
        let mut sigma = [[0.0; 6]; 6];
        for (i, v) in [0.0025, 0.0025, 0.0025, rot, rot, rot]
            .into_iter()
            .enumerate()
        {
            sigma[i][i] = v;
        }
        Self {
            motion_covariance: sigma,
            object_prior: 0.2,
            dynamic_scale: 0.6,
            transition: [[0.90, 0.05, 0.05], [0.02, 0.90, 0.08], [0.02, 0.08, 0.90]],
            object_update: ObjectUpdate::Recursive,
            association_radius: 0.3,
        }
    }
}

impl FilterConfig {
    pub fn identity_transition() -> [[f64; 3]; 3] {
        [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    }

    pub fn validate(&self) -> Result<()> {
        MotionModel::new(&self.sigma())?;
        if !(self.object_prior > 0.0 && self.object_prior < 1.0) {
            return Err(Error::Config(format!(
                "object prior {} must lie in (0, 1)",
                self.object_prior
            )));
        }
        if !(0.0..=1.0).contains(&self.dynamic_scale) {
            return Err(Error::Config(format!(
                "dynamic scale {} must lie in [0, 1]",
                self.dynamic_scale
            )));
        }
        for (i, row) in self.transition.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "transition row {i} is not stochastic: {row:?}"
                )));
            }
        }
        if !(self.association_radius > 0.0) {
            return Err(Error::Config("association radius must be positive".into()));
        }
        Ok(())
    }

    pub fn sigma(&self) -> Matrix6<f64> {
        Matrix6::from_fn(|r, c| self.motion_covariance[r][c])
    }

    /// Belief assigned to a point seen for the first time.
    pub fn prior_belief(&self) -> [f64; 3] {
        let o = self.object_prior;
        [1.0 - o, 0.5 * o, 0.5 * o]
    }
}

/// Gaussian motion model around the odometry with a fixed covariance.
#[derive(Clone, Debug)]
pub struct MotionModel {
    information: Matrix6<f64>,
}

impl MotionModel {
    pub fn new(sigma: &Matrix6<f64>) -> Result<Self> {
        if (sigma - sigma.transpose()).abs().max() > 1e-12 * sigma.abs().max().max(1.0) {
            return Err(Error::Config("motion covariance is not symmetric".into()));
        }
        let chol = sigma
            .cholesky()
            .ok_or_else(|| Error::Config("motion covariance is not positive definite".into()))?;
        Ok(Self {
            information: chol.inverse(),
        })
    }

    /// `1 - exp(-r^T Sigma^-1 r / 2)` with `r = log(odometry^-1 * motion)`.
    pub fn dynamicity(&self, motion: &Pose, odometry: &Pose) -> f64 {
        let r: Vector6<f64> = odometry.inverse().compose(motion).log();
        let m = (r.transpose() * self.information * r)[(0, 0)].max(0.0);
        1.0 - (-0.5 * m).exp()
    }
}

pub fn dynamicity(motion: &Pose, odometry: &Pose, sigma: &Matrix6<f64>) -> Result<f64> {
    Ok(MotionModel::new(sigma)?.dynamicity(motion, odometry))
}

/// `p(tau | x)` for (non-movable, movable, dynamic). Both static states share `1 - delta`.
pub fn motion_likelihood(delta: f64) -> [f64; 3] {
    let d = delta.clamp(0.0, 1.0);
    [1.0 - d, 1.0 - d, d]
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn sigmoid(l: f64) -> f64 {
    if l >= 0.0 {
        1.0 / (1.0 + (-l).exp())
    } else {
        let e = l.exp();
        e / (1.0 + e)
    }
}

/// `l(xi) + L_prev - l(o0)`.
pub fn logodds_update(prev: f64, xi: f64, object_prior: f64) -> f64 {
    logit(xi.clamp(XI_CLAMP, 1.0 - XI_CLAMP)) + prev - logit(object_prior)
}

/// `p(o | x, xi_1:t)` with `p = sigmoid(L)`: `1 - p`, `p`, `s * p`.
pub fn object_likelihood(state: SemanticClass, log_odds: f64, dynamic_scale: f64) -> f64 {
    let p = sigmoid(log_odds);
    match state {
        SemanticClass::NonMovable => 1.0 - p,
        SemanticClass::Movable => p,
        SemanticClass::Dynamic => dynamic_scale * p,
    }
}

/// Argmax; ties go to the earlier (more conservative) class.
pub fn classify_one(b: &[f64; 3]) -> SemanticClass {
    let mut best = 0;
    for c in 1..3 {
        if b[c] > b[best] {
            best = c;
        }
    }
    SemanticClass::from_index(best).unwrap()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Belief {
    pub probs: Vec<[f64; 3]>,
    /// Accumulated object log-odds per point.
    pub log_odds: Vec<f64>,
    pub last_update: Vec<u32>,
}

impl Belief {
    pub fn prior(n: usize, cfg: &FilterConfig, frame: u32) -> Self {
        Self {
            probs: vec![cfg.prior_belief(); n],
            log_odds: vec![logit(cfg.object_prior); n],
            last_update: vec![frame; n],
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn classify(&self) -> Vec<SemanticClass> {
        self.probs.iter().map(classify_one).collect()
    }

    /// Belief for the points of the next scan: matched points inherit their
    /// predecessor's state, unmatched points start from the prior.
    pub fn carry_over(&self, matches: &[Option<usize>], cfg: &FilterConfig) -> Result<Belief> {
        let prior = Belief::prior(1, cfg, 0);
        let mut out = Belief {
            probs: Vec::with_capacity(matches.len()),
            log_odds: Vec::with_capacity(matches.len()),
            last_update: Vec::with_capacity(matches.len()),
        };
        for m in matches {
            match m {
                Some(j) if *j < self.len() => {
                    out.probs.push(self.probs[*j]);
                    out.log_odds.push(self.log_odds[*j]);
                    out.last_update.push(self.last_update[*j]);
                }
                Some(j) => {
                    return Err(Error::Dimension(format!(
                        "match index {j} beyond {} previous points",
                        self.len()
                    )))
                }
                None => {
                    out.probs.push(prior.probs[0]);
                    out.log_odds.push(prior.log_odds[0]);
                    out.last_update.push(u32::MAX);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StepStats {
    /// Points whose unnormalized posterior vanished and fell back to the prediction.
    pub degenerate: usize,
}

/// One filter update for every point.
pub fn step(
    bel: &Belief,
    dynamicity: &[f64],
    objectness: &[f64],
    cfg: &FilterConfig,
    frame: u32,
) -> Result<(Belief, StepStats)> {
    let n = bel.len();
    if dynamicity.len() != n || objectness.len() != n || bel.log_odds.len() != n {
        return Err(Error::Dimension(format!(
            "belief {n}, dynamicity {}, objectness {}",
            dynamicity.len(),
            objectness.len()
        )));
    }
    let a = &cfg.transition;
    let mut out = Belief {
        probs: Vec::with_capacity(n),
        log_odds: Vec::with_capacity(n),
        last_update: vec![frame; n],
    };
    let mut stats = StepStats::default();
    for k in 0..n {
        let prev = &bel.probs[k];
        let mut predicted = [0.0; 3];
        for (j, p) in predicted.iter_mut().enumerate() {
            *p = (0..3).map(|i| a[i][j] * prev[i]).sum();
        }
        let l = match cfg.object_update {
            ObjectUpdate::Recursive => {
                logodds_update(bel.log_odds[k], objectness[k], cfg.object_prior)
            }
            ObjectUpdate::Instantaneous => {
                logodds_update(logit(cfg.object_prior), objectness[k], cfg.object_prior)
            }
            ObjectUpdate::Off => bel.log_odds[k],
        };
        let motion = motion_likelihood(dynamicity[k]);
        let mut u = [0.0; 3];
        for (c, state) in SemanticClass::ALL.iter().enumerate() {
            let obj = match cfg.object_update {
                ObjectUpdate::Off => 1.0,
                _ => object_likelihood(*state, l, cfg.dynamic_scale),
            };
            u[c] = motion[c] * obj * predicted[c];
        }
        let eta: f64 = u.iter().sum();
        let post = if eta > 0.0 && eta.is_finite() {
            [u[0] / eta, u[1] / eta, u[2] / eta]
        } else {
            stats.degenerate += 1;
            predicted
        };
        out.probs.push(post);
        out.log_odds.push(l);
    }
    Ok((out, stats))
}

/// For each point of the next scan, the previous point that lands nearest
/// after being moved by its estimated motion, if within `radius`.
pub fn associate(
    transported_prev: &[Vector3<f64>],
    current: &[Vector3<f64>],
    radius: f64,
) -> Vec<Option<usize>> {
    let tree = KdTree::new(transported_prev);
    current
        .iter()
        .map(|p| {
            tree.nearest(p)
                .filter(|n| n.dist2 <= radius * radius)
                .map(|n| n.index)
        })
        .collect()
}
