//! Pointwise semantic classification of sequential LiDAR scans into
//! non-movable, movable and dynamic points.
//!
//! The pipeline projects each scan onto a spherical range image, scores
//! per-pixel objectness, estimates a dense rigid motion field between
//! consecutive scans and fuses both cues per point in a recursive Bayes
//! filter. [`eval`] turns the pointwise output into boxes and metrics.

pub mod error;
pub mod eval;
pub mod filter;
pub mod flow;
pub mod geometry;
pub mod kdtree;
pub mod projection;
pub mod scan_io;
pub mod scorer;

pub use error::{Error, Result};
pub use geometry::Pose;
pub use scan_io::{GroundTruth, Point, PointCloud, SemanticClass};
