//! Spherical projection of a 360 degree scan onto an `H x W` range image.
//!
//! Column 0 starts at azimuth -180 deg and columns increase counter-clockwise
//! (with `atan2(y, x)`), each covering `360 / W` degrees. Row 0 is the top of
//! the elevation span. A point whose azimuth falls inside a column's interval
//! lands in that column; the bin centers sit half a bin from the edges.

use crate::error::{Error, Result};
use crate::scan_io::PointCloud;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectionConfig {
    pub height: usize,
    pub width: usize,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 870,
            elevation_min_deg: -24.8,
            elevation_max_deg: 2.0,
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config(
                "range image needs positive dimensions".into(),
            ));
        }
        if self.elevation_max_deg <= self.elevation_min_deg {
            return Err(Error::Config(
                "elevation_max_deg must exceed elevation_min_deg".into(),
            ));
        }
        Ok(())
    }

    /// Column of an azimuth in radians, wrapping into `[-pi, pi)`.
    pub fn column(&self, azimuth: f64) -> usize {
        let u = (azimuth + PI).rem_euclid(2.0 * PI) / (2.0 * PI);
        ((u * self.width as f64).floor() as usize).min(self.width - 1)
    }

    /// Row of an elevation in radians, or `None` outside the span.
    pub fn row(&self, elevation: f64) -> Option<usize> {
        let (lo, hi) = (
            self.elevation_min_deg.to_radians(),
            self.elevation_max_deg.to_radians(),
        );
        if !(lo..=hi).contains(&elevation) {
            return None;
        }
        let v = (hi - elevation) / (hi - lo);
        Some(((v * self.height as f64).floor() as usize).min(self.height - 1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channel {
    Range,
    Intensity,
    Height,
}

/// Three-channel image. Invalid pixels hold 0 in every channel; check `valid`.
#[derive(Clone, Debug, PartialEq)]
pub struct RangeImage {
    pub height: usize,
    pub width: usize,
    pub range: Vec<f64>,
    pub intensity: Vec<f64>,
    /// Height above the sensor, i.e. the point's z.
    pub elevation: Vec<f64>,
    pub valid: Vec<bool>,
}

impl RangeImage {
    pub fn empty(height: usize, width: usize) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            range: vec![0.0; n],
            intensity: vec![0.0; n],
            elevation: vec![0.0; n],
            valid: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn channel(&self, c: Channel) -> &[f64] {
        match c {
            Channel::Range => &self.range,
            Channel::Intensity => &self.intensity,
            Channel::Height => &self.elevation,
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Correspondence between pixels and cloud points.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelIndexMap {
    pub height: usize,
    pub width: usize,
    /// Point stored in each pixel.
    pub pixel_to_point: Vec<Option<usize>>,
    /// Pixel each point was binned into, whether or not it won the pixel.
    pub point_to_bin: Vec<Option<usize>>,
}

impl PixelIndexMap {
    /// Pixel owned by point `k`; `None` if it was dropped or lost a collision.
    pub fn destination(&self, k: usize) -> Option<usize> {
        self.point_to_bin[k].filter(|&px| self.pixel_to_point[px] == Some(k))
    }

    pub fn num_points(&self) -> usize {
        self.point_to_bin.len()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ProjectionStats {
    /// Points outside the elevation span or at zero range.
    pub dropped: usize,
    /// Points that lost a pixel to a nearer point.
    pub collisions: usize,
}

pub fn project(
    cloud: &PointCloud,
    cfg: &ProjectionConfig,
) -> Result<(RangeImage, PixelIndexMap, ProjectionStats)> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut img = RangeImage::empty(h, w);
    let mut map = PixelIndexMap {
        height: h,
        width: w,
        pixel_to_point: vec![None; h * w],
        point_to_bin: vec![None; cloud.len()],
    };
    let mut stats = ProjectionStats::default();
    for (k, p) in cloud.points.iter().enumerate() {
        let r = p.range();
        if !(r > 0.0) || !r.is_finite() {
            stats.dropped += 1;
            continue;
        }
        let elevation = (p.z / r).clamp(-1.0, 1.0).asin();
        let Some(row) = cfg.row(elevation) else {
            stats.dropped += 1;
            continue;
        };
        let px = row * w + cfg.column(p.y.atan2(p.x));
        map.point_to_bin[k] = Some(px);
        match map.pixel_to_point[px] {
            Some(_) if img.range[px] <= r => {
                stats.collisions += 1;
                continue;
            }
            Some(_) => stats.collisions += 1,
            None => {}
        }
        map.pixel_to_point[px] = Some(k);
        img.range[px] = r;
        img.intensity[px] = p.intensity;
        img.elevation[px] = p.z;
        img.valid[px] = true;
    }
    Ok((img, map, stats))
}

/// Per-point values read from a per-pixel grid. Points that lost a
/// collision read their winner's pixel; dropped points get `None`.
pub fn back_project<T: Copy>(map: &PixelIndexMap, pixel_values: &[T]) -> Result<Vec<Option<T>>> {
    if pixel_values.len() != map.height * map.width {
        return Err(Error::Dimension(format!(
            "{} pixel values for a {}x{} map",
            pixel_values.len(),
            map.height,
            map.width
        )));
    }
    Ok(map
        .point_to_bin
        .iter()
        .map(|px| px.map(|px| pixel_values[px]))
        .collect())
}

/// Writes `<stem>_range.pgm`, `<stem>_intensity.pgm`, `<stem>_height.pgm`,
/// each min-max scaled over valid pixels, invalid pixels black, row 0 on top.
pub fn write_debug_pgms(dir: &Path, stem: &str, img: &RangeImage) -> Result<()> {
    for (name, c) in [
        ("range", Channel::Range),
        ("intensity", Channel::Intensity),
        ("height", Channel::Height),
    ] {
        let path = dir.join(format!("{stem}_{name}.pgm"));
        fs::write(&path, encode_pgm(img, c)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn encode_pgm(img: &RangeImage, c: Channel) -> Vec<u8> {
    let data = img.channel(c);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (v, _) in data.iter().zip(&img.valid).filter(|(_, ok)| **ok) {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    let scale = if hi > lo { 254.0 / (hi - lo) } else { 0.0 };
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(data.iter().zip(&img.valid).map(|(v, ok)| {
        if *ok {
            1 + ((v - lo) * scale).round() as u8
        } else {
            0
        }
    }));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scan_io::{benchmark_scene, Point, SceneConfig};
    use proptest::prelude::*;

    fn cloud(points: Vec<Point>) -> PointCloud {
        PointCloud::new(points, 0, 0.0)
    }

    #[test]
    fn default_dims() {
        let (img, map, _) = project(&cloud(vec![]), &ProjectionConfig::default()).unwrap();
        assert_eq!((img.height, img.width), (64, 870));
        assert_eq!(map.pixel_to_point.len(), 64 * 870);
        assert_eq!(img.valid_count(), 0);
    }

    #[test]
    fn forward_point_lands_in_center_column() {
        // u = (0 + pi) / 2pi = 0.5, col = floor(0.5 * 870) = 435.
        let cfg = ProjectionConfig::default();
        let (_, map, _) = project(&cloud(vec![Point::new(10.0, 0.0, 0.0, 0.5)]), &cfg).unwrap();
        let px = map.destination(0).unwrap();
        assert_eq!(px % cfg.width, 435);
        assert_eq!(px % cfg.width, cfg.width / 2);
        // elevation 0: v = 2.0 / 26.8, row = floor(0.0746 * 64) = 4.
        assert_eq!(px / cfg.width, 4);
    }

    #[test]
    fn azimuth_wraps_at_180() {
        let cfg = ProjectionConfig::default();
        assert_eq!(cfg.column(PI), 0);
        assert_eq!(cfg.column(-PI), 0);
        assert_eq!(cfg.column(PI - 1e-9), cfg.width - 1);
    }

    #[test]
    fn nearer_point_wins() {
        let cfg = ProjectionConfig::default();
        let far = Point::new(7.0, 0.0, 0.0, 0.1);
        let near = Point::new(5.0, 0.0, 0.0, 0.9);
        for pts in [vec![far, near], vec![near, far]] {
            let (img, map, stats) = project(&cloud(pts.clone()), &cfg).unwrap();
            let px = map.point_to_bin[0].unwrap();
            assert_eq!(img.range[px], 5.0);
            assert_eq!(img.intensity[px], 0.9);
            assert_eq!(stats.collisions, 1);
            let winner = pts.iter().position(|p| p.x == 5.0).unwrap();
            assert_eq!(map.pixel_to_point[px], Some(winner));
            assert_eq!(map.destination(1 - winner), None);
        }
    }

    #[test]
    fn collision_loser_reads_winner_pixel() {
        let cfg = ProjectionConfig::default();
        let pts = vec![
            Point::new(7.0, 0.0, 0.0, 0.1),
            Point::new(5.0, 0.0, 0.0, 0.9),
        ];
        let (img, map, _) = project(&cloud(pts), &cfg).unwrap();
        let values: Vec<f64> = (0..img.len()).map(|i| i as f64).collect();
        let per_point = back_project(&map, &values).unwrap();
        assert_eq!(per_point[0], per_point[1]);
        assert_eq!(per_point[1], Some(map.destination(1).unwrap() as f64));
    }

    #[test]
    fn constant_image_back_projects_to_constant() {
        let cfg = ProjectionConfig::default();
        let (c, _, _) = benchmark_scene(0).render(0).unwrap();
        let (img, map, _) = project(&c, &cfg).unwrap();
        let v = back_project(&map, &vec![0.7; img.len()]).unwrap();
        assert!(v.iter().all(|x| *x == Some(0.7)));
    }

    #[test]
    fn out_of_span_is_dropped() {
        let cfg = ProjectionConfig::default();
        let (img, map, stats) =
            project(&cloud(vec![Point::new(1.0, 0.0, 5.0, 0.0)]), &cfg).unwrap();
        assert_eq!(stats.dropped, 1);
        assert_eq!(img.valid_count(), 0);
        assert_eq!(
            back_project(&map, &vec![1.0; img.len()]).unwrap(),
            vec![None]
        );
    }

    #[test]
    fn dimension_mismatch() {
        let cfg = ProjectionConfig::default();
        let (_, map, _) = project(&cloud(vec![]), &cfg).unwrap();
        assert!(matches!(
            back_project(&map, &[1.0, 2.0]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn synthetic_scan_is_collision_free_and_round_trips() {
        let scene = SceneConfig {
            objects: benchmark_scene(0).objects,
            ..SceneConfig::default()
        };
        let (c, _, _) = scene.render(0).unwrap();
        let (img, map, stats) = project(&c, &ProjectionConfig::default()).unwrap();
        assert_eq!(stats, ProjectionStats::default());
        let back = back_project(&map, &img.range).unwrap();
        for (p, r) in c.points.iter().zip(back) {
            assert!((p.range() - r.unwrap()).abs() < 1e-6);
        }
    }

    #[test]
    fn pgm_header_and_size() {
        let (c, _, _) = benchmark_scene(0).render(0).unwrap();
        let (img, _, _) = project(&c, &ProjectionConfig::default()).unwrap();
        let bytes = encode_pgm(&img, Channel::Range);
        let header = b"P5\n870 64\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 64 * 870);
    }

    proptest! {
        #[test]
        fn pixel_map_is_injective_and_consistent(
            pts in prop::collection::vec((-30.0..30.0f64, -30.0..30.0f64, -5.0..1.0f64), 0..400)
        ) {
            let c = cloud(pts.iter().map(|&(x, y, z)| Point::new(x, y, z, 0.5)).collect());
            let (img, map, _) = project(&c, &ProjectionConfig { width: 120, height: 16, ..Default::default() }).unwrap();
            let mut seen = std::collections::HashSet::new();
            for (px, k) in map.pixel_to_point.iter().enumerate() {
                if let Some(k) = k {
                    prop_assert!(seen.insert(*k));
                    prop_assert_eq!(map.destination(*k), Some(px));
                    prop_assert!(img.valid[px] && img.range[px] > 0.0);
                } else {
                    prop_assert!(!img.valid[px]);
                }
            }
        }

        #[test]
        fn azimuth_is_monotone_within_a_ring(
            mut az in prop::collection::vec(-PI..PI, 2..100),
            el in -0.4..0.03f64,
        ) {
            let cfg = ProjectionConfig::default();
            az.sort_by(f64::total_cmp);
            let cols: Vec<usize> = az.iter().map(|a| cfg.column(*a)).collect();
            prop_assert!(cols.windows(2).all(|w| w[0] <= w[1]));
            let pts: Vec<Point> = az.iter().map(|a| Point::new(10.0 * el.cos() * a.cos(), 10.0 * el.cos() * a.sin(), 10.0 * el.sin(), 0.0)).collect();
            let (_, map, _) = project(&cloud(pts), &cfg).unwrap();
            let bins: Vec<usize> = map.point_to_bin.iter().map(|b| b.unwrap() % cfg.width).collect();
            prop_assert!(bins.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
