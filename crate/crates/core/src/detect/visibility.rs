//! Range-image free-space baseline.

use rayon::prelude::*;
use rustc_hash::FxHashMap;

use crate::error::{invalid_param, Result};
use crate::geometry::{ChangeClass, Point, PointCloud, Pose};

/// Spherical range image keeping the closest return per pixel.
#[derive(Clone, Debug)]
pub struct RangeImage {
    resolution: f64,
    min_range: FxHashMap<(i32, i32), f64>,
}

impl RangeImage {
    /// Projects sensor-frame points.
    pub fn build(points: impl Iterator<Item = Point>, resolution: f64) -> Self {
        let mut min_range: FxHashMap<(i32, i32), f64> = FxHashMap::default();
        for p in points {
            if let Some((px, r)) = project(&p, resolution) {
                let e = min_range.entry(px).or_insert(f64::INFINITY);
                if r < *e {
                    *e = r;
                }
            }
        }
        Self { resolution, min_range }
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn min_range(&self, pixel: (i32, i32)) -> Option<f64> {
        self.min_range.get(&pixel).copied()
    }
}

/// Pixel and range of a sensor-frame point; `None` at the origin.
pub fn project(p: &Point, resolution: f64) -> Option<((i32, i32), f64)> {
    let r = p.coords.norm();
    if r < 1e-9 {
        return None;
    }
    let az = p.y.atan2(p.x) + std::f64::consts::PI;
    let el = (p.z / r).clamp(-1.0, 1.0).asin() + std::f64::consts::FRAC_PI_2;
    Some((((az / resolution).floor() as i32, (el / resolution).floor() as i32), r))
}

/// Visibility baseline. Both clouds are in the global frame and `sensor`
/// is the scan pose. A map point is a negative change when the scan sees
/// more than `range_margin` past it along its pixel; a scan point is a
/// positive change when every map point in its pixel lies more than
/// `range_margin` behind it. Pixels without returns from the other cloud
/// stay static.
pub fn detect_visibility(
    map: &PointCloud,
    scan: &PointCloud,
    sensor: &Pose,
    angular_res: f64,
    range_margin: f64,
) -> Result<(Vec<ChangeClass>, Vec<ChangeClass>)> {
    if !(angular_res > 0.0 && angular_res.is_finite()) {
        return Err(invalid_param("angular resolution must be positive"));
    }
    if !(range_margin >= 0.0) {
        return Err(invalid_param("range margin must be non-negative"));
    }
    let to_sensor = sensor.inverse();
    let local = |c: &PointCloud| -> Vec<Point> { c.points().par_iter().map(|p| to_sensor.apply(p)).collect() };
    let (map_local, scan_local) = rayon::join(|| local(map), || local(scan));
    let (map_img, scan_img) = rayon::join(
        || RangeImage::build(map_local.iter().copied(), angular_res),
        || RangeImage::build(scan_local.iter().copied(), angular_res),
    );
    let classify = |pts: &[Point], other: &RangeImage, change: ChangeClass| -> Vec<ChangeClass> {
        pts.par_iter()
            .map(|p| match project(p, angular_res) {
                Some((px, r)) => match other.min_range(px) {
                    Some(o) if o > r + range_margin => change,
                    _ => ChangeClass::Static,
                },
                None => ChangeClass::Static,
            })
            .collect()
    };
    Ok((
        classify(&map_local, &scan_img, ChangeClass::Negative),
        classify(&scan_local, &map_img, ChangeClass::Positive),
    ))
}

/// What one scan says about a map point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapVote {
    /// No return along the pixel, or a return in front of the point.
    Unobserved,
    /// A return within the margin of the point's range.
    Confirmed,
    /// A return beyond the point: the space it occupied is free.
    SeenThrough,
}

/// Per-map-point votes from one scan; arguments as for [`detect_visibility`].
pub fn visibility_votes(
    map: &PointCloud,
    scan: &PointCloud,
    sensor: &Pose,
    angular_res: f64,
    range_margin: f64,
) -> Result<Vec<MapVote>> {
    if !(angular_res > 0.0 && angular_res.is_finite()) || !(range_margin >= 0.0) {
        return Err(invalid_param("angular resolution must be positive and the range margin non-negative"));
    }
    let to_sensor = sensor.inverse();
    let img = RangeImage::build(scan.points().iter().map(|p| to_sensor.apply(p)), angular_res);
    Ok(map
        .points()
        .par_iter()
        .map(|p| match project(&to_sensor.apply(p), angular_res) {
            Some((px, r)) => match img.min_range(px) {
                Some(o) if o > r + range_margin => MapVote::SeenThrough,
                Some(o) if o >= r - range_margin => MapVote::Confirmed,
                _ => MapVote::Unobserved,
            },
            None => MapVote::Unobserved,
        })
        .collect())
}
