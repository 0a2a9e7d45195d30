//! Cross-visibility confidence: how likely a point is to be observed from
//! both the map and the scan, derived from the distance to the nearest point
//! of the opposite domain.

use rand::seq::index::sample;
use rayon::prelude::*;

use crate::error::{invalid_input, invalid_param, Error, Result};
use crate::geometry::{KdTree, Point, PointCloud};
use crate::mapping;
use crate::rng;

/// Above this size the nearest-neighbour target is voxel-deduplicated first.
pub const DEDUP_LIMIT: usize = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConfidenceParams {
    /// Decay rate, 1/m.
    pub lambda: f64,
    /// Distance below which a point counts as co-observed, m.
    pub tau_vox: f64,
    /// Distance beyond which a point counts as occluded, m.
    pub tau_ocl: f64,
}

impl Default for ConfidenceParams {
    fn default() -> Self {
        Self { lambda: 10.0, tau_vox: 0.1, tau_ocl: 3.0 }
    }
}

impl ConfidenceParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(invalid_param("lambda must be positive"));
        }
        if !(self.tau_vox > 0.0 && self.tau_vox < self.tau_ocl && self.tau_ocl.is_finite()) {
            return Err(invalid_param("thresholds must satisfy 0 < tau_vox < tau_ocl"));
        }
        Ok(())
    }

    /// Confidence for a non-negative distance (infinite allowed).
    #[inline]
    pub fn eval(&self, d: f64) -> f64 {
        if d <= self.tau_vox {
            1.0
        } else if d < self.tau_ocl {
            (-self.lambda * (d - self.tau_vox)).exp()
        } else {
            0.0
        }
    }
}

/// 1 up to `tau_vox`, exponential decay until `tau_ocl`, 0 beyond.
pub fn confidence_of(d: f64, params: &ConfidenceParams) -> Result<f64> {
    params.validate()?;
    if !(d >= 0.0) {
        return Err(invalid_input(format!("distance must be non-negative, got {d}")));
    }
    Ok(params.eval(d))
}

/// Which cloud a point belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    Map,
    Scan,
}

/// Nearest-neighbour lookup into one cloud, deduplicated when very large.
/// Reported indices always refer to the original cloud.
#[derive(Clone, Debug)]
pub struct NnTarget {
    tree: KdTree,
    /// Original index per tree point, when deduplicated.
    remap: Option<Vec<usize>>,
}

impl NnTarget {
    pub fn new(cloud: &PointCloud, voxel: f64) -> Result<Self> {
        if cloud.len() > DEDUP_LIMIT {
            let (reduced, grid) = mapping::voxel_dedup_with_grid(cloud, voxel)?;
            let remap = (0..grid.len()).map(|c| grid.members(c)[0] as usize).collect();
            Ok(Self { tree: KdTree::from_cloud(&reduced), remap: Some(remap) })
        } else {
            Ok(Self { tree: KdTree::from_cloud(cloud), remap: None })
        }
    }

    pub fn nearest(&self, q: &Point) -> Option<(usize, f64)> {
        self.tree.nearest(q).map(|(i, d)| (self.remap.as_ref().map_or(i, |r| r[i]), d))
    }

    pub fn nearest_within(&self, q: &Point, radius: f64) -> Option<(usize, f64)> {
        self.tree.nearest_within(q, radius).map(|(i, d)| (self.remap.as_ref().map_or(i, |r| r[i]), d))
    }
}

/// Per-point confidences of both clouds.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossConfidence {
    pub map: Vec<f64>,
    pub scan: Vec<f64>,
}

fn confidences_against(query: &PointCloud, target: &NnTarget, params: &ConfidenceParams) -> Vec<f64> {
    query
        .points()
        .par_iter()
        .map(|p| target.nearest_within(p, params.tau_ocl).map_or(0.0, |(_, d)| params.eval(d)))
        .collect()
}

/// Confidence of every map point against the scan and vice versa.
pub fn cross_confidence(map: &PointCloud, scan: &PointCloud, params: &ConfidenceParams) -> Result<CrossConfidence> {
    params.validate()?;
    if map.is_empty() || scan.is_empty() {
        return Err(Error::EmptyInput("cross confidence needs two non-empty clouds".into()));
    }
    let map_nn = NnTarget::new(map, params.tau_vox)?;
    let scan_nn = NnTarget::new(scan, params.tau_vox)?;
    Ok(CrossConfidence {
        map: confidences_against(map, &scan_nn, params),
        scan: confidences_against(scan, &map_nn, params),
    })
}

/// A sampled point with its nearest opposite-domain match.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairSample {
    pub domain: Domain,
    pub index: usize,
    pub nearest: usize,
    pub distance: f64,
    pub target: f64,
}

/// Draws `count` points without replacement from the concatenation of map
/// and scan and attaches their nearest match and target confidence.
pub fn sample_pairs(
    map: &PointCloud,
    scan: &PointCloud,
    count: usize,
    seed: u64,
    params: &ConfidenceParams,
) -> Result<Vec<PairSample>> {
    params.validate()?;
    let total = map.len() + scan.len();
    if count > total {
        return Err(invalid_param(format!("cannot sample {count} of {total} points")));
    }
    if map.is_empty() || scan.is_empty() {
        return Err(Error::EmptyInput("pair sampling needs two non-empty clouds".into()));
    }
    let map_nn = NnTarget::new(map, params.tau_vox)?;
    let scan_nn = NnTarget::new(scan, params.tau_vox)?;
    let mut rng = rng::seeded(seed);
    let picks = sample(&mut rng, total, count).into_vec();
    Ok(picks
        .par_iter()
        .map(|&g| {
            let (domain, index, p, nn) = if g < map.len() {
                (Domain::Map, g, map.point(g), &scan_nn)
            } else {
                (Domain::Scan, g - map.len(), scan.point(g - map.len()), &map_nn)
            };
            let (nearest, distance) = nn.nearest(p).expect("non-empty target");
            PairSample { domain, index, nearest, distance, target: params.eval(distance) }
        })
        .collect())
}
