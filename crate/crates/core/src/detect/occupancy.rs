use rayon::prelude::*;
use rustc_hash::FxHashSet;

use crate::error::Result;
use crate::geometry::{check_voxel_size, ChangeClass, PointCloud, VoxelIndex};

/// Voxel co-occupancy baseline: a voxel holding points of both clouds is
/// static, map-only voxels are negative changes and scan-only voxels are
/// positive changes. Returns per-point classes for map and scan.
pub fn detect_occupancy(
    map: &PointCloud,
    scan: &PointCloud,
    voxel_size: f64,
) -> Result<(Vec<ChangeClass>, Vec<ChangeClass>)> {
    check_voxel_size(voxel_size)?;
    let occupied = |c: &PointCloud| -> FxHashSet<VoxelIndex> {
        c.points().iter().map(|p| VoxelIndex::of(p, voxel_size)).collect()
    };
    let (map_cells, scan_cells) = rayon::join(|| occupied(map), || occupied(scan));
    let classify = |c: &PointCloud, other: &FxHashSet<VoxelIndex>, change: ChangeClass| -> Vec<ChangeClass> {
        c.points()
            .par_iter()
            .map(|p| if other.contains(&VoxelIndex::of(p, voxel_size)) { ChangeClass::Static } else { change })
            .collect()
    };
    Ok((
        classify(map, &scan_cells, ChangeClass::Negative),
        classify(scan, &map_cells, ChangeClass::Positive),
    ))
}
