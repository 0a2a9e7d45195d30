use rustc_hash::FxHashMap;

use super::cloud::{Point, PointCloud};
use crate::error::{invalid_param, Result};

/// Integer cell coordinates, `floor(coord / voxel_size)` per axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelIndex {
    pub ix: i32,
    pub iy: i32,
    pub iz: i32,
}

impl VoxelIndex {
    pub const fn new(ix: i32, iy: i32, iz: i32) -> Self {
        Self { ix, iy, iz }
    }

    #[inline]
    pub fn of(p: &Point, voxel_size: f64) -> Self {
        Self {
            ix: (p.x / voxel_size).floor() as i32,
            iy: (p.y / voxel_size).floor() as i32,
            iz: (p.z / voxel_size).floor() as i32,
        }
    }

    #[inline]
    pub fn offset(&self, dx: i32, dy: i32, dz: i32) -> Self {
        Self { ix: self.ix + dx, iy: self.iy + dy, iz: self.iz + dz }
    }

    /// Index of the enclosing cell in a grid `factor` times coarser.
    #[inline]
    pub fn coarsen(&self, factor: i32) -> Self {
        Self {
            ix: self.ix.div_euclid(factor),
            iy: self.iy.div_euclid(factor),
            iz: self.iz.div_euclid(factor),
        }
    }

    pub fn center(&self, voxel_size: f64) -> Point {
        Point::new(
            (self.ix as f64 + 0.5) * voxel_size,
            (self.iy as f64 + 0.5) * voxel_size,
            (self.iz as f64 + 0.5) * voxel_size,
        )
    }
}

pub(crate) fn check_voxel_size(voxel_size: f64) -> Result<()> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(invalid_param(format!("voxel size must be positive, got {voxel_size}")));
    }
    Ok(())
}

/// Partition of a cloud's point indices into occupied voxels.
///
/// Voxels are numbered in order of first appearance in the cloud, and member
/// lists keep the cloud order, so the layout depends only on the input.
#[derive(Clone, Debug)]
pub struct VoxelGrid {
    voxel_size: f64,
    cells: Vec<VoxelIndex>,
    lookup: FxHashMap<VoxelIndex, u32>,
    point_cell: Vec<u32>,
    offsets: Vec<u32>,
    members: Vec<u32>,
}

impl VoxelGrid {
    pub fn build(points: &[Point], voxel_size: f64) -> Result<Self> {
        check_voxel_size(voxel_size)?;
        let mut lookup: FxHashMap<VoxelIndex, u32> = FxHashMap::default();
        lookup.reserve(points.len() / 2);
        let mut cells = Vec::new();
        let mut point_cell = Vec::with_capacity(points.len());
        for p in points {
            let key = VoxelIndex::of(p, voxel_size);
            let id = *lookup.entry(key).or_insert_with(|| {
                cells.push(key);
                (cells.len() - 1) as u32
            });
            point_cell.push(id);
        }
        let mut offsets = vec![0u32; cells.len() + 1];
        for &c in &point_cell {
            offsets[c as usize + 1] += 1;
        }
        for i in 0..cells.len() {
            offsets[i + 1] += offsets[i];
        }
        let mut cursor = offsets.clone();
        let mut members = vec![0u32; points.len()];
        for (i, &c) in point_cell.iter().enumerate() {
            members[cursor[c as usize] as usize] = i as u32;
            cursor[c as usize] += 1;
        }
        Ok(Self { voxel_size, cells, lookup, point_cell, offsets, members })
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    /// Number of occupied voxels.
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells(&self) -> &[VoxelIndex] {
        &self.cells
    }

    pub fn cell(&self, id: usize) -> VoxelIndex {
        self.cells[id]
    }

    pub fn id_of(&self, key: &VoxelIndex) -> Option<usize> {
        self.lookup.get(key).map(|&i| i as usize)
    }

    /// Voxel id holding point `i`.
    pub fn cell_of_point(&self, i: usize) -> usize {
        self.point_cell[i] as usize
    }

    pub fn members(&self, id: usize) -> &[u32] {
        &self.members[self.offsets[id] as usize..self.offsets[id + 1] as usize]
    }

    pub fn count(&self, id: usize) -> usize {
        (self.offsets[id + 1] - self.offsets[id]) as usize
    }

    pub fn iter(&self) -> impl Iterator<Item = (VoxelIndex, &[u32])> + '_ {
        (0..self.len()).map(move |i| (self.cells[i], self.members(i)))
    }
}

/// Buckets the points of `cloud` by voxel.
pub fn quantize(cloud: &PointCloud, voxel_size: f64) -> Result<VoxelGrid> {
    VoxelGrid::build(cloud.points(), voxel_size)
}
