//! Per-voxel geometric features for the dual-head classifier.
//!
//! The unit of classification is an element: one occupied voxel of one
//! domain (map or scan). Every point inherits the prediction of its element.
//! Low-level features describe the element itself; high-level features add
//! statistics over the surrounding 3x3x3 window and over a 3x3x3 window of a
//! coarser grid.

use rayon::prelude::*;
use rustc_hash::FxHashMap;

use crate::confidence::Domain;
use crate::error::{Error, Result};
use crate::geometry::{check_voxel_size, KdTree, Point, PointCloud, VoxelGrid, VoxelIndex};
use crate::mapping::GroundModel;

pub const LOW_DIM: usize = 7;
pub const HIGH_DIM: usize = LOW_DIM + 16;

/// Coarse grid spacing in fine voxels.
pub const COARSE_FACTOR: i32 = 4;

const HEIGHT_CLAMP: (f64, f64) = (-3.0, 10.0);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureParams {
    pub voxel_size: f64,
    /// Cap on cross-domain distances, m.
    pub tau_ocl: f64,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self { voxel_size: 0.1, tau_ocl: 3.0 }
    }
}

/// Features of a single point (those of its element).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub low_level: Vec<f64>,
    pub high_level: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Element {
    pub domain: Domain,
    pub cell: VoxelIndex,
}

/// Elements of one (map, scan) pair with row-major feature matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureSet {
    pub elements: Vec<Element>,
    /// `elements.len() x LOW_DIM`.
    pub low: Vec<f64>,
    /// `elements.len() x HIGH_DIM`.
    pub high: Vec<f64>,
    /// Map elements come first.
    pub n_map: usize,
    /// Element of each map point, `u32::MAX` outside the processed region.
    pub map_point_elem: Vec<u32>,
    pub scan_point_elem: Vec<u32>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn low_row(&self, e: usize) -> &[f64] {
        &self.low[e * LOW_DIM..(e + 1) * LOW_DIM]
    }

    pub fn high_row(&self, e: usize) -> &[f64] {
        &self.high[e * HIGH_DIM..(e + 1) * HIGH_DIM]
    }

    pub fn point_element(&self, domain: Domain, i: usize) -> Option<usize> {
        let e = match domain {
            Domain::Map => self.map_point_elem[i],
            Domain::Scan => self.scan_point_elem[i],
        };
        (e != u32::MAX).then_some(e as usize)
    }

    pub fn point_features(&self, domain: Domain, i: usize) -> Option<FeatureVector> {
        let e = self.point_element(domain, i)?;
        Some(FeatureVector { low_level: self.low_row(e).to_vec(), high_level: self.high_row(e).to_vec() })
    }
}

/// Occupied voxels of one cloud with per-voxel summaries.
#[derive(Clone, Debug)]
pub struct DomainCells {
    pub grid: VoxelGrid,
    pub centroids: Vec<Point>,
    /// One member point per voxel, used as a second distance probe.
    pub probes: Vec<Point>,
    pub zspread: Vec<f64>,
    pub tree: KdTree,
}

impl DomainCells {
    pub fn build(cloud: &PointCloud, voxel: f64) -> Result<Self> {
        let grid = VoxelGrid::build(cloud.points(), voxel)?;
        let stats: Vec<(Point, Point, f64)> = (0..grid.len())
            .into_par_iter()
            .map(|c| {
                let m = grid.members(c);
                let first = *cloud.point(m[0] as usize);
                let mut sum = nalgebra::Vector3::zeros();
                let (mut zlo, mut zhi) = (f64::INFINITY, f64::NEG_INFINITY);
                for &i in m {
                    let p = cloud.point(i as usize);
                    sum += p - first;
                    zlo = zlo.min(p.z);
                    zhi = zhi.max(p.z);
                }
                (first + sum / m.len() as f64, first, zhi - zlo)
            })
            .collect();
        let centroids: Vec<Point> = stats.iter().map(|s| s.0).collect();
        let tree = KdTree::new(&centroids);
        Ok(Self {
            probes: stats.iter().map(|s| s.1).collect(),
            zspread: stats.iter().map(|s| s.2).collect(),
            centroids,
            grid,
            tree,
        })
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }
}

#[inline]
fn pack(c: &VoxelIndex) -> u64 {
    const M: u64 = (1 << 21) - 1;
    ((c.ix as u64 & M) << 42) | ((c.iy as u64 & M) << 21) | (c.iz as u64 & M)
}

#[derive(Clone, Copy, Default)]
struct CellInfo {
    count: [u32; 2],
    dist: [f32; 2],
}

#[derive(Clone, Copy, Default)]
struct Window {
    count: [f64; 2],
    occ: [f64; 2],
    both: f64,
    layer: [[f64; 3]; 2],
    dsum: [f64; 2],
}

fn window_stats(table: &FxHashMap<u64, u32>, info: &[CellInfo], c: VoxelIndex) -> Window {
    let mut w = Window::default();
    for dz in -1..=1 {
        for dy in -1..=1 {
            for dx in -1..=1 {
                let Some(&id) = table.get(&pack(&c.offset(dx, dy, dz))) else { continue };
                let ci = &info[id as usize];
                let mut both = true;
                for d in 0..2 {
                    if ci.count[d] > 0 {
                        w.count[d] += ci.count[d] as f64;
                        w.occ[d] += 1.0;
                        w.layer[d][(dz + 1) as usize] += 1.0;
                        w.dsum[d] += ci.dist[d] as f64;
                    } else {
                        both = false;
                    }
                }
                if both {
                    w.both += 1.0;
                }
            }
        }
    }
    w
}

fn coarse_stats(table: &FxHashMap<u64, u8>, c: VoxelIndex) -> [f64; 3] {
    let (mut occ, mut both) = ([0.0f64; 2], 0.0);
    for dz in -1..=1 {
        for dy in -1..=1 {
            for dx in -1..=1 {
                if let Some(&bits) = table.get(&pack(&c.offset(dx, dy, dz))) {
                    for (d, o) in occ.iter_mut().enumerate() {
                        if bits & (1 << d) != 0 {
                            *o += 1.0;
                        }
                    }
                    if bits == 3 {
                        both += 1.0;
                    }
                }
            }
        }
    }
    [occ[0], occ[1], both]
}

/// Capped distance from `p` to the nearest centroid of `other`.
#[inline]
fn cross(p: &Point, other: &DomainCells, cap: f64) -> f64 {
    other.tree.nearest_within(p, cap).map_or(cap, |(_, d)| d)
}

/// Features for the chosen map cells (`map_sel`, indices into `map.grid`)
/// and all scan cells.
pub(crate) fn compute(
    map: &DomainCells,
    map_sel: &[u32],
    scan: &DomainCells,
    ground: &GroundModel,
    params: &FeatureParams,
) -> (Vec<Element>, Vec<f64>, Vec<f64>) {
    let tau = params.tau_ocl;
    let v = params.voxel_size;
    let n_map = map_sel.len();
    let n = n_map + scan.len();

    // (domain, cell id, own cells, opposite cells)
    let elem = |e: usize| -> (usize, usize, &DomainCells, &DomainCells) {
        if e < n_map {
            (0, map_sel[e] as usize, map, scan)
        } else {
            (1, e - n_map, scan, map)
        }
    };

    let dists: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|e| {
            let (_, c, own, opp) = elem(e);
            let a = cross(&own.centroids[c], opp, tau);
            let b = if own.grid.count(c) > 1 { cross(&own.probes[c], opp, tau) } else { a };
            (a.min(b), 0.5 * (a + b))
        })
        .collect();

    // unified cell table over both domains
    let mut table: FxHashMap<u64, u32> = FxHashMap::default();
    table.reserve(n);
    let mut info: Vec<CellInfo> = Vec::with_capacity(n);
    let mut cell_of_elem = Vec::with_capacity(n);
    for (e, &(dmin, _)) in dists.iter().enumerate() {
        let (d, c, own, _) = elem(e);
        let key = own.grid.cell(c);
        let id = *table.entry(pack(&key)).or_insert_with(|| {
            info.push(CellInfo::default());
            (info.len() - 1) as u32
        });
        info[id as usize].count[d] = own.grid.count(c) as u32;
        info[id as usize].dist[d] = (dmin / tau) as f32;
        cell_of_elem.push(id);
    }
    let cells: Vec<VoxelIndex> = {
        let mut cells = vec![VoxelIndex::new(0, 0, 0); info.len()];
        for (e, &id) in cell_of_elem.iter().enumerate() {
            let (_, c, own, _) = elem(e);
            cells[id as usize] = own.grid.cell(c);
        }
        cells
    };
    let windows: Vec<Window> = cells.par_iter().map(|&c| window_stats(&table, &info, c)).collect();

    let mut coarse: FxHashMap<u64, u8> = FxHashMap::default();
    for (id, c) in cells.iter().enumerate() {
        let bits = (info[id].count[0] > 0) as u8 | (((info[id].count[1] > 0) as u8) << 1);
        *coarse.entry(pack(&c.coarsen(COARSE_FACTOR))).or_insert(0) |= bits;
    }
    let mut coarse_ids: FxHashMap<u64, u32> = FxHashMap::default();
    let mut coarse_cells = Vec::new();
    for c in &cells {
        let k = c.coarsen(COARSE_FACTOR);
        coarse_ids.entry(pack(&k)).or_insert_with(|| {
            coarse_cells.push(k);
            (coarse_cells.len() - 1) as u32
        });
    }
    let coarse_win: Vec<[f64; 3]> = coarse_cells.par_iter().map(|&c| coarse_stats(&coarse, c)).collect();

    let rows: Vec<([f64; LOW_DIM], [f64; HIGH_DIM - LOW_DIM])> = (0..n)
        .into_par_iter()
        .map(|e| {
            let (d, c, own, _) = elem(e);
            let o = 1 - d;
            let id = cell_of_elem[e] as usize;
            let ci = &info[id];
            let centroid = own.centroids[c];
            let (dmin, dmean) = dists[e];
            let low = [
                d as f64,
                (1.0 + ci.count[d] as f64).ln(),
                (1.0 + ci.count[o] as f64).ln(),
                dmin / tau,
                dmean / tau,
                ground.height(&centroid).clamp(HEIGHT_CLAMP.0, HEIGHT_CLAMP.1),
                (own.zspread[c] / v).min(1.0),
            ];
            let w = &windows[id];
            let cw = coarse_win[coarse_ids[&pack(&own.grid.cell(c).coarsen(COARSE_FACTOR))] as usize];
            let high = [
                (1.0 + w.count[d]).ln(),
                (1.0 + w.count[o]).ln(),
                w.occ[d] / 27.0,
                w.occ[o] / 27.0,
                w.both / w.occ[d].max(1.0),
                w.layer[o][0] / 9.0,
                w.layer[o][1] / 9.0,
                w.layer[o][2] / 9.0,
                w.layer[d][0] / 9.0,
                w.layer[d][1] / 9.0,
                w.layer[d][2] / 9.0,
                if w.occ[d] > 0.0 { w.dsum[d] / w.occ[d] } else { 1.0 },
                if w.occ[o] > 0.0 { w.dsum[o] / w.occ[o] } else { 1.0 },
                cw[d] / 27.0,
                cw[o] / 27.0,
                cw[2] / cw[d].max(1.0),
            ];
            (low, high)
        })
        .collect();

    let mut elements = Vec::with_capacity(n);
    let mut low = Vec::with_capacity(n * LOW_DIM);
    let mut high = Vec::with_capacity(n * HIGH_DIM);
    for (e, (l, h)) in rows.iter().enumerate() {
        let (d, c, own, _) = elem(e);
        elements.push(Element { domain: if d == 0 { Domain::Map } else { Domain::Scan }, cell: own.grid.cell(c) });
        low.extend_from_slice(l);
        high.extend_from_slice(l);
        high.extend_from_slice(h);
    }
    (elements, low, high)
}

pub(crate) fn point_elements(cells: &DomainCells, sel: Option<&[u32]>, n_points: usize) -> Vec<u32> {
    let mut out = vec![u32::MAX; n_points];
    match sel {
        None => {
            for c in 0..cells.len() {
                for &i in cells.grid.members(c) {
                    out[i as usize] = c as u32;
                }
            }
        }
        Some(sel) => {
            for (e, &c) in sel.iter().enumerate() {
                for &i in cells.grid.members(c as usize) {
                    out[i as usize] = e as u32;
                }
            }
        }
    }
    out
}

/// Features for every occupied voxel of both clouds.
pub fn extract_features(
    map: &PointCloud,
    scan: &PointCloud,
    ground: &GroundModel,
    params: &FeatureParams,
) -> Result<FeatureSet> {
    check_voxel_size(params.voxel_size)?;
    if !(params.tau_ocl > 0.0) {
        return Err(crate::error::invalid_param("tau_ocl must be positive"));
    }
    if map.is_empty() && scan.is_empty() {
        return Err(Error::EmptyInput("both clouds are empty".into()));
    }
    let (m, s) = rayon::join(
        || DomainCells::build(map, params.voxel_size),
        || DomainCells::build(scan, params.voxel_size),
    );
    let (m, s) = (m?, s?);
    let sel: Vec<u32> = (0..m.len() as u32).collect();
    let (elements, low, high) = compute(&m, &sel, &s, ground, params);
    Ok(FeatureSet {
        elements,
        low,
        high,
        n_map: m.len(),
        map_point_elem: point_elements(&m, None, map.len()),
        scan_point_elem: point_elements(&s, None, scan.len()).into_iter().map(|e| e + m.len() as u32).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{transform, Pose};
    use crate::rng;
    use nalgebra::Vector3;
    use rand::Rng as _;

    fn flat() -> GroundModel {
        GroundModel::horizontal(0.0, 0.1)
    }

    #[test]
    fn isolated_point_caps_distance() {
        let map = PointCloud::from_xyz(&[[0.05, 0.05, 0.05]]).unwrap();
        let scan = PointCloud::from_xyz(&[[10.0, 0.0, 0.0]]).unwrap();
        let f = extract_features(&map, &scan, &flat(), &FeatureParams::default()).unwrap();
        let low = f.point_features(Domain::Map, 0).unwrap().low_level;
        assert_eq!(low[2], 0.0, "no opposite points in the voxel");
        assert_eq!(low[3], 1.0, "distance capped at tau_ocl");
        assert_eq!(low[4], 1.0);
    }

    #[test]
    fn identical_point_is_matched() {
        let c = PointCloud::from_xyz(&[[0.05, 0.05, 0.05]]).unwrap();
        let f = extract_features(&c, &c, &flat(), &FeatureParams::default()).unwrap();
        let low = f.point_features(Domain::Map, 0).unwrap().low_level;
        assert_eq!(low[1], low[2]);
        assert_eq!(low[3], 0.0);
        assert_eq!(f.len(), 2);
    }

    fn random_cloud(r: &mut rng::Rng, n: usize) -> PointCloud {
        // keep clear of voxel faces so grid-preserving motions keep buckets
        let coord = |r: &mut rng::Rng, lo: i32, hi: i32| r.random_range(lo..hi) as f64 * 0.1 + r.random_range(0.01..0.09);
        let c: Vec<[f64; 3]> = (0..n).map(|_| [coord(r, -20, 20), coord(r, -20, 20), coord(r, 0, 10)]).collect();
        PointCloud::from_xyz(&c).unwrap()
    }

    #[test]
    fn swapping_roles_swaps_channels() {
        let mut r = rng::seeded(4);
        let (a, b) = (random_cloud(&mut r, 400), random_cloud(&mut r, 300));
        let p = FeatureParams::default();
        let ab = extract_features(&a, &b, &flat(), &p).unwrap();
        let ba = extract_features(&b, &a, &flat(), &p).unwrap();
        // scan element of (a, b) == map element of (b, a), apart from the flag
        for i in 0..b.len() {
            let x = ab.point_features(Domain::Scan, i).unwrap();
            let y = ba.point_features(Domain::Map, i).unwrap();
            assert_eq!(x.low_level[0], 1.0);
            assert_eq!(y.low_level[0], 0.0);
            assert_eq!(x.low_level[1..], y.low_level[1..]);
            assert_eq!(x.high_level[1..], y.high_level[1..]);
        }
        for i in 0..a.len() {
            let x = ab.point_features(Domain::Map, i).unwrap();
            let y = ba.point_features(Domain::Scan, i).unwrap();
            // own and opposite densities trade places
            assert_eq!(x.low_level[1], y.low_level[1]);
            assert_eq!(x.low_level[2], y.low_level[2]);
        }
    }

    #[test]
    fn deterministic() {
        let mut r = rng::seeded(5);
        let (a, b) = (random_cloud(&mut r, 500), random_cloud(&mut r, 500));
        let p = FeatureParams::default();
        assert_eq!(extract_features(&a, &b, &flat(), &p).unwrap(), extract_features(&a, &b, &flat(), &p).unwrap());
    }

    #[test]
    fn invariant_under_grid_preserving_motion() {
        let mut r = rng::seeded(6);
        let (a, b) = (random_cloud(&mut r, 600), random_cloud(&mut r, 500));
        let ground = GroundModel::new(0.0, 0.0, 1.0, -0.2, 0.1).unwrap();
        let p = FeatureParams::default();
        let before = extract_features(&a, &b, &ground, &p).unwrap();
        let motion = Pose::from_yaw(std::f64::consts::FRAC_PI_2, Vector3::new(3.2, -1.2, 0.8));
        let (ta, tb) = (transform(&a, &motion), transform(&b, &motion));
        let after = extract_features(&ta, &tb, &ground.transformed(&motion), &p).unwrap();
        assert_eq!(before.len(), after.len());
        for (x, y) in before.high.iter().zip(&after.high) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
        for (x, y) in before.low.iter().zip(&after.low) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn finite_and_fixed_width() {
        let mut r = rng::seeded(7);
        let (a, b) = (random_cloud(&mut r, 300), random_cloud(&mut r, 10));
        let f = extract_features(&a, &b, &flat(), &FeatureParams::default()).unwrap();
        assert_eq!(f.low.len(), f.len() * LOW_DIM);
        assert_eq!(f.high.len(), f.len() * HIGH_DIM);
        assert!(f.low.iter().chain(&f.high).all(|v| v.is_finite()));
        assert!(f.map_point_elem.iter().all(|&e| (e as usize) < f.n_map));
    }
}
