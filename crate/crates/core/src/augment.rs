//! Pseudo-change synthesis from a single session: tracked static objects are
//! cut out as snapshots and re-inserted elsewhere, into scans as positive
//! changes and into the map as negative changes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::Rng as _;
use rustc_hash::FxHashSet;

use crate::error::{invalid_input, invalid_param, Error, Result};
use crate::geometry::{self, ChangeClass, KdTree, Point, PointCloud, Pose};
use crate::mapping::{self, GroundModel, Session};
use crate::rng;

/// Axis-aligned xy box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Footprint {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Footprint {
    pub fn of(cloud: &PointCloud) -> Option<Self> {
        let (lo, hi) = cloud.bounds()?;
        Some(Self { min: [lo.x, lo.y], max: [hi.x, hi.y] })
    }

    pub fn center(&self) -> [f64; 2] {
        [(self.min[0] + self.max[0]) / 2.0, (self.min[1] + self.max[1]) / 2.0]
    }

    pub fn inflate(&self, margin: f64) -> Self {
        Self {
            min: [self.min[0] - margin, self.min[1] - margin],
            max: [self.max[0] + margin, self.max[1] + margin],
        }
    }

    pub fn intersects(&self, o: &Footprint) -> bool {
        self.min[0] <= o.max[0] && o.min[0] <= self.max[0] && self.min[1] <= o.max[1] && o.min[1] <= self.max[1]
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        (self.min[0]..=self.max[0]).contains(&x) && (self.min[1]..=self.max[1]).contains(&y)
    }
}

/// Points of object `k` observed in frame `j`, in the global frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectSnapshot {
    pub points: PointCloud,
    pub object_id: u32,
    pub frame_index: usize,
    pub footprint: Footprint,
}

/// Snapshots grouped by object id, ordered by frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ObjectDatabase {
    objects: BTreeMap<u32, Vec<ObjectSnapshot>>,
}

impl ObjectDatabase {
    pub fn from_snapshots(snapshots: Vec<ObjectSnapshot>) -> Result<Self> {
        let mut objects: BTreeMap<u32, Vec<ObjectSnapshot>> = BTreeMap::new();
        for s in snapshots {
            if s.points.is_empty() {
                return Err(invalid_input(format!("snapshot of object {} is empty", s.object_id)));
            }
            objects.entry(s.object_id).or_default().push(s);
        }
        for v in objects.values_mut() {
            v.sort_by_key(|s| s.frame_index);
        }
        Ok(Self { objects })
    }

    /// Number of objects.
    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.objects.keys().copied()
    }

    pub fn snapshots(&self, id: u32) -> Option<&[ObjectSnapshot]> {
        self.objects.get(&id).map(Vec::as_slice)
    }

    /// All snapshots of object `id` merged into one cloud.
    pub fn accumulated(&self, id: u32) -> Option<PointCloud> {
        let snaps = self.objects.get(&id)?;
        let mut out = PointCloud::default();
        for s in snaps {
            out.append(&s.points);
        }
        Some(out)
    }

    /// Drops objects whose accumulated point count is below `min_points`.
    pub fn retain_min_points(&mut self, min_points: usize) {
        self.objects.retain(|_, s| s.iter().map(|s| s.points.len()).sum::<usize>() >= min_points);
    }

    /// Writes `obj<k>_frame<j>.ply` files and an `index.txt` listing
    /// `k j points file` per snapshot.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut index = String::new();
        for (k, snaps) in &self.objects {
            for s in snaps {
                let name = format!("obj{k}_frame{}.ply", s.frame_index);
                geometry::save_ply(dir.join(&name), &s.points, geometry::PlyFormat::BinaryLittleEndian)?;
                index.push_str(&format!("{k} {} {} {name}\n", s.frame_index, s.points.len()));
            }
        }
        fs::write(dir.join("index.txt"), index)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join("index.txt"))?;
        let mut snaps = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: &str| Error::Parse { line: lineno + 1, msg: msg.to_string() };
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != 4 {
                return Err(err("expected `id frame points file`"));
            }
            let object_id = toks[0].parse().map_err(|_| err("bad object id"))?;
            let frame_index = toks[1].parse().map_err(|_| err("bad frame index"))?;
            let count: usize = toks[2].parse().map_err(|_| err("bad point count"))?;
            let points = geometry::load_ply(dir.join(toks[3]))?;
            if points.len() != count {
                return Err(err("point count does not match the snapshot file"));
            }
            let footprint = Footprint::of(&points).ok_or_else(|| err("empty snapshot"))?;
            snaps.push(ObjectSnapshot { points, object_id, frame_index, footprint });
        }
        Self::from_snapshots(snaps)
    }
}

/// Groups per-frame instance ids into snapshots. Id 0 is background; ids
/// with any point flagged high-dynamic are dropped.
pub fn extract_objects(session: &Session, instance_masks: &[Vec<u32>]) -> Result<ObjectDatabase> {
    if instance_masks.len() != session.len() {
        return Err(invalid_input(format!(
            "{} instance masks for {} scans",
            instance_masks.len(),
            session.len()
        )));
    }
    let mut dynamic_ids = FxHashSet::default();
    for (f, ids) in session.frames().iter().zip(instance_masks) {
        if ids.len() != f.cloud.len() {
            return Err(invalid_input("instance mask length differs from its scan"));
        }
        for (i, &id) in ids.iter().enumerate() {
            if f.is_dynamic(i) {
                dynamic_ids.insert(id);
            }
        }
    }
    let mut snaps = Vec::new();
    for (j, (f, ids)) in session.frames().iter().zip(instance_masks).enumerate() {
        let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &id) in ids.iter().enumerate() {
            if id != 0 && !dynamic_ids.contains(&id) {
                groups.entry(id).or_default().push(i);
            }
        }
        for (id, idx) in groups {
            if idx.is_empty() {
                log::warn!("object {id} has no points in frame {j}; skipped");
                continue;
            }
            let mut points = geometry::transform(&f.cloud.select(&idx), &f.pose);
            points.clear_attributes();
            let footprint = Footprint::of(&points).expect("non-empty");
            snaps.push(ObjectSnapshot { points, object_id: id, frame_index: j, footprint });
        }
    }
    ObjectDatabase::from_snapshots(snaps)
}

/// Where to put an object: footprint center and heading.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

/// Rigid motion that rotates `reference` by `yaw` about its footprint
/// center, moves that center to `(x, y)` and sets its lowest point on the
/// ground plane.
pub fn placement_pose(reference: &PointCloud, placement: &Placement, ground: &GroundModel) -> Result<Pose> {
    let fp = Footprint::of(reference).ok_or_else(|| Error::EmptyInput("object has no points".into()))?;
    let [cx, cy] = fp.center();
    let zmin = reference.points().iter().map(|p| p.z).fold(f64::INFINITY, f64::min);
    let rot = Pose::from_yaw(placement.yaw, Vector3::zeros());
    let to_origin = Pose::from_translation(Vector3::new(-cx, -cy, -zmin));
    let to_site =
        Pose::from_translation(Vector3::new(placement.x, placement.y, ground.z_at(placement.x, placement.y)));
    Ok(to_site.compose(&rot).compose(&to_origin))
}

/// Ground points, free space and already inserted footprints of one
/// target scene.
#[derive(Clone, Debug)]
pub struct InsertionSite {
    ground: GroundModel,
    ground_xy: Vec<[f64; 2]>,
    ground_index: KdTree,
    occupied: FxHashSet<(i32, i32)>,
    cell: f64,
    footprints: Vec<Footprint>,
    /// Inflation applied when testing footprint disjointness, m.
    pub margin: f64,
    /// Maximum xy distance from a placement to the nearest ground point, m.
    pub ground_tolerance: f64,
}

const OBSTACLE_CELL: f64 = 0.25;
const OBSTACLE_MAX_HEIGHT: f64 = 2.5;

impl InsertionSite {
    /// Indexes the ground inliers of `scene` and the xy cells occupied by
    /// its non-ground structure.
    pub fn new(scene: &PointCloud, ground: GroundModel, ground_idx: &[usize]) -> Result<Self> {
        if ground_idx.is_empty() {
            return Err(Error::InsufficientData("no ground points to place objects on".into()));
        }
        let ground_xy: Vec<[f64; 2]> =
            ground_idx.iter().map(|&i| [scene.point(i).x, scene.point(i).y]).collect();
        let flat: Vec<Point> = ground_xy.iter().map(|p| Point::new(p[0], p[1], 0.0)).collect();
        let mut occupied = FxHashSet::default();
        let clearance = ground.threshold() + 0.05;
        for p in scene.points() {
            let h = ground.height(p);
            if h > clearance && h < OBSTACLE_MAX_HEIGHT {
                occupied.insert(cell_of(p.x, p.y, OBSTACLE_CELL));
            }
        }
        Ok(Self {
            ground,
            ground_index: KdTree::new(&flat),
            ground_xy,
            occupied,
            cell: OBSTACLE_CELL,
            footprints: Vec::new(),
            margin: 0.1,
            ground_tolerance: 0.2,
        })
    }

    pub fn ground(&self) -> &GroundModel {
        &self.ground
    }

    pub fn ground_points(&self) -> &[[f64; 2]] {
        &self.ground_xy
    }

    pub fn footprints(&self) -> &[Footprint] {
        &self.footprints
    }

    /// Validates a placed object and reserves its footprint.
    fn reserve(&mut self, placement: &Placement, placed: &PointCloud) -> Result<Footprint> {
        let on_ground = self
            .ground_index
            .nearest_within(&Point::new(placement.x, placement.y, 0.0), self.ground_tolerance)
            .is_some();
        if !on_ground {
            return Err(Error::PlacementRejected(format!(
                "({:.2}, {:.2}) is not on the ground",
                placement.x, placement.y
            )));
        }
        let fp = Footprint::of(placed).expect("non-empty object");
        let grown = fp.inflate(self.margin);
        if self.footprints.iter().any(|f| f.inflate(self.margin).intersects(&grown)) {
            return Err(Error::CollisionRejected);
        }
        let (lo, hi) = (cell_of(grown.min[0], grown.min[1], self.cell), cell_of(grown.max[0], grown.max[1], self.cell));
        for cx in lo.0..=hi.0 {
            for cy in lo.1..=hi.1 {
                if self.occupied.contains(&(cx, cy)) {
                    return Err(Error::PlacementRejected("placement overlaps existing structure".into()));
                }
            }
        }
        self.footprints.push(fp);
        Ok(fp)
    }
}

fn cell_of(x: f64, y: f64, size: f64) -> (i32, i32) {
    ((x / size).floor() as i32, (y / size).floor() as i32)
}

/// Appends `obj` to `target` at `placement`, labelled `label`, after
/// checking it stands on the ground and does not collide with earlier
/// insertions or structure.
pub fn insert_object(
    target: &PointCloud,
    obj: &PointCloud,
    placement: &Placement,
    site: &mut InsertionSite,
    label: ChangeClass,
) -> Result<PointCloud> {
    let pose = placement_pose(obj, placement, &site.ground)?;
    let mut placed = geometry::transform(obj, &pose);
    site.reserve(placement, &placed)?;
    placed.clear_attributes();
    placed.set_labels_all(label);
    let mut out = target.clone();
    out.append(&placed);
    Ok(out)
}

/// A map with negative-change insertions and the session scans (global
/// frame) with positive-change insertions. Inserted points follow the
/// original points in every cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedPair {
    pub map: PointCloud,
    pub scans: Vec<PointCloud>,
    pub poses: Vec<Pose>,
    pub pc_ids: Vec<u32>,
    pub nc_ids: Vec<u32>,
    /// Number of original points at the front of the map.
    pub map_original: usize,
    /// Number of original points at the front of each scan.
    pub scan_original: Vec<usize>,
}

impl AugmentedPair {
    /// Writes `map.ply`, `scan_NNNN.ply` and `pair.txt`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        geometry::save_ply(dir.join("map.ply"), &self.map, geometry::PlyFormat::BinaryLittleEndian)?;
        let mut meta = String::new();
        meta.push_str(&format!("map_original {}\n", self.map_original));
        meta.push_str(&format!("pc_ids{}\n", self.pc_ids.iter().map(|i| format!(" {i}")).collect::<String>()));
        meta.push_str(&format!("nc_ids{}\n", self.nc_ids.iter().map(|i| format!(" {i}")).collect::<String>()));
        for (i, (scan, pose)) in self.scans.iter().zip(&self.poses).enumerate() {
            let name = format!("scan_{i:04}.ply");
            geometry::save_ply(dir.join(&name), scan, geometry::PlyFormat::BinaryLittleEndian)?;
            meta.push_str(&format!("scan {name} {}", self.scan_original[i]));
            for v in pose.to_row_major() {
                meta.push_str(&format!(" {v:e}"));
            }
            meta.push('\n');
        }
        fs::write(dir.join("pair.txt"), meta)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join("pair.txt"))?;
        let map = geometry::load_ply(dir.join("map.ply"))?;
        let mut pair = AugmentedPair {
            map,
            scans: vec![],
            poses: vec![],
            pc_ids: vec![],
            nc_ids: vec![],
            map_original: 0,
            scan_original: vec![],
        };
        for (lineno, line) in text.lines().enumerate() {
            let err = |msg: &str| Error::Parse { line: lineno + 1, msg: msg.to_string() };
            let toks: Vec<&str> = line.split_whitespace().collect();
            match toks.first().copied() {
                None => {}
                Some("map_original") => {
                    pair.map_original = toks.get(1).and_then(|t| t.parse().ok()).ok_or_else(|| err("bad count"))?
                }
                Some(k @ ("pc_ids" | "nc_ids")) => {
                    let ids = toks[1..].iter().map(|t| t.parse().map_err(|_| err("bad id"))).collect::<Result<_>>()?;
                    if k == "pc_ids" {
                        pair.pc_ids = ids;
                    } else {
                        pair.nc_ids = ids;
                    }
                }
                Some("scan") if toks.len() == 15 => {
                    let n = toks[2].parse().map_err(|_| err("bad count"))?;
                    let mut v = [0.0; 12];
                    for (d, t) in v.iter_mut().zip(&toks[3..]) {
                        *d = t.parse().map_err(|_| err("bad pose value"))?;
                    }
                    pair.scans.push(geometry::load_ply(dir.join(toks[1]))?);
                    pair.poses.push(Pose::from_row_major(&v).map_err(|e| err(&e.to_string()))?);
                    pair.scan_original.push(n);
                }
                _ => return Err(err("unrecognized line")),
            }
        }
        Ok(pair)
    }
}

/// Pair generation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentParams {
    /// Minimum distance of a placement from the map's xy bounds, m.
    pub boundary_margin: f64,
    pub max_retries: usize,
    /// Deduplicate the source map at this voxel size before insertion.
    pub map_voxel: Option<f64>,
    pub ground: mapping::GroundParams,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self { boundary_margin: 0.5, max_retries: 100, map_voxel: None, ground: mapping::GroundParams::default() }
    }
}

/// Session data prepared once for repeated pair generation.
#[derive(Clone, Debug)]
pub struct Augmenter<'a> {
    db: &'a ObjectDatabase,
    map: PointCloud,
    scans: Vec<PointCloud>,
    poses: Vec<Pose>,
    ground: GroundModel,
    ground_idx: Vec<usize>,
    candidates: Vec<usize>,
    params: AugmentParams,
}

impl<'a> Augmenter<'a> {
    pub fn new(session: &Session, db: &'a ObjectDatabase, params: AugmentParams) -> Result<Self> {
        let mut map = mapping::build_static_map(session)?;
        if let Some(v) = params.map_voxel {
            map = mapping::voxel_dedup(&map, v)?;
        }
        map.set_labels_all(ChangeClass::Static);
        map.set_visibility_all(0);
        let scans = session
            .frames()
            .iter()
            .map(|f| {
                let keep: Vec<bool> = (0..f.cloud.len()).map(|i| !f.is_dynamic(i)).collect();
                let mut s = f.global_cloud().filter(&keep);
                s.clear_attributes();
                s.set_labels_all(ChangeClass::Static);
                s.set_visibility_all(1);
                s
            })
            .collect();
        let poses = session.frames().iter().map(|f| f.pose).collect();
        let (ground, ground_idx) = mapping::segment_ground_with(&map, &params.ground)?;
        let (lo, hi) = map.bounds().expect("non-empty map");
        let m = params.boundary_margin;
        let candidates: Vec<usize> = ground_idx
            .iter()
            .copied()
            .filter(|&i| {
                let p = map.point(i);
                p.x >= lo.x + m && p.x <= hi.x - m && p.y >= lo.y + m && p.y <= hi.y - m
            })
            .collect();
        if candidates.is_empty() {
            return Err(Error::InsufficientData("no ground points away from the scene boundary".into()));
        }
        Ok(Self { db, map, scans, poses, ground, ground_idx, candidates, params })
    }

    pub fn map(&self) -> &PointCloud {
        &self.map
    }

    pub fn ground(&self) -> &GroundModel {
        &self.ground
    }

    fn place<T>(
        &self,
        site: &mut InsertionSite,
        rng: &mut rng::Rng,
        mut attempt: impl FnMut(&mut InsertionSite, &Placement) -> Result<T>,
    ) -> Result<T> {
        for _ in 0..self.params.max_retries {
            let p = self.map.point(self.candidates[rng.random_range(0..self.candidates.len())]);
            let placement = Placement { x: p.x, y: p.y, yaw: rng.random_range(0.0..std::f64::consts::TAU) };
            match attempt(site, &placement) {
                Ok(v) => return Ok(v),
                Err(Error::PlacementRejected(_) | Error::CollisionRejected) => continue,
                Err(e) => return Err(e),
            }
        }
        Err(Error::GenerationFailed(format!("no valid placement after {} attempts", self.params.max_retries)))
    }

    pub fn generate(&self, n_pc: usize, n_nc: usize, seed: u64) -> Result<AugmentedPair> {
        if n_pc + n_nc > self.db.len() {
            return Err(invalid_param(format!(
                "{} objects requested but the database holds {}",
                n_pc + n_nc,
                self.db.len()
            )));
        }
        let mut rng = rng::seeded(seed);
        let ids: Vec<u32> = self.db.ids().collect();
        let chosen: Vec<u32> = sample(&mut rng, ids.len(), n_pc + n_nc).into_iter().map(|i| ids[i]).collect();
        let (pc_ids, nc_ids) = chosen.split_at(n_pc);
        let mut site = InsertionSite::new(&self.map, self.ground, &self.ground_idx)?;

        let mut map = self.map.clone();
        for &k in nc_ids {
            let obj = self.db.accumulated(k).expect("sampled id exists");
            map = self.place(&mut site, &mut rng, |site, pl| {
                insert_object(&map, &obj, pl, site, ChangeClass::Negative)
            })?;
        }

        if let Some(v) = self.params.map_voxel {
            // inserted objects get the density of the deduplicated map
            let inserted = map.select(&(self.map.len()..map.len()).collect::<Vec<_>>());
            map.truncate(self.map.len());
            if !inserted.is_empty() {
                map.append(&mapping::voxel_dedup(&inserted, v)?);
            }
        }

        let mut scans = self.scans.clone();
        for &k in pc_ids {
            let union = self.db.accumulated(k).expect("sampled id exists");
            let snaps = self.db.snapshots(k).expect("sampled id exists");
            let ground = self.ground;
            let pose = self.place(&mut site, &mut rng, |site, pl| {
                let pose = placement_pose(&union, pl, &ground)?;
                site.reserve(pl, &geometry::transform(&union, &pose))?;
                Ok(pose)
            })?;
            for scan in scans.iter_mut() {
                let snap = &snaps[rng.random_range(0..snaps.len())];
                let mut placed = geometry::transform(&snap.points, &pose);
                placed.clear_attributes();
                placed.set_labels_all(ChangeClass::Positive);
                placed.set_visibility_all(1);
                scan.append(&placed);
            }
        }
        map.set_visibility_all(0);

        Ok(AugmentedPair {
            map,
            scans,
            poses: self.poses.clone(),
            pc_ids: pc_ids.to_vec(),
            nc_ids: nc_ids.to_vec(),
            map_original: self.map.len(),
            scan_original: self.scans.iter().map(PointCloud::len).collect(),
        })
    }
}

/// One augmented (map, scans) pair from `session`.
pub fn generate_pair(
    session: &Session,
    db: &ObjectDatabase,
    n_pc: usize,
    n_nc: usize,
    seed: u64,
) -> Result<AugmentedPair> {
    if n_pc + n_nc > db.len() {
        return Err(invalid_param(format!("{} objects requested but the database holds {}", n_pc + n_nc, db.len())));
    }
    Augmenter::new(session, db, AugmentParams::default())?.generate(n_pc, n_nc, seed)
}
