//! Single-session map building, high-dynamic filtering, ground segmentation
//! and voxel deduplication.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample;
use rayon::prelude::*;

use crate::error::{invalid_input, invalid_param, Error, Result};
use crate::geometry::{self, ChangeClass, Point, PointCloud, Pose, VoxelGrid, VoxelIndex};
use crate::rng;

/// One posed scan in its sensor frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanFrame {
    pub cloud: PointCloud,
    pub pose: Pose,
    pub timestamp: f64,
    /// `true` marks a high-dynamic point.
    pub dynamic_mask: Option<Vec<bool>>,
    /// Per-point object instance id (0 = background structure).
    pub instances: Option<Vec<u32>>,
}

impl ScanFrame {
    pub fn new(cloud: PointCloud, pose: Pose, timestamp: f64) -> Self {
        Self { cloud, pose, timestamp, dynamic_mask: None, instances: None }
    }

    /// The scan expressed in the global frame.
    pub fn global_cloud(&self) -> PointCloud {
        geometry::transform(&self.cloud, &self.pose)
    }

    pub fn is_dynamic(&self, i: usize) -> bool {
        self.dynamic_mask.as_ref().is_some_and(|m| m[i])
    }

    fn validate(&self, idx: usize) -> Result<()> {
        if !self.timestamp.is_finite() {
            return Err(invalid_input(format!("scan {idx}: timestamp is not finite")));
        }
        if let Some(m) = &self.dynamic_mask {
            if m.len() != self.cloud.len() {
                return Err(invalid_input(format!(
                    "scan {idx}: dynamic mask has {} entries for {} points",
                    m.len(),
                    self.cloud.len()
                )));
            }
        }
        if let Some(ids) = &self.instances {
            if ids.len() != self.cloud.len() {
                return Err(invalid_input(format!(
                    "scan {idx}: instance ids have {} entries for {} points",
                    ids.len(),
                    self.cloud.len()
                )));
            }
        }
        Ok(())
    }
}

/// Time-ordered scans of a single session.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Session {
    frames: Vec<ScanFrame>,
}

impl Session {
    pub fn new(frames: Vec<ScanFrame>) -> Result<Self> {
        for (i, f) in frames.iter().enumerate() {
            f.validate(i)?;
        }
        if let Some(i) = frames.windows(2).position(|w| w[1].timestamp <= w[0].timestamp) {
            return Err(invalid_input(format!("timestamps are not strictly increasing at scan {}", i + 1)));
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[ScanFrame] {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> &ScanFrame {
        &self.frames[i]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn has_dynamic_masks(&self) -> bool {
        self.frames.iter().any(|f| f.dynamic_mask.is_some())
    }

    /// Reads a manifest: one scan per line,
    /// `<scan.ply> <12 row-major R|t values> <timestamp> [<mask>|-] [<instances>]`.
    /// Relative paths resolve against the manifest's directory. Masks hold one
    /// 0/1 byte per point; instance files hold little-endian u32 ids.
    pub fn load_manifest(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut frames = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse { line: lineno + 1, msg };
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() < 14 || toks.len() > 16 {
                return Err(parse_err(format!("expected 14 to 16 fields, found {}", toks.len())));
            }
            let mut vals = [0.0f64; 13];
            for (v, t) in vals.iter_mut().zip(&toks[1..14]) {
                *v = t.parse().map_err(|_| parse_err(format!("bad number `{t}`")))?;
            }
            let pose = Pose::from_row_major(vals[..12].try_into().unwrap())
                .map_err(|e| parse_err(e.to_string()))?;
            let cloud = geometry::load_ply(base.join(toks[0]))?;
            let mut frame = ScanFrame::new(cloud, pose, vals[12]);
            if let Some(&m) = toks.get(14).filter(|&&m| m != "-") {
                let bytes = fs::read(base.join(m))?;
                if bytes.iter().any(|&b| b > 1) {
                    return Err(parse_err(format!("mask `{m}` contains bytes other than 0/1")));
                }
                frame.dynamic_mask = Some(bytes.into_iter().map(|b| b == 1).collect());
            }
            if let Some(&ids) = toks.get(15) {
                let bytes = fs::read(base.join(ids))?;
                if bytes.len() % 4 != 0 {
                    return Err(parse_err(format!("instance file `{ids}` is not a whole number of u32 values")));
                }
                frame.instances =
                    Some(bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect());
            }
            frames.push(frame);
        }
        Session::new(frames)
    }

    /// Writes scans, masks and instance ids next to `manifest`, named
    /// `<stem>_NNNN.{ply,mask,ids}`.
    pub fn save_manifest(&self, manifest: impl AsRef<Path>) -> Result<()> {
        let manifest = manifest.as_ref();
        let dir = manifest.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        fs::create_dir_all(&dir)?;
        let stem = manifest.file_stem().and_then(|s| s.to_str()).unwrap_or("scan");
        let mut out = String::new();
        for (i, f) in self.frames.iter().enumerate() {
            let ply = format!("{stem}_{i:04}.ply");
            geometry::save_ply(dir.join(&ply), &f.cloud, geometry::PlyFormat::BinaryLittleEndian)?;
            out.push_str(&ply);
            for v in f.pose.to_row_major() {
                out.push_str(&format!(" {v:e}"));
            }
            out.push_str(&format!(" {:e}", f.timestamp));
            match &f.dynamic_mask {
                Some(m) => {
                    let name = format!("{stem}_{i:04}.mask");
                    fs::write(dir.join(&name), m.iter().map(|&b| b as u8).collect::<Vec<_>>())?;
                    out.push_str(&format!(" {name}"));
                }
                None => out.push_str(" -"),
            }
            if let Some(ids) = &f.instances {
                let name = format!("{stem}_{i:04}.ids");
                fs::write(dir.join(&name), ids.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>())?;
                out.push_str(&format!(" {name}"));
            }
            out.push('\n');
        }
        fs::write(manifest, out)?;
        Ok(())
    }
}

/// Union of all scans in the global frame, optionally keeping high-dynamic
/// points. Returns the map (visibility 0) and a per-point high-dynamic flag.
pub fn accumulate_session(session: &Session, remove_dynamic: bool) -> Result<(PointCloud, Vec<bool>)> {
    if session.is_empty() {
        return Err(Error::EmptyInput("session has no scans".into()));
    }
    let parts: Vec<(PointCloud, Vec<bool>)> = session
        .frames()
        .par_iter()
        .map(|f| {
            let global = f.global_cloud();
            let dynamic: Vec<bool> = (0..global.len()).map(|i| f.is_dynamic(i)).collect();
            if remove_dynamic && f.dynamic_mask.is_some() {
                let keep: Vec<bool> = dynamic.iter().map(|d| !d).collect();
                let n = keep.iter().filter(|&&k| k).count();
                (global.filter(&keep), vec![false; n])
            } else {
                (global, dynamic)
            }
        })
        .collect();
    let mut map = PointCloud::default();
    let mut flags = Vec::new();
    for (cloud, f) in parts {
        map.append(&cloud);
        flags.extend(f);
    }
    map.set_visibility_all(0);
    Ok((map, flags))
}

/// Union of the transformed scans with high-dynamic points removed; every
/// point carries visibility 0.
pub fn build_static_map(session: &Session) -> Result<PointCloud> {
    accumulate_session(session, true).map(|(m, _)| m)
}

/// Plane `n·p + d = 0` with a unit normal pointing up (`n_z >= 0`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundModel {
    normal: Vector3<f64>,
    offset: f64,
    threshold: f64,
}

impl GroundModel {
    pub fn new(a: f64, b: f64, c: f64, d: f64, threshold: f64) -> Result<Self> {
        let n = Vector3::new(a, b, c);
        let norm = n.norm();
        if !(norm > 0.0 && norm.is_finite() && d.is_finite()) {
            return Err(invalid_param("ground plane needs a finite non-zero normal"));
        }
        if !(threshold >= 0.0) {
            return Err(invalid_param("ground threshold must be non-negative"));
        }
        let sign = if c < 0.0 { -1.0 } else { 1.0 };
        Ok(Self { normal: n * (sign / norm), offset: d * sign / norm, threshold })
    }

    /// Horizontal plane `z = height`.
    pub fn horizontal(height: f64, threshold: f64) -> Self {
        Self { normal: Vector3::z(), offset: -height, threshold }
    }

    pub fn coefficients(&self) -> [f64; 4] {
        [self.normal.x, self.normal.y, self.normal.z, self.offset]
    }

    pub fn normal(&self) -> &Vector3<f64> {
        &self.normal
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Signed height of `p` above the plane.
    #[inline]
    pub fn height(&self, p: &Point) -> f64 {
        self.normal.dot(&p.coords) + self.offset
    }

    pub fn is_inlier(&self, p: &Point) -> bool {
        self.height(p).abs() <= self.threshold
    }

    /// Plane at the elevation of `(x, y)`.
    pub fn z_at(&self, x: f64, y: f64) -> f64 {
        if self.normal.z.abs() < 1e-12 {
            return 0.0;
        }
        -(self.normal.x * x + self.normal.y * y + self.offset) / self.normal.z
    }

    /// The same plane after moving the world by `pose`.
    pub fn transformed(&self, pose: &Pose) -> Self {
        let n = pose.rotation() * self.normal;
        let d = self.offset - n.dot(pose.translation());
        GroundModel::new(n.x, n.y, n.z, d, self.threshold).expect("rigid motion keeps the normal unit")
    }
}

/// Ground segmentation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundParams {
    pub threshold: f64,
    /// Fraction of lowest points used as plane candidates.
    pub low_fraction: f64,
    pub iterations: usize,
    /// Minimum `|n_z|` for a candidate to count as ground when one exists.
    pub min_vertical: f64,
    pub seed: u64,
}

impl Default for GroundParams {
    fn default() -> Self {
        Self {
            threshold: 0.1,
            low_fraction: 0.3,
            iterations: 200,
            min_vertical: std::f64::consts::FRAC_1_SQRT_2,
            seed: 0,
        }
    }
}

pub const MIN_GROUND_POINTS: usize = 50;

/// Dominant-plane ground segmentation with default settings.
pub fn segment_ground(scan: &PointCloud) -> Result<(GroundModel, Vec<usize>)> {
    segment_ground_with(scan, &GroundParams::default())
}

pub fn segment_ground_with(scan: &PointCloud, params: &GroundParams) -> Result<(GroundModel, Vec<usize>)> {
    if scan.len() < MIN_GROUND_POINTS {
        return Err(Error::InsufficientData(format!(
            "ground segmentation needs at least {MIN_GROUND_POINTS} points, got {}",
            scan.len()
        )));
    }
    if !(params.threshold >= 0.0) || !(params.low_fraction > 0.0 && params.low_fraction <= 1.0) {
        return Err(invalid_param("invalid ground segmentation parameters"));
    }
    let pts = scan.points();
    let mut order: Vec<usize> = (0..pts.len()).collect();
    order.sort_by(|&a, &b| pts[a].z.total_cmp(&pts[b].z).then(a.cmp(&b)));
    let n_low = ((pts.len() as f64 * params.low_fraction).ceil() as usize).max(3).min(pts.len());
    let low: Vec<Point> = order[..n_low].iter().map(|&i| pts[i]).collect();

    let mut rng = rng::seeded(params.seed);
    // best (horizontal-ish, inlier count) candidate
    let mut best: Option<(bool, usize, Vector3<f64>, f64)> = None;
    for _ in 0..params.iterations {
        let s = sample(&mut rng, low.len(), 3);
        let (a, b, c) = (low[s.index(0)], low[s.index(1)], low[s.index(2)]);
        let n = (b - a).cross(&(c - a));
        let norm = n.norm();
        if norm < 1e-12 {
            continue;
        }
        let n = n / norm;
        let d = -n.dot(&a.coords);
        let count = low.iter().filter(|p| (n.dot(&p.coords) + d).abs() <= params.threshold).count();
        let flat = n.z.abs() >= params.min_vertical;
        let better = match &best {
            None => true,
            Some((bf, bc, ..)) => (flat, count) > (*bf, *bc),
        };
        if better {
            best = Some((flat, count, n, d));
        }
    }
    let (n, d) = match best {
        Some((_, _, n, d)) => (n, d),
        None => {
            // every sampled triple degenerate: all low points collinear
            let z = low.iter().map(|p| p.z).sum::<f64>() / low.len() as f64;
            (Vector3::z(), -z)
        }
    };
    let inliers: Vec<Point> = low.iter().filter(|p| (n.dot(&p.coords) + d).abs() <= params.threshold).copied().collect();
    let (n, d) = refine_plane(&inliers).unwrap_or((n, d));
    let model = GroundModel::new(n.x, n.y, n.z, d, params.threshold)?;
    let ground = (0..pts.len()).filter(|&i| model.is_inlier(&pts[i])).collect();
    Ok((model, ground))
}

/// Least-squares plane through `pts` (smallest principal axis).
fn refine_plane(pts: &[Point]) -> Option<(Vector3<f64>, f64)> {
    if pts.len() < 3 {
        return None;
    }
    let c = pts.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords) / pts.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in pts {
        let v = p.coords - c;
        cov += v * v.transpose();
    }
    let eig = cov.symmetric_eigen();
    let k = eig.eigenvalues.imin();
    let n = eig.eigenvectors.column(k).into_owned();
    let n = n.normalize();
    (n.iter().all(|v| v.is_finite())).then(|| (n, -n.dot(&c)))
}

fn centroid_in_cell(cloud: &PointCloud, members: &[u32], cell: VoxelIndex, voxel: f64) -> Point {
    let first = cloud.point(members[0] as usize);
    let mut sum = Vector3::zeros();
    for &m in members {
        sum += cloud.point(m as usize) - first;
    }
    let mut c = first + sum / members.len() as f64;
    // rounding may push the mean onto the upper cell face
    let idx = VoxelIndex::of(&c, voxel);
    if idx.ix != cell.ix {
        c.x = first.x;
    }
    if idx.iy != cell.iy {
        c.y = first.y;
    }
    if idx.iz != cell.iz {
        c.z = first.z;
    }
    c
}

/// Majority label, ties resolving to static.
pub(crate) fn majority_label(labels: impl Iterator<Item = ChangeClass>) -> ChangeClass {
    let mut counts = [0usize; 3];
    for l in labels {
        counts[l.index()] += 1;
    }
    let max = *counts.iter().max().unwrap();
    if counts[0] == max {
        return ChangeClass::Static;
    }
    if counts[1] == max && counts[2] == max {
        return ChangeClass::Static;
    }
    if counts[1] == max {
        ChangeClass::Positive
    } else {
        ChangeClass::Negative
    }
}

/// One centroid per occupied voxel together with the grid that produced it;
/// output point `i` summarizes the members of grid cell `i`.
pub fn voxel_dedup_with_grid(map: &PointCloud, voxel_size: f64) -> Result<(PointCloud, VoxelGrid)> {
    let grid = geometry::quantize(map, voxel_size)?;
    let points: Vec<Point> =
        (0..grid.len()).map(|i| centroid_in_cell(map, grid.members(i), grid.cell(i), voxel_size)).collect();
    let mut out = PointCloud::new(points)?;
    if let Some(labels) = map.labels() {
        let l = (0..grid.len())
            .map(|i| majority_label(grid.members(i).iter().map(|&m| labels[m as usize])))
            .collect();
        out = out.with_labels(l)?;
    }
    if let Some(vis) = map.visibility() {
        out = out.with_visibility((0..grid.len()).map(|i| vis[grid.members(i)[0] as usize]).collect())?;
    }
    if let Some(conf) = map.confidences() {
        let c = (0..grid.len())
            .map(|i| {
                let m = grid.members(i);
                m.iter().map(|&j| conf[j as usize]).sum::<f64>() / m.len() as f64
            })
            .map(|c: f64| c.clamp(0.0, 1.0))
            .collect();
        out = out.with_confidences(c)?;
    }
    Ok((out, grid))
}

/// Keeps one representative (the centroid) per occupied voxel.
pub fn voxel_dedup(map: &PointCloud, voxel_size: f64) -> Result<PointCloud> {
    voxel_dedup_with_grid(map, voxel_size).map(|(c, _)| c)
}

/// Per-cell strict-majority reduction of point flags.
pub fn reduce_flags(grid: &VoxelGrid, flags: &[bool]) -> Vec<bool> {
    (0..grid.len())
        .map(|i| {
            let m = grid.members(i);
            2 * m.iter().filter(|&&j| flags[j as usize]).count() > m.len()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn frame(coords: &[[f64; 3]], pose: Pose, t: f64) -> ScanFrame {
        ScanFrame::new(PointCloud::from_xyz(coords).unwrap(), pose, t)
    }

    #[test]
    fn single_scan_identity() {
        let f = frame(&[[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]], Pose::identity(), 0.0);
        let s = Session::new(vec![f.clone()]).unwrap();
        let m = build_static_map(&s).unwrap();
        assert_eq!(m.points(), f.cloud.points());
        assert!(m.visibility().unwrap().iter().all(|&v| v == 0));
    }

    #[test]
    fn union_keeps_duplicates() {
        let c = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let s = Session::new(vec![frame(&c, Pose::identity(), 0.0), frame(&c, Pose::identity(), 1.0)]).unwrap();
        assert_eq!(build_static_map(&s).unwrap().len(), 6);
    }

    #[test]
    fn masks_remove_points() {
        let mut r = rng::seeded(3);
        let mut frames = Vec::new();
        let mut expected = 0;
        let mut oracle = Vec::new();
        for t in 0..3 {
            let n = 20 + 5 * t;
            let coords: Vec<[f64; 3]> = (0..n).map(|_| [r.random(), r.random(), r.random()]).collect();
            let mask: Vec<bool> = (0..n).map(|_| r.random_bool(0.3)).collect();
            let pose = Pose::from_yaw(t as f64, Vector3::new(t as f64, 0.0, 0.0));
            expected += mask.iter().filter(|&&m| !m).count();
            for (c, &m) in coords.iter().zip(&mask) {
                if !m {
                    oracle.push(pose.apply(&Point::new(c[0], c[1], c[2])));
                }
            }
            let mut f = frame(&coords, pose, t as f64);
            f.dynamic_mask = Some(mask);
            frames.push(f);
        }
        let map = build_static_map(&Session::new(frames).unwrap()).unwrap();
        assert_eq!(map.len(), expected);
        assert_eq!(map.points(), oracle.as_slice());
    }

    #[test]
    fn session_validation() {
        let mut f = frame(&[[0.0; 3]], Pose::identity(), 0.0);
        f.dynamic_mask = Some(vec![true, false]);
        assert!(matches!(Session::new(vec![f]), Err(Error::InvalidInput(_))));
        let a = frame(&[[0.0; 3]], Pose::identity(), 1.0);
        assert!(Session::new(vec![a.clone(), a]).is_err());
        assert!(build_static_map(&Session::default()).is_err());
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut f = frame(&[[0.5, 1.0, 2.0], [3.0, 4.0, 5.0]], Pose::from_yaw(0.3, Vector3::new(1.0, 2.0, 0.0)), 0.5);
        f.dynamic_mask = Some(vec![false, true]);
        f.instances = Some(vec![0, 7]);
        let g = frame(&[[1.0, 1.0, 1.0]], Pose::identity(), 1.5);
        let s = Session::new(vec![f, g]).unwrap();
        let path = dir.path().join("prior.txt");
        s.save_manifest(&path).unwrap();
        let back = Session::load_manifest(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.frame(0).dynamic_mask, s.frame(0).dynamic_mask);
        assert_eq!(back.frame(0).instances, s.frame(0).instances);
        assert_eq!(back.frame(0).pose, s.frame(0).pose);
        assert_eq!(back.frame(1).dynamic_mask, None);

        fs::write(&path, "a.ply 1 0 0\n").unwrap();
        assert!(matches!(Session::load_manifest(&path), Err(Error::Parse { line: 1, .. })));
    }

    fn floor_and_boxes() -> (PointCloud, usize) {
        let mut coords = Vec::new();
        for i in 0..40 {
            for j in 0..40 {
                coords.push([i as f64 * 0.25 - 5.0, j as f64 * 0.25 - 5.0, 0.0]);
            }
        }
        let n_floor = coords.len();
        for i in 0..10 {
            for j in 0..10 {
                coords.push([1.0 + i as f64 * 0.1, 1.0 + j as f64 * 0.1, 0.3 + 0.05 * (i + j) as f64]);
                coords.push([-3.0 + i as f64 * 0.1, 2.0, 0.35 + 0.1 * j as f64]);
            }
        }
        (PointCloud::from_xyz(&coords).unwrap(), n_floor)
    }

    #[test]
    fn floor_points_are_exactly_the_inliers() {
        let (cloud, n_floor) = floor_and_boxes();
        let (model, ground) = segment_ground(&cloud).unwrap();
        assert_eq!(ground, (0..n_floor).collect::<Vec<_>>());
        assert!((model.normal().norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn coplanar_points_are_all_ground() {
        let coords: Vec<[f64; 3]> =
            (0..100).map(|i| [(i % 10) as f64, (i / 10) as f64, 0.1 * (i % 10) as f64 + 2.0]).collect();
        let cloud = PointCloud::from_xyz(&coords).unwrap();
        let (_, ground) = segment_ground(&cloud).unwrap();
        assert_eq!(ground.len(), 100);
    }

    #[test]
    fn too_few_points() {
        let cloud = PointCloud::from_xyz(&[[0.0; 3]; 10]).unwrap();
        assert!(matches!(segment_ground(&cloud), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn recovers_tilted_noisy_plane() {
        let mut r = rng::seeded(5);
        let n = Vector3::new(0.05, -0.03, 1.0).normalize();
        let d = -0.7;
        let coords: Vec<[f64; 3]> = (0..2000)
            .map(|_| {
                let (x, y): (f64, f64) = (r.random_range(-10.0..10.0), r.random_range(-10.0..10.0));
                let z = -(n.x * x + n.y * y + d) / n.z + r.random_range(-0.01..0.01);
                [x, y, z]
            })
            .collect();
        let cloud = PointCloud::from_xyz(&coords).unwrap();
        let (model, _) = segment_ground(&cloud).unwrap();
        let angle = model.normal().dot(&n).clamp(-1.0, 1.0).acos().to_degrees();
        assert!(angle < 2.0, "normal off by {angle} deg");
        assert!((model.coefficients()[3] - d).abs() < 0.02);
    }

    #[test]
    fn ground_model_moves_with_world() {
        let g = GroundModel::horizontal(0.5, 0.1);
        let pose = Pose::from_rotation_vector(Vector3::new(0.1, 0.0, 0.4), Vector3::new(1.0, -2.0, 3.0));
        let p = Point::new(2.0, 1.0, 1.7);
        let moved = g.transformed(&pose);
        assert!((moved.height(&pose.apply(&p)) - g.height(&p)).abs() < 1e-12);
    }

    #[test]
    fn dedup_examples() {
        let c = PointCloud::from_xyz(&[[0.01, 0.01, 0.01], [0.03, 0.05, 0.07]]).unwrap();
        let d = voxel_dedup(&c, 0.1).unwrap();
        assert_eq!(d.len(), 1);
        assert!((d.point(0) - Point::new(0.02, 0.03, 0.04)).norm() < 1e-12);

        let spread = PointCloud::from_xyz(&[[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [0.0, 0.25, 0.5]]).unwrap();
        assert_eq!(voxel_dedup(&spread, 0.1).unwrap().len(), 3);
    }

    #[test]
    fn dedup_label_majority_and_ties() {
        use ChangeClass::*;
        assert_eq!(majority_label([Negative, Negative, Static].into_iter()), Negative);
        assert_eq!(majority_label([Negative, Static].into_iter()), Static);
        assert_eq!(majority_label([Negative, Positive].into_iter()), Static);
        assert_eq!(majority_label([Positive].into_iter()), Positive);
    }

    #[test]
    fn dedup_is_one_point_per_voxel_and_idempotent() {
        let mut r = rng::seeded(9);
        let coords: Vec<[f64; 3]> =
            (0..5000).map(|_| [r.random_range(-2.0..2.0), r.random_range(-2.0..2.0), r.random_range(0.0..1.0)]).collect();
        let cloud = PointCloud::from_xyz(&coords).unwrap();
        let d = voxel_dedup(&cloud, 0.2).unwrap();
        let grid = geometry::quantize(&d, 0.2).unwrap();
        assert_eq!(grid.len(), d.len());
        assert_eq!(grid.len(), geometry::quantize(&cloud, 0.2).unwrap().len());
        assert_eq!(voxel_dedup(&d, 0.2).unwrap(), d);
    }
}
