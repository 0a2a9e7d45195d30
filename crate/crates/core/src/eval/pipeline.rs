//! End-to-end two-session evaluation: build the prior map, compare every
//! current scan against it, fuse map-side evidence and score the result.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use super::{map_scores_masked, ConfusionCounts, IouAveraging, MapScores};
use crate::confidence::ConfidenceParams;
use crate::detect::{detect_occupancy, detect_visibility, infer_prepared, visibility_votes, DualHeadModel, FeatureParams, MapVote, PreparedMap};
use crate::error::{invalid_input, invalid_param, Error, Result};
use crate::geometry::{check_voxel_size, load_ply, perturb_pose_stream, save_ply, transform, ChangeClass, KdTree, PerturbationSpec, PlyFormat, Point, PointCloud};
use crate::mapping::{accumulate_session, reduce_flags, segment_ground, voxel_dedup_with_grid, Session};
use crate::mapupdate::{GateThresholds, LogOddsMap};

/// Change detector driving the pipeline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Method {
    #[default]
    DualHead,
    /// Voxel co-occupancy baseline with per-point majority voting.
    Occupancy,
    /// Range-image free-space baseline with per-point majority voting.
    Visibility,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dualhead" => Ok(Method::DualHead),
            "occupancy" => Ok(Method::Occupancy),
            "visibility" => Ok(Method::Visibility),
            _ => Err(invalid_param(format!("unknown method '{s}'"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::DualHead => "dualhead",
            Method::Occupancy => "occupancy",
            Method::Visibility => "visibility",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineSettings {
    pub method: Method,
    /// Prior-map voxel size; also the feature voxel of the dual-head model.
    pub map_voxel: f64,
    pub gates: GateThresholds,
    /// When false every prediction enters the map and every predicted
    /// positive counts, whatever its confidence.
    pub gating: bool,
    /// Replace predicted confidences with the distance-based target.
    pub oracle_confidence: bool,
    pub confidence: ConfidenceParams,
    /// Drop high-dynamic points from map and scans before detection.
    pub remove_hd: bool,
    /// Registration noise applied to every scan pose.
    pub perturbation: PerturbationSpec,
    /// Map points whose negative-change posterior exceeds this are removed.
    pub decision_threshold: f64,
    pub averaging: IouAveraging,
    /// Pixel size of the visibility baseline, rad.
    pub visibility_resolution: f64,
    /// Range tolerance of the visibility baseline, m.
    pub visibility_margin: f64,
    /// Use only the first `max_frames` current scans; 0 means all.
    pub max_frames: usize,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            method: Method::DualHead,
            map_voxel: 0.1,
            gates: GateThresholds::default(),
            gating: true,
            oracle_confidence: false,
            confidence: ConfidenceParams::default(),
            remove_hd: true,
            perturbation: PerturbationSpec::default(),
            decision_threshold: 0.5,
            averaging: IouAveraging::Macro,
            visibility_resolution: 0.5f64.to_radians(),
            visibility_margin: 0.2,
            max_frames: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineReport {
    /// Scan-wise positive-change IoU under the chosen averaging.
    pub iou: f64,
    /// Pooled counts over all scans.
    pub counts: ConfusionCounts,
    pub scores: MapScores,
    pub frames: usize,
    /// Mean per-scan wall-clock of detection and map update, ms.
    pub ms_per_scan: f64,
    pub map_points: usize,
    pub removed_points: usize,
}

/// Deduplicated prior map with per-point truth and high-dynamic flags.
/// High-dynamic points never persist, so their truth is a negative change.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorMap {
    pub cloud: PointCloud,
    pub truth: Vec<ChangeClass>,
    pub dynamic: Vec<bool>,
}

impl PriorMap {
    pub fn from_session(session: &Session, voxel: f64) -> Result<Self> {
        let (raw, dyn_flags) = accumulate_session(session, false)?;
        let (cloud, grid) = voxel_dedup_with_grid(&raw, voxel)?;
        let mut cloud = storable(&cloud, voxel);
        let dynamic = reduce_flags(&grid, &dyn_flags);
        let truth = cloud
            .take_labels()
            .unwrap_or_else(|| vec![ChangeClass::Static; cloud.len()])
            .into_iter()
            .zip(&dynamic)
            .map(|(l, &d)| match l {
                _ if d => ChangeClass::Negative,
                ChangeClass::Positive => ChangeClass::Static,
                l => l,
            })
            .collect();
        cloud.clear_attributes();
        Ok(Self { cloud, truth, dynamic })
    }

    /// Unlabelled map: everything static, nothing high-dynamic.
    pub fn unlabelled(mut cloud: PointCloud) -> Self {
        cloud.clear_attributes();
        let n = cloud.len();
        Self { cloud, truth: vec![ChangeClass::Static; n], dynamic: vec![false; n] }
    }

    /// Writes the map as PLY with truth labels, and the high-dynamic flags
    /// as one 0/1 byte per point to `<path>.hd`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let cloud = self.cloud.clone().with_labels(self.truth.clone())?;
        save_ply(path, &cloud, PlyFormat::BinaryLittleEndian)?;
        std::fs::write(hd_path(path), self.dynamic.iter().map(|&d| d as u8).collect::<Vec<_>>())?;
        Ok(())
    }

    /// Reads a map written by [`PriorMap::save`]; a missing flag file means
    /// no high-dynamic points and missing labels mean all static.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cloud = load_ply(path)?;
        let truth = cloud.take_labels().unwrap_or_else(|| vec![ChangeClass::Static; cloud.len()]);
        if truth.contains(&ChangeClass::Positive) {
            return Err(Error::Format("map labels cannot contain positive changes".into()));
        }
        cloud.clear_attributes();
        let hd = hd_path(path);
        let dynamic = if hd.exists() {
            let bytes = std::fs::read(&hd)?;
            if bytes.len() != cloud.len() || bytes.iter().any(|&b| b > 1) {
                return Err(Error::Format(format!("{} does not hold one 0/1 flag per point", hd.display())));
            }
            bytes.into_iter().map(|b| b == 1).collect()
        } else {
            vec![false; cloud.len()]
        };
        Ok(Self { cloud, truth, dynamic })
    }
}

/// Rounds coordinates to the single precision of the map file, nudging any
/// that would cross into a neighbouring voxel back inside, so a map behaves
/// the same in memory and after a save/load roundtrip.
fn storable(cloud: &PointCloud, voxel: f64) -> PointCloud {
    let fix = |v: f64| -> f64 {
        let cell = (v / voxel).floor();
        let mut r = v as f32;
        while ((r as f64) / voxel).floor() < cell {
            r = r.next_up();
        }
        while ((r as f64) / voxel).floor() > cell {
            r = r.next_down();
        }
        r as f64
    };
    cloud.map_points(|p| Point::new(fix(p.x), fix(p.y), fix(p.z)))
}

fn hd_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".hd");
    PathBuf::from(s)
}

/// Per-point evidence for the baselines. A map point is removed when some
/// scan voted it changed and no scan ever confirmed it; a single sparse scan
/// leaves most of the map unconfirmed, so counting votes would erase it.
struct Votes {
    change: Vec<u32>,
    keep: Vec<u32>,
}

impl Votes {
    fn removal(&self) -> Vec<bool> {
        self.change.iter().zip(&self.keep).map(|(&c, &k)| c > 0 && k == 0).collect()
    }
}

fn scan_region(scan: &PointCloud, margin: f64) -> Option<(Point, Point)> {
    scan.bounds().map(|(lo, hi)| (lo.map(|v| v - margin), hi.map(|v| v + margin)))
}

/// Everything a pipeline run produces.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutput {
    pub report: PipelineReport,
    /// Final scan labels per processed frame (after gating), in frame order.
    pub scan_labels: Vec<Vec<ChangeClass>>,
    /// Indices of the points behind `scan_labels` within each frame.
    pub scan_points: Vec<Vec<usize>>,
    /// Whether each prior-map point survives.
    pub kept: Vec<bool>,
}

/// Builds the prior map from `prior` at the configured voxel size, then runs
/// [`run_on_map`] and returns its report.
pub fn run_pipeline(model: Option<&DualHeadModel>, prior: &Session, current: &Session, s: &PipelineSettings) -> Result<PipelineReport> {
    check_voxel_size(s.map_voxel)?;
    let map = PriorMap::from_session(prior, s.map_voxel)?;
    run_on_map(model, &map, current, s).map(|o| o.report)
}

/// Runs detection for every current scan against the prior map and scores
/// the scans and the maintained map. `model` is required for the dual-head
/// method.
pub fn run_on_map(model: Option<&DualHeadModel>, full: &PriorMap, current: &Session, s: &PipelineSettings) -> Result<PipelineOutput> {
    check_voxel_size(s.map_voxel)?;
    s.gates.validate()?;
    s.perturbation.validate()?;
    s.confidence.validate()?;
    if !(0.0..1.0).contains(&s.decision_threshold) {
        return Err(invalid_param("decision threshold must lie in [0, 1)"));
    }
    if current.is_empty() {
        return Err(Error::EmptyInput("current session has no scans".into()));
    }
    let model = match (s.method, model) {
        (Method::DualHead, None) => return Err(Error::InvalidModel("the dual-head method needs a trained model".into())),
        (_, m) => m,
    };
    if full.truth.len() != full.cloud.len() || full.dynamic.len() != full.cloud.len() {
        return Err(invalid_input("prior map attributes do not match its points"));
    }
    // working map: indices into the full map of the points detection sees
    let work: Vec<usize> = (0..full.cloud.len()).filter(|&i| !(s.remove_hd && full.dynamic[i])).collect();
    let map = full.cloud.select(&work);
    if map.is_empty() {
        return Err(Error::EmptyInput("prior map is empty".into()));
    }
    let n = map.len();
    let prepared = match model {
        Some(m) if s.method == Method::DualHead => {
            let (ground, _) = segment_ground(&map)?;
            let params = FeatureParams { voxel_size: s.map_voxel, tau_ocl: m.config().features.tau_ocl };
            Some(PreparedMap::new(&map, ground, params)?)
        }
        _ => None,
    };
    let gates = if s.gating { s.gates } else { GateThresholds::open() };
    let mut state = LogOddsMap::new(n);
    let mut votes = Votes { change: vec![0; n], keep: vec![0; n] };
    let mut pooled = ConfusionCounts::default();
    let mut ious = Vec::new();
    let mut scan_labels = Vec::new();
    let mut scan_points = Vec::new();
    let mut elapsed = 0.0;

    let frames = if s.max_frames == 0 { current.len() } else { s.max_frames.min(current.len()) };
    for (k, frame) in current.frames()[..frames].iter().enumerate() {
        let pose = perturb_pose_stream(&frame.pose, &s.perturbation, k as u64)?;
        let mut scan = transform(&frame.cloud, &pose);
        let truth_all = scan.take_labels().unwrap_or_else(|| vec![ChangeClass::Static; scan.len()]);
        scan.clear_attributes();
        let dynamic: Vec<bool> = (0..scan.len()).map(|i| frame.is_dynamic(i)).collect();
        let (scan, truth, dynamic, idx) = if s.remove_hd {
            let idx: Vec<usize> = (0..scan.len()).filter(|&i| !dynamic[i]).collect();
            let truth = idx.iter().map(|&i| truth_all[i]).collect();
            let n_keep = idx.len();
            (scan.select(&idx), truth, vec![false; n_keep], idx)
        } else {
            let idx = (0..scan.len()).collect();
            (scan, truth_all, dynamic, idx)
        };
        if scan.is_empty() {
            continue;
        }

        let t0 = Instant::now();
        let pred: Vec<ChangeClass> = match s.method {
            Method::DualHead => {
                let det = infer_prepared(model.expect("checked above"), prepared.as_ref().expect("built above"), &scan)?;
                let conf_override: Option<Vec<f64>> = s.oracle_confidence.then(|| {
                    let tree = KdTree::from_cloud(&scan);
                    det.map_indices
                        .par_iter()
                        .map(|&i| tree.nearest(map.point(i as usize)).map_or(0.0, |(_, d)| s.confidence.eval(d)))
                        .collect()
                });
                state.update_from_detection(&det, conf_override.as_deref(), &gates)?;
                let scan_conf: Vec<f64> = if s.oracle_confidence {
                    let tree = KdTree::from_cloud(&map);
                    scan.points().par_iter().map(|p| tree.nearest(p).map_or(0.0, |(_, d)| s.confidence.eval(d))).collect()
                } else {
                    det.scan.iter().map(|p| p.conf as f64).collect()
                };
                det.scan
                    .iter()
                    .zip(&scan_conf)
                    .map(|(p, &c)| {
                        if p.class == ChangeClass::Positive && c < gates.tau_scan {
                            ChangeClass::Positive
                        } else if p.class == ChangeClass::Positive {
                            ChangeClass::Static
                        } else {
                            p.class
                        }
                    })
                    .collect()
            }
            Method::Occupancy | Method::Visibility => {
                let (lo, hi) = scan_region(&scan, s.map_voxel).expect("non-empty scan");
                let inside = |p: &Point| (0..3).all(|a| p[a] >= lo[a] && p[a] <= hi[a]);
                if s.method == Method::Occupancy {
                    let (m, sc) = detect_occupancy(&map, &scan, s.map_voxel)?;
                    for (i, l) in m.iter().enumerate() {
                        if inside(map.point(i)) {
                            if *l == ChangeClass::Negative {
                                votes.change[i] += 1;
                            } else {
                                votes.keep[i] += 1;
                            }
                        }
                    }
                    sc
                } else {
                    let (_, sc) = detect_visibility(&map, &scan, &pose, s.visibility_resolution, s.visibility_margin)?;
                    let v = visibility_votes(&map, &scan, &pose, s.visibility_resolution, s.visibility_margin)?;
                    for (i, v) in v.iter().enumerate() {
                        match v {
                            MapVote::SeenThrough => votes.change[i] += 1,
                            MapVote::Confirmed => votes.keep[i] += 1,
                            MapVote::Unobserved => {}
                        }
                    }
                    sc
                }
            }
        };
        elapsed += t0.elapsed().as_secs_f64();

        let include: Vec<bool> = dynamic.iter().map(|d| !d).collect();
        let c = ConfusionCounts::from_labels(&pred, &truth, Some(&include))?;
        pooled.add(&c);
        ious.push(c.iou());
        scan_labels.push(pred);
        scan_points.push(idx);
    }

    let removed = match s.method {
        Method::DualHead => state.removal_mask(s.decision_threshold),
        _ => votes.removal(),
    };
    // points dropped before detection count as removed
    let mut kept = vec![false; full.cloud.len()];
    for (&i, r) in work.iter().zip(&removed) {
        kept[i] = !r;
    }
    let scores = map_scores_masked(&full.truth, &kept, None)?;
    let iou = match s.averaging {
        IouAveraging::Macro if !ious.is_empty() => ious.iter().sum::<f64>() / ious.len() as f64,
        _ => pooled.iou(),
    };
    let report = PipelineReport {
        iou,
        counts: pooled,
        scores,
        frames: ious.len(),
        ms_per_scan: if ious.is_empty() { 0.0 } else { 1e3 * elapsed / ious.len() as f64 },
        map_points: full.cloud.len(),
        removed_points: kept.iter().filter(|&&k| !k).count(),
    };
    Ok(PipelineOutput { report, scan_labels, scan_points, kept })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::ModelConfig;
    use crate::synthscene::{generate_sessions, Cuboid, Mover, Presence, SensorSpec, World, WorldObject};
    use nalgebra::Vector3;

    fn scene(presence: Presence) -> (Session, Session) {
        scene_with(presence, vec![])
    }

    fn scene_with(presence: Presence, movers: Vec<Mover>) -> (Session, Session) {
        let w = World {
            extent: [16.0, 16.0],
            walls: vec![
                Cuboid::new([0.0, 0.0, 0.0], [16.0, 0.2, 2.5]).unwrap(),
                Cuboid::new([0.0, 15.8, 0.0], [16.0, 16.0, 2.5]).unwrap(),
                Cuboid::new([15.8, 0.2, 0.0], [16.0, 15.8, 2.5]).unwrap(),
            ],
            objects: vec![WorldObject { id: 1, shape: Cuboid::new([9.0, 7.0, 0.0], [10.0, 8.0, 1.5]).unwrap(), presence }],
            movers,
            seed: 0,
        };
        let traj = (0..3).map(|k| crate::geometry::Pose::from_translation(Vector3::new(5.0 + k as f64, 8.0, 1.0))).collect();
        let sensor = SensorSpec { h_res: 1f64.to_radians(), noise_sigma: 0.0, ..Default::default() }.with_trajectory(traj);
        let out = generate_sessions(&w, &sensor, 3).unwrap();
        (out.prior, out.current)
    }

    #[test]
    fn occupancy_on_unchanged_world_is_perfect_for_scans() {
        let (p, c) = scene(Presence::Both);
        let s = PipelineSettings { method: Method::Occupancy, ..Default::default() };
        let r = run_pipeline(None, &p, &c, &s).unwrap();
        assert_eq!(r.frames, 3);
        assert_eq!(r.counts, ConfusionCounts::default(), "noise-free rescans agree");
        assert_eq!((r.iou, r.scores.f1), (1.0, 1.0));
    }

    #[test]
    fn visibility_removes_a_removed_box() {
        let (p, c) = scene(Presence::PriorOnly);
        let s = PipelineSettings { method: Method::Visibility, visibility_resolution: 2f64.to_radians(), ..Default::default() };
        let r = run_pipeline(None, &p, &c, &s).unwrap();
        assert!(r.scores.rr > 0.8, "{r:?}");
        assert!(r.scores.pr > 0.9, "{r:?}");
        let (p, c) = scene(Presence::CurrentOnly);
        let r = run_pipeline(None, &p, &c, &s).unwrap();
        assert!(r.iou > 0.8, "{r:?}");
    }

    #[test]
    fn dualhead_requires_a_model_and_is_deterministic() {
        let (p, c) = scene(Presence::PriorOnly);
        let s = PipelineSettings::default();
        assert!(matches!(run_pipeline(None, &p, &c, &s), Err(Error::InvalidModel(_))));
        let m = DualHeadModel::new(ModelConfig::default(), 1).unwrap();
        let a = run_pipeline(Some(&m), &p, &c, &s).unwrap();
        let b = run_pipeline(Some(&m), &p, &c, &s).unwrap();
        assert_eq!((a.iou, a.scores, a.removed_points), (b.iou, b.scores, b.removed_points));
        let gated_shut = PipelineSettings { gates: GateThresholds { tau_scan: 0.0, tau_map: 1.0 }, ..s.clone() };
        let r = run_pipeline(Some(&m), &p, &c, &gated_shut).unwrap();
        assert_eq!(r.removed_points, 0, "a closed map gate keeps every point");
        assert_eq!(r.counts.tc + r.counts.fc, 0, "a closed scan gate reports no changes");
    }

    #[test]
    fn high_dynamic_map_points_are_negative_changes() {
        let mover = Mover { id: 9, session: 0, size: [0.5, 0.5, 1.7], start: [12.0, 4.0], end: [12.0, 12.0] };
        let (p, c) = scene_with(Presence::Both, vec![mover]);
        // a shut gate removes nothing by itself
        let m = DualHeadModel::new(ModelConfig::default(), 1).unwrap();
        let on = PipelineSettings { gates: GateThresholds { tau_scan: 0.0, tau_map: 1.0 }, ..Default::default() };
        let r = run_pipeline(Some(&m), &p, &c, &on).unwrap();
        assert_eq!(r.scores.rr, 1.0, "removal drops every high-dynamic point up front");
        assert_eq!(r.scores.pr, 1.0);
        let off = run_pipeline(Some(&m), &p, &c, &PipelineSettings { remove_hd: false, ..on }).unwrap();
        assert_eq!(off.map_points, r.map_points);
        assert_eq!((off.removed_points, off.scores.rr), (0, 0.0));
    }

    #[test]
    fn prior_map_file_roundtrip() {
        let mover = Mover { id: 9, session: 0, size: [0.5, 0.5, 1.7], start: [12.0, 4.0], end: [12.0, 12.0] };
        let (p, _) = scene_with(Presence::PriorOnly, vec![mover]);
        let m = PriorMap::from_session(&p, 0.1).unwrap();
        assert!(m.dynamic.iter().any(|&d| d));
        assert!(m.truth.iter().zip(&m.dynamic).all(|(&t, &d)| !d || t == ChangeClass::Negative));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.ply");
        m.save(&path).unwrap();
        let back = PriorMap::load(&path).unwrap();
        assert_eq!(back, m, "maps are stored without loss");
        std::fs::remove_file(dir.path().join("map.ply.hd")).unwrap();
        let bare = PriorMap::load(&path).unwrap();
        assert!(bare.dynamic.iter().all(|&d| !d));
        let u = PriorMap::unlabelled(m.cloud.clone());
        assert!(u.truth.iter().all(|&t| t == ChangeClass::Static));
    }
}
