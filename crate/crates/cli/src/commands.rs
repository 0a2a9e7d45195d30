use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::Context as _;
use chamelion_core::augment::{AugmentParams, AugmentedPair, Augmenter};
use chamelion_core::config::PipelineConfig;
use chamelion_core::detect::{train as fit, DualHeadModel};
use chamelion_core::eval::{object_database, run_on_map, sweep as run_sweep, Method, PipelineOutput, PriorMap, Scenario, SweepAxis, SweepConfig, CSV_HEADER};
use chamelion_core::geometry::{perturb_pose_stream, save_ply, ChangeClass, PlyFormat};
use chamelion_core::mapping::{ScanFrame, Session};
use chamelion_core::mapupdate::insert_changes;
use chamelion_core::rng;
use chamelion_core::synthscene::{generate_sessions, World};

use crate::{input, AxisArg, Failure, MethodArg};

type Outcome = Result<(), Failure>;

fn method(cfg: &PipelineConfig, m: Option<MethodArg>) -> Method {
    match m {
        Some(MethodArg::Dualhead) => Method::DualHead,
        Some(MethodArg::Occupancy) => Method::Occupancy,
        Some(MethodArg::Visibility) => Method::Visibility,
        None => cfg.method,
    }
}

fn load_session(p: &Path) -> Result<Session, Failure> {
    Ok(Session::load_manifest(input(p)?).with_context(|| format!("reading session {}", p.display()))?)
}

/// The model is required exactly when the method is dual-head.
fn load_model(m: Method, path: Option<&Path>) -> Result<Option<DualHeadModel>, Failure> {
    match (m, path) {
        (Method::DualHead, None) => Err(Failure::Missing("the dual-head method needs --model".into())),
        (Method::DualHead, Some(p)) => Ok(Some(DualHeadModel::load(input(p)?).with_context(|| format!("reading model {}", p.display()))?)),
        _ => Ok(None),
    }
}

fn create_parent(p: &Path) -> anyhow::Result<()> {
    if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d)?;
    }
    Ok(())
}

fn report_row(setting: &str, cfg: &PipelineConfig, o: &PipelineOutput) -> String {
    let r = &o.report;
    format!(
        "{CSV_HEADER}\n{setting},{},{},{},{},{:.6},{:.6},{:.6},{:.6},0.000\n",
        cfg.voxel_size, cfg.noise_level, cfg.tau_scan, cfg.tau_map, r.iou, r.scores.pr, r.scores.rr, r.scores.f1
    )
}

fn summary(o: &PipelineOutput) {
    let r = &o.report;
    println!(
        "frames={} iou={:.4} pr={:.4} rr={:.4} f1={:.4} removed={}/{}",
        r.frames, r.iou, r.scores.pr, r.scores.rr, r.scores.f1, r.removed_points, r.map_points
    );
}

pub fn synth(cfg: &PipelineConfig, world: Option<&Path>, world_seed: u64, no_change: bool, movers: usize, noise: f64, out: &Path) -> Outcome {
    let mut sc = Scenario { noise_sigma: noise, ..Scenario::default() };
    sc.world.movers_per_session = movers;
    if no_change {
        sc.world.removed_boxes = 0;
        sc.world.removed_panels = 0;
        sc.world.added = 0;
    }
    let (w, traj) = match world {
        Some(p) => World::load(input(p)?).map_err(|e| anyhow::anyhow!("{}: {e}", p.display()))?,
        None => sc.world(world_seed)?,
    };
    let sessions = generate_sessions(&w, &sc.sensor(traj.clone()), cfg.seed)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    w.save(&traj, out.join("world.txt"))?;
    sessions.prior.save_manifest(out.join("prior").join("scans.txt"))?;
    sessions.current.save_manifest(out.join("current").join("scans.txt"))?;
    println!("prior={} current={} frames", sessions.prior.len(), sessions.current.len());
    Ok(())
}

pub fn build_map(cfg: &PipelineConfig, session: &Path, out: &Path) -> Outcome {
    let s = load_session(session)?;
    let map = PriorMap::from_session(&s, cfg.voxel_size)?;
    create_parent(out)?;
    map.save(out)?;
    println!("map points={} high-dynamic={}", map.cloud.len(), map.dynamic.iter().filter(|&&d| d).count());
    Ok(())
}

pub fn augment(cfg: &PipelineConfig, session: &Path, out: &Path) -> Outcome {
    let s = load_session(session)?;
    let db = object_database(&s, cfg.min_object_points)?;
    let params = AugmentParams { map_voxel: Some(cfg.voxel_size), ..Default::default() };
    let aug = Augmenter::new(&s, &db, params)?;
    fs::create_dir_all(out)?;
    for k in 0..cfg.pairs {
        let pair = aug.generate(cfg.pc_objects, cfg.nc_objects, rng::derive_seed(cfg.seed, 1000 + k as u64))?;
        pair.save(out.join(format!("pair_{k:04}")))?;
    }
    println!("pairs={} objects={}", cfg.pairs, db.len());
    Ok(())
}

pub fn train(cfg: &PipelineConfig, pairs_dir: &Path, out: &Path) -> Outcome {
    let mut dirs: Vec<_> = fs::read_dir(input(pairs_dir)?)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("pair.txt").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Failure::Missing(format!("no pairs under {}", pairs_dir.display())));
    }
    let pairs = dirs.iter().map(AugmentedPair::load).collect::<chamelion_core::Result<Vec<_>>>()?;
    let model = DualHeadModel::new(cfg.model_config(), cfg.seed)?;
    let outcome = fit(model, &pairs, &cfg.train_config())?;
    create_parent(out)?;
    outcome.model.save(out)?;
    println!("trained on {} pairs, best epoch {}", pairs.len(), outcome.best_epoch);
    Ok(())
}

fn run_map(cfg: &PipelineConfig, map: &Path, current: &Path, m: Option<MethodArg>, model: Option<&Path>) -> Result<(PipelineOutput, PriorMap, Session), Failure> {
    let m = method(cfg, m);
    let model = load_model(m, model)?;
    let prior = PriorMap::load(input(map)?)?;
    let cur = load_session(current)?;
    let settings = chamelion_core::eval::PipelineSettings { method: m, ..cfg.pipeline_settings() };
    let out = run_on_map(model.as_ref(), &prior, &cur, &settings)?;
    Ok((out, prior, cur))
}

pub fn detect(cfg: &PipelineConfig, map: &Path, current: &Path, m: Option<MethodArg>, model: Option<&Path>, out: &Path) -> Outcome {
    let (o, _, cur) = run_map(cfg, map, current, m, model)?;
    fs::create_dir_all(out)?;
    for (k, (labels, idx)) in o.scan_labels.iter().zip(&o.scan_points).enumerate() {
        let cloud = cur.frame(k).global_cloud().select(idx).with_labels(labels.clone())?;
        save_ply(out.join(format!("labels_{k:04}.ply")), &cloud, PlyFormat::BinaryLittleEndian)?;
    }
    let removed: Vec<u8> = o.kept.iter().map(|&k| !k as u8).collect();
    fs::write(out.join("map_removed.mask"), removed)?;
    fs::write(out.join("detect.csv"), report_row("detect", cfg, &o))?;
    summary(&o);
    Ok(())
}

pub fn update(cfg: &PipelineConfig, map: &Path, current: &Path, m: Option<MethodArg>, model: Option<&Path>, out: &Path) -> Outcome {
    let (o, prior, cur) = run_map(cfg, map, current, m, model)?;
    let mut updated = prior.cloud.filter(&o.kept);
    for (k, (labels, idx)) in o.scan_labels.iter().zip(&o.scan_points).enumerate() {
        let scan = cur.frame(k).global_cloud().select(idx);
        let changes: Vec<usize> = labels.iter().enumerate().filter(|(_, &l)| l == ChangeClass::Positive).map(|(i, _)| i).collect();
        updated = insert_changes(&updated, &scan, &changes);
    }
    updated.clear_attributes();
    create_parent(out)?;
    save_ply(out, &updated, PlyFormat::BinaryLittleEndian)?;
    summary(&o);
    println!("maintained map points={}", updated.len());
    Ok(())
}

pub fn eval(cfg: &PipelineConfig, prior: &Path, current: &Path, m: Option<MethodArg>, model: Option<&Path>, out: &Path) -> Outcome {
    let m = method(cfg, m);
    let model = load_model(m, model)?;
    let (p, c) = (load_session(prior)?, load_session(current)?);
    let settings = chamelion_core::eval::PipelineSettings { method: m, ..cfg.pipeline_settings() };
    let map = PriorMap::from_session(&p, settings.map_voxel)?;
    let o = run_on_map(model.as_ref(), &map, &c, &settings)?;
    create_parent(out)?;
    fs::write(out, report_row(&format!("eval-{m}"), cfg, &o))?;
    summary(&o);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn sweep(
    cfg: &PipelineConfig,
    prior: &Path,
    current: &Path,
    m: Option<MethodArg>,
    model: Option<&Path>,
    axis: AxisArg,
    values: &[f64],
    timing: bool,
    out: &Path,
) -> Outcome {
    let m = method(cfg, m);
    let model = load_model(m, model)?;
    let (p, c) = (load_session(prior)?, load_session(current)?);
    let v = values.to_vec();
    let axis = match axis {
        AxisArg::Voxel => SweepAxis::Voxel(v),
        AxisArg::Noise => SweepAxis::NoiseLevel(v),
        AxisArg::TauScan => SweepAxis::TauScan(v),
        AxisArg::TauMap => SweepAxis::TauMap(v),
    };
    let base = chamelion_core::eval::PipelineSettings { method: m, ..cfg.pipeline_settings() };
    let (rows, csv) = run_sweep(model.as_ref(), &p, &c, &SweepConfig { base, axis, report_timing: timing })?;
    create_parent(out)?;
    fs::write(out, &csv)?;
    let failed = rows.iter().filter(|r| r.result.is_err()).count();
    let mut msg = format!("{} grid points", rows.len());
    if failed > 0 {
        let _ = write!(msg, ", {failed} failed");
    }
    println!("{msg}");
    Ok(())
}

pub fn perturb(cfg: &PipelineConfig, session: &Path, level: Option<f64>, out: &Path) -> Outcome {
    let s = load_session(session)?;
    let mut spec = cfg.perturbation();
    if let Some(l) = level {
        spec.level = l;
    }
    let frames = s
        .frames()
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let mut g = ScanFrame::new(f.cloud.clone(), perturb_pose_stream(&f.pose, &spec, k as u64)?, f.timestamp);
            g.dynamic_mask = f.dynamic_mask.clone();
            g.instances = f.instances.clone();
            Ok(g)
        })
        .collect::<chamelion_core::Result<Vec<_>>>()?;
    Session::new(frames)?.save_manifest(out)?;
    println!("perturbed {} frames at level {}", s.len(), spec.level);
    Ok(())
}
