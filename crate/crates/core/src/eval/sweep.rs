use std::fmt::Write as _;

use rayon::prelude::*;

use super::pipeline::{run_pipeline, PipelineReport, PipelineSettings};
use crate::detect::DualHeadModel;
use crate::error::{invalid_param, Result};
use crate::mapping::Session;
use crate::mapupdate::GateThresholds;

pub const CSV_HEADER: &str = "setting,voxel,noise_level,tau_scan,tau_map,iou,pr,rr,f1,ms_per_scan";

/// The varied quantity of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub enum SweepAxis {
    Voxel(Vec<f64>),
    NoiseLevel(Vec<f64>),
    TauScan(Vec<f64>),
    TauMap(Vec<f64>),
    /// Named pipeline variants.
    Variants(Vec<(String, PipelineSettings)>),
}

impl SweepAxis {
    fn points(&self, base: &PipelineSettings) -> Vec<(String, PipelineSettings)> {
        let each = |vals: &[f64], name: &str, set: &dyn Fn(&mut PipelineSettings, f64)| -> Vec<(String, PipelineSettings)> {
            vals.iter()
                .map(|&v| {
                    let mut s = base.clone();
                    set(&mut s, v);
                    (format!("{name}={v}"), s)
                })
                .collect()
        };
        match self {
            SweepAxis::Voxel(v) => each(v, "voxel", &|s, v| s.map_voxel = v),
            SweepAxis::NoiseLevel(v) => each(v, "noise", &|s, v| s.perturbation.level = v),
            SweepAxis::TauScan(v) => each(v, "tau_scan", &|s, v| s.gates = GateThresholds { tau_scan: v, ..s.gates }),
            SweepAxis::TauMap(v) => each(v, "tau_map", &|s, v| s.gates = GateThresholds { tau_map: v, ..s.gates }),
            SweepAxis::Variants(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub base: PipelineSettings,
    pub axis: SweepAxis,
    /// Write measured timings; when false the timing column is 0 so that
    /// reruns produce identical reports.
    pub report_timing: bool,
}

/// One grid point of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub setting: String,
    pub settings: PipelineSettings,
    pub result: std::result::Result<PipelineReport, String>,
}

/// Runs every grid point (in parallel) and returns rows in declared order
/// together with the CSV report. A failing grid point yields a row with
/// `nan` metrics.
pub fn sweep(model: Option<&DualHeadModel>, prior: &Session, current: &Session, cfg: &SweepConfig) -> Result<(Vec<SweepRow>, String)> {
    let points = cfg.axis.points(&cfg.base);
    if points.is_empty() {
        return Err(invalid_param("sweep has no grid points"));
    }
    if points.iter().any(|(name, _)| name.contains(',') || name.contains('\n')) {
        return Err(invalid_param("setting names cannot contain commas or newlines"));
    }
    let rows: Vec<SweepRow> = points
        .into_par_iter()
        .map(|(setting, settings)| {
            let result = run_pipeline(model, prior, current, &settings).map_err(|e| e.to_string());
            if let Err(e) = &result {
                log::warn!("sweep point {setting} failed: {e}");
            }
            SweepRow { setting, settings, result }
        })
        .collect();
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for r in &rows {
        let s = &r.settings;
        let _ = write!(csv, "{},{},{},{},{},", r.setting, s.map_voxel, s.perturbation.level, s.gates.tau_scan, s.gates.tau_map);
        match &r.result {
            Ok(p) => {
                let ms = if cfg.report_timing { p.ms_per_scan } else { 0.0 };
                let _ = writeln!(csv, "{:.6},{:.6},{:.6},{:.6},{:.3}", p.iou, p.scores.pr, p.scores.rr, p.scores.f1, ms);
            }
            Err(_) => csv.push_str("nan,nan,nan,nan,nan\n"),
        }
    }
    Ok((rows, csv))
}

/// Picks the map gate from `grid` with the best map-wise F1 on validation
/// sessions; ties go to the earlier value.
pub fn select_tau_map(model: Option<&DualHeadModel>, prior: &Session, current: &Session, base: &PipelineSettings, grid: &[f64]) -> Result<(f64, Vec<SweepRow>)> {
    let cfg = SweepConfig { base: base.clone(), axis: SweepAxis::TauMap(grid.to_vec()), report_timing: false };
    let (rows, _) = sweep(model, prior, current, &cfg)?;
    let mut best: Option<(f64, f64)> = None;
    for r in &rows {
        if let Ok(p) = &r.result {
            if best.is_none_or(|(_, f)| p.scores.f1 > f) {
                best = Some((r.settings.gates.tau_map, p.scores.f1));
            }
        }
    }
    let (tau, _) = best.ok_or_else(|| invalid_param("every grid point failed"))?;
    Ok((tau, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::Method;
    use crate::geometry::Pose;
    use crate::synthscene::{generate_sessions, Cuboid, Presence, SensorSpec, World, WorldObject};
    use nalgebra::Vector3;

    fn sessions() -> (Session, Session) {
        let w = World {
            extent: [12.0, 12.0],
            walls: vec![Cuboid::new([0.0, 0.0, 0.0], [12.0, 0.2, 2.5]).unwrap()],
            objects: vec![WorldObject { id: 1, shape: Cuboid::new([6.0, 3.0, 0.0], [7.0, 4.0, 1.2]).unwrap(), presence: Presence::PriorOnly }],
            movers: vec![],
            seed: 0,
        };
        let traj = vec![Pose::from_translation(Vector3::new(4.0, 5.0, 1.0)), Pose::from_translation(Vector3::new(5.0, 5.0, 1.0))];
        let s = generate_sessions(&w, &SensorSpec { h_res: 1f64.to_radians(), ..Default::default() }.with_trajectory(traj), 2).unwrap();
        (s.prior, s.current)
    }

    #[test]
    fn rows_follow_declared_order_and_rerun_is_identical() {
        let (p, c) = sessions();
        let base = PipelineSettings { method: Method::Occupancy, ..Default::default() };
        let cfg = SweepConfig { base, axis: SweepAxis::Voxel(vec![0.05, 0.1, 0.2, 0.3]), report_timing: false };
        let (rows, csv) = sweep(None, &p, &c, &cfg).unwrap();
        assert_eq!(rows.len(), 4);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 5);
        for (l, v) in lines[1..].iter().zip(["0.05", "0.1", "0.2", "0.3"]) {
            assert_eq!(l.split(',').nth(1), Some(v));
        }
        assert_eq!(sweep(None, &p, &c, &cfg).unwrap().1, csv);

        let single = SweepConfig { axis: SweepAxis::TauMap(vec![0.7]), ..cfg.clone() };
        assert_eq!(sweep(None, &p, &c, &single).unwrap().1.lines().count(), 2);
    }

    #[test]
    fn failing_point_becomes_an_error_row() {
        let (p, c) = sessions();
        let cfg = SweepConfig {
            base: PipelineSettings { method: Method::Occupancy, ..Default::default() },
            axis: SweepAxis::Voxel(vec![0.1, -1.0]),
            report_timing: false,
        };
        let (rows, csv) = sweep(None, &p, &c, &cfg).unwrap();
        assert!(rows[0].result.is_ok() && rows[1].result.is_err());
        assert!(csv.lines().nth(2).unwrap().ends_with("nan,nan,nan,nan,nan"));
    }

    #[test]
    fn gate_selection_prefers_the_best_f1() {
        let (p, c) = sessions();
        let base = PipelineSettings { method: Method::Occupancy, ..Default::default() };
        // the baseline ignores the gate, so every point ties and the first wins
        let (tau, rows) = select_tau_map(None, &p, &c, &base, &[0.6, 0.5, 0.8]).unwrap();
        assert_eq!((tau, rows.len()), (0.6, 3));
        assert!(select_tau_map(None, &p, &c, &base, &[1.5]).is_err());
    }
}
