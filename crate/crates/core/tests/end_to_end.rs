use chamelion_core::config::PipelineConfig;
use chamelion_core::detect::{train, DualHeadModel, ModelConfig, TrainConfig};
use chamelion_core::eval::{run_on_map, run_pipeline, Method, PairRecipe, PipelineSettings, PriorMap, Scenario};
use chamelion_core::Error;

fn quiet_scenario() -> Scenario {
    let mut sc = Scenario { noise_sigma: 0.0, ..Scenario::default() };
    sc.world.frames = 4;
    sc
}

#[test]
fn unchanged_world_scores_perfectly_through_a_stored_map() {
    let mut sc = quiet_scenario();
    sc.world.removed_boxes = 0;
    sc.world.added = 0;
    let s = sc.sessions(5).unwrap();
    let settings = PipelineSettings { method: Method::Occupancy, ..Default::default() };
    let map = PriorMap::from_session(&s.prior, settings.map_voxel).unwrap();
    let dir = tempfile::tempdir().unwrap();
    map.save(dir.path().join("map.ply")).unwrap();
    let stored = PriorMap::load(dir.path().join("map.ply")).unwrap();
    for m in [&map, &stored] {
        let r = run_on_map(None, m, &s.current, &settings).unwrap().report;
        assert_eq!((r.iou, r.scores.f1, r.removed_points), (1.0, 1.0, 0));
    }
}

#[test]
fn removed_objects_are_found_by_the_baseline() {
    let s = quiet_scenario().sessions(6).unwrap();
    let r = run_pipeline(None, &s.prior, &s.current, &PipelineSettings { method: Method::Occupancy, ..Default::default() }).unwrap();
    assert!(r.scores.rr > 0.5, "{r:?}");
    assert!(r.removed_points > 0 && r.removed_points < r.map_points);
}

#[test]
fn a_briefly_trained_model_runs_end_to_end() {
    let sc = quiet_scenario();
    let recipe = PairRecipe { pairs: 4, ..Default::default() };
    let pairs = sc.training_pairs(7, &recipe).unwrap();
    let cfg = TrainConfig { epochs: 3, frames_per_pair: 1, max_static_elements: 2000, ..Default::default() };
    let model = train(DualHeadModel::new(ModelConfig::default(), 1).unwrap(), &pairs, &cfg).unwrap().model;
    let s = sc.sessions(8).unwrap();
    let r = run_pipeline(Some(&model), &s.prior, &s.current, &PipelineSettings::default()).unwrap();
    assert_eq!(r.frames, 4);
    for v in [r.iou, r.scores.pr, r.scores.rr, r.scores.f1] {
        assert!((0.0..=1.0).contains(&v));
    }
    let again = run_pipeline(Some(&model), &s.prior, &s.current, &PipelineSettings::default()).unwrap();
    assert_eq!(r.scores, again.scores);
    assert!(matches!(run_pipeline(None, &s.prior, &s.current, &PipelineSettings::default()), Err(Error::InvalidModel(_))));
}

#[test]
fn configuration_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pipeline.txt");
    let mut cfg = PipelineConfig::default();
    cfg.set("tau_map", "0.6").unwrap();
    cfg.set("method", "occupancy").unwrap();
    std::fs::write(&path, cfg.to_text()).unwrap();
    let back = PipelineConfig::load(&path).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.pipeline_settings().gates.tau_map, 0.6);
    assert_eq!(back.pipeline_settings().method, Method::Occupancy);
}
