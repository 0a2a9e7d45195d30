//! Flat `key = value` configuration covering every pipeline tunable.
//!
//! Lines may carry `#` comments; blank lines are ignored. Unknown keys,
//! duplicate keys and malformed values are rejected with the offending line.

use std::fmt::Write as _;
use std::path::Path;

use crate::confidence::ConfidenceParams;
use crate::detect::{ClassWeighting, ConfSource, FeatureParams, ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{Method, PipelineSettings};
use crate::geometry::PerturbationSpec;
use crate::mapupdate::GateThresholds;
use nalgebra::{Matrix3, Vector3};

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub voxel_size: f64,
    pub lambda: f64,
    pub tau_vox: f64,
    pub tau_ocl: f64,
    pub alpha: f64,
    pub hidden: [usize; 2],
    pub conf_source: ConfSource,
    pub tau_scan: f64,
    pub tau_map: f64,
    pub gating: bool,
    pub decision_threshold: f64,
    pub remove_hd: bool,
    pub method: Method,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub val_fraction: f64,
    pub weighting: ClassWeighting,
    pub frames_per_pair: usize,
    pub max_static_elements: usize,
    pub conf_pairs: usize,
    pub pairs: usize,
    pub pc_objects: usize,
    pub nc_objects: usize,
    pub min_object_points: usize,
    pub noise_level: f64,
    /// Standard deviations of the pose noise at level 1: m, deg, deg.
    pub sigma_translation: f64,
    pub sigma_roll_pitch_deg: f64,
    pub sigma_yaw_deg: f64,
    pub max_translation: f64,
    pub max_roll_pitch_deg: f64,
    pub max_yaw_deg: f64,
    pub visibility_resolution_deg: f64,
    pub visibility_margin: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let conf = ConfidenceParams::default();
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        let gates = GateThresholds::default();
        let pert = PerturbationSpec::default();
        let run = PipelineSettings::default();
        Self {
            seed: 0,
            voxel_size: model.features.voxel_size,
            lambda: conf.lambda,
            tau_vox: conf.tau_vox,
            tau_ocl: conf.tau_ocl,
            alpha: model.alpha,
            hidden: model.hidden,
            conf_source: model.conf_source,
            tau_scan: gates.tau_scan,
            tau_map: gates.tau_map,
            gating: run.gating,
            decision_threshold: run.decision_threshold,
            remove_hd: run.remove_hd,
            method: run.method,
            epochs: train.epochs,
            batch: train.batch,
            lr: train.lr,
            val_fraction: train.val_fraction,
            weighting: train.weighting,
            frames_per_pair: train.frames_per_pair,
            max_static_elements: train.max_static_elements,
            conf_pairs: train.conf_pairs,
            pairs: 50,
            pc_objects: 3,
            nc_objects: 3,
            min_object_points: 30,
            noise_level: pert.level,
            sigma_translation: pert.sigma_t[(0, 0)].sqrt(),
            sigma_roll_pitch_deg: pert.sigma_r[(0, 0)].sqrt().to_degrees(),
            sigma_yaw_deg: pert.sigma_r[(2, 2)].sqrt().to_degrees(),
            max_translation: pert.max_translation,
            max_roll_pitch_deg: pert.max_roll_pitch.to_degrees(),
            max_yaw_deg: pert.max_yaw.to_degrees(),
            visibility_resolution_deg: run.visibility_resolution.to_degrees(),
            visibility_margin: run.visibility_margin,
        }
    }
}

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse '{v}'"))
}

fn flag(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected true or false, got '{v}'")),
    }
}

fn conf_source_name(s: ConfSource) -> &'static str {
    match s {
        ConfSource::LowLevel => "low",
        ConfSource::HighLevel => "high",
    }
}

fn weighting_name(w: ClassWeighting) -> &'static str {
    match w {
        ClassWeighting::None => "none",
        ClassWeighting::Inverse => "inverse",
        ClassWeighting::SqrtInverse => "sqrt_inverse",
    }
}

impl PipelineConfig {
    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("seed", self.seed.to_string()),
            ("voxel_size", self.voxel_size.to_string()),
            ("lambda", self.lambda.to_string()),
            ("tau_vox", self.tau_vox.to_string()),
            ("tau_ocl", self.tau_ocl.to_string()),
            ("alpha", self.alpha.to_string()),
            ("hidden1", self.hidden[0].to_string()),
            ("hidden2", self.hidden[1].to_string()),
            ("conf_source", conf_source_name(self.conf_source).into()),
            ("tau_scan", self.tau_scan.to_string()),
            ("tau_map", self.tau_map.to_string()),
            ("gating", self.gating.to_string()),
            ("decision_threshold", self.decision_threshold.to_string()),
            ("remove_hd", self.remove_hd.to_string()),
            ("method", self.method.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch", self.batch.to_string()),
            ("lr", self.lr.to_string()),
            ("val_fraction", self.val_fraction.to_string()),
            ("weighting", weighting_name(self.weighting).into()),
            ("frames_per_pair", self.frames_per_pair.to_string()),
            ("max_static_elements", self.max_static_elements.to_string()),
            ("conf_pairs", self.conf_pairs.to_string()),
            ("pairs", self.pairs.to_string()),
            ("pc_objects", self.pc_objects.to_string()),
            ("nc_objects", self.nc_objects.to_string()),
            ("min_object_points", self.min_object_points.to_string()),
            ("noise_level", self.noise_level.to_string()),
            ("sigma_translation", self.sigma_translation.to_string()),
            ("sigma_roll_pitch_deg", self.sigma_roll_pitch_deg.to_string()),
            ("sigma_yaw_deg", self.sigma_yaw_deg.to_string()),
            ("max_translation", self.max_translation.to_string()),
            ("max_roll_pitch_deg", self.max_roll_pitch_deg.to_string()),
            ("max_yaw_deg", self.max_yaw_deg.to_string()),
            ("visibility_resolution_deg", self.visibility_resolution_deg.to_string()),
            ("visibility_margin", self.visibility_margin.to_string()),
        ]
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "seed" => self.seed = num(v)?,
            "voxel_size" => self.voxel_size = num(v)?,
            "lambda" => self.lambda = num(v)?,
            "tau_vox" => self.tau_vox = num(v)?,
            "tau_ocl" => self.tau_ocl = num(v)?,
            "alpha" => self.alpha = num(v)?,
            "hidden1" => self.hidden[0] = num(v)?,
            "hidden2" => self.hidden[1] = num(v)?,
            "conf_source" => {
                self.conf_source = match v {
                    "low" => ConfSource::LowLevel,
                    "high" => ConfSource::HighLevel,
                    _ => return Err(format!("expected low or high, got '{v}'")),
                }
            }
            "tau_scan" => self.tau_scan = num(v)?,
            "tau_map" => self.tau_map = num(v)?,
            "gating" => self.gating = flag(v)?,
            "decision_threshold" => self.decision_threshold = num(v)?,
            "remove_hd" => self.remove_hd = flag(v)?,
            "method" => self.method = v.parse().map_err(|e: Error| e.to_string())?,
            "epochs" => self.epochs = num(v)?,
            "batch" => self.batch = num(v)?,
            "lr" => self.lr = num(v)?,
            "val_fraction" => self.val_fraction = num(v)?,
            "weighting" => {
                self.weighting = match v {
                    "none" => ClassWeighting::None,
                    "inverse" => ClassWeighting::Inverse,
                    "sqrt_inverse" => ClassWeighting::SqrtInverse,
                    _ => return Err(format!("unknown weighting '{v}'")),
                }
            }
            "frames_per_pair" => self.frames_per_pair = num(v)?,
            "max_static_elements" => self.max_static_elements = num(v)?,
            "conf_pairs" => self.conf_pairs = num(v)?,
            "pairs" => self.pairs = num(v)?,
            "pc_objects" => self.pc_objects = num(v)?,
            "nc_objects" => self.nc_objects = num(v)?,
            "min_object_points" => self.min_object_points = num(v)?,
            "noise_level" => self.noise_level = num(v)?,
            "sigma_translation" => self.sigma_translation = num(v)?,
            "sigma_roll_pitch_deg" => self.sigma_roll_pitch_deg = num(v)?,
            "sigma_yaw_deg" => self.sigma_yaw_deg = num(v)?,
            "max_translation" => self.max_translation = num(v)?,
            "max_roll_pitch_deg" => self.max_roll_pitch_deg = num(v)?,
            "max_yaw_deg" => self.max_yaw_deg = num(v)?,
            "visibility_resolution_deg" => self.visibility_resolution_deg = num(v)?,
            "visibility_margin" => self.visibility_margin = num(v)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Parses a config on top of the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { line: i + 1, msg };
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected key = value".into()))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(err(format!("duplicate key '{k}'")));
            }
            cfg.set(k, v).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Checks every derived parameter set.
    pub fn validate(&self) -> Result<()> {
        self.confidence().validate()?;
        self.model_config().validate()?;
        self.train_config().validate()?;
        self.gates().validate()?;
        self.perturbation().validate()?;
        crate::geometry::check_voxel_size(self.voxel_size)?;
        if !(0.0..1.0).contains(&self.decision_threshold) {
            return Err(crate::error::invalid_param("decision_threshold must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn confidence(&self) -> ConfidenceParams {
        ConfidenceParams { lambda: self.lambda, tau_vox: self.tau_vox, tau_ocl: self.tau_ocl }
    }

    pub fn gates(&self) -> GateThresholds {
        GateThresholds { tau_scan: self.tau_scan, tau_map: self.tau_map }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden,
            alpha: self.alpha,
            conf_source: self.conf_source,
            features: FeatureParams { voxel_size: self.voxel_size, tau_ocl: self.tau_ocl },
            ..ModelConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            seed: self.seed,
            val_fraction: self.val_fraction,
            weighting: self.weighting,
            frames_per_pair: self.frames_per_pair,
            max_static_elements: self.max_static_elements,
            conf_pairs: self.conf_pairs,
            confidence: self.confidence(),
        }
    }

    pub fn perturbation(&self) -> PerturbationSpec {
        let t = self.sigma_translation * self.sigma_translation;
        let rp = self.sigma_roll_pitch_deg.to_radians().powi(2);
        let y = self.sigma_yaw_deg.to_radians().powi(2);
        PerturbationSpec {
            level: self.noise_level,
            sigma_t: Matrix3::from_diagonal(&Vector3::new(t, t, t)),
            sigma_r: Matrix3::from_diagonal(&Vector3::new(rp, rp, y)),
            max_translation: self.max_translation,
            max_roll_pitch: self.max_roll_pitch_deg.to_radians(),
            max_yaw: self.max_yaw_deg.to_radians(),
            seed: self.seed,
        }
    }

    pub fn pipeline_settings(&self) -> PipelineSettings {
        PipelineSettings {
            method: self.method,
            map_voxel: self.voxel_size,
            gates: self.gates(),
            gating: self.gating,
            confidence: self.confidence(),
            remove_hd: self.remove_hd,
            perturbation: self.perturbation(),
            decision_threshold: self.decision_threshold,
            visibility_resolution: self.visibility_resolution_deg.to_radians(),
            visibility_margin: self.visibility_margin,
            ..PipelineSettings::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_module_defaults() {
        let c = PipelineConfig::default();
        assert_eq!(c.confidence(), ConfidenceParams::default());
        assert_eq!(c.model_config(), ModelConfig::default());
        assert_eq!(c.train_config(), TrainConfig::default());
        assert_eq!(c.pipeline_settings(), PipelineSettings::default());
        assert_eq!((c.lambda, c.tau_ocl, c.alpha, c.epochs, c.batch), (10.0, 3.0, 0.01, 50, 2));
    }

    #[test]
    fn text_roundtrip() {
        let mut c = PipelineConfig::default();
        c.seed = 42;
        c.tau_map = 0.55;
        c.method = Method::Visibility;
        c.weighting = ClassWeighting::SqrtInverse;
        assert_eq!(PipelineConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn comments_and_overrides() {
        let c = PipelineConfig::parse("# demo\n\nseed = 7 # inline\n  tau_map=0.6\ngating = false\n").unwrap();
        assert_eq!((c.seed, c.tau_map, c.gating), (7, 0.6, false));
        assert_eq!(c.voxel_size, 0.1);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let line = |t: &str| match PipelineConfig::parse(t) {
            Err(Error::Parse { line, .. }) => line,
            other => panic!("{other:?}"),
        };
        assert_eq!(line("seed = 1\nbogus = 2\n"), 2);
        assert_eq!(line("\n\nlambda = ten\n"), 3);
        assert_eq!(line("seed\n"), 1);
        assert_eq!(line("seed = 1\nseed = 2\n"), 2);
        assert_eq!(line("gating = maybe\n"), 1);
        assert!(matches!(PipelineConfig::parse("lambda = -1\n"), Err(Error::InvalidParameter(_))));
    }
}
