use rayon::prelude::*;

use crate::error::{invalid_param, Error, Result};
use crate::geometry::{check_voxel_size, ChangeClass, Point, PointCloud};
use crate::mapping::GroundModel;

use super::features::{compute, extract_features, point_elements, DomainCells, FeatureParams, FeatureSet, HIGH_DIM, LOW_DIM};
use super::model::{DualHeadModel, ElementOutput};

/// Output of the classifier for one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointPrediction {
    pub class: ChangeClass,
    pub probs: [f32; 3],
    /// Predicted cross-visibility confidence in [0, 1].
    pub conf: f32,
}

/// Argmax over class probabilities; ties resolve to static, then positive.
pub fn classify(probs: &[f32; 3]) -> ChangeClass {
    let mut best = 0;
    for c in 1..3 {
        if probs[c] > probs[best] {
            best = c;
        }
    }
    ChangeClass::ALL[best]
}

impl From<ElementOutput> for PointPrediction {
    fn from(o: ElementOutput) -> Self {
        Self { class: classify(&o.probs), probs: o.probs, conf: o.conf.clamp(0.0, 1.0) }
    }
}

/// A prior map prepared once for repeated comparisons against scans.
#[derive(Clone, Debug)]
pub struct PreparedMap {
    cells: DomainCells,
    n_points: usize,
    ground: GroundModel,
    params: FeatureParams,
}

impl PreparedMap {
    pub fn new(map: &PointCloud, ground: GroundModel, params: FeatureParams) -> Result<Self> {
        check_voxel_size(params.voxel_size)?;
        if !(params.tau_ocl > 0.0) {
            return Err(invalid_param("tau_ocl must be positive"));
        }
        if map.is_empty() {
            return Err(Error::EmptyInput("map is empty".into()));
        }
        Ok(Self { cells: DomainCells::build(map, params.voxel_size)?, n_points: map.len(), ground, params })
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn cells(&self) -> &DomainCells {
        &self.cells
    }

    pub fn ground(&self) -> &GroundModel {
        &self.ground
    }

    pub fn params(&self) -> &FeatureParams {
        &self.params
    }

    /// Map cells whose centroid lies within `tau_ocl` of the scan's bounding box.
    fn region(&self, scan: &DomainCells) -> Vec<u32> {
        let (mut lo, mut hi) = (Point::new(f64::INFINITY, f64::INFINITY, f64::INFINITY), Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY));
        for c in &scan.centroids {
            lo = lo.inf(c);
            hi = hi.sup(c);
        }
        let m = self.params.tau_ocl;
        let inside = |p: &Point| {
            p.x >= lo.x - m && p.x <= hi.x + m && p.y >= lo.y - m && p.y <= hi.y + m && p.z >= lo.z - m && p.z <= hi.z + m
        };
        (0..self.cells.len() as u32).into_par_iter().filter(|&c| inside(&self.cells.centroids[c as usize])).collect()
    }

    /// Features of the observed part of the map and of the whole scan. Map
    /// points outside the observed region map to no element.
    pub fn features(&self, scan: &PointCloud) -> Result<FeatureSet> {
        if scan.is_empty() {
            return Err(Error::EmptyInput("scan is empty".into()));
        }
        let s = DomainCells::build(scan, self.params.voxel_size)?;
        let sel = self.region(&s);
        let (elements, low, high) = compute(&self.cells, &sel, &s, &self.ground, &self.params);
        let n_map = sel.len();
        let (map_point_elem, scan_point_elem) = rayon::join(
            || point_elements(&self.cells, Some(&sel), self.n_points),
            || point_elements(&s, None, scan.len()).into_iter().map(|e| e + n_map as u32).collect(),
        );
        Ok(FeatureSet { elements, low, high, n_map, map_point_elem, scan_point_elem })
    }
}

/// Per-point predictions for one scan against a prepared map.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    /// Indices of the map points inside the observed region, ascending.
    pub map_indices: Vec<u32>,
    /// Predictions parallel to `map_indices`.
    pub map: Vec<PointPrediction>,
    pub scan: Vec<PointPrediction>,
}

impl Detection {
    /// Scan-side classes.
    pub fn scan_classes(&self) -> Vec<ChangeClass> {
        self.scan.iter().map(|p| p.class).collect()
    }

    /// Map-side classes for all `n` map points; unobserved points are static.
    pub fn map_classes(&self, n: usize) -> Vec<ChangeClass> {
        let mut out = vec![ChangeClass::Static; n];
        for (&i, p) in self.map_indices.iter().zip(&self.map) {
            out[i as usize] = p.class;
        }
        out
    }
}

fn scatter(outputs: &[ElementOutput], point_elem: &[u32]) -> Vec<PointPrediction> {
    point_elem.par_iter().map(|&e| outputs[e as usize].into()).collect()
}

fn check_features(model: &DualHeadModel) -> Result<()> {
    model.check_dims(LOW_DIM, HIGH_DIM)
}

/// Classifies the observed part of a prepared map and every scan point.
pub fn infer_prepared(model: &DualHeadModel, map: &PreparedMap, scan: &PointCloud) -> Result<Detection> {
    check_features(model)?;
    let f = map.features(scan)?;
    let out = model.predict(&f.low, &f.high)?;
    let map_indices: Vec<u32> = (0..map.n_points as u32).filter(|&i| f.map_point_elem[i as usize] != u32::MAX).collect();
    let map_elem: Vec<u32> = map_indices.iter().map(|&i| f.map_point_elem[i as usize]).collect();
    Ok(Detection { map: scatter(&out, &map_elem), scan: scatter(&out, &f.scan_point_elem), map_indices })
}

/// Classifies every point of both clouds.
pub fn infer(
    model: &DualHeadModel,
    map: &PointCloud,
    scan: &PointCloud,
    voxel_size: f64,
    ground: &GroundModel,
) -> Result<(Vec<PointPrediction>, Vec<PointPrediction>)> {
    check_features(model)?;
    if map.is_empty() || scan.is_empty() {
        return Err(Error::EmptyInput("inference needs two non-empty clouds".into()));
    }
    let trained = model.config().features;
    if (trained.voxel_size - voxel_size).abs() > 1e-12 {
        log::debug!("inferring at voxel {voxel_size} with a model trained at {}", trained.voxel_size);
    }
    let params = FeatureParams { voxel_size, tau_ocl: trained.tau_ocl };
    let f = extract_features(map, scan, ground, &params)?;
    let out = model.predict(&f.low, &f.high)?;
    Ok((scatter(&out, &f.map_point_elem), scatter(&out, &f.scan_point_elem)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::model::ModelConfig;
    use crate::rng;
    use rand::Rng as _;

    fn cloud(seed: u64, n: usize, x0: f64) -> PointCloud {
        let mut r = rng::seeded(seed);
        let c: Vec<[f64; 3]> = (0..n).map(|_| [x0 + r.random_range(0.0..4.0), r.random_range(0.0..4.0), r.random_range(0.0..2.0)]).collect();
        PointCloud::from_xyz(&c).unwrap()
    }

    #[test]
    fn ties_resolve_to_static() {
        assert_eq!(classify(&[0.4, 0.4, 0.2]), ChangeClass::Static);
        assert_eq!(classify(&[1.0 / 3.0; 3]), ChangeClass::Static);
        assert_eq!(classify(&[0.2, 0.4, 0.4]), ChangeClass::Positive);
        assert_eq!(classify(&[0.1, 0.2, 0.7]), ChangeClass::Negative);
    }

    #[test]
    fn argmax_invariant_to_temperature() {
        let mut r = rng::seeded(3);
        for _ in 0..500 {
            let z: [f64; 3] = [r.random_range(-5.0..5.0), r.random_range(-5.0..5.0), r.random_range(-5.0..5.0)];
            let classes: Vec<ChangeClass> = [0.5, 1.0, 2.0]
                .iter()
                .map(|t| {
                    let p = crate::detect::model::softmax3(&[z[0] / t, z[1] / t, z[2] / t]);
                    classify(&[p[0] as f32, p[1] as f32, p[2] as f32])
                })
                .collect();
            assert!(classes.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn deterministic_and_bounded() {
        let model = DualHeadModel::new(ModelConfig::default(), 4).unwrap();
        let (map, scan) = (cloud(1, 3000, 0.0), cloud(2, 2000, 1.0));
        let g = GroundModel::horizontal(0.0, 0.1);
        let a = infer(&model, &map, &scan, 0.1, &g).unwrap();
        let b = infer(&model, &map, &scan, 0.1, &g).unwrap();
        assert_eq!(a, b);
        assert!(a.0.iter().chain(&a.1).all(|p| (0.0..=1.0).contains(&p.conf)));
        assert_eq!(a.0.len(), map.len());
    }

    #[test]
    fn prepared_map_restricts_to_observed_region() {
        let model = DualHeadModel::new(ModelConfig::default(), 4).unwrap();
        let mut map = cloud(1, 3000, 0.0);
        map.append(&cloud(5, 500, 40.0));
        let scan = cloud(2, 2000, 0.5);
        let g = GroundModel::horizontal(0.0, 0.1);
        let pm = PreparedMap::new(&map, g, FeatureParams::default()).unwrap();
        let d = infer_prepared(&model, &pm, &scan).unwrap();
        assert_eq!(d.map_indices.len(), 3000);
        assert_eq!(d.scan.len(), scan.len());
        // inside the region the result equals that of the unrestricted path
        let (full_map, full_scan) = infer(&model, &map, &scan, 0.1, &g).unwrap();
        assert_eq!(full_scan, d.scan);
        for (&i, p) in d.map_indices.iter().zip(&d.map) {
            assert_eq!(full_map[i as usize], *p);
        }
    }

    #[test]
    fn rejects_mismatched_model() {
        let model = DualHeadModel::new(ModelConfig { low_dim: 3, ..Default::default() }, 4).unwrap();
        let c = cloud(1, 100, 0.0);
        let r = infer(&model, &c, &c, 0.1, &GroundModel::horizontal(0.0, 0.1));
        assert!(matches!(r, Err(Error::InvalidModel(_))));
    }
}
