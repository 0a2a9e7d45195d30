//! Confidence-gated recursive log-odds fusion of per-scan predictions into
//! the prior map, and scan-side positive-change extraction.
//!
//! Evidence is accumulated in fixed point (2^-40 units), so the state after
//! a set of observations does not depend on their order. The clamp bound is
//! applied when the state is read.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::detect::{Detection, PointPrediction};
use crate::error::{invalid_input, invalid_param, Error, Result};
use crate::geometry::{ChangeClass, PointCloud};

/// Bound on reported log-odds.
pub const LOG_ODDS_CLAMP: f64 = 10.0;
/// Observation probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-6;

const FIXED_SCALE: f64 = (1u64 << 40) as f64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateThresholds {
    /// Scan points are changes only below this confidence.
    pub tau_scan: f64,
    /// Map points integrate an observation only above this confidence.
    pub tau_map: f64,
}

impl Default for GateThresholds {
    fn default() -> Self {
        Self { tau_scan: 0.5, tau_map: 0.7 }
    }
}

impl GateThresholds {
    /// Gates that let every observation through.
    pub fn open() -> Self {
        Self { tau_scan: 1.0 + 1e-9, tau_map: -1e-9 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |t: f64| (-1e-6..=1.0 + 1e-6).contains(&t);
        if !ok(self.tau_scan) || !ok(self.tau_map) {
            return Err(invalid_param("confidence gates must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Clamped logit.
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    (p / (1.0 - p)).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn to_fixed(x: f64) -> i64 {
    (x * FIXED_SCALE).round() as i64
}

#[inline]
fn from_fixed(v: i64) -> f64 {
    v as f64 / FIXED_SCALE
}

/// One class-probability observation of a map point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub probs: [f64; 3],
    pub conf: f64,
}

impl From<&PointPrediction> for Observation {
    fn from(p: &PointPrediction) -> Self {
        Self { probs: [p.probs[0] as f64, p.probs[1] as f64, p.probs[2] as f64], conf: p.conf as f64 }
    }
}

/// Per-point one-vs-rest log-odds for the three classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogOddsMap {
    acc: Vec<[i64; 3]>,
    prior: [i64; 3],
    gated: Vec<u32>,
}

impl LogOddsMap {
    /// Uniform prior (all log-odds zero).
    pub fn new(n: usize) -> Self {
        Self { acc: vec![[0; 3]; n], prior: [0; 3], gated: vec![0; n] }
    }

    /// Every point starts at `prior`.
    pub fn with_prior(n: usize, prior: [f64; 3]) -> Result<Self> {
        if prior.iter().any(|p| !p.is_finite()) {
            return Err(invalid_param("prior log-odds must be finite"));
        }
        let p = [to_fixed(prior[0]), to_fixed(prior[1]), to_fixed(prior[2])];
        Ok(Self { acc: vec![p; n], prior: p, gated: vec![0; n] })
    }

    pub fn len(&self) -> usize {
        self.acc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.acc.is_empty()
    }

    pub fn prior(&self) -> [f64; 3] {
        self.prior.map(from_fixed)
    }

    /// Clamped log-odds of point `i`.
    pub fn log_odds(&self, i: usize) -> [f64; 3] {
        self.acc[i].map(|v| from_fixed(v).clamp(-LOG_ODDS_CLAMP, LOG_ODDS_CLAMP))
    }

    /// Unclamped accumulated evidence of point `i`.
    pub fn raw_log_odds(&self, i: usize) -> [f64; 3] {
        self.acc[i].map(from_fixed)
    }

    /// Posterior probability of `class` at point `i`.
    pub fn probability(&self, i: usize, class: ChangeClass) -> f64 {
        sigmoid(self.log_odds(i)[class.index()])
    }

    /// Number of observations that passed the gate at point `i`.
    pub fn gated_count(&self, i: usize) -> u32 {
        self.gated[i]
    }

    #[inline]
    fn apply(&mut self, i: usize, obs: &Observation, tau_map: f64) {
        if obs.conf > tau_map {
            for c in 0..3 {
                self.acc[i][c] += to_fixed(logit(obs.probs[c])) - self.prior[c];
            }
            self.gated[i] += 1;
        }
    }

    fn check_obs(obs: &Observation) -> Result<()> {
        let s: f64 = obs.probs.iter().sum();
        if obs.probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (s - 1.0).abs() > 1e-4 || !(obs.conf >= 0.0 && obs.conf <= 1.0) {
            return Err(invalid_input("observation probabilities and confidence must be valid"));
        }
        Ok(())
    }

    /// Integrates one observation per map point.
    pub fn update(&mut self, obs: &[Observation], gates: &GateThresholds) -> Result<()> {
        gates.validate()?;
        if obs.len() != self.len() {
            return Err(invalid_input(format!("{} observations for {} map points", obs.len(), self.len())));
        }
        obs.iter().try_for_each(Self::check_obs)?;
        let tau = gates.tau_map;
        let prior = self.prior;
        self.acc.par_iter_mut().zip(self.gated.par_iter_mut()).zip(obs.par_iter()).for_each(|((a, g), o)| {
            if o.conf > tau {
                for c in 0..3 {
                    a[c] += to_fixed(logit(o.probs[c])) - prior[c];
                }
                *g += 1;
            }
        });
        Ok(())
    }

    /// Integrates observations of a subset of map points.
    pub fn update_sparse(&mut self, indices: &[u32], obs: &[Observation], gates: &GateThresholds) -> Result<()> {
        gates.validate()?;
        if indices.len() != obs.len() {
            return Err(invalid_input("indices and observations differ in length"));
        }
        if indices.iter().any(|&i| i as usize >= self.len()) {
            return Err(invalid_input("observation index outside the map"));
        }
        obs.iter().try_for_each(Self::check_obs)?;
        for (&i, o) in indices.iter().zip(obs) {
            self.apply(i as usize, o, gates.tau_map);
        }
        Ok(())
    }

    /// Integrates the map side of a detection, optionally overriding the
    /// predicted confidence with `conf` (parallel to `det.map`).
    pub fn update_from_detection(&mut self, det: &Detection, conf: Option<&[f64]>, gates: &GateThresholds) -> Result<()> {
        if let Some(c) = conf {
            if c.len() != det.map.len() {
                return Err(invalid_input("confidence override length mismatch"));
            }
        }
        let obs: Vec<Observation> = det
            .map
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let mut o = Observation::from(p);
                if let Some(c) = conf {
                    o.conf = c[k];
                }
                o
            })
            .collect();
        self.update_sparse(&det.map_indices, &obs, gates)
    }

    /// Points whose negative-change posterior exceeds `threshold`.
    pub fn removal_mask(&self, threshold: f64) -> Vec<bool> {
        (0..self.len()).map(|i| self.probability(i, ChangeClass::Negative) > threshold).collect()
    }

    /// Little-endian f32 sidecar, three values per point.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let mut buf = Vec::with_capacity(12 * self.len());
        for i in 0..self.len() {
            for v in self.raw_log_odds(i) {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out.write_all(&buf)?;
        Ok(())
    }

    /// Reads a sidecar for a map of `n` points under a uniform prior.
    pub fn read_from<R: Read>(mut input: R, n: usize) -> Result<Self> {
        let mut buf = Vec::new();
        input.read_to_end(&mut buf)?;
        if buf.len() != 12 * n {
            return Err(Error::Format(format!("log-odds sidecar holds {} bytes, expected {}", buf.len(), 12 * n)));
        }
        let mut s = Self::new(n);
        for (i, chunk) in buf.chunks_exact(12).enumerate() {
            for c in 0..3 {
                let v = f32::from_le_bytes(chunk[4 * c..4 * c + 4].try_into().unwrap());
                if !v.is_finite() {
                    return Err(Error::Format("non-finite log-odds".into()));
                }
                s.acc[i][c] = to_fixed(v as f64);
            }
        }
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, n: usize) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?), n)
    }
}

/// `state` after integrating one observation per map point.
pub fn update_map(state: &LogOddsMap, obs: &[Observation], gates: &GateThresholds) -> Result<LogOddsMap> {
    let mut s = state.clone();
    s.update(obs, gates)?;
    Ok(s)
}

/// Indices of scan points predicted as positive change with confidence
/// below the scan gate.
pub fn extract_scan_changes(preds: &[PointPrediction], tau_scan: f64) -> Vec<usize> {
    preds
        .iter()
        .enumerate()
        .filter(|(_, p)| p.class == ChangeClass::Positive && (p.conf as f64) < tau_scan)
        .map(|(i, _)| i)
        .collect()
}

/// Drops map points whose negative-change posterior exceeds `threshold`.
pub fn finalize_map(map: &PointCloud, state: &LogOddsMap, threshold: f64) -> Result<PointCloud> {
    if state.len() != map.len() {
        return Err(invalid_input(format!("state covers {} points, map has {}", state.len(), map.len())));
    }
    if !(0.0..1.0).contains(&threshold) {
        return Err(invalid_param("decision threshold must lie in [0, 1)"));
    }
    let keep: Vec<bool> = state.removal_mask(threshold).into_iter().map(|r| !r).collect();
    Ok(map.filter(&keep))
}

/// Appends the given scan points to the map (optional post-step).
pub fn insert_changes(map: &PointCloud, scan: &PointCloud, indices: &[usize]) -> PointCloud {
    let mut out = map.clone();
    let mut add = scan.select(indices);
    add.clear_attributes();
    out.clear_attributes();
    out.append(&add);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng as _;

    fn nc(p: f64, conf: f64) -> Observation {
        Observation { probs: [(1.0 - p) / 2.0, (1.0 - p) / 2.0, p], conf }
    }

    #[test]
    fn single_observation() {
        let mut s = LogOddsMap::new(1);
        s.update(&[nc(0.7, 1.0)], &GateThresholds { tau_scan: 0.5, tau_map: 0.5 }).unwrap();
        assert!((s.log_odds(0)[2] - (0.7f64 / 0.3).ln()).abs() < 1e-9);
        assert_eq!(s.gated_count(0), 1);
        assert!(s.update(&[], &GateThresholds::default()).is_err());
    }

    #[test]
    fn gate_blocks_update() {
        let mut s = LogOddsMap::new(2);
        let before = s.clone();
        s.update(&[nc(0.9, 0.3), nc(0.9, 0.7)], &GateThresholds::default()).unwrap();
        assert_eq!(s, before, "0.7 is not above the 0.7 gate");
    }

    #[test]
    fn four_updates_pass_095() {
        let mut s = LogOddsMap::new(1);
        let g = GateThresholds::default();
        let mut posts = Vec::new();
        for _ in 0..4 {
            s.update(&[nc(0.7, 0.9)], &g).unwrap();
            posts.push(s.probability(0, ChangeClass::Negative));
        }
        assert!(posts[2] < 0.95 && posts[3] > 0.95);
        let closed = 4.0 * (0.7f64 / 0.3).ln();
        assert!((s.log_odds(0)[2] - closed).abs() < 1e-9);
        let need = (19f64.ln() / (0.7f64 / 0.3).ln()).ceil();
        assert_eq!(need, 4.0);
    }

    #[test]
    fn clamp_applies_on_read() {
        let mut s = LogOddsMap::new(1);
        for _ in 0..3 {
            s.update(&[nc(1.0, 1.0)], &GateThresholds::default()).unwrap();
        }
        assert_eq!(s.log_odds(0)[2], LOG_ODDS_CLAMP);
        assert!((s.raw_log_odds(0)[2] - 3.0 * logit(1.0)).abs() < 1e-9);
    }

    #[test]
    fn scan_extraction() {
        let p = |class, conf| PointPrediction { class, probs: [0.0, 1.0, 0.0], conf };
        let all_one = vec![p(ChangeClass::Positive, 1.0); 5];
        assert!(extract_scan_changes(&all_one, 0.5).is_empty());
        let all_zero = vec![p(ChangeClass::Positive, 0.0); 5];
        assert_eq!(extract_scan_changes(&all_zero, 0.5), vec![0, 1, 2, 3, 4]);
        let mut r = rng::seeded(2);
        let mixed: Vec<PointPrediction> = (0..200).map(|_| p(ChangeClass::ALL[r.random_range(0..3)], r.random())).collect();
        let oracle: Vec<usize> = (0..200).filter(|&i| mixed[i].class.as_u8() == 1 && mixed[i].conf < 0.5).collect();
        assert_eq!(extract_scan_changes(&mixed, 0.5), oracle);
    }

    #[test]
    fn finalize_examples() {
        let map = PointCloud::from_xyz(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        let s = LogOddsMap::new(3);
        assert_eq!(finalize_map(&map, &s, 0.5).unwrap().len(), 3);
        let mut s = LogOddsMap::with_prior(3, [0.0; 3]).unwrap();
        s.acc[1][2] = to_fixed(3.0);
        let out = finalize_map(&map, &s, 0.5).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out.point(1).x, 2.0);
        assert!(finalize_map(&map, &LogOddsMap::new(2), 0.5).is_err());
    }

    #[test]
    fn sidecar_roundtrip() {
        let mut s = LogOddsMap::new(4);
        s.update(&[nc(0.7, 1.0), nc(0.2, 1.0), nc(0.5, 0.1), nc(0.99, 0.8)], &GateThresholds::default()).unwrap();
        let mut bytes = Vec::new();
        s.write_to(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 48);
        let back = LogOddsMap::read_from(&bytes[..], 4).unwrap();
        for i in 0..4 {
            for c in 0..3 {
                assert!((back.log_odds(i)[c] - s.log_odds(i)[c]).abs() < 1e-6);
            }
        }
        assert!(LogOddsMap::read_from(&bytes[..40], 4).is_err());
    }

    #[test]
    fn sparse_matches_dense() {
        let g = GateThresholds::default();
        let obs = vec![nc(0.8, 0.9), nc(0.6, 0.2), nc(0.3, 0.95)];
        let mut dense = LogOddsMap::new(5);
        let mut full = vec![nc(0.5, 0.0); 5];
        full[1] = obs[0];
        full[3] = obs[1];
        full[4] = obs[2];
        dense.update(&full, &g).unwrap();
        let mut sparse = LogOddsMap::new(5);
        sparse.update_sparse(&[1, 3, 4], &obs, &g).unwrap();
        assert_eq!(dense, sparse);
        assert!(sparse.update_sparse(&[9], &obs[..1], &g).is_err());
    }

    proptest! {
        #[test]
        fn order_of_observations_is_irrelevant(
            ps in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 10),
            seed in any::<u64>(),
        ) {
            let obs: Vec<Observation> = ps.iter().map(|&(a, b, c, conf)| {
                let s = a + b + c + 1e-9;
                Observation { probs: [a / s, b / s, 1.0 - a / s - b / s], conf }
            }).collect();
            let g = GateThresholds::default();
            let run = |order: &[Observation]| {
                let mut s = LogOddsMap::new(1);
                for o in order {
                    s.update(&[*o], &g).unwrap();
                }
                s
            };
            let mut shuffled = obs.clone();
            shuffled.shuffle(&mut rng::seeded(seed));
            let (a, b) = (run(&obs), run(&shuffled));
            prop_assert_eq!(a.log_odds(0).map(f64::to_bits), b.log_odds(0).map(f64::to_bits));
        }

        #[test]
        fn gated_points_never_change(conf in 0.0f64..=0.7, p in 0.0f64..1.0) {
            let mut s = LogOddsMap::new(1);
            s.update(&[nc(0.9, 1.0)], &GateThresholds::default()).unwrap();
            let before = s.clone();
            s.update(&[nc(p, conf)], &GateThresholds::default()).unwrap();
            prop_assert_eq!(s, before);
        }

        #[test]
        fn identical_observations_add_up(k in 1usize..6, p in 0.05f64..0.95) {
            let mut s = LogOddsMap::new(1);
            for _ in 0..k {
                s.update(&[nc(p, 1.0)], &GateThresholds::default()).unwrap();
            }
            let want = (k as f64 * logit(p)).clamp(-LOG_ODDS_CLAMP, LOG_ODDS_CLAMP);
            prop_assert!((s.log_odds(0)[2] - want).abs() < 1e-9);
        }

        #[test]
        fn unobserved_points_are_kept(n in 1usize..20) {
            let map = PointCloud::from_xyz(&vec![[0.0; 3]; n]).unwrap();
            let mut s = LogOddsMap::new(n);
            s.update(&vec![nc(0.99, 0.1); n], &GateThresholds::default()).unwrap();
            prop_assert_eq!(finalize_map(&map, &s, 0.5).unwrap().len(), n);
        }
    }
}
