//! Mini-batch training of the dual-head classifier.

use rand::seq::{index::sample, SliceRandom};
use rayon::prelude::*;

use crate::augment::AugmentedPair;
use crate::confidence::{ConfidenceParams, NnTarget};
use crate::error::{invalid_param, Error, Result};
use crate::geometry::{ChangeClass, KdTree, PointCloud};
use crate::mapping::segment_ground;
use crate::rng;

use super::features::{FeatureSet, HIGH_DIM, LOW_DIM};
use super::infer::PreparedMap;
use super::loss::LOG_CLAMP;
use super::model::{backward, forward, DualHeadModel, Layout};

/// Elements per parallel work unit.
const CHUNK: usize = 1024;

/// One (map, scan) comparison: per-element features and soft class targets
/// plus sampled confidence supervision.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainSample {
    /// Row-major `n x low_dim`.
    pub low: Vec<f64>,
    /// Row-major `n x high_dim`.
    pub high: Vec<f64>,
    /// Fraction of member points per class.
    pub targets: Vec<[f64; 3]>,
    /// Importance weight per element (inverse keep rate of subsampling).
    pub weights: Vec<f64>,
    /// Element of each confidence pair.
    pub conf_elements: Vec<u32>,
    pub conf_targets: Vec<f64>,
}

impl TrainSample {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ClassWeighting {
    None,
    #[default]
    Inverse,
    SqrtInverse,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Fraction of pairs held out for model selection.
    pub val_fraction: f64,
    pub weighting: ClassWeighting,
    /// Scan frames used per pair; `0` means all.
    pub frames_per_pair: usize,
    /// Cap on purely static elements kept per sample.
    pub max_static_elements: usize,
    /// Confidence pairs sampled per sample.
    pub conf_pairs: usize,
    pub confidence: ConfidenceParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch: 2,
            lr: 1e-3,
            seed: 0,
            val_fraction: 0.1,
            weighting: ClassWeighting::Inverse,
            frames_per_pair: 0,
            max_static_elements: 8000,
            conf_pairs: 4096,
            confidence: ConfidenceParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(invalid_param("epochs and batch must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid_param("learning rate must be positive"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(invalid_param("validation fraction must lie in (0, 1)"));
        }
        self.confidence.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_cls: f64,
    pub train_conf: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Snapshot with the lowest validation loss.
    pub model: DualHeadModel,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
}

/// Per-class multipliers inside the classification loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassWeights(pub [f64; 3]);

impl ClassWeights {
    pub fn uniform() -> Self {
        Self([1.0; 3])
    }

    /// From soft class totals over the given samples.
    pub fn from_samples(samples: &[TrainSample], mode: ClassWeighting) -> Self {
        let mut tot = [0.0f64; 3];
        for s in samples {
            for (t, w) in s.targets.iter().zip(&s.weights) {
                for c in 0..3 {
                    tot[c] += t[c] * w;
                }
            }
        }
        let n: f64 = tot.iter().sum();
        if n <= 0.0 {
            return Self::uniform();
        }
        let present = tot.iter().filter(|&&t| t > 0.0).count() as f64;
        let f = |t: f64| if t > 0.0 { n / (present * t) } else { 1.0 };
        match mode {
            ClassWeighting::None => Self::uniform(),
            ClassWeighting::Inverse => Self([f(tot[0]), f(tot[1]), f(tot[2])]),
            ClassWeighting::SqrtInverse => Self([f(tot[0]).sqrt(), f(tot[1]).sqrt(), f(tot[2]).sqrt()]),
        }
    }
}

/// A sample with standardised features and the confidence pairs grouped by element.
struct Prepared {
    n: usize,
    low: Vec<f64>,
    high: Vec<f64>,
    targets: Vec<[f64; 3]>,
    /// Classification weight per element, normalised to sum to 1.
    omega: Vec<f64>,
    /// CSR offsets into `pair_targets`.
    pair_start: Vec<u32>,
    pair_targets: Vec<f64>,
}

fn prepare(model: &DualHeadModel, s: &TrainSample, cw: &ClassWeights) -> Result<Prepared> {
    let (l, h) = (model.config().low_dim, model.config().high_dim);
    let n = s.len();
    if s.low.len() != n * l || s.high.len() != n * h || s.weights.len() != n {
        return Err(Error::InvalidInput("training sample shape does not match the model".into()));
    }
    if s.conf_elements.len() != s.conf_targets.len() || s.conf_elements.iter().any(|&e| e as usize >= n) {
        return Err(Error::InvalidInput("confidence pairs reference missing elements".into()));
    }
    let mut omega: Vec<f64> = s.targets.iter().zip(&s.weights).map(|(t, w)| w * (0..3).map(|c| t[c] * cw.0[c]).sum::<f64>()).collect();
    let total: f64 = omega.iter().sum();
    if total > 0.0 {
        omega.iter_mut().for_each(|o| *o /= total);
    }
    let mut pair_start = vec![0u32; n + 1];
    for &e in &s.conf_elements {
        pair_start[e as usize + 1] += 1;
    }
    for i in 0..n {
        pair_start[i + 1] += pair_start[i];
    }
    let mut fill = pair_start.clone();
    let mut pair_targets = vec![0.0; s.conf_targets.len()];
    for (&e, &t) in s.conf_elements.iter().zip(&s.conf_targets) {
        pair_targets[fill[e as usize] as usize] = t;
        fill[e as usize] += 1;
    }
    Ok(Prepared {
        n,
        low: model.standardize_low(&s.low),
        high: model.standardize_high(&s.high),
        targets: s.targets.clone(),
        omega,
        pair_start,
        pair_targets,
    })
}

/// Loss terms of one sample.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub cls: f64,
    pub conf: f64,
    pub total: f64,
}

/// Loss of one prepared sample and, when `grad` is given, its gradient
/// scaled by `scale` accumulated into `grad`.
fn sample_loss(lay: &Layout, model: &DualHeadModel, p: &[f64], s: &Prepared, scale: f64, grad: Option<&mut [f64]>) -> LossParts {
    let alpha = model.alpha();
    let src = model.config().conf_source;
    let (l, h) = (lay.l, lay.h);
    let n_pairs = s.pair_targets.len();
    let want_grad = grad.is_some();
    let chunks: Vec<(f64, f64, Option<Vec<f64>>)> = (0..s.n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|k| {
            let (r0, r1) = (k * CHUNK, ((k + 1) * CHUNK).min(s.n));
            let m = r1 - r0;
            let fw = forward(lay, src, p, &s.low[r0 * l..r1 * l], &s.high[r0 * h..r1 * h], m);
            let (mut cls, mut conf) = (0.0, 0.0);
            let mut dlogits = vec![0.0; if want_grad { m * 3 } else { 0 }];
            let mut dzc = vec![0.0; if want_grad { m } else { 0 }];
            for i in 0..m {
                let e = r0 + i;
                let (y, pr, om) = (&s.targets[e], &fw.probs[i], s.omega[e]);
                if om > 0.0 {
                    let mut ce = 0.0;
                    let mut live = 0.0;
                    for c in 0..3 {
                        if y[c] > 0.0 {
                            ce -= y[c] * pr[c].max(LOG_CLAMP).ln();
                            if pr[c] >= LOG_CLAMP {
                                live += y[c];
                            }
                        }
                    }
                    cls += om * ce;
                    if want_grad {
                        for c in 0..3 {
                            let yl = if pr[c] >= LOG_CLAMP { y[c] } else { 0.0 };
                            dlogits[i * 3 + c] = scale * om * (pr[c] * live - yl);
                        }
                    }
                }
                let (a, b) = (s.pair_start[e] as usize, s.pair_start[e + 1] as usize);
                if a < b {
                    let chat = fw.conf[i];
                    let mut g = 0.0;
                    for &t in &s.pair_targets[a..b] {
                        conf += (t - chat) * (t - chat);
                        g += 2.0 * (chat - t);
                    }
                    if want_grad {
                        dzc[i] = scale * alpha * g / n_pairs as f64 * chat * (1.0 - chat);
                    }
                }
            }
            let g = want_grad.then(|| {
                let mut g = vec![0.0; lay.total];
                backward(lay, src, p, &fw, &s.low[r0 * l..r1 * l], &dlogits, &dzc, &mut g);
                g
            });
            (cls, conf, g)
        })
        .collect();
    let (mut cls, mut conf) = (0.0, 0.0);
    let mut grad = grad;
    for (c, f, g) in chunks {
        cls += c;
        conf += f;
        if let (Some(dst), Some(g)) = (grad.as_deref_mut(), g) {
            for (d, v) in dst.iter_mut().zip(&g) {
                *d += v;
            }
        }
    }
    let conf = if n_pairs > 0 { conf / n_pairs as f64 } else { 0.0 };
    LossParts { cls, conf, total: cls + alpha * conf }
}

/// Mean loss over a batch at parameters `params`, with its gradient. The
/// classification term uses `weights`; features are standardised with the
/// model's statistics.
pub fn loss_and_gradient(
    model: &DualHeadModel,
    params: &[f64],
    batch: &[TrainSample],
    weights: &ClassWeights,
) -> Result<(LossParts, Vec<f64>)> {
    let lay = model.layout();
    if params.len() != lay.total {
        return Err(Error::InvalidModel("parameter vector length mismatch".into()));
    }
    if batch.is_empty() {
        return Err(Error::EmptyInput("empty batch".into()));
    }
    let prepared = batch.iter().map(|s| prepare(model, s, weights)).collect::<Result<Vec<_>>>()?;
    let mut grad = vec![0.0; lay.total];
    let scale = 1.0 / batch.len() as f64;
    let mut acc = LossParts::default();
    for s in &prepared {
        let lp = sample_loss(&lay, model, params, s, scale, Some(&mut grad));
        acc.cls += lp.cls * scale;
        acc.conf += lp.conf * scale;
        acc.total += lp.total * scale;
    }
    Ok((acc, grad))
}

/// Current parameters widened to double precision.
pub fn model_params(model: &DualHeadModel) -> Vec<f64> {
    model.params_f64()
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn step(&mut self, p: &mut [f64], g: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..p.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * g[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * g[i] * g[i];
            p[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

/// Trains on pre-built samples. Standardisation is fitted on `train`, the
/// returned model is the snapshot with the lowest mean validation loss.
pub fn train_on_samples(mut model: DualHeadModel, train: &[TrainSample], val: &[TrainSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InsufficientData("training needs non-empty training and validation splits".into()));
    }
    let lows: Vec<&[f64]> = train.iter().map(|s| s.low.as_slice()).collect();
    let highs: Vec<&[f64]> = train.iter().map(|s| s.high.as_slice()).collect();
    model.fit_standardization(&lows, &highs);
    let cw = ClassWeights::from_samples(train, cfg.weighting);
    log::debug!("class weights {:?}", cw.0);
    let tr = train.iter().map(|s| prepare(&model, s, &cw)).collect::<Result<Vec<_>>>()?;
    let va = val.iter().map(|s| prepare(&model, s, &cw)).collect::<Result<Vec<_>>>()?;

    let lay = model.layout();
    let mut params = model.params_f64();
    let mut adam = Adam { m: vec![0.0; lay.total], v: vec![0.0; lay.total], t: 0 };
    let mut rng = rng::substream(cfg.seed, 7);
    let mut order: Vec<usize> = (0..tr.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let (mut best, mut best_epoch, mut best_params) = (f64::INFINITY, 0, params.clone());

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = LossParts::default();
        for batch in order.chunks(cfg.batch) {
            let scale = 1.0 / batch.len() as f64;
            let mut grad = vec![0.0; lay.total];
            for &i in batch {
                let lp = sample_loss(&lay, &model, &params, &tr[i], scale, Some(&mut grad));
                acc.cls += lp.cls;
                acc.conf += lp.conf;
                acc.total += lp.total;
            }
            if !acc.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingDiverged { epoch });
            }
            adam.step(&mut params, &grad, cfg.lr);
        }
        let k = tr.len() as f64;
        let val_loss = va.iter().map(|s| sample_loss(&lay, &model, &params, s, 1.0, None).total).sum::<f64>() / va.len() as f64;
        if !val_loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        let stats = EpochStats { epoch, train_loss: acc.total / k, train_cls: acc.cls / k, train_conf: acc.conf / k, val_loss };
        log::info!(
            "epoch {epoch}: train {:.5} (cls {:.5}, conf {:.5}) val {:.5}",
            stats.train_loss,
            stats.train_cls,
            stats.train_conf,
            val_loss
        );
        history.push(stats);
        if val_loss < best {
            best = val_loss;
            best_epoch = epoch;
            best_params.clone_from(&params);
        }
    }
    model.set_params_f64(&best_params);
    Ok(TrainOutcome { model, history, best_epoch })
}

/// Soft class targets per element from point labels.
fn element_targets(f: &FeatureSet, map: &PointCloud, scan: &PointCloud) -> Vec<[f64; 3]> {
    let mut t = vec![[0.0f64; 3]; f.len()];
    let mut add = |e: u32, l: ChangeClass| {
        if e != u32::MAX {
            t[e as usize][l.index()] += 1.0;
        }
    };
    for (i, &e) in f.map_point_elem.iter().enumerate() {
        add(e, map.label(i));
    }
    for (i, &e) in f.scan_point_elem.iter().enumerate() {
        add(e, scan.label(i));
    }
    for row in &mut t {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    t
}

/// Builds the training sample of one scan against a prepared map.
#[allow(clippy::too_many_arguments)]
fn build_sample(
    prepared: &PreparedMap,
    map: &PointCloud,
    map_nn: &NnTarget,
    scan: &PointCloud,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainSample> {
    let f = prepared.features(scan)?;
    let targets = element_targets(&f, map, scan);
    let mut r = rng::seeded(seed);

    // keep every element with a change, subsample the purely static ones
    let statics: Vec<usize> = (0..f.len()).filter(|&e| targets[e][0] >= 1.0).collect();
    let mut keep = vec![true; f.len()];
    let mut static_weight = 1.0;
    if statics.len() > cfg.max_static_elements {
        keep.iter_mut().enumerate().for_each(|(e, k)| *k = targets[e][0] < 1.0);
        for i in sample(&mut r, statics.len(), cfg.max_static_elements) {
            keep[statics[i]] = true;
        }
        static_weight = statics.len() as f64 / cfg.max_static_elements as f64;
    }
    let mut new_id = vec![u32::MAX; f.len()];
    let mut s = TrainSample::default();
    for e in (0..f.len()).filter(|&e| keep[e]) {
        new_id[e] = s.targets.len() as u32;
        s.low.extend_from_slice(f.low_row(e));
        s.high.extend_from_slice(f.high_row(e));
        s.targets.push(targets[e]);
        s.weights.push(if targets[e][0] >= 1.0 { static_weight } else { 1.0 });
    }

    // confidence supervision on points of kept elements
    let mut candidates: Vec<(bool, u32, u32)> = Vec::new();
    for (i, &e) in f.map_point_elem.iter().enumerate() {
        if e != u32::MAX && keep[e as usize] {
            candidates.push((false, i as u32, new_id[e as usize]));
        }
    }
    for (i, &e) in f.scan_point_elem.iter().enumerate() {
        if keep[e as usize] {
            candidates.push((true, i as u32, new_id[e as usize]));
        }
    }
    let count = cfg.conf_pairs.min(candidates.len());
    let mut picks = sample(&mut r, candidates.len(), count).into_vec();
    picks.sort_unstable();
    let scan_tree = KdTree::from_cloud(scan);
    let c = cfg.confidence;
    let dist: Vec<f64> = picks
        .par_iter()
        .map(|&k| {
            let (is_scan, i, _) = candidates[k];
            let hit = if is_scan {
                map_nn.nearest_within(scan.point(i as usize), c.tau_ocl)
            } else {
                scan_tree.nearest_within(map.point(i as usize), c.tau_ocl)
            };
            hit.map_or(f64::INFINITY, |(_, d)| d)
        })
        .collect();
    for (&k, &d) in picks.iter().zip(&dist) {
        s.conf_elements.push(candidates[k].2);
        s.conf_targets.push(c.eval(d));
    }
    Ok(s)
}

/// Training samples of one augmented pair, one per used scan frame.
pub fn samples_from_pair(pair: &AugmentedPair, model: &DualHeadModel, cfg: &TrainConfig, seed: u64) -> Result<Vec<TrainSample>> {
    if pair.scans.is_empty() {
        return Err(Error::EmptyInput("pair has no scans".into()));
    }
    let (ground, _) = segment_ground(&pair.map)?;
    let prepared = PreparedMap::new(&pair.map, ground, model.config().features)?;
    let map_nn = NnTarget::new(&pair.map, cfg.confidence.tau_vox)?;
    let frames: Vec<usize> = if cfg.frames_per_pair == 0 || cfg.frames_per_pair >= pair.scans.len() {
        (0..pair.scans.len()).collect()
    } else {
        let mut r = rng::seeded(rng::derive_seed(seed, 1));
        let mut f = sample(&mut r, pair.scans.len(), cfg.frames_per_pair).into_vec();
        f.sort_unstable();
        f
    };
    frames
        .iter()
        .map(|&j| build_sample(&prepared, &pair.map, &map_nn, &pair.scans[j], cfg, rng::derive_seed(seed, 100 + j as u64)))
        .collect()
}

/// Trains on augmented pairs. Pairs are split into training and validation
/// sets before sample construction, so both views of a pair stay together.
pub fn train(model: DualHeadModel, pairs: &[AugmentedPair], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.check_dims(LOW_DIM, HIGH_DIM)?;
    if pairs.len() < 2 {
        return Err(Error::InsufficientData("training needs at least two pairs".into()));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng::substream(cfg.seed, 3));
    let n_val = ((pairs.len() as f64 * cfg.val_fraction).round() as usize).clamp(1, pairs.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let build = |idx: &[usize]| -> Result<Vec<TrainSample>> {
        let mut out = Vec::new();
        for &i in idx {
            out.extend(samples_from_pair(&pairs[i], &model, cfg, rng::derive_seed(cfg.seed, 1000 + i as u64))?);
        }
        Ok(out)
    };
    let (train_s, val_s) = (build(train_idx)?, build(val_idx)?);
    log::info!("training on {} samples, validating on {}", train_s.len(), val_s.len());
    train_on_samples(model, &train_s, &val_s, cfg)
}

/// Random dataset helper for tests: draws uniform features in [-1, 1].
#[cfg(test)]
pub(crate) fn random_sample(n: usize, low_dim: usize, high_dim: usize, pairs: usize, seed: u64) -> TrainSample {
    use rand::Rng as _;
    let mut r = rng::seeded(seed);
    let low: Vec<f64> = (0..n * low_dim).map(|_| r.random_range(-1.0..1.0)).collect();
    let high: Vec<f64> = (0..n * high_dim).map(|_| r.random_range(-1.0..1.0)).collect();
    let targets = (0..n)
        .map(|_| {
            let a: [f64; 3] = [r.random(), r.random(), r.random()];
            let s: f64 = a.iter().sum();
            [a[0] / s, a[1] / s, a[2] / s]
        })
        .collect();
    let conf_elements = (0..pairs).map(|_| r.random_range(0..n as u32)).collect();
    let conf_targets = (0..pairs).map(|_| r.random()).collect();
    TrainSample { low, high, targets, weights: vec![1.0; n], conf_elements, conf_targets }
}
