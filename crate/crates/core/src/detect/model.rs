//! Dual-head classifier: a two-stage fully connected trunk with a 3-way
//! class head on the second stage and a logistic confidence head on the
//! first. The first stage sees only low-level features; the second adds the
//! high-level ones.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;

use super::features::{FeatureParams, HIGH_DIM, LOW_DIM};

const MAGIC: &[u8; 4] = b"CHMK";
const VERSION: u32 = 1;
const SQUAREPLUS_B: f64 = 4.0;
/// Rows per inference block.
const BLOCK: usize = 2048;

/// Trunk stage feeding the confidence head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConfSource {
    LowLevel,
    HighLevel,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub low_dim: usize,
    pub high_dim: usize,
    pub hidden: [usize; 2],
    /// Weight of the confidence loss.
    pub alpha: f64,
    pub conf_source: ConfSource,
    /// Feature settings the model was trained with.
    pub features: FeatureParams,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            low_dim: LOW_DIM,
            high_dim: HIGH_DIM,
            hidden: [64, 64],
            alpha: 0.01,
            conf_source: ConfSource::LowLevel,
            features: FeatureParams::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.low_dim == 0 || self.high_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidModel("zero-sized layer".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidParameter("alpha must be non-negative".into()));
        }
        Ok(())
    }

    /// Width of the layer feeding the confidence head.
    pub fn conf_width(&self) -> usize {
        match self.conf_source {
            ConfSource::LowLevel => self.hidden[0],
            ConfSource::HighLevel => self.hidden[1],
        }
    }
}

/// Offsets of each parameter block in the flat vector.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub l: usize,
    pub h: usize,
    pub h1: usize,
    pub h2: usize,
    pub hc: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub w3: usize,
    pub b3: usize,
    pub w4: usize,
    pub b4: usize,
    pub total: usize,
}

impl Layout {
    pub fn of(c: &ModelConfig) -> Self {
        let (l, h, h1, h2, hc) = (c.low_dim, c.high_dim, c.hidden[0], c.hidden[1], c.conf_width());
        let w1 = 0;
        let b1 = w1 + h1 * l;
        let w2 = b1 + h1;
        let b2 = w2 + h2 * (h1 + h);
        let w3 = b2 + h2;
        let b3 = w3 + 3 * h2;
        let w4 = b3 + 3;
        let b4 = w4 + hc;
        Self { l, h, h1, h2, hc, w1, b1, w2, b2, w3, b3, w4, b4, total: b4 + 1 }
    }
}

#[inline]
fn squareplus(x: f64) -> f64 {
    0.5 * (x + (x * x + SQUAREPLUS_B).sqrt())
}

#[inline]
fn squareplus_grad(x: f64) -> f64 {
    0.5 * (1.0 + x / (x * x + SQUAREPLUS_B).sqrt())
}

#[inline]
fn squareplus32(x: f32) -> f32 {
    0.5 * (x + (x * x + SQUAREPLUS_B as f32).sqrt())
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn softmax3(z: &[f64]) -> [f64; 3] {
    let m = z[0].max(z[1]).max(z[2]);
    let e = [(z[0] - m).exp(), (z[1] - m).exp(), (z[2] - m).exp()];
    let s = e[0] + e[1] + e[2];
    [e[0] / s, e[1] / s, e[2] / s]
}

/// `c = a * b + beta * c` for row-major `c` (m x n) and strided `a`, `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn dgemm(m: usize, k: usize, n: usize, a: &[f64], sa: (isize, isize), b: &[f64], sb: (isize, isize), c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: strides describe in-bounds views of a (m x k), b (k x n) and c (m x n).
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), sa.0, sa.1, b.as_ptr(), sb.0, sb.1, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

#[allow(clippy::too_many_arguments)]
fn sgemm(m: usize, k: usize, n: usize, a: &[f32], sa: (isize, isize), b: &[f32], sb: (isize, isize), c: &mut [f32], beta: f32) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: as in `dgemm`.
    unsafe {
        matrixmultiply::sgemm(m, k, n, 1.0, a.as_ptr(), sa.0, sa.1, b.as_ptr(), sb.0, sb.1, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

/// Activations of a training forward pass over `n` rows.
pub(crate) struct Forward {
    pub n: usize,
    pub z1: Vec<f64>,
    pub a1: Vec<f64>,
    /// `[a1 | high]`, n x (h1 + h).
    pub in2: Vec<f64>,
    pub z2: Vec<f64>,
    pub a2: Vec<f64>,
    pub probs: Vec<[f64; 3]>,
    pub conf: Vec<f64>,
}

/// Forward pass in f64 on standardized features.
pub(crate) fn forward(lay: &Layout, src: ConfSource, p: &[f64], low: &[f64], high: &[f64], n: usize) -> Forward {
    let Layout { l, h, h1, h2, .. } = *lay;
    let bias = |b: &[f64], width: usize| -> Vec<f64> {
        let mut v = Vec::with_capacity(n * width);
        for _ in 0..n {
            v.extend_from_slice(b);
        }
        v
    };
    let mut z1 = bias(&p[lay.b1..lay.b1 + h1], h1);
    dgemm(n, l, h1, low, (l as isize, 1), &p[lay.w1..lay.b1], (1, l as isize), &mut z1, 1.0);
    let a1: Vec<f64> = z1.iter().map(|&x| squareplus(x)).collect();
    let w = h1 + h;
    let mut in2 = vec![0.0; n * w];
    for r in 0..n {
        in2[r * w..r * w + h1].copy_from_slice(&a1[r * h1..(r + 1) * h1]);
        in2[r * w + h1..(r + 1) * w].copy_from_slice(&high[r * h..(r + 1) * h]);
    }
    let mut z2 = bias(&p[lay.b2..lay.b2 + h2], h2);
    dgemm(n, w, h2, &in2, (w as isize, 1), &p[lay.w2..lay.b2], (1, w as isize), &mut z2, 1.0);
    let a2: Vec<f64> = z2.iter().map(|&x| squareplus(x)).collect();
    let mut logits = bias(&p[lay.b3..lay.b3 + 3], 3);
    dgemm(n, h2, 3, &a2, (h2 as isize, 1), &p[lay.w3..lay.b3], (1, h2 as isize), &mut logits, 1.0);
    let probs = logits.chunks_exact(3).map(softmax3).collect();
    let (feed, hc) = match src {
        ConfSource::LowLevel => (&a1, h1),
        ConfSource::HighLevel => (&a2, h2),
    };
    let w4 = &p[lay.w4..lay.b4];
    let conf = feed
        .chunks_exact(hc)
        .map(|row| sigmoid(p[lay.b4] + row.iter().zip(w4).map(|(a, b)| a * b).sum::<f64>()))
        .collect();
    Forward { n, z1, a1, in2, z2, a2, probs, conf }
}

/// Accumulates parameter gradients into `grad` given loss gradients with
/// respect to the class logits (n x 3) and the confidence pre-activation.
pub(crate) fn backward(
    lay: &Layout,
    src: ConfSource,
    p: &[f64],
    fw: &Forward,
    low: &[f64],
    dlogits: &[f64],
    dzc: &[f64],
    grad: &mut [f64],
) {
    let Layout { l, h, h1, h2, hc, .. } = *lay;
    let n = fw.n;
    let w = h1 + h;
    // class head
    dgemm(3, n, h2, dlogits, (1, 3), &fw.a2, (h2 as isize, 1), &mut grad[lay.w3..lay.b3], 1.0);
    for r in 0..n {
        for c in 0..3 {
            grad[lay.b3 + c] += dlogits[r * 3 + c];
        }
    }
    let mut da2 = vec![0.0; n * h2];
    dgemm(n, 3, h2, dlogits, (3, 1), &p[lay.w3..lay.b3], (h2 as isize, 1), &mut da2, 0.0);

    // confidence head
    let feed = match src {
        ConfSource::LowLevel => &fw.a1,
        ConfSource::HighLevel => &fw.a2,
    };
    let w4 = &p[lay.w4..lay.b4];
    let mut dfeed = vec![0.0; n * hc];
    for r in 0..n {
        let g = dzc[r];
        if g == 0.0 {
            continue;
        }
        grad[lay.b4] += g;
        for j in 0..hc {
            grad[lay.w4 + j] += g * feed[r * hc + j];
            dfeed[r * hc + j] = g * w4[j];
        }
    }
    if src == ConfSource::HighLevel {
        for (d, f) in da2.iter_mut().zip(&dfeed) {
            *d += f;
        }
    }

    // second stage
    let dz2: Vec<f64> = da2.iter().zip(&fw.z2).map(|(d, &z)| d * squareplus_grad(z)).collect();
    dgemm(h2, n, w, &dz2, (1, h2 as isize), &fw.in2, (w as isize, 1), &mut grad[lay.w2..lay.b2], 1.0);
    for r in 0..n {
        for j in 0..h2 {
            grad[lay.b2 + j] += dz2[r * h2 + j];
        }
    }
    let mut din2 = vec![0.0; n * w];
    dgemm(n, h2, w, &dz2, (h2 as isize, 1), &p[lay.w2..lay.b2], (w as isize, 1), &mut din2, 0.0);

    // first stage
    let mut dz1 = vec![0.0; n * h1];
    for r in 0..n {
        for j in 0..h1 {
            let mut d = din2[r * w + j];
            if src == ConfSource::LowLevel {
                d += dfeed[r * hc + j];
            }
            dz1[r * h1 + j] = d * squareplus_grad(fw.z1[r * h1 + j]);
        }
    }
    dgemm(h1, n, l, &dz1, (1, h1 as isize), low, (l as isize, 1), &mut grad[lay.w1..lay.b1], 1.0);
    for r in 0..n {
        for j in 0..h1 {
            grad[lay.b1 + j] += dz1[r * h1 + j];
        }
    }
}

/// Class probabilities and confidence of one element.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElementOutput {
    pub probs: [f32; 3],
    pub conf: f32,
}

/// A trained or freshly initialised dual-head classifier. Parameters and
/// feature standardisation are stored in single precision, exactly as they
/// are persisted.
#[derive(Clone, Debug, PartialEq)]
pub struct DualHeadModel {
    config: ModelConfig,
    low_mean: Vec<f32>,
    low_scale: Vec<f32>,
    high_mean: Vec<f32>,
    high_scale: Vec<f32>,
    params: Vec<f32>,
}

impl DualHeadModel {
    /// Glorot-uniform weights, zero biases, identity standardisation.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let lay = Layout::of(&config);
        let mut params = vec![0f32; lay.total];
        let mut r = rng::seeded(seed);
        let mut fill = |start: usize, rows: usize, cols: usize| {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            for v in &mut params[start..start + rows * cols] {
                *v = r.random_range(-a..a) as f32;
            }
        };
        fill(lay.w1, lay.h1, lay.l);
        fill(lay.w2, lay.h2, lay.h1 + lay.h);
        fill(lay.w3, 3, lay.h2);
        fill(lay.w4, 1, lay.hc);
        Ok(Self {
            low_mean: vec![0.0; config.low_dim],
            low_scale: vec![1.0; config.low_dim],
            high_mean: vec![0.0; config.high_dim],
            high_scale: vec![1.0; config.high_dim],
            config,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn alpha(&self) -> f64 {
        self.config.alpha
    }

    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        let c = ModelConfig { alpha, ..self.config };
        c.validate()?;
        self.config = c;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub(crate) fn layout(&self) -> Layout {
        Layout::of(&self.config)
    }

    pub(crate) fn params_f64(&self) -> Vec<f64> {
        self.params.iter().map(|&v| v as f64).collect()
    }

    pub(crate) fn set_params_f64(&mut self, p: &[f64]) {
        self.params = p.iter().map(|&v| v as f32).collect();
    }

    /// Fits per-channel mean and scale from row-major feature matrices.
    pub(crate) fn fit_standardization(&mut self, low: &[&[f64]], high: &[&[f64]]) {
        fn fit(blocks: &[&[f64]], dim: usize) -> (Vec<f32>, Vec<f32>) {
            let mut n = 0usize;
            let mut sum = vec![0.0; dim];
            let mut sq = vec![0.0; dim];
            for b in blocks {
                for row in b.chunks_exact(dim) {
                    n += 1;
                    for (j, &v) in row.iter().enumerate() {
                        sum[j] += v;
                        sq[j] += v * v;
                    }
                }
            }
            let n = n.max(1) as f64;
            let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
            let scale = sq.iter().zip(&mean).map(|(s, m)| ((s / n - m * m).max(0.0).sqrt().max(1e-3)) as f32).collect();
            (mean.iter().map(|&m| m as f32).collect(), scale)
        }
        (self.low_mean, self.low_scale) = fit(low, self.config.low_dim);
        (self.high_mean, self.high_scale) = fit(high, self.config.high_dim);
    }

    fn standardize(x: &[f64], mean: &[f32], scale: &[f32]) -> Vec<f64> {
        let d = mean.len();
        x.iter().enumerate().map(|(i, &v)| (v - mean[i % d] as f64) / scale[i % d] as f64).collect()
    }

    pub(crate) fn standardize_low(&self, x: &[f64]) -> Vec<f64> {
        Self::standardize(x, &self.low_mean, &self.low_scale)
    }

    pub(crate) fn standardize_high(&self, x: &[f64]) -> Vec<f64> {
        Self::standardize(x, &self.high_mean, &self.high_scale)
    }

    /// Checks that feature matrices match the declared dimensions.
    pub fn check_dims(&self, low_dim: usize, high_dim: usize) -> Result<()> {
        if low_dim != self.config.low_dim || high_dim != self.config.high_dim {
            return Err(Error::InvalidModel(format!(
                "model expects {}+{} features, got {low_dim}+{high_dim}",
                self.config.low_dim, self.config.high_dim
            )));
        }
        Ok(())
    }

    /// Single-precision forward pass over `n` rows of raw features.
    pub fn predict(&self, low: &[f64], high: &[f64]) -> Result<Vec<ElementOutput>> {
        use rayon::prelude::*;
        let (l, h) = (self.config.low_dim, self.config.high_dim);
        if low.len() % l != 0 || high.len() % h != 0 || low.len() / l != high.len() / h {
            return Err(Error::InvalidModel("feature matrix shape does not match the model".into()));
        }
        let n = low.len() / l;
        let blocks: Vec<Vec<ElementOutput>> = (0..n.div_ceil(BLOCK))
            .into_par_iter()
            .map(|b| {
                let r0 = b * BLOCK;
                let r1 = (r0 + BLOCK).min(n);
                self.predict_block(&low[r0 * l..r1 * l], &high[r0 * h..r1 * h], r1 - r0)
            })
            .collect();
        Ok(blocks.concat())
    }

    fn predict_block(&self, low: &[f64], high: &[f64], n: usize) -> Vec<ElementOutput> {
        let lay = self.layout();
        let Layout { l, h, h1, h2, hc, .. } = lay;
        let p = &self.params;
        let w = h1 + h;
        let mut x = vec![0f32; n * l];
        for (i, v) in low.iter().enumerate() {
            x[i] = (*v as f32 - self.low_mean[i % l]) / self.low_scale[i % l];
        }
        let mut z1 = Vec::with_capacity(n * h1);
        for _ in 0..n {
            z1.extend_from_slice(&p[lay.b1..lay.b1 + h1]);
        }
        sgemm(n, l, h1, &x, (l as isize, 1), &p[lay.w1..lay.b1], (1, l as isize), &mut z1, 1.0);
        let mut in2 = vec![0f32; n * w];
        for r in 0..n {
            for j in 0..h1 {
                in2[r * w + j] = squareplus32(z1[r * h1 + j]);
            }
            for j in 0..h {
                in2[r * w + h1 + j] = (high[r * h + j] as f32 - self.high_mean[j]) / self.high_scale[j];
            }
        }
        let mut a2 = Vec::with_capacity(n * h2);
        for _ in 0..n {
            a2.extend_from_slice(&p[lay.b2..lay.b2 + h2]);
        }
        sgemm(n, w, h2, &in2, (w as isize, 1), &p[lay.w2..lay.b2], (1, w as isize), &mut a2, 1.0);
        for v in &mut a2 {
            *v = squareplus32(*v);
        }
        let w3 = &p[lay.w3..lay.b3];
        let w4 = &p[lay.w4..lay.b4];
        (0..n)
            .map(|r| {
                let a = &a2[r * h2..(r + 1) * h2];
                let mut z = [p[lay.b3], p[lay.b3 + 1], p[lay.b3 + 2]];
                for (c, zc) in z.iter_mut().enumerate() {
                    *zc += a.iter().zip(&w3[c * h2..(c + 1) * h2]).map(|(x, y)| x * y).sum::<f32>();
                }
                let m = z[0].max(z[1]).max(z[2]);
                let e = [(z[0] - m).exp(), (z[1] - m).exp(), (z[2] - m).exp()];
                let s = e[0] + e[1] + e[2];
                let feed = match self.config.conf_source {
                    ConfSource::LowLevel => &in2[r * w..r * w + h1],
                    ConfSource::HighLevel => a,
                };
                let zc = p[lay.b4] + feed.iter().zip(w4).map(|(x, y)| x * y).sum::<f32>();
                debug_assert_eq!(feed.len(), hc);
                ElementOutput { probs: [e[0] / s, e[1] / s, e[2] / s], conf: 1.0 / (1.0 + (-zc).exp()) }
            })
            .collect()
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let c = &self.config;
        let mut buf = Vec::with_capacity(64 + 4 * (self.params.len() + 2 * (c.low_dim + c.high_dim)));
        buf.extend_from_slice(MAGIC);
        for v in [VERSION, c.low_dim as u32, c.high_dim as u32, c.hidden[0] as u32, c.hidden[1] as u32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let src = match c.conf_source {
            ConfSource::LowLevel => 0u32,
            ConfSource::HighLevel => 1,
        };
        buf.extend_from_slice(&src.to_le_bytes());
        for v in [c.alpha, c.features.voxel_size, c.features.tau_ocl] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for block in [&self.low_mean, &self.low_scale, &self.high_mean, &self.high_scale] {
            for v in block.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for v in &self.params {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut buf = Vec::new();
        input.read_to_end(&mut buf)?;
        let bad = |m: &str| Error::InvalidModel(m.to_string());
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            let s = buf.get(*pos..*pos + n).ok_or_else(|| bad("truncated model file"))?;
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut u32s = [0u32; 6];
        for v in &mut u32s {
            *v = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        }
        let [version, low_dim, high_dim, h1, h2, src] = u32s;
        if version != VERSION {
            return Err(bad(&format!("unsupported model version {version}")));
        }
        let mut f64s = [0f64; 3];
        for v in &mut f64s {
            *v = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        }
        let conf_source = match src {
            0 => ConfSource::LowLevel,
            1 => ConfSource::HighLevel,
            _ => return Err(bad("bad confidence source")),
        };
        if low_dim > 4096 || high_dim > 4096 || h1 > 65536 || h2 > 65536 {
            return Err(bad("implausible layer sizes"));
        }
        let config = ModelConfig {
            low_dim: low_dim as usize,
            high_dim: high_dim as usize,
            hidden: [h1 as usize, h2 as usize],
            alpha: f64s[0],
            conf_source,
            features: FeatureParams { voxel_size: f64s[1], tau_ocl: f64s[2] },
        };
        config.validate().map_err(|e| bad(&e.to_string()))?;
        let floats = |pos: &mut usize, n: usize| -> Result<Vec<f32>> {
            let raw = take(pos, 4 * n)?;
            let v: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            if v.iter().any(|x| !x.is_finite()) {
                return Err(bad("non-finite value"));
            }
            Ok(v)
        };
        let (l, h) = (config.low_dim, config.high_dim);
        let low_mean = floats(&mut pos, l)?;
        let low_scale = floats(&mut pos, l)?;
        let high_mean = floats(&mut pos, h)?;
        let high_scale = floats(&mut pos, h)?;
        if low_scale.iter().chain(&high_scale).any(|&s| s <= 0.0) {
            return Err(bad("non-positive feature scale"));
        }
        let n = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        if n != Layout::of(&config).total {
            return Err(bad("parameter count does not match layer sizes"));
        }
        let params = floats(&mut pos, n)?;
        if pos != buf.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { config, low_mean, low_scale, high_mean, high_scale, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig { low_dim: 3, high_dim: 5, hidden: [4, 6], ..Default::default() }
    }

    fn random_rows(n: usize, d: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::seeded(seed);
        (0..n * d).map(|_| r.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn parameter_count_matches_dims() {
        let m = DualHeadModel::new(small(), 1).unwrap();
        assert_eq!(m.param_count(), 4 * 3 + 4 + 6 * 9 + 6 + 3 * 6 + 3 + 4 + 1);
        let hi = DualHeadModel::new(ModelConfig { conf_source: ConfSource::HighLevel, ..small() }, 1).unwrap();
        assert_eq!(hi.param_count(), m.param_count() + 2);
        assert!(DualHeadModel::new(ModelConfig { alpha: -1.0, ..small() }, 1).is_err());
    }

    #[test]
    fn single_and_double_precision_agree() {
        let mut m = DualHeadModel::new(small(), 2).unwrap();
        let (low, high) = (random_rows(50, 3, 3), random_rows(50, 5, 4));
        m.fit_standardization(&[&low], &[&high]);
        let out = m.predict(&low, &high).unwrap();
        let fw = forward(&m.layout(), m.config.conf_source, &m.params_f64(), &m.standardize_low(&low), &m.standardize_high(&high), 50);
        for (o, (p, c)) in out.iter().zip(fw.probs.iter().zip(&fw.conf)) {
            for k in 0..3 {
                assert!((o.probs[k] as f64 - p[k]).abs() < 1e-5);
            }
            assert!((o.conf as f64 - c).abs() < 1e-5);
            assert!((0.0..=1.0).contains(&o.conf));
        }
        assert!(m.predict(&low[..4], &high).is_err());
    }

    #[test]
    fn save_load_roundtrip() {
        let mut m = DualHeadModel::new(ModelConfig { conf_source: ConfSource::HighLevel, ..small() }, 5).unwrap();
        let (low, high) = (random_rows(10, 3, 6), random_rows(10, 5, 7));
        m.fit_standardization(&[&low], &[&high]);
        let mut bytes = Vec::new();
        m.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"CHMK");
        let back = DualHeadModel::read_from(&bytes[..]).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.predict(&low, &high).unwrap(), m.predict(&low, &high).unwrap());

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(DualHeadModel::read_from(&bad[..]), Err(Error::InvalidModel(_))));
        assert!(DualHeadModel::read_from(&bytes[..bytes.len() - 1]).is_err());
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(DualHeadModel::read_from(&v2[..]).is_err());
    }

    #[test]
    fn softmax_is_normalised_and_stable() {
        let p = softmax3(&[1000.0, 0.0, -1000.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(p[0], 1.0);
        let u = softmax3(&[0.3, 0.3, 0.3]);
        assert!((u[0] - 1.0 / 3.0).abs() < 1e-15);
    }
}
