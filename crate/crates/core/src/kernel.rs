//! Dense numeric kernels shared by fusion, alignment and attention.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::FeatureTensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Bilinear value at continuous `(x, y)` in temporal slice `t`. Grid
/// neighbours outside `[0, W-1] x [0, H-1]` contribute zero.
#[inline]
pub(crate) fn sample_at(feat: &FeatureTensor, t: usize, c: usize, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (h, w) = (feat.h() as i64, feat.w() as i64);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let px = |xi: i64, yi: i64| {
        if xi < 0 || yi < 0 || xi >= w || yi >= h {
            0.0
        } else {
            feat.get(t, c, yi as usize, xi as usize)
        }
    };
    (1.0 - fy) * ((1.0 - fx) * px(x0, y0) + fx * px(x0 + 1, y0))
        + fy * ((1.0 - fx) * px(x0, y0 + 1) + fx * px(x0 + 1, y0 + 1))
}

pub fn bilinear_sample(feat: &FeatureTensor, x: f64, y: f64, channel: usize) -> Result<f64> {
    if feat.t() != 1 {
        return Err(Error::shape(format!("expected T = 1, got {:?}", feat.dims())));
    }
    if channel >= feat.c() {
        return Err(Error::shape(format!(
            "channel {channel} out of range for C = {}",
            feat.c()
        )));
    }
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::invalid("non-finite sample coordinate"));
    }
    Ok(sample_at(feat, 0, channel, x, y))
}

pub fn upsample_nearest_2x(feat: &FeatureTensor) -> FeatureTensor {
    let [t, c, h, w] = feat.dims();
    FeatureTensor::from_fn([t, c, 2 * h, 2 * w], |ti, ci, y, x| {
        feat.get(ti, ci, y / 2, x / 2)
    })
}

/// Nearest 2x upsampling onto an explicit `(h, w)` grid: `out[y, x] =
/// in[y / 2, x / 2]`, clamped at the source edge so odd target sizes work.
pub fn upsample_nearest_to(feat: &FeatureTensor, h: usize, w: usize) -> Result<FeatureTensor> {
    let [t, c, sh, sw] = feat.dims();
    if sh == 0 || sw == 0 {
        return Err(Error::shape("cannot upsample an empty map"));
    }
    Ok(FeatureTensor::from_fn([t, c, h, w], |ti, ci, y, x| {
        feat.get(ti, ci, (y / 2).min(sh - 1), (x / 2).min(sw - 1))
    }))
}

/// 2x2 average pooling with floor output size.
pub fn avg_pool_2x(feat: &FeatureTensor) -> FeatureTensor {
    let [t, c, h, w] = feat.dims();
    FeatureTensor::from_fn([t, c, h / 2, w / 2], |ti, ci, y, x| {
        let (y0, x0) = (2 * y, 2 * x);
        0.25 * (feat.get(ti, ci, y0, x0)
            + feat.get(ti, ci, y0, x0 + 1)
            + feat.get(ti, ci, y0 + 1, x0)
            + feat.get(ti, ci, y0 + 1, x0 + 1))
    })
}

/// Adaptive average pooling to `(out_h, out_w)`; bin `i` spans
/// `[floor(i*H/out_h), ceil((i+1)*H/out_h))`.
pub fn adaptive_avg_pool(feat: &FeatureTensor, out_h: usize, out_w: usize) -> Result<FeatureTensor> {
    let [t, c, h, w] = feat.dims();
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::shape("adaptive pooling needs non-empty maps"));
    }
    let span = |i: usize, n: usize, out: usize| (i * n / out, ((i + 1) * n).div_ceil(out));
    Ok(FeatureTensor::from_fn([t, c, out_h, out_w], |ti, ci, oy, ox| {
        let (ya, yb) = span(oy, h, out_h);
        let (xa, xb) = span(ox, w, out_w);
        let mut sum = 0.0;
        for y in ya..yb {
            for x in xa..xb {
                sum += feat.get(ti, ci, y, x);
            }
        }
        sum / ((yb - ya) * (xb - xa)) as f64
    }))
}

/// Weights of a 1x1 convolution: `w` is row-major `c_out x c_in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv1x1Weights {
    pub c_out: usize,
    pub c_in: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Conv1x1Weights {
    pub fn new(c_out: usize, c_in: usize, w: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if w.len() != c_out * c_in || b.len() != c_out {
            return Err(Error::shape(format!(
                "conv {c_out}x{c_in} got {} weights and {} biases",
                w.len(),
                b.len()
            )));
        }
        if w.iter().chain(&b).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite conv weight"));
        }
        Ok(Self { c_out, c_in, w, b })
    }

    pub fn zeros(c_out: usize, c_in: usize) -> Self {
        Self {
            c_out,
            c_in,
            w: vec![0.0; c_out * c_in],
            b: vec![0.0; c_out],
        }
    }

    pub fn identity(c: usize) -> Self {
        let mut w = Self::zeros(c, c);
        for i in 0..c {
            w.w[i * c + i] = 1.0;
        }
        w
    }

    /// Uniform `[-s, s]` weights with `s = scale / sqrt(c_in)`, zero bias.
    pub fn random(c_out: usize, c_in: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let s = scale / (c_in.max(1) as f64).sqrt();
        Self {
            c_out,
            c_in,
            w: (0..c_out * c_in).map(|_| rng.gen_range(-s..=s)).collect(),
            b: vec![0.0; c_out],
        }
    }

    #[inline]
    pub fn weight(&self, o: usize, i: usize) -> f64 {
        self.w[o * self.c_in + i]
    }

    /// Applies the projection to a single channel vector.
    pub fn apply(&self, input: &[f64], out: &mut [f64]) {
        for (o, slot) in out.iter_mut().enumerate().take(self.c_out) {
            let row = &self.w[o * self.c_in..(o + 1) * self.c_in];
            *slot = self.b[o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

pub fn conv1x1(feat: &FeatureTensor, w: &Conv1x1Weights) -> Result<FeatureTensor> {
    let [t, c, h, wd] = feat.dims();
    if c != w.c_in {
        return Err(Error::shape(format!(
            "conv expects {} input channels, tensor has {c}",
            w.c_in
        )));
    }
    let plane = h * wd;
    let mut out = FeatureTensor::zeros([t, w.c_out, h, wd]);
    let src = feat.data();
    let dst = out.data_mut();
    for ti in 0..t {
        let sbase = ti * c * plane;
        let dbase = ti * w.c_out * plane;
        for o in 0..w.c_out {
            let orow = &mut dst[dbase + o * plane..dbase + (o + 1) * plane];
            orow.fill(w.b[o]);
            for i in 0..c {
                let k = w.weight(o, i);
                if k == 0.0 {
                    continue;
                }
                let irow = &src[sbase + i * plane..sbase + (i + 1) * plane];
                for (d, s) in orow.iter_mut().zip(irow) {
                    *d += k * s;
                }
            }
        }
    }
    Ok(out)
}

pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Empty("softmax input"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("softmax input must be finite"));
    }
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / z).collect())
}

/// Per-position normalization across channels with an affine `gain`/`bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub eps: f64,
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerNormParams {
    pub fn unit(channels: usize, eps: f64) -> Self {
        Self {
            eps,
            gain: vec![1.0; channels],
            bias: vec![0.0; channels],
        }
    }
}

pub fn layer_norm(feat: &FeatureTensor, eps: f64) -> FeatureTensor {
    let p = LayerNormParams::unit(feat.c(), eps);
    layer_norm_affine(feat, &p).expect("unit params match channel count")
}

pub fn layer_norm_affine(feat: &FeatureTensor, p: &LayerNormParams) -> Result<FeatureTensor> {
    let [t, c, h, w] = feat.dims();
    if p.gain.len() != c || p.bias.len() != c {
        return Err(Error::shape(format!(
            "layer norm params for {} channels applied to {c}",
            p.gain.len()
        )));
    }
    let mut out = feat.clone();
    let plane = h * w;
    let data = out.data_mut();
    for ti in 0..t {
        let base = ti * c * plane;
        for pos in 0..plane {
            let idx = |ci: usize| base + ci * plane + pos;
            let mean = (0..c).map(|ci| data[idx(ci)]).sum::<f64>() / c as f64;
            let var = (0..c).map(|ci| (data[idx(ci)] - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + p.eps).sqrt();
            for ci in 0..c {
                let i = idx(ci);
                data[i] = p.gain[ci] * (data[i] - mean) * inv + p.bias[ci];
            }
        }
    }
    Ok(out)
}

pub fn temporal_avg_pool(feats: &[FeatureTensor]) -> Result<FeatureTensor> {
    let first = feats.first().ok_or(Error::Empty("temporal pooling input"))?;
    if first.t() != 1 {
        return Err(Error::shape(format!(
            "temporal pooling expects T = 1 slices, got {:?}",
            first.dims()
        )));
    }
    let mut acc = vec![0.0; first.len()];
    for f in feats {
        if f.dims() != first.dims() {
            return Err(Error::shape(format!(
                "cannot pool {:?} with {:?}",
                f.dims(),
                first.dims()
            )));
        }
        for (a, v) in acc.iter_mut().zip(f.data()) {
            *a += v;
        }
    }
    let n = feats.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    FeatureTensor::from_vec(first.dims(), acc)
}

/// Averages a `T`-frame tensor over time into a `T = 1` tensor.
pub fn mean_over_time(feat: &FeatureTensor) -> Result<FeatureTensor> {
    let frames: Vec<_> = (0..feat.t()).map(|t| feat.frame(t)).collect::<Result<_>>()?;
    temporal_avg_pool(&frames)
}

/// Inverted dropout: kept entries are scaled by `1 / keep_prob`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    pub keep_prob: f64,
}

impl Dropout {
    pub fn disabled() -> Self {
        Self { keep_prob: 1.0 }
    }

    pub fn from_rate(rate: f64) -> Self {
        Self {
            keep_prob: 1.0 - rate,
        }
    }

    pub fn is_active(&self) -> bool {
        self.keep_prob < 1.0
    }

    /// Multiplicative mask: `0` or `1 / keep_prob` per element.
    pub fn mask(&self, len: usize, rng: &mut impl Rng) -> Vec<f64> {
        if !self.is_active() {
            return vec![1.0; len];
        }
        let scale = 1.0 / self.keep_prob;
        (0..len)
            .map(|_| if rng.gen::<f64>() < self.keep_prob { scale } else { 0.0 })
            .collect()
    }
}
