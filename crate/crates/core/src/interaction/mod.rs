//! Per-agent action classifier with cross-agent attention.
//!
//! Each agent's aligned ROI map is concatenated with clip context and reduced
//! to `C` channels. Interaction layers then let every agent attend to every
//! agent (itself included) independently at each spatial location:
//!
//! ```text
//! Q, K, V   = 1x1 convs of F_i
//! A_ij      = softmax_j(<Q_i, K_j> / sqrt(d))
//! H~_i      = sum_j A_ij V_j
//! H_i       = dropout(conv(relu(norm(H~_i))))
//! F'_i      = F_i + H_i
//! ```
//!
//! A fully connected sigmoid head produces multi-label scores. Gradients are
//! computed by hand in [`backward`]; see the finite-difference tests.

mod loss;
mod train;

pub use loss::{focal_loss, focal_loss_logits, sigmoid, FocalLossSpec};
pub use train::{
    accuracy, toy_interaction_dataset, toy_shape, train_toy, TrainConfig, TrainReport,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernel::{self, Conv1x1Weights, Dropout, LayerNormParams};
use crate::model::{ActionScores, ClassId, TrackId};
use crate::tensor::{read_sections, write_sections, FeatureTensor};

/// An agent's context-reduced feature map, `1 x C x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentFeature {
    pub feat: FeatureTensor,
    pub track_id: TrackId,
    pub class_id: ClassId,
}

/// One interaction layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Hr2oWeights {
    pub q: Conv1x1Weights,
    pub k: Conv1x1Weights,
    pub v: Conv1x1Weights,
    pub norm: LayerNormParams,
    pub out: Conv1x1Weights,
}

impl Hr2oWeights {
    pub fn random(channels: usize, d: usize, norm: LayerNormParams, rng: &mut impl Rng) -> Self {
        Self {
            q: Conv1x1Weights::random(d, channels, 1.0, rng),
            k: Conv1x1Weights::random(d, channels, 1.0, rng),
            v: Conv1x1Weights::random(d, channels, 1.0, rng),
            norm,
            out: Conv1x1Weights::random(channels, d, 1.0, rng),
        }
    }

    /// Attention dimension.
    pub fn d(&self) -> usize {
        self.q.c_out
    }

    pub fn channels(&self) -> usize {
        self.q.c_in
    }

    fn validate(&self) -> Result<()> {
        let (c, d) = (self.channels(), self.d());
        let ok = d >= 1
            && [&self.k, &self.v].iter().all(|w| w.c_in == c && w.c_out == d)
            && self.out.c_in == d
            && self.out.c_out == c
            && self.norm.gain.len() == d
            && self.norm.bias.len() == d;
        if !ok {
            return Err(Error::shape(format!(
                "inconsistent interaction layer shapes (C = {c}, d = {d})"
            )));
        }
        Ok(())
    }
}

/// Fully connected head over the flattened `C x H x W` map.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub n_actions: usize,
    pub in_len: usize,
    /// Row-major `n_actions x in_len`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl HeadWeights {
    pub fn zeros(n_actions: usize, in_len: usize) -> Self {
        Self {
            n_actions,
            in_len,
            w: vec![0.0; n_actions * in_len],
            b: vec![0.0; n_actions],
        }
    }

    pub fn random(n_actions: usize, in_len: usize, rng: &mut impl Rng) -> Self {
        let s = 1.0 / (in_len.max(1) as f64).sqrt();
        Self {
            n_actions,
            in_len,
            w: (0..n_actions * in_len).map(|_| rng.gen_range(-s..=s)).collect(),
            b: vec![0.0; n_actions],
        }
    }

    pub fn logits(&self, flat: &[f64]) -> Result<Vec<f64>> {
        if flat.len() != self.in_len {
            return Err(Error::shape(format!(
                "head expects {} inputs, got {}",
                self.in_len,
                flat.len()
            )));
        }
        Ok((0..self.n_actions)
            .map(|k| {
                let row = &self.w[k * self.in_len..(k + 1) * self.in_len];
                self.b[k] + row.iter().zip(flat).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect())
    }
}

pub fn agent_context_reduce(
    agent_roi: &FeatureTensor,
    clip_context: &FeatureTensor,
    w_reduce: &Conv1x1Weights,
) -> Result<FeatureTensor> {
    if agent_roi.t() != 1 || clip_context.t() != 1 {
        return Err(Error::shape("agent and context maps must have T = 1"));
    }
    if agent_roi.h() != clip_context.h() || agent_roi.w() != clip_context.w() {
        return Err(Error::shape(format!(
            "agent map {:?} and context {:?} differ spatially",
            agent_roi.dims(),
            clip_context.dims()
        )));
    }
    let joined = FeatureTensor::concat_channels(&[agent_roi, clip_context])?;
    kernel::conv1x1(&joined, w_reduce)
}

/// Channel-contiguous copy of a `T = 1` map: index `pos * C + c`.
fn to_pos_major(feat: &FeatureTensor) -> Vec<f64> {
    let (c, p) = (feat.c(), feat.h() * feat.w());
    let src = feat.data();
    let mut out = vec![0.0; c * p];
    for ci in 0..c {
        for pos in 0..p {
            out[pos * c + ci] = src[ci * p + pos];
        }
    }
    out
}

fn from_pos_major(data: &[f64], c: usize, h: usize, w: usize) -> FeatureTensor {
    FeatureTensor::from_fn([1, c, h, w], |_, ci, y, x| data[(y * w + x) * c + ci])
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Accumulates `grad += dy x^T` and optionally `dx += W^T dy`.
fn conv_backward(w: &Conv1x1Weights, x: &[f64], dy: &[f64], grad: &mut Conv1x1Weights, dx: Option<&mut [f64]>) {
    for o in 0..w.c_out {
        let g = dy[o];
        if g == 0.0 {
            continue;
        }
        grad.b[o] += g;
        let row = &mut grad.w[o * w.c_in..(o + 1) * w.c_in];
        for (r, xi) in row.iter_mut().zip(x) {
            *r += g * xi;
        }
    }
    if let Some(dx) = dx {
        for o in 0..w.c_out {
            let g = dy[o];
            if g == 0.0 {
                continue;
            }
            for (i, d) in dx.iter_mut().enumerate().take(w.c_in) {
                *d += g * w.weight(o, i);
            }
        }
    }
}

/// Intermediate values of one layer, all channel-contiguous per agent.
#[derive(Debug, Clone)]
struct LayerTape {
    input: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// `[pos][i][j]`.
    att: Vec<f64>,
    aggregated: Vec<Vec<f64>>,
    normed: Vec<Vec<f64>>,
    /// `1 / sqrt(var + eps)` per agent and position.
    inv_std: Vec<Vec<f64>>,
    activated: Vec<Vec<f64>>,
    mask: Vec<Vec<f64>>,
}

fn layer_forward(
    w: &Hr2oWeights,
    input: Vec<Vec<f64>>,
    positions: usize,
    dropout: Dropout,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Vec<f64>>, LayerTape)> {
    let n = input.len();
    let (c, d) = (w.channels(), w.d());
    let project = |cw: &Conv1x1Weights| -> Vec<Vec<f64>> {
        input
            .iter()
            .map(|f| {
                let mut out = vec![0.0; positions * d];
                for pos in 0..positions {
                    cw.apply(&f[pos * c..(pos + 1) * c], &mut out[pos * d..(pos + 1) * d]);
                }
                out
            })
            .collect()
    };
    let (q, k, v) = (project(&w.q), project(&w.k), project(&w.v));
    let scale = 1.0 / (d as f64).sqrt();

    let mut att = vec![0.0; positions * n * n];
    let mut aggregated = vec![vec![0.0; positions * d]; n];
    for pos in 0..positions {
        let r = pos * d..(pos + 1) * d;
        let at = |a: &[f64]| -> Vec<f64> { a[r.clone()].to_vec() };
        for i in 0..n {
            let qi = at(&q[i]);
            let logits: Vec<f64> = (0..n).map(|j| dot(&qi, &k[j][r.clone()]) * scale).collect();
            let row = kernel::softmax(&logits)?;
            let h = &mut aggregated[i][pos * d..(pos + 1) * d];
            for (j, a) in row.iter().enumerate() {
                for (hv, vv) in h.iter_mut().zip(&v[j][r.clone()]) {
                    *hv += a * vv;
                }
            }
            att[(pos * n + i) * n..(pos * n + i + 1) * n].copy_from_slice(&row);
        }
    }

    let mut normed = vec![vec![0.0; positions * d]; n];
    let mut inv_std = vec![vec![0.0; positions]; n];
    let mut activated = vec![vec![0.0; positions * d]; n];
    let mut mask = Vec::with_capacity(n);
    let mut output = input.clone();
    for i in 0..n {
        let m = dropout.mask(positions * c, rng);
        for pos in 0..positions {
            let h = &aggregated[i][pos * d..(pos + 1) * d];
            let mean = h.iter().sum::<f64>() / d as f64;
            let var = h.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + w.norm.eps).sqrt();
            inv_std[i][pos] = inv;
            for ch in 0..d {
                let nv = (h[ch] - mean) * inv;
                normed[i][pos * d + ch] = nv;
                activated[i][pos * d + ch] = (w.norm.gain[ch] * nv + w.norm.bias[ch]).max(0.0);
            }
            let mut o = vec![0.0; c];
            w.out.apply(&activated[i][pos * d..(pos + 1) * d], &mut o);
            for ch in 0..c {
                output[i][pos * c + ch] += m[pos * c + ch] * o[ch];
            }
        }
        mask.push(m);
    }
    let tape = LayerTape {
        input,
        q,
        k,
        v,
        att,
        aggregated,
        normed,
        inv_std,
        activated,
        mask,
    };
    Ok((output, tape))
}

/// Backpropagates `d_out` through one layer, accumulating into `grad` and
/// returning the gradient with respect to the layer input.
fn layer_backward(w: &Hr2oWeights, tape: &LayerTape, d_out: &[Vec<f64>], grad: &mut Hr2oWeights) -> Vec<Vec<f64>> {
    let n = tape.input.len();
    let (c, d) = (w.channels(), w.d());
    let positions = tape.inv_std[0].len();
    let scale = 1.0 / (d as f64).sqrt();
    let mut d_in = d_out.to_vec();
    let mut d_agg = vec![vec![0.0; positions * d]; n];

    for i in 0..n {
        for pos in 0..positions {
            let pc = pos * c..(pos + 1) * c;
            let pd = pos * d..(pos + 1) * d;
            let d_o: Vec<f64> = d_out[i][pc.clone()]
                .iter()
                .zip(&tape.mask[i][pc])
                .map(|(g, m)| g * m)
                .collect();
            let act = &tape.activated[i][pd.clone()];
            let mut d_act = vec![0.0; d];
            conv_backward(&w.out, act, &d_o, &mut grad.out, Some(&mut d_act));
            // relu then affine
            let normed = &tape.normed[i][pd.clone()];
            let mut d_norm = vec![0.0; d];
            for ch in 0..d {
                if act[ch] <= 0.0 {
                    continue;
                }
                grad.norm.gain[ch] += d_act[ch] * normed[ch];
                grad.norm.bias[ch] += d_act[ch];
                d_norm[ch] = d_act[ch] * w.norm.gain[ch];
            }
            let mean_dn = d_norm.iter().sum::<f64>() / d as f64;
            let mean_dnn = dot(&d_norm, normed) / d as f64;
            let inv = tape.inv_std[i][pos];
            for ch in 0..d {
                d_agg[i][pos * d + ch] = inv * (d_norm[ch] - mean_dn - normed[ch] * mean_dnn);
            }
        }
    }

    let mut d_q = vec![vec![0.0; positions * d]; n];
    let mut d_k = vec![vec![0.0; positions * d]; n];
    let mut d_v = vec![vec![0.0; positions * d]; n];
    for pos in 0..positions {
        let at = |a: &Vec<f64>| a[pos * d..(pos + 1) * d].to_vec();
        for i in 0..n {
            let row = &tape.att[(pos * n + i) * n..(pos * n + i + 1) * n];
            let dh = at(&d_agg[i]);
            let d_att: Vec<f64> = (0..n).map(|j| dot(&dh, &tape.v[j][pos * d..(pos + 1) * d])).collect();
            let weighted = dot(row, &d_att);
            for j in 0..n {
                for ch in 0..d {
                    d_v[j][pos * d + ch] += row[j] * dh[ch];
                }
                let ds = row[j] * (d_att[j] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                for ch in 0..d {
                    d_q[i][pos * d + ch] += ds * tape.k[j][pos * d + ch];
                    d_k[j][pos * d + ch] += ds * tape.q[i][pos * d + ch];
                }
            }
        }
    }

    for i in 0..n {
        for pos in 0..positions {
            let x = &tape.input[i][pos * c..(pos + 1) * c];
            let dx = &mut d_in[i][pos * c..(pos + 1) * c];
            let pd = pos * d..(pos + 1) * d;
            conv_backward(&w.q, x, &d_q[i][pd.clone()], &mut grad.q, Some(&mut *dx));
            conv_backward(&w.k, x, &d_k[i][pd.clone()], &mut grad.k, Some(&mut *dx));
            conv_backward(&w.v, x, &d_v[i][pd], &mut grad.v, Some(dx));
        }
    }
    d_in
}

/// Result of a single interaction layer with its attention weights.
#[derive(Debug, Clone)]
pub struct Hr2oTrace {
    /// `F'_i` per agent.
    pub outputs: Vec<FeatureTensor>,
    /// Aggregated values `H~_i` per agent, `1 x d x H x W`.
    pub aggregated: Vec<FeatureTensor>,
    attention: Vec<f64>,
    n: usize,
    width: usize,
}

impl Hr2oTrace {
    /// Weight agent `i` puts on agent `j` at `(y, x)`.
    pub fn attention(&self, y: usize, x: usize, i: usize, j: usize) -> f64 {
        let pos = y * self.width + x;
        self.attention[(pos * self.n + i) * self.n + j]
    }
}

fn check_agents(agents: &[AgentFeature], channels: usize) -> Result<[usize; 4]> {
    let first = agents.first().ok_or(Error::Empty("agent list"))?;
    let dims = first.feat.dims();
    if dims[0] != 1 || dims[1] != channels {
        return Err(Error::shape(format!(
            "agent map {dims:?} does not have T = 1 and {channels} channels"
        )));
    }
    for a in agents {
        if a.feat.dims() != dims {
            return Err(Error::shape(format!(
                "agent maps differ: {:?} vs {dims:?}",
                a.feat.dims()
            )));
        }
    }
    Ok(dims)
}

pub fn hr2o_forward_traced(
    agents: &[AgentFeature],
    w: &Hr2oWeights,
    dropout: Dropout,
    seed: u64,
) -> Result<Hr2oTrace> {
    w.validate()?;
    let [_, c, h, wd] = check_agents(agents, w.channels())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input: Vec<_> = agents.iter().map(|a| to_pos_major(&a.feat)).collect();
    let (out, tape) = layer_forward(w, input, h * wd, dropout, &mut rng)?;
    Ok(Hr2oTrace {
        outputs: out.iter().map(|o| from_pos_major(o, c, h, wd)).collect(),
        aggregated: tape
            .aggregated
            .iter()
            .map(|a| from_pos_major(a, w.d(), h, wd))
            .collect(),
        attention: tape.att,
        n: agents.len(),
        width: wd,
    })
}

/// One interaction layer over all agents of a clip.
pub fn hr2o_forward(
    agents: &[AgentFeature],
    w: &Hr2oWeights,
    dropout: Dropout,
    seed: u64,
) -> Result<Vec<FeatureTensor>> {
    Ok(hr2o_forward_traced(agents, w, dropout, seed)?.outputs)
}

pub fn classify(
    agent_out: &FeatureTensor,
    w: &HeadWeights,
    track_id: TrackId,
    key_frame_index: usize,
) -> Result<ActionScores> {
    let logits = w.logits(agent_out.data())?;
    ActionScores::new(track_id, key_frame_index, logits.into_iter().map(sigmoid).collect())
}

/// Architecture of a [`ClassifierWeights`] set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassifierShape {
    pub roi_channels: usize,
    pub context_channels: usize,
    pub channels: usize,
    pub attention_dim: usize,
    pub depth: usize,
    pub n_actions: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ClassifierShape {
    fn validate(&self) -> Result<()> {
        let sizes = [
            self.roi_channels,
            self.channels,
            self.attention_dim,
            self.n_actions,
            self.out_h,
            self.out_w,
        ];
        if sizes.contains(&0) {
            return Err(Error::invalid(format!("zero-sized classifier dimension in {self:?}")));
        }
        Ok(())
    }

    fn to_vec(self) -> Vec<f64> {
        [
            self.roi_channels,
            self.context_channels,
            self.channels,
            self.attention_dim,
            self.depth,
            self.n_actions,
            self.out_h,
            self.out_w,
        ]
        .iter()
        .map(|v| *v as f64)
        .collect()
    }

    fn from_slice(v: &[f64]) -> Result<Self> {
        let ints: Vec<usize> = v
            .iter()
            .map(|x| {
                if *x >= 0.0 && x.fract() == 0.0 {
                    Ok(*x as usize)
                } else {
                    Err(Error::Format(format!("bad shape entry {x}")))
                }
            })
            .collect::<Result<_>>()?;
        let [roi_channels, context_channels, channels, attention_dim, depth, n_actions, out_h, out_w] = ints[..] else {
            return Err(Error::Format(format!("shape record has {} entries", v.len())));
        };
        Ok(Self {
            roi_channels,
            context_channels,
            channels,
            attention_dim,
            depth,
            n_actions,
            out_h,
            out_w,
        })
    }
}

/// All trainable parameters of the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierWeights {
    pub shape: ClassifierShape,
    pub reduce: Conv1x1Weights,
    pub layers: Vec<Hr2oWeights>,
    pub head: HeadWeights,
}

impl ClassifierWeights {
    pub fn init(shape: ClassifierShape, norm_eps: f64, norm_gain: f64, norm_bias: f64, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = shape.attention_dim;
        let reduce = Conv1x1Weights::random(shape.channels, shape.roi_channels + shape.context_channels, 1.0, &mut rng);
        let layers = (0..shape.depth)
            .map(|_| {
                let norm = LayerNormParams {
                    eps: norm_eps,
                    gain: vec![norm_gain; d],
                    bias: vec![norm_bias; d],
                };
                Hr2oWeights::random(shape.channels, d, norm, &mut rng)
            })
            .collect();
        let head = HeadWeights::random(shape.n_actions, shape.channels * shape.out_h * shape.out_w, &mut rng);
        Ok(Self {
            shape,
            reduce,
            layers,
            head,
        })
    }

    /// Same architecture, every parameter zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for seg in z.segments_mut() {
            seg.1.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    /// Named parameter vectors in a fixed order.
    pub fn segments(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out = vec![
            ("reduce.w".to_string(), &self.reduce.w),
            ("reduce.b".to_string(), &self.reduce.b),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, conv) in [("q", &layer.q), ("k", &layer.k), ("v", &layer.v), ("out", &layer.out)] {
                out.push((format!("layer{l}.{name}.w"), &conv.w));
                out.push((format!("layer{l}.{name}.b"), &conv.b));
            }
            out.push((format!("layer{l}.norm.gain"), &layer.norm.gain));
            out.push((format!("layer{l}.norm.bias"), &layer.norm.bias));
        }
        out.push(("head.w".to_string(), &self.head.w));
        out.push(("head.b".to_string(), &self.head.b));
        out
    }

    pub fn segments_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out = vec![
            ("reduce.w".to_string(), &mut self.reduce.w),
            ("reduce.b".to_string(), &mut self.reduce.b),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let Hr2oWeights { q, k, v, norm, out: o } = layer;
            for (name, conv) in [("q", q), ("k", k), ("v", v), ("out", o)] {
                out.push((format!("layer{l}.{name}.w"), &mut conv.w));
                out.push((format!("layer{l}.{name}.b"), &mut conv.b));
            }
            out.push((format!("layer{l}.norm.gain"), &mut norm.gain));
            out.push((format!("layer{l}.norm.bias"), &mut norm.bias));
        }
        out.push(("head.w".to_string(), &mut self.head.w));
        out.push(("head.b".to_string(), &mut self.head.b));
        out
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.segments().into_iter().flat_map(|(_, v)| v.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.segments().iter().map(|s| s.1.len()).sum();
        if flat.len() != total {
            return Err(Error::shape(format!("{} values for {total} parameters", flat.len())));
        }
        let mut rest = flat;
        for (_, seg) in self.segments_mut() {
            let (head, tail) = rest.split_at(seg.len());
            seg.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    pub fn norm_eps(&self) -> f64 {
        self.layers.first().map_or(kernel::LAYER_NORM_EPS, |l| l.norm.eps)
    }

    /// Writes the weights as named sections of the tensor container.
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut tensors = vec![(
            "shape".to_string(),
            FeatureTensor::from_vec([1, 1, 1, 8], self.shape.to_vec())?,
        )];
        tensors.push((
            "norm.eps".to_string(),
            FeatureTensor::from_vec([1, 1, 1, 1], vec![self.norm_eps()])?,
        ));
        for (name, seg) in self.segments() {
            tensors.push((name, FeatureTensor::from_vec([1, 1, 1, seg.len()], seg.clone())?));
        }
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_sections(file, tensors.iter().map(|(n, t)| (n.as_str(), t)))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let sections = read_sections(file)?;
        let find = |name: &str| -> Result<&FeatureTensor> {
            sections
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format(format!("weights file lacks section `{name}`")))
        };
        let shape = ClassifierShape::from_slice(find("shape")?.data())?;
        let eps = find("norm.eps")?.data()[0];
        let mut w = Self::init(shape, eps, 1.0, 0.0, 0)?;
        let mut flat = Vec::new();
        for (name, seg) in w.segments() {
            let t = find(&name)?;
            if t.len() != seg.len() {
                return Err(Error::Format(format!(
                    "section `{name}` has {} values, expected {}",
                    t.len(),
                    seg.len()
                )));
            }
            flat.extend_from_slice(t.data());
        }
        w.set_flat(&flat)?;
        Ok(w)
    }
}

/// Inputs for one clip: per-agent aligned ROI maps plus shared context.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipSample {
    pub rois: Vec<FeatureTensor>,
    pub context: FeatureTensor,
    /// Binary multi-label targets per agent (empty for inference).
    pub targets: Vec<Vec<f64>>,
}

impl ClipSample {
    /// Sections `roi0..`, `context` and, when labelled, `targets` as a
    /// `1 x 1 x N x A` tensor.
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut tensors: Vec<(String, FeatureTensor)> =
            self.rois.iter().enumerate().map(|(i, r)| (format!("roi{i}"), r.clone())).collect();
        tensors.push(("context".into(), self.context.clone()));
        if !self.targets.is_empty() {
            let a = self.targets[0].len();
            if self.targets.iter().any(|t| t.len() != a) {
                return Err(Error::shape("target vectors differ in length"));
            }
            let flat = self.targets.concat();
            tensors.push(("targets".into(), FeatureTensor::from_vec([1, 1, self.targets.len(), a], flat)?));
        }
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_sections(file, tensors.iter().map(|(n, t)| (n.as_str(), t)))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut rois = Vec::new();
        let mut context = None;
        let mut targets = Vec::new();
        for (name, t) in read_sections(file)? {
            match name.as_str() {
                "context" => context = Some(t),
                "targets" => targets = t.data().chunks(t.w().max(1)).map(<[f64]>::to_vec).collect(),
                n if n.starts_with("roi") => rois.push(t),
                other => return Err(Error::Format(format!("unexpected clip section `{other}`"))),
            }
        }
        Ok(Self {
            rois,
            context: context.ok_or_else(|| Error::Format("clip file lacks `context`".into()))?,
            targets,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    pub dropout: Dropout,
    pub seed: u64,
    /// When false the interaction term is forced to zero (`F'_i = F_i`).
    pub interaction: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            dropout: Dropout::disabled(),
            seed: 0,
            interaction: true,
        }
    }
}

/// Everything [`backward`] needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    pub logits: Vec<Vec<f64>>,
    reduce_inputs: Vec<Vec<f64>>,
    layers: Vec<LayerTape>,
    features: Vec<Vec<f64>>,
    positions: usize,
}

impl ForwardTape {
    pub fn scores(&self) -> Vec<Vec<f64>> {
        self.logits.iter().map(|l| l.iter().map(|z| sigmoid(*z)).collect()).collect()
    }
}

pub fn forward(w: &ClassifierWeights, sample: &ClipSample, opts: &ForwardOptions) -> Result<ForwardTape> {
    let s = w.shape;
    let roi_dims = [1, s.roi_channels, s.out_h, s.out_w];
    let ctx_dims = [1, s.context_channels, s.out_h, s.out_w];
    if sample.rois.is_empty() {
        return Err(Error::Empty("clip agents"));
    }
    if let Some(bad) = sample.rois.iter().find(|r| r.dims() != roi_dims) {
        return Err(Error::shape(format!("agent ROI {:?}, expected {roi_dims:?}", bad.dims())));
    }
    if sample.context.dims() != ctx_dims {
        return Err(Error::shape(format!(
            "clip context {:?}, expected {ctx_dims:?}",
            sample.context.dims()
        )));
    }
    let positions = s.out_h * s.out_w;
    let ctx = to_pos_major(&sample.context);
    let (cr, cc, c) = (s.roi_channels, s.context_channels, s.channels);
    let mut reduce_inputs = Vec::with_capacity(sample.rois.len());
    let mut features = Vec::with_capacity(sample.rois.len());
    for roi in &sample.rois {
        let r = to_pos_major(roi);
        let mut x = Vec::with_capacity(positions * (cr + cc));
        for pos in 0..positions {
            x.extend_from_slice(&r[pos * cr..(pos + 1) * cr]);
            x.extend_from_slice(&ctx[pos * cc..(pos + 1) * cc]);
        }
        let mut f = vec![0.0; positions * c];
        for pos in 0..positions {
            w.reduce.apply(&x[pos * (cr + cc)..(pos + 1) * (cr + cc)], &mut f[pos * c..(pos + 1) * c]);
        }
        reduce_inputs.push(x);
        features.push(f);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut layers = Vec::new();
    if opts.interaction {
        for layer in &w.layers {
            let (out, tape) = layer_forward(layer, features, positions, opts.dropout, &mut rng)?;
            layers.push(tape);
            features = out;
        }
    }
    let mut logits = Vec::with_capacity(features.len());
    for f in &features {
        // head flattens channel-major, like the tensor layout
        let mut flat = vec![0.0; c * positions];
        for pos in 0..positions {
            for ch in 0..c {
                flat[ch * positions + pos] = f[pos * c + ch];
            }
        }
        logits.push(w.head.logits(&flat)?);
    }
    Ok(ForwardTape {
        logits,
        reduce_inputs,
        layers,
        features,
        positions,
    })
}

/// Gradients of a scalar loss with respect to every weight, given the loss
/// gradient with respect to each agent's logits.
pub fn backward(w: &ClassifierWeights, tape: &ForwardTape, d_logits: &[Vec<f64>]) -> Result<ClassifierWeights> {
    if d_logits.len() != tape.logits.len() || d_logits.iter().any(|d| d.len() != w.shape.n_actions) {
        return Err(Error::shape("logit gradient does not match forward pass"));
    }
    let mut grad = w.zeros_like();
    let (c, positions) = (w.shape.channels, tape.positions);
    let in_len = w.head.in_len;
    let mut d_feat: Vec<Vec<f64>> = Vec::with_capacity(d_logits.len());
    for (f, dz) in tape.features.iter().zip(d_logits) {
        let mut d = vec![0.0; positions * c];
        for (k, &g) in dz.iter().enumerate() {
            grad.head.b[k] += g;
            let row = &w.head.w[k * in_len..(k + 1) * in_len];
            let grow = &mut grad.head.w[k * in_len..(k + 1) * in_len];
            for pos in 0..positions {
                for ch in 0..c {
                    let idx = ch * positions + pos;
                    grow[idx] += g * f[pos * c + ch];
                    d[pos * c + ch] += g * row[idx];
                }
            }
        }
        d_feat.push(d);
    }
    for (l, tape_l) in tape.layers.iter().enumerate().rev() {
        d_feat = layer_backward(&w.layers[l], tape_l, &d_feat, &mut grad.layers[l]);
    }
    let xin = w.reduce.c_in;
    for (x, d) in tape.reduce_inputs.iter().zip(&d_feat) {
        for pos in 0..positions {
            conv_backward(
                &w.reduce,
                &x[pos * xin..(pos + 1) * xin],
                &d[pos * c..(pos + 1) * c],
                &mut grad.reduce,
                None,
            );
        }
    }
    Ok(grad)
}

/// Total focal loss of one clip and its gradient.
pub fn loss_and_grad(
    w: &ClassifierWeights,
    sample: &ClipSample,
    spec: &FocalLossSpec,
    opts: &ForwardOptions,
) -> Result<(f64, ClassifierWeights)> {
    let tape = forward(w, sample, opts)?;
    let (loss, d_logits) = clip_loss(&tape, sample, spec)?;
    Ok((loss, backward(w, &tape, &d_logits)?))
}

fn clip_loss(tape: &ForwardTape, sample: &ClipSample, spec: &FocalLossSpec) -> Result<(f64, Vec<Vec<f64>>)> {
    if sample.targets.len() != tape.logits.len() {
        return Err(Error::shape(format!(
            "{} agents but {} target vectors",
            tape.logits.len(),
            sample.targets.len()
        )));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(tape.logits.len());
    for (z, y) in tape.logits.iter().zip(&sample.targets) {
        let (l, g) = focal_loss_logits(z, y, spec)?;
        total += l;
        grads.push(g);
    }
    Ok((total, grads))
}

pub fn clip_loss_value(w: &ClassifierWeights, sample: &ClipSample, spec: &FocalLossSpec, opts: &ForwardOptions) -> Result<f64> {
    let tape = forward(w, sample, opts)?;
    Ok(clip_loss(&tape, sample, spec)?.0)
}

/// Scores every agent of a clip.
pub fn predict(w: &ClassifierWeights, sample: &ClipSample, opts: &ForwardOptions) -> Result<Vec<Vec<f64>>> {
    Ok(forward(w, sample, opts)?.scores())
}

/// Largest relative error between analytic and central-difference gradients
/// over all parameters, with the parameter name where it occurs.
pub fn gradient_check(
    w: &ClassifierWeights,
    sample: &ClipSample,
    spec: &FocalLossSpec,
    opts: &ForwardOptions,
    h: f64,
) -> Result<GradientCheck> {
    let (_, grad) = loss_and_grad(w, sample, spec, opts)?;
    let analytic = grad.to_flat();
    let base = w.to_flat();
    let names: Vec<(String, usize)> = w.segments().iter().map(|(n, s)| (n.clone(), s.len())).collect();
    let mut probe = w.clone();
    let mut worst = GradientCheck::default();
    let mut idx = 0;
    for (name, len) in names {
        for _ in 0..len {
            let mut p = base.clone();
            p[idx] = base[idx] + h;
            probe.set_flat(&p)?;
            let up = clip_loss_value(&probe, sample, spec, opts)?;
            p[idx] = base[idx] - h;
            probe.set_flat(&p)?;
            let dn = clip_loss_value(&probe, sample, spec, opts)?;
            let numeric = (up - dn) / (2.0 * h);
            let rel = relative_error(analytic[idx], numeric);
            if rel > worst.max_relative_error || worst.parameter.is_empty() {
                worst = GradientCheck {
                    max_relative_error: rel,
                    parameter: name.clone(),
                    analytic: analytic[idx],
                    numeric,
                };
            }
            idx += 1;
        }
    }
    Ok(worst)
}

/// `|a - n| / max(|a|, |n|)`, taken as 0 when both are below `1e-10`.
pub fn relative_error(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-10 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    pub parameter: String,
    pub analytic: f64,
    pub numeric: f64,
}

#[cfg(test)]
mod tests;
