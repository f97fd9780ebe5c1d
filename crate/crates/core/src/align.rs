//! ROI alignment of tube boxes onto two-rate (slow/fast) feature stacks.
//!
//! [`keyframe_align`] pools each pathway over time and aligns the key-frame
//! box once. [`dynamic_roi_align`] instead aligns every frame's box to its own
//! temporal slice and pools afterwards, so a moving agent stays inside its
//! region of interest across the clip.

use crate::error::{Error, Result};
use crate::kernel::{self, sample_at};
use crate::model::{BoundingBox, Tubelet};
use crate::tensor::FeatureTensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiAlignSpec {
    pub out_h: usize,
    pub out_w: usize,
    /// Samples per bin along each axis.
    pub samples_per_bin: usize,
    /// Subtracted from box coordinates before sampling (0.5 gives the
    /// half-pixel-centred convention).
    pub coordinate_offset: f64,
}

impl Default for RoiAlignSpec {
    fn default() -> Self {
        Self {
            out_h: 7,
            out_w: 7,
            samples_per_bin: 2,
            coordinate_offset: 0.0,
        }
    }
}

impl RoiAlignSpec {
    pub fn new(out_h: usize, out_w: usize, samples_per_bin: usize, coordinate_offset: f64) -> Result<Self> {
        if out_h == 0 || out_w == 0 || samples_per_bin == 0 {
            return Err(Error::invalid("ROI output size and sampling must be >= 1"));
        }
        Ok(Self {
            out_h,
            out_w,
            samples_per_bin,
            coordinate_offset,
        })
    }
}

const MIN_ROI_AREA: f64 = 1e-6;

fn roi_align_slice(
    feat: &FeatureTensor,
    t: usize,
    bbox: &BoundingBox,
    spec: &RoiAlignSpec,
) -> Result<FeatureTensor> {
    if bbox.area() < MIN_ROI_AREA {
        return Err(Error::invalid(format!(
            "degenerate ROI {bbox:?} (area {})",
            bbox.area()
        )));
    }
    let (oh, ow, s) = (spec.out_h, spec.out_w, spec.samples_per_bin);
    let x0 = bbox.x1 - spec.coordinate_offset;
    let y0 = bbox.y1 - spec.coordinate_offset;
    let bin_w = bbox.width() / ow as f64;
    let bin_h = bbox.height() / oh as f64;
    let norm = 1.0 / (s * s) as f64;
    let mut out = FeatureTensor::zeros([1, feat.c(), oh, ow]);
    for c in 0..feat.c() {
        for by in 0..oh {
            for bx in 0..ow {
                let mut acc = 0.0;
                for sy in 0..s {
                    let y = y0 + (by as f64 + (sy as f64 + 0.5) / s as f64) * bin_h;
                    for sx in 0..s {
                        let x = x0 + (bx as f64 + (sx as f64 + 0.5) / s as f64) * bin_w;
                        acc += sample_at(feat, t, c, x, y);
                    }
                }
                out.set(0, c, by, bx, acc * norm);
            }
        }
    }
    Ok(out)
}

/// Aligns `bbox` (in feature-map coordinates) onto a `T = 1` map.
pub fn roi_align(feat: &FeatureTensor, bbox: &BoundingBox, spec: &RoiAlignSpec) -> Result<FeatureTensor> {
    if feat.t() != 1 {
        return Err(Error::shape(format!(
            "roi_align expects T = 1, got {:?}",
            feat.dims()
        )));
    }
    roi_align_slice(feat, 0, bbox, spec)
}

/// Slow and fast pathway features of one clip; `T_fast` is an integer
/// multiple of `T_slow` and both share spatial size.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoRateFeatures {
    slow: FeatureTensor,
    fast: FeatureTensor,
}

impl TwoRateFeatures {
    pub fn new(slow: FeatureTensor, fast: FeatureTensor) -> Result<Self> {
        if slow.t() == 0 || fast.t() == 0 || fast.t() % slow.t() != 0 {
            return Err(Error::shape(format!(
                "fast length {} is not a multiple of slow length {}",
                fast.t(),
                slow.t()
            )));
        }
        if slow.h() != fast.h() || slow.w() != fast.w() {
            return Err(Error::shape(format!(
                "pathways differ spatially: {:?} vs {:?}",
                slow.dims(),
                fast.dims()
            )));
        }
        Ok(Self { slow, fast })
    }

    pub fn slow(&self) -> &FeatureTensor {
        &self.slow
    }

    pub fn fast(&self) -> &FeatureTensor {
        &self.fast
    }

    pub fn alpha(&self) -> usize {
        self.fast.t() / self.slow.t()
    }

    pub fn output_channels(&self) -> usize {
        self.fast.c() + self.slow.c()
    }
}

/// Baseline alignment: pool each pathway over time, align the key-frame box,
/// concatenate fast then slow channels.
pub fn keyframe_align(
    feats: &TwoRateFeatures,
    key_box: &BoundingBox,
    spec: &RoiAlignSpec,
) -> Result<FeatureTensor> {
    let fast = kernel::mean_over_time(&feats.fast)?;
    let slow = kernel::mean_over_time(&feats.slow)?;
    let fast = roi_align(&fast, key_box, spec)?;
    let slow = roi_align(&slow, key_box, spec)?;
    FeatureTensor::concat_channels(&[&fast, &slow])
}

/// `(fast index, slow index)` pairs at which the slow pathway is sampled:
/// every fast index `idx` with `(idx + 1) % alpha == 0`, paired with slow
/// slice `(idx + 1) / alpha - 1`.
pub fn slow_alignment_schedule(t_fast: usize, t_slow: usize) -> Vec<(usize, usize)> {
    if t_slow == 0 || t_fast % t_slow != 0 {
        return Vec::new();
    }
    let alpha = t_fast / t_slow;
    (0..t_fast)
        .filter(|idx| (idx + 1) % alpha == 0)
        .map(|idx| (idx, (idx + 1) / alpha - 1))
        .collect()
}

/// Maps fast-pathway temporal index `idx` to tube slot `offset + idx * stride`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FastFrameMap {
    pub offset: usize,
    pub stride: usize,
}

impl FastFrameMap {
    pub fn identity() -> Self {
        Self { offset: 0, stride: 1 }
    }

    pub fn slot(&self, idx: usize) -> usize {
        self.offset + idx * self.stride
    }
}

/// Per-frame alignment of a tube onto both pathways, then temporal pooling.
///
/// Fast indices whose tube slot has no box are skipped in both pathways.
pub fn dynamic_roi_align(
    feats: &TwoRateFeatures,
    tube: &Tubelet,
    frame_map: FastFrameMap,
    spec: &RoiAlignSpec,
) -> Result<FeatureTensor> {
    let alpha = feats.alpha();
    let mut fast_rois = Vec::new();
    let mut slow_rois = Vec::new();
    for idx in 0..feats.fast.t() {
        let Some(bbox) = tube.boxes.get(frame_map.slot(idx)).and_then(Option::as_ref) else {
            continue;
        };
        if (idx + 1) % alpha == 0 {
            slow_rois.push(roi_align_slice(&feats.slow, (idx + 1) / alpha - 1, bbox, spec)?);
        }
        fast_rois.push(roi_align_slice(&feats.fast, idx, bbox, spec)?);
    }
    if fast_rois.is_empty() {
        return Err(Error::invalid(format!(
            "tube {} has no box inside the clip",
            tube.track_id
        )));
    }
    if slow_rois.is_empty() {
        return Err(Error::invalid(format!(
            "tube {} has no box at any slow-pathway step",
            tube.track_id
        )));
    }
    let fast = kernel::temporal_avg_pool(&fast_rois)?;
    let slow = kernel::temporal_avg_pool(&slow_rois)?;
    FeatureTensor::concat_channels(&[&fast, &slow])
}
