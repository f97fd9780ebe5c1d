//! Flow/RGB fusion: colour-wheel flow encoding, multi-scale summation of two
//! feature pyramids, inactive-agent pseudo-labels and a deterministic
//! stand-in feature extractor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernel::{self, Conv1x1Weights};
use crate::model::{agent_class, iou, ClassId, Detection};
use crate::tensor::{FeatureTensor, FlowField};

/// Encodes a flow field as a `(1, 3, H, W)` RGB image in `[0, 1]`.
///
/// Hue is the flow direction `atan2(v, u)`, saturation the magnitude divided
/// by the field's maximum magnitude, value is always 1. A zero field maps to
/// white.
pub fn flow_to_colorwheel(flow: &FlowField) -> FeatureTensor {
    let (h, w) = (flow.height(), flow.width());
    let max_mag = flow
        .u()
        .iter()
        .zip(flow.v())
        .map(|(u, v)| u.hypot(*v))
        .fold(0.0, f64::max);
    let mut out = FeatureTensor::zeros([1, 3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = flow.at(y, x);
            let sat = if max_mag > 0.0 { u.hypot(v) / max_mag } else { 0.0 };
            let hue = v.atan2(u).to_degrees().rem_euclid(360.0);
            let [r, g, b] = hsv_to_rgb(hue, sat.clamp(0.0, 1.0), 1.0);
            out.set(0, 0, y, x, r);
            out.set(0, 1, y, x, g);
            out.set(0, 2, y, x, b);
        }
    }
    out
}

/// `hue` in degrees, `sat` and `val` in `[0, 1]`.
fn hsv_to_rgb(hue: f64, sat: f64, val: f64) -> [f64; 3] {
    let c = val * sat;
    let h6 = (hue / 60.0).rem_euclid(6.0);
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = val - c;
    [r + m, g + m, b + m]
}

/// Multi-scale features ordered finest first; each level halves (floor) the
/// spatial size of the previous one and all levels share `T` and `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<FeatureTensor>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<FeatureTensor>) -> Result<Self> {
        let first = levels.first().ok_or(Error::Empty("pyramid levels"))?;
        for pair in levels.windows(2) {
            let (fine, coarse) = (&pair[0], &pair[1]);
            if coarse.t() != first.t() || coarse.c() != first.c() {
                return Err(Error::shape(format!(
                    "pyramid levels disagree on T/C: {:?} vs {:?}",
                    first.dims(),
                    coarse.dims()
                )));
            }
            if coarse.h() != fine.h() / 2 || coarse.w() != fine.w() / 2 {
                return Err(Error::shape(format!(
                    "level {:?} is not a floor halving of {:?}",
                    coarse.dims(),
                    fine.dims()
                )));
            }
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[FeatureTensor] {
        &self.levels
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn finest(&self) -> &FeatureTensor {
        &self.levels[0]
    }

    pub fn coarsest(&self) -> &FeatureTensor {
        self.levels.last().expect("pyramid is non-empty")
    }

    pub fn into_levels(self) -> Vec<FeatureTensor> {
        self.levels
    }
}

/// Summation fusion of an RGB and a flow pyramid.
///
/// Each output level is `flow + rgb + up(flow_coarser) + up(rgb_coarser)`,
/// where `up` is nearest 2x upsampling of the raw next-coarser input level.
/// The coarsest level has no coarser neighbour and is the plain sum.
pub fn fuse_fpn(rgb: &FeaturePyramid, flow: &FeaturePyramid) -> Result<FeaturePyramid> {
    if rgb.depth() != flow.depth() {
        return Err(Error::shape(format!(
            "pyramid depths differ: {} vs {}",
            rgb.depth(),
            flow.depth()
        )));
    }
    for (a, b) in rgb.levels.iter().zip(&flow.levels) {
        if a.dims() != b.dims() {
            return Err(Error::shape(format!(
                "level shapes differ: {:?} vs {:?}",
                a.dims(),
                b.dims()
            )));
        }
    }
    let n = rgb.depth();
    let mut fused = Vec::with_capacity(n);
    for k in 0..n {
        let mut level = flow.levels[k].add(&rgb.levels[k])?;
        if k + 1 < n {
            let (h, w) = (level.h(), level.w());
            let up_flow = kernel::upsample_nearest_to(&flow.levels[k + 1], h, w)?;
            let up_rgb = kernel::upsample_nearest_to(&rgb.levels[k + 1], h, w)?;
            level = level.add(&up_flow)?.add(&up_rgb)?;
        }
        fused.push(level);
    }
    FeaturePyramid::new(fused)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLabelRule {
    pub conf_threshold: f64,
    pub iou_threshold: f64,
    pub relabel_class: ClassId,
}

impl Default for PseudoLabelRule {
    fn default() -> Self {
        Self {
            conf_threshold: 0.9,
            iou_threshold: 0.2,
            relabel_class: agent_class::INACTIVE,
        }
    }
}

impl PseudoLabelRule {
    pub fn new(conf_threshold: f64, iou_threshold: f64, relabel_class: ClassId) -> Result<Self> {
        if !(0.0..=1.0).contains(&conf_threshold) || !(0.0..=1.0).contains(&iou_threshold) {
            return Err(Error::invalid("pseudo-label thresholds must lie in [0, 1]"));
        }
        Ok(Self {
            conf_threshold,
            iou_threshold,
            relabel_class,
        })
    }
}

/// Confident pretrained detections that overlap no annotated agent become
/// "inactive agent" labels; inputs are from a single frame.
pub fn generate_pseudo_labels(
    pretrained_dets: &[Detection],
    ground_truth: &[Detection],
    rule: &PseudoLabelRule,
) -> Vec<Detection> {
    pretrained_dets
        .iter()
        .filter(|d| d.confidence >= rule.conf_threshold)
        .filter(|d| {
            let best = ground_truth
                .iter()
                .map(|g| iou(&d.bbox, &g.bbox))
                .fold(0.0, f64::max);
            best < rule.iou_threshold
        })
        .map(|d| Detection {
            class_id: rule.relabel_class,
            ..d.clone()
        })
        .collect()
}

/// Deterministic pyramid standing in for a learned backbone.
///
/// Level `i` is the input average-pooled by `2^i` per axis (successive 2x2
/// pools) and projected to `channels` with a bias-free 1x1 projection drawn
/// from `seed`.
pub fn synthetic_feature_provider(
    image: &FeatureTensor,
    levels: usize,
    channels: usize,
    seed: u64,
) -> Result<FeaturePyramid> {
    if levels == 0 {
        return Err(Error::invalid("pyramid needs at least one level"));
    }
    let min = 1usize
        .checked_shl(levels as u32)
        .ok_or_else(|| Error::invalid("too many pyramid levels"))?;
    if image.h() < min || image.w() < min {
        return Err(Error::shape(format!(
            "{}x{} image is too small for {levels} levels (needs {min} per axis)",
            image.h(),
            image.w()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj = Conv1x1Weights::random(channels, image.c(), 1.0, &mut rng);
    let mut pooled = image.clone();
    let mut out = Vec::with_capacity(levels);
    for i in 0..levels {
        if i > 0 {
            pooled = kernel::avg_pool_2x(&pooled);
        }
        out.push(kernel::conv1x1(&pooled, &proj)?);
    }
    FeaturePyramid::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BoundingBox;
    use proptest::prelude::*;
    use rand::Rng;

    /// Reference HSV -> RGB via the `f(n) = V - V S max(0, min(k, 4 - k, 1))` form.
    fn hsv_oracle(h: f64, s: f64, v: f64) -> [f64; 3] {
        let f = |n: f64| {
            let k = (n + h / 60.0) % 6.0;
            v - v * s * k.min(4.0 - k).clamp(0.0, 1.0)
        };
        [f(5.0), f(3.0), f(1.0)]
    }

    fn pixel(t: &FeatureTensor, y: usize, x: usize) -> [f64; 3] {
        [t.get(0, 0, y, x), t.get(0, 1, y, x), t.get(0, 2, y, x)]
    }

    fn random_pyramid(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, depth: usize) -> FeaturePyramid {
        let mut levels = Vec::new();
        let (mut hh, mut ww) = (h, w);
        for _ in 0..depth {
            levels.push(FeatureTensor::from_fn([1, c, hh, ww], |_, _, _, _| rng.gen_range(-1.0..1.0)));
            hh /= 2;
            ww /= 2;
        }
        FeaturePyramid::new(levels).unwrap()
    }

    #[test]
    fn zero_flow_is_white() {
        let img = flow_to_colorwheel(&FlowField::zeros(3, 4));
        assert!(img.data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn uniform_flow_gives_uniform_colour() {
        let img = flow_to_colorwheel(&FlowField::uniform(3, 3, 0.3, -1.2));
        let p = pixel(&img, 0, 0);
        for y in 0..3 {
            for x in 0..3 {
                assert_eq!(pixel(&img, y, x), p);
            }
        }
        // full saturation: some channel reaches zero
        assert!(p.iter().any(|c| c.abs() < 1e-12));
    }

    #[test]
    fn saturation_scales_with_magnitude() {
        let flow = FlowField::new(1, 2, vec![1.0, 2.0], vec![0.0, 0.0]).unwrap();
        let img = flow_to_colorwheel(&flow);
        let half = hsv_oracle(0.0, 0.5, 1.0);
        let full = hsv_oracle(0.0, 1.0, 1.0);
        for c in 0..3 {
            assert!((pixel(&img, 0, 0)[c] - half[c]).abs() < 1e-12);
            assert!((pixel(&img, 0, 1)[c] - full[c]).abs() < 1e-12);
        }
        assert_eq!(full, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn fuse_single_level_with_zero_flow_is_rgb() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rgb = random_pyramid(&mut rng, 3, 4, 4, 1);
        let zero = FeaturePyramid::new(vec![FeatureTensor::zeros([1, 3, 4, 4])]).unwrap();
        assert_eq!(fuse_fpn(&rgb, &zero).unwrap(), rgb);
    }

    #[test]
    fn fuse_isolates_upsample_term() {
        let fine = FeatureTensor::zeros([1, 2, 4, 4]);
        let coarse = FeatureTensor::zeros([1, 2, 2, 2]);
        let ones = FeatureTensor::filled([1, 2, 2, 2], 1.0);
        let flow = FeaturePyramid::new(vec![fine.clone(), ones]).unwrap();
        let rgb = FeaturePyramid::new(vec![fine, coarse]).unwrap();
        let out = fuse_fpn(&rgb, &flow).unwrap();
        assert_eq!(out.levels()[0], FeatureTensor::filled([1, 2, 4, 4], 1.0));
        assert_eq!(out.levels()[1], FeatureTensor::filled([1, 2, 2, 2], 1.0));
    }

    #[test]
    fn fuse_shape_mismatch() {
        let a = FeaturePyramid::new(vec![FeatureTensor::zeros([1, 2, 4, 4])]).unwrap();
        let b = FeaturePyramid::new(vec![FeatureTensor::zeros([1, 3, 4, 4])]).unwrap();
        assert!(fuse_fpn(&a, &b).is_err());
        let deep = FeaturePyramid::new(vec![
            FeatureTensor::zeros([1, 2, 4, 4]),
            FeatureTensor::zeros([1, 2, 2, 2]),
        ])
        .unwrap();
        assert!(fuse_fpn(&a, &deep).is_err());
    }

    #[test]
    fn pyramid_rejects_bad_halving() {
        assert!(FeaturePyramid::new(vec![
            FeatureTensor::zeros([1, 2, 4, 4]),
            FeatureTensor::zeros([1, 2, 3, 2]),
        ])
        .is_err());
    }

    fn det(conf: f64, b: (f64, f64, f64, f64)) -> Detection {
        Detection::new(1, conf, BoundingBox::new(b.0, b.1, b.2, b.3).unwrap(), 0, 0.0).unwrap()
    }

    #[test]
    fn pseudo_label_examples() {
        let rule = PseudoLabelRule::default();
        let gt = vec![det(1.0, (0.0, 0.0, 10.0, 10.0))];
        let far = det(0.95, (50.0, 50.0, 60.0, 60.0));
        let out = generate_pseudo_labels(std::slice::from_ref(&far), &gt, &rule);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].class_id, agent_class::INACTIVE);
        assert_eq!(out[0].confidence, 0.95);
        assert_eq!(out[0].bbox, far.bbox);

        let weak = det(0.8, (50.0, 50.0, 60.0, 60.0));
        assert!(generate_pseudo_labels(&[weak], &gt, &rule).is_empty());

        // IoU with the annotated box is 0.5
        let overlapping = det(0.95, (0.0, 0.0, 10.0, 5.0));
        assert!((iou(&overlapping.bbox, &gt[0].bbox) - 0.5).abs() < 1e-12);
        assert!(generate_pseudo_labels(&[overlapping], &gt, &rule).is_empty());

        assert!(generate_pseudo_labels(&[], &gt, &rule).is_empty());
        assert_eq!(generate_pseudo_labels(&[far], &[], &rule).len(), 1);
    }

    #[test]
    fn provider_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = FeatureTensor::from_fn([1, 3, 10, 10], |_, _, _, _| rng.gen_range(0.0..1.0));
        let a = synthetic_feature_provider(&img, 3, 4, 11).unwrap();
        let b = synthetic_feature_provider(&img, 3, 4, 11).unwrap();
        assert_eq!(a, b);
        let sizes: Vec<_> = a.levels().iter().map(|l| (l.h(), l.w())).collect();
        assert_eq!(sizes, vec![(10, 10), (5, 5), (2, 2)]);
        assert!(a.levels().iter().all(|l| l.c() == 4));

        let zero = synthetic_feature_provider(&FeatureTensor::zeros([1, 3, 10, 10]), 3, 4, 11).unwrap();
        assert!(zero.levels().iter().all(|l| l.data().iter().all(|v| *v == 0.0)));

        assert!(synthetic_feature_provider(&img, 4, 4, 11).is_err());
        assert!(synthetic_feature_provider(&img, 0, 4, 11).is_err());
    }

    proptest! {
        #[test]
        fn colorwheel_in_unit_range_and_rotation_shifts_hue(
            seed in any::<u64>(),
            theta in -3.0f64..3.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 6;
            let u: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let flow = FlowField::new(2, 3, u.clone(), v.clone()).unwrap();
            let img = flow_to_colorwheel(&flow);
            prop_assert!(img.data().iter().all(|c| (0.0..=1.0).contains(c)));

            let (s, c) = theta.sin_cos();
            let ru: Vec<f64> = u.iter().zip(&v).map(|(a, b)| c * a - s * b).collect();
            let rv: Vec<f64> = u.iter().zip(&v).map(|(a, b)| s * a + c * b).collect();
            let rot = flow_to_colorwheel(&FlowField::new(2, 3, ru, rv).unwrap());
            let max_mag = u.iter().zip(&v).map(|(a, b)| a.hypot(*b)).fold(0.0, f64::max);
            for i in 0..n {
                let (y, x) = (i / 3, i % 3);
                let sat = u[i].hypot(v[i]) / max_mag;
                let hue = (v[i].atan2(u[i]) + theta).to_degrees().rem_euclid(360.0);
                let want = hsv_oracle(hue, sat, 1.0);
                let got = pixel(&rot, y, x);
                for k in 0..3 {
                    prop_assert!((got[k] - want[k]).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn fuse_matches_elementwise_oracle(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rgb = random_pyramid(&mut rng, 3, 6, 8, 2);
            let flow = random_pyramid(&mut rng, 3, 6, 8, 2);
            let out = fuse_fpn(&rgb, &flow).unwrap();
            let (r0, r1) = (&rgb.levels()[0], &rgb.levels()[1]);
            let (f0, f1) = (&flow.levels()[0], &flow.levels()[1]);
            for c in 0..3 {
                for y in 0..6 {
                    for x in 0..8 {
                        let want = r0.get(0, c, y, x) + f0.get(0, c, y, x)
                            + r1.get(0, c, y / 2, x / 2) + f1.get(0, c, y / 2, x / 2);
                        prop_assert!((out.levels()[0].get(0, c, y, x) - want).abs() < 1e-6);
                    }
                }
            }
            prop_assert!(out.levels()[1].max_abs_diff(&r1.add(f1).unwrap()) < 1e-6);
            prop_assert_eq!(&out, &fuse_fpn(&flow, &rgb).unwrap());
        }
    }
}
