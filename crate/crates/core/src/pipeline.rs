//! End-to-end run over a scenario: features, tracking, per-clip alignment,
//! interaction classifier, post-processing and evaluation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::align::{dynamic_roi_align, FastFrameMap, RoiAlignSpec, TwoRateFeatures};
use crate::config::PipelineConfig;
use crate::error::{Error, Result, StageContext};
use crate::eval::{frame_map, video_map, EvalReport, FrameGroundTruth, FramePrediction, FRAME_IOU, TUBE_IOU};
use crate::fusion::{flow_to_colorwheel, fuse_fpn, synthetic_feature_provider};
use crate::interaction::{
    predict, train_toy, ClassifierShape, ClassifierWeights, ClipSample, ForwardOptions, TrainConfig, TrainReport,
};
use crate::kernel;
use crate::model::{iou, BoundingBox, TrackId, Tubelet};
use crate::postprocess::{online_mask, trim_tube, ActionTrack, ScoredTube};
use crate::scenario::{generate, nms, Generated, Scenario, ScenarioFamily};
use crate::tensor::FeatureTensor;
use crate::tracker::TrackerState;

/// Key frames sampled per training scene (every `TRAIN_STRIDE`-th frame).
const TRAIN_STRIDE: usize = 2;

/// Per-frame feature maps feeding the classifier.
#[derive(Debug, Clone)]
pub struct FrameFeatures {
    /// Finest fused pyramid level, image resolution.
    pub fine: Vec<FeatureTensor>,
    /// Coarsest fused level pooled to the ROI output size.
    pub context: Vec<FeatureTensor>,
}

/// Fused RGB + flow pyramids for every frame. Frame 0 has no incoming
/// motion and reuses the flow into frame 1.
pub fn encode_frames(g: &Generated, cfg: &PipelineConfig) -> Result<FrameFeatures> {
    let mut fine = Vec::with_capacity(g.frames.len());
    let mut context = Vec::with_capacity(g.frames.len());
    for (t, frame) in g.frames.iter().enumerate() {
        let flow = &g.flows[t.saturating_sub(1).min(g.flows.len() - 1)];
        let rgb = synthetic_feature_provider(frame, cfg.pyramid_levels, cfg.feature_channels, cfg.feature_seed)?;
        let motion = synthetic_feature_provider(
            &flow_to_colorwheel(flow),
            cfg.pyramid_levels,
            cfg.feature_channels,
            cfg.feature_seed.wrapping_add(1),
        )?;
        let fused = fuse_fpn(&rgb, &motion)?;
        context.push(kernel::adaptive_avg_pool(fused.coarsest(), cfg.roi_out, cfg.roi_out)?);
        fine.push(fused.into_levels().swap_remove(0));
    }
    Ok(FrameFeatures { fine, context })
}

/// Runs the tracker over every frame after non-maximum suppression.
pub fn track_scenario(g: &Generated, cfg: &PipelineConfig) -> Result<TrackerState> {
    let mut tracker = TrackerState::from_config(cfg);
    for (t, dets) in g.detections.iter().enumerate() {
        tracker.step(&nms(dets, cfg.nms_threshold), t)?;
    }
    Ok(tracker)
}

/// Frame indices of the clip centred on `key`, clamped at the sequence ends.
pub fn clip_frames(key: usize, len: usize, n_frames: usize) -> Vec<usize> {
    (0..len)
        .map(|j| (key + j).saturating_sub(len / 2).min(n_frames - 1))
        .collect()
}

/// Boxes of `tube` at each clip frame; frames outside the track hold the
/// nearest available box.
fn clip_tube(tube: &Tubelet, frames: &[usize]) -> Option<Tubelet> {
    let present: Vec<(usize, BoundingBox)> = tube
        .boxes
        .iter()
        .enumerate()
        .filter_map(|(i, b)| b.map(|b| (tube.start_frame + i, b)))
        .collect();
    if present.is_empty() {
        return None;
    }
    let boxes = frames
        .iter()
        .map(|&f| {
            let i = present.partition_point(|(pf, _)| *pf < f);
            let nearest = match (i.checked_sub(1).map(|j| present[j]), present.get(i)) {
                (Some(a), Some(b)) => {
                    if f - a.0 <= b.0 - f { a } else { *b }
                }
                (Some(a), None) => a,
                (None, Some(b)) => *b,
                (None, None) => unreachable!("present is non-empty"),
            };
            Some(nearest.1)
        })
        .collect();
    Some(Tubelet {
        track_id: tube.track_id,
        class_id: tube.class_id,
        start_frame: 0,
        boxes,
        interpolated: Vec::new(),
    })
}

/// Smallest window of the map holding every pixel that bilinear sampling
/// inside the tube's boxes can touch, as `[y0, x0, h, w]`, plus the tube
/// shifted into window coordinates. Aligning the shifted tube on the
/// cropped maps gives exactly the uncropped result.
fn crop_to_tube(map: &FeatureTensor, tube: &Tubelet, offset: f64) -> ([usize; 4], Tubelet) {
    let boxes: Vec<&BoundingBox> = tube.boxes.iter().flatten().collect();
    let lo = |v: f64| (v - offset).floor().max(0.0) as usize;
    let hi = |v: f64, limit: usize| ((v - offset).floor() + 2.0).clamp(0.0, limit as f64) as usize;
    let x0 = boxes.iter().map(|b| lo(b.x1)).min().unwrap_or(0).min(map.w() - 1);
    let y0 = boxes.iter().map(|b| lo(b.y1)).min().unwrap_or(0).min(map.h() - 1);
    let x1 = boxes.iter().map(|b| hi(b.x2, map.w())).max().unwrap_or(map.w()).max(x0 + 1);
    let y1 = boxes.iter().map(|b| hi(b.y2, map.h())).max().unwrap_or(map.h()).max(y0 + 1);
    let local = Tubelet {
        boxes: tube
            .boxes
            .iter()
            .map(|b| b.map(|b| b.translate(-(x0 as f64), -(y0 as f64))))
            .collect(),
        ..tube.clone()
    };
    ([y0, x0, y1 - y0, x1 - x0], local)
}

fn roi_spec(cfg: &PipelineConfig) -> Result<RoiAlignSpec> {
    RoiAlignSpec::new(cfg.roi_out, cfg.roi_out, cfg.roi_samples, cfg.roi_offset)
}

/// Tubes alive at `key` and the classifier input for that clip.
fn clip_sample(
    feats: &FrameFeatures,
    tubes: &[Tubelet],
    key: usize,
    cfg: &PipelineConfig,
) -> Result<Option<(Vec<(TrackId, BoundingBox)>, ClipSample)>> {
    let alive: Vec<&Tubelet> = tubes.iter().filter(|t| t.box_at(key).is_some()).collect();
    if alive.is_empty() {
        return Ok(None);
    }
    let frames = clip_frames(key, cfg.clip_length, feats.fine.len());
    let spec = roi_spec(cfg)?;
    let mut keys = Vec::with_capacity(alive.len());
    let mut rois = Vec::with_capacity(alive.len());
    for tube in alive {
        let clip = clip_tube(tube, &frames).expect("tube has a key-frame box");
        let (window, local) = crop_to_tube(&feats.fine[0], &clip, spec.coordinate_offset);
        let fast_frames = frames
            .iter()
            .map(|&f| feats.fine[f].crop(window[0], window[1], window[2], window[3]))
            .collect::<Result<Vec<_>>>()?;
        let slow_frames = fast_frames
            .chunks(cfg.alpha())
            .map(kernel::temporal_avg_pool)
            .collect::<Result<Vec<_>>>()?;
        let two_rate = TwoRateFeatures::new(FeatureTensor::stack(&slow_frames)?, FeatureTensor::stack(&fast_frames)?)?;
        rois.push(dynamic_roi_align(&two_rate, &local, FastFrameMap::identity(), &spec)?);
        keys.push((tube.track_id, *tube.box_at(key).expect("filtered on key box")));
    }
    Ok(Some((
        keys,
        ClipSample {
            rois,
            context: feats.context[key].clone(),
            targets: Vec::new(),
        },
    )))
}

pub fn classifier_shape(cfg: &PipelineConfig) -> ClassifierShape {
    let c = cfg.feature_channels;
    ClassifierShape {
        roi_channels: 2 * c,
        context_channels: c,
        channels: c,
        attention_dim: if cfg.attention_dim == 0 { c } else { cfg.attention_dim },
        depth: cfg.interaction_depth,
        n_actions: cfg.n_actions,
        out_h: cfg.roi_out,
        out_w: cfg.roi_out,
    }
}

/// One-hot target of the ground-truth agent best overlapping `bbox`
/// (IoU >= 0.5), or all zeros for a track on no labelled agent.
fn target_for(bbox: &BoundingBox, gt: &[&FrameGroundTruth], n_actions: usize) -> Vec<f64> {
    let mut t = vec![0.0; n_actions];
    let best = gt
        .iter()
        .map(|g| (iou(bbox, &g.bbox), g.action))
        .filter(|(o, _)| *o >= FRAME_IOU)
        .max_by(|a, b| a.0.total_cmp(&b.0));
    if let Some((_, a)) = best {
        if let Some(slot) = t.get_mut(a as usize) {
            *slot = 1.0;
        }
    }
    t
}

/// Labelled clips from scenes of `family`, for fitting weights.
pub fn training_clips(family: &ScenarioFamily, scenes: usize, seed: u64, cfg: &PipelineConfig) -> Result<Vec<ClipSample>> {
    let mut out = Vec::new();
    for k in 0..scenes {
        let scene = family.sample(seed.wrapping_add(k as u64));
        let g = generate(&scene)?;
        let feats = encode_frames(&g, cfg)?;
        let tubes = track_scenario(&g, cfg)?.lifetime_tubelets();
        let mut gt_by_frame: BTreeMap<usize, Vec<&FrameGroundTruth>> = BTreeMap::new();
        for row in &g.ground_truth {
            gt_by_frame.entry(row.frame).or_default().push(row);
        }
        for key in (0..scene.duration).step_by(TRAIN_STRIDE) {
            let Some((boxes, mut sample)) = clip_sample(&feats, &tubes, key, cfg)? else { continue };
            let gt = gt_by_frame.get(&key).map(Vec::as_slice).unwrap_or(&[]);
            sample.targets = boxes.iter().map(|(_, b)| target_for(b, gt, cfg.n_actions)).collect();
            out.push(sample);
        }
    }
    Ok(out)
}

/// Fits classifier weights on scenes drawn from `family`.
pub fn fit_weights(family: &ScenarioFamily, seed: u64, cfg: &PipelineConfig) -> Result<(ClassifierWeights, TrainReport)> {
    let data = training_clips(family, cfg.train_scenes, seed, cfg)?;
    if data.is_empty() {
        return Err(Error::Empty("training clips"));
    }
    let init = ClassifierWeights::init(
        classifier_shape(cfg),
        cfg.layer_norm_eps,
        cfg.norm_gain,
        cfg.norm_bias,
        cfg.train_seed,
    )?;
    train_toy(init, &data, &TrainConfig::from(cfg))
}

/// The family matching a scenario's image size and length.
pub fn family_for(s: &Scenario) -> ScenarioFamily {
    ScenarioFamily {
        width: s.width,
        height: s.height,
        duration: s.duration.max(8),
        ..ScenarioFamily::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub tracks: usize,
    pub frame_predictions: Vec<FramePrediction>,
    pub action_tracks: Vec<ActionTrack>,
    pub frame_report: EvalReport,
    pub video_report: EvalReport,
}

/// Classifies every tracked agent at every frame with given weights.
pub fn run_with_weights(s: &Scenario, cfg: &PipelineConfig, weights: &ClassifierWeights) -> Result<PipelineOutput> {
    if weights.shape != classifier_shape(cfg) {
        return Err(Error::Config(format!(
            "weights shape {:?} does not match configuration {:?}",
            weights.shape,
            classifier_shape(cfg)
        )));
    }
    let g = generate(s).stage("generate")?;
    let feats = encode_frames(&g, cfg).stage("features")?;
    let tracker = track_scenario(&g, cfg).stage("track")?;
    let tubes = tracker.lifetime_tubelets();

    let mut per_track: BTreeMap<TrackId, Vec<(usize, Vec<f64>)>> = BTreeMap::new();
    let mut frame_predictions = Vec::new();
    for key in 0..s.duration {
        let Some((boxes, sample)) = clip_sample(&feats, &tubes, key, cfg).stage("align")? else { continue };
        let scores = predict(weights, &sample, &ForwardOptions::default()).stage("classify")?;
        for ((id, bbox), sc) in boxes.iter().zip(scores) {
            let masked = online_mask(&sc, cfg.trim_epsilon).stage("postprocess")?;
            for (k, &v) in masked.iter().enumerate() {
                if v > 0.0 {
                    frame_predictions.push(FramePrediction {
                        frame: key,
                        bbox: *bbox,
                        action: k as u32,
                        score: v,
                        track_id: *id,
                    });
                }
            }
            per_track.entry(*id).or_default().push((key, sc));
        }
    }

    let mut action_tracks = Vec::new();
    for tube in &tubes {
        let Some(rows) = per_track.get(&tube.track_id) else { continue };
        let mut scores = vec![vec![0.0; cfg.n_actions]; tube.len()];
        for (frame, sc) in rows {
            scores[frame - tube.start_frame] = sc.clone();
        }
        let scored = ScoredTube::new(tube.clone(), scores).stage("postprocess")?;
        for k in 0..cfg.n_actions {
            action_tracks.extend(trim_tube(&scored, k as u32, cfg.trim_epsilon).stage("postprocess")?);
        }
    }
    Ok(PipelineOutput {
        tracks: tubes.len(),
        frame_report: frame_map(&frame_predictions, &g.ground_truth, FRAME_IOU),
        video_report: video_map(&action_tracks, &g.gt_tracks, TUBE_IOU),
        frame_predictions,
        action_tracks,
    })
}

/// Full run. Classifier weights come from `cfg.weights` when set, otherwise
/// they are fitted on generated scenes seeded from `scenario.seed + 1`.
pub fn run_pipeline(s: &Scenario, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let weights = match &cfg.weights {
        Some(path) => ClassifierWeights::load(path).stage("load weights")?,
        None => fit_weights(&family_for(s), s.seed.wrapping_add(1), cfg).stage("fit weights")?.0,
    };
    run_with_weights(s, cfg, &weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_frames_clamp_at_edges() {
        assert_eq!(clip_frames(0, 4, 10), vec![0, 0, 0, 1]);
        assert_eq!(clip_frames(5, 4, 10), vec![3, 4, 5, 6]);
        assert_eq!(clip_frames(9, 4, 10), vec![7, 8, 9, 9]);
        assert_eq!(clip_frames(5, 4, 10)[2], 5);
    }

    #[test]
    fn clip_tube_holds_nearest_box() {
        let b = |x: f64| BoundingBox::new(x, 0.0, x + 1.0, 1.0).unwrap();
        let tube = Tubelet::new(0, 0, 3, vec![Some(b(3.0)), None, Some(b(5.0))]).unwrap();
        let clip = clip_tube(&tube, &[0, 3, 4, 5, 9]).unwrap();
        let xs: Vec<f64> = clip.boxes.iter().map(|b| b.unwrap().x1).collect();
        assert_eq!(xs, vec![3.0, 3.0, 3.0, 5.0, 5.0]);
    }

    #[test]
    fn cropping_does_not_change_alignment() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let map = FeatureTensor::from_fn([4, 2, 20, 24], |_, _, _, _| rng.gen_range(-1.0..1.0));
        let b = |x: f64, y: f64| Some(BoundingBox::new(x, y, x + 5.3, y + 4.1).unwrap());
        for offset in [0.0, 0.5] {
            let tube = Tubelet::new(0, 0, 0, vec![b(0.2, 3.0), b(2.7, 3.5), b(17.9, 14.2), b(18.6, 15.9)]).unwrap();
            let spec = RoiAlignSpec::new(3, 3, 2, offset).unwrap();
            let slow = kernel::mean_over_time(&map).unwrap();
            let full = TwoRateFeatures::new(slow, map.clone()).unwrap();
            let want = dynamic_roi_align(&full, &tube, FastFrameMap::identity(), &spec).unwrap();
            let ([y0, x0, h, w], local) = crop_to_tube(&map, &tube, offset);
            let cropped = map.crop(y0, x0, h, w).unwrap();
            let slow = kernel::mean_over_time(&cropped).unwrap();
            let part = TwoRateFeatures::new(slow, cropped).unwrap();
            let got = dynamic_roi_align(&part, &local, FastFrameMap::identity(), &spec).unwrap();
            assert!(got.max_abs_diff(&want) < 1e-12, "offset {offset}");
        }
    }

    #[test]
    fn empty_scene_gives_empty_report() {
        let text = "duration=12\nwidth=32\nheight=32\n[agent]\nclass=car\nactive=false\n0,10,10,8,6,Stop\n11,10,10,8,6,Stop\n";
        let s = Scenario::parse(text).unwrap();
        let cfg = PipelineConfig {
            clip_length: 8,
            slow_length: 2,
            ..PipelineConfig::default()
        };
        let w = ClassifierWeights::init(classifier_shape(&cfg), 1e-5, 1.0, 0.0, 0).unwrap();
        let out = run_with_weights(&s, &cfg, &w).unwrap();
        assert_eq!(out.tracks, 0);
        assert!(out.frame_predictions.is_empty());
        assert!(out.frame_report.classes.is_empty());
        assert_eq!(out.frame_report.mean_ap, None);
    }

    #[test]
    fn mismatched_weights_are_rejected() {
        let s = ScenarioFamily::default().sample(0);
        let cfg = PipelineConfig::default();
        let other = PipelineConfig {
            feature_channels: 4,
            ..PipelineConfig::default()
        };
        let w = ClassifierWeights::init(classifier_shape(&other), 1e-5, 1.0, 0.0, 0).unwrap();
        assert!(matches!(run_with_weights(&s, &cfg, &w), Err(Error::Config(_))));
    }
}
