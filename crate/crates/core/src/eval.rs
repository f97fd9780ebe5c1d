//! Frame-level and tube-level mean average precision.
//!
//! Per action class, predictions are ranked by score and matched greedily to
//! the best-overlapping unmatched ground truth. AP is the area under the
//! all-point interpolated precision/recall curve; the mean runs over classes
//! with at least one ground-truth instance.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::model::{action, iou, ActionId, BoundingBox, ClassId, TrackId};
use crate::postprocess::ActionTrack;

pub const FRAME_IOU: f64 = 0.5;
pub const TUBE_IOU: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameGroundTruth {
    pub frame: usize,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub action: ActionId,
    #[serde(default)]
    pub track_id: TrackId,
    #[serde(default)]
    pub class_id: ClassId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePrediction {
    pub frame: usize,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub action: ActionId,
    pub score: f64,
    #[serde(default)]
    pub track_id: TrackId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub action: ActionId,
    pub name: String,
    pub ap: f64,
    pub ground_truth: usize,
    pub predictions: usize,
    pub true_positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub iou_threshold: f64,
    pub classes: Vec<ClassReport>,
    /// `None` when no class has ground truth.
    pub mean_ap: Option<f64>,
    pub ground_truth: usize,
    pub predictions: usize,
}

/// All-point interpolated AP from match flags listed in rank order.
pub fn average_precision(ranked_hits: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let precision: Vec<f64> = ranked_hits
        .iter()
        .enumerate()
        .map(|(i, &hit)| {
            tp += usize::from(hit);
            tp as f64 / (i + 1) as f64
        })
        .collect();
    let mut envelope = precision;
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let area = ranked_hits
        .iter()
        .zip(&envelope)
        .filter(|(hit, _)| **hit)
        .fold(0.0, |acc, (_, p)| acc + p);
    (area / n_gt as f64).min(1.0)
}

/// Indices sorted by descending score; equal scores keep input order.
fn rank(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Greedy matching in rank order; `overlap(p, g)` is the similarity of
/// prediction `p` and ground truth `g`.
fn match_ranked(order: &[usize], n_gt: usize, threshold: f64, overlap: impl Fn(usize, usize) -> f64) -> Vec<bool> {
    let mut taken = vec![false; n_gt];
    order
        .iter()
        .map(|&p| {
            let best = (0..n_gt)
                .filter(|&g| !taken[g])
                .map(|g| (g, overlap(p, g)))
                .filter(|(_, o)| *o >= threshold)
                .fold(None, |best: Option<(usize, f64)>, (g, o)| match best {
                    Some((_, bo)) if bo >= o => best,
                    _ => Some((g, o)),
                });
            if let Some((g, _)) = best {
                taken[g] = true;
                true
            } else {
                false
            }
        })
        .collect()
}

fn finish(mode: &str, iou_threshold: f64, classes: Vec<ClassReport>, n_gt: usize, n_pred: usize) -> EvalReport {
    let scored: Vec<f64> = classes.iter().filter(|c| c.ground_truth > 0).map(|c| c.ap).collect();
    let mean_ap = (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64);
    EvalReport {
        mode: mode.to_string(),
        iou_threshold,
        classes,
        mean_ap,
        ground_truth: n_gt,
        predictions: n_pred,
    }
}

fn class_report(act: ActionId, hits: &[bool], n_gt: usize) -> ClassReport {
    ClassReport {
        action: act,
        name: action::name(act).map_or_else(|| act.to_string(), str::to_string),
        ap: average_precision(hits, n_gt),
        ground_truth: n_gt,
        predictions: hits.len(),
        true_positives: hits.iter().filter(|h| **h).count(),
    }
}

pub fn frame_map(predictions: &[FramePrediction], ground_truth: &[FrameGroundTruth], iou_threshold: f64) -> EvalReport {
    let actions: BTreeSet<ActionId> = predictions
        .iter()
        .map(|p| p.action)
        .chain(ground_truth.iter().map(|g| g.action))
        .collect();
    let mut classes = Vec::new();
    for act in actions {
        let preds: Vec<&FramePrediction> = predictions.iter().filter(|p| p.action == act).collect();
        let gts: Vec<&FrameGroundTruth> = ground_truth.iter().filter(|g| g.action == act).collect();
        let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
        let hits = match_ranked(&rank(&scores), gts.len(), iou_threshold, |p, g| {
            if preds[p].frame == gts[g].frame {
                iou(&preds[p].bbox, &gts[g].bbox)
            } else {
                -1.0
            }
        });
        classes.push(class_report(act, &hits, gts.len()));
    }
    finish("frame", iou_threshold, classes, ground_truth.len(), predictions.len())
}

/// Mean per-frame IoU over the union of the two tracks' frames; frames where
/// either box is missing contribute zero.
pub fn tube_iou(a: &ActionTrack, b: &ActionTrack) -> f64 {
    let frames: BTreeSet<usize> = (a.start_frame..=a.end_frame).chain(b.start_frame..=b.end_frame).collect();
    if frames.is_empty() {
        return 0.0;
    }
    let total: f64 = frames
        .iter()
        .map(|&f| match (a.box_at(f), b.box_at(f)) {
            (Some(x), Some(y)) => iou(x, y),
            _ => 0.0,
        })
        .sum();
    total / frames.len() as f64
}

pub fn video_map(predictions: &[ActionTrack], ground_truth: &[ActionTrack], tube_iou_threshold: f64) -> EvalReport {
    let actions: BTreeSet<ActionId> = predictions
        .iter()
        .chain(ground_truth)
        .map(|t| t.action)
        .collect();
    let mut classes = Vec::new();
    for act in actions {
        let preds: Vec<&ActionTrack> = predictions.iter().filter(|p| p.action == act).collect();
        let gts: Vec<&ActionTrack> = ground_truth.iter().filter(|g| g.action == act).collect();
        let scores: Vec<f64> = preds.iter().map(|p| p.mean_score()).collect();
        let hits = match_ranked(&rank(&scores), gts.len(), tube_iou_threshold, |p, g| tube_iou(preds[p], gts[g]));
        classes.push(class_report(act, &hits, gts.len()));
    }
    finish("video", tube_iou_threshold, classes, ground_truth.len(), predictions.len())
}
