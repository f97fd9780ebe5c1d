//! Online per-class tube tracker.
//!
//! Each class is tracked independently. Tracks are predicted with a
//! constant-velocity Kalman filter, matched to detections by a maximum-weight
//! assignment over IoU plus a motion-direction consistency bonus, and
//! re-updated along a virtual linear trajectory when they reappear after a
//! gap. Unmatched detections form tentative chains; a chain linked over
//! three consecutive frames becomes a new track.

mod assignment;
mod kalman;

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

pub use assignment::max_weight_assignment;
pub use kalman::{HistoryEntry, KalmanParams, KalmanTrack};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::model::{iou, BoundingBox, ClassId, Detection, TrackId, TrackedDetection, Tubelet};

/// Consecutive linked frames needed before a chain becomes a track.
pub const BIRTH_CHAIN_LENGTH: usize = 3;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Association {
    /// `(prediction index, detection index)` pairs.
    pub matches: Vec<(usize, usize)>,
    pub unmatched_tracks: Vec<usize>,
    pub unmatched_detections: Vec<usize>,
}

fn split_assignment(assigned: Vec<Option<usize>>, n_dets: usize) -> Association {
    let mut used = vec![false; n_dets];
    let mut out = Association::default();
    for (t, a) in assigned.into_iter().enumerate() {
        match a {
            Some(d) => {
                used[d] = true;
                out.matches.push((t, d));
            }
            None => out.unmatched_tracks.push(t),
        }
    }
    out.unmatched_detections = (0..n_dets).filter(|d| !used[*d]).collect();
    out
}

/// One-to-one matching maximizing total IoU; pairs below `iou_threshold`
/// are never matched.
pub fn associate(
    predictions: &[(TrackId, BoundingBox)],
    detections: &[Detection],
    iou_threshold: f64,
) -> Association {
    let weights: Vec<Vec<Option<f64>>> = predictions
        .iter()
        .map(|(_, p)| {
            detections
                .iter()
                .map(|d| {
                    let v = iou(p, &d.bbox);
                    (v >= iou_threshold && v > 0.0).then_some(v)
                })
                .collect()
        })
        .collect();
    split_assignment(max_weight_assignment(&weights, detections.len()), detections.len())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackerParams {
    pub iou_threshold: f64,
    pub delta_t: usize,
    pub inertia: f64,
    pub interp_max_gap: usize,
    pub kalman: KalmanParams,
}

impl Default for TrackerParams {
    fn default() -> Self {
        Self::from(&PipelineConfig::default())
    }
}

impl From<&PipelineConfig> for TrackerParams {
    fn from(c: &PipelineConfig) -> Self {
        Self {
            iou_threshold: c.iou_assoc_threshold,
            delta_t: c.kalman_delta_t,
            inertia: c.kalman_inertia,
            interp_max_gap: c.interp_max_gap,
            kalman: KalmanParams {
                obs_noise_pos: c.kalman_obs_noise_pos,
                obs_noise_shape: c.kalman_obs_noise_shape,
                process_noise_pos: c.kalman_process_noise_pos,
                process_noise_vel: c.kalman_process_noise_vel,
            },
        }
    }
}

#[derive(Debug, Clone)]
struct TentativeChain {
    class_id: ClassId,
    detections: Vec<Detection>,
}

impl TentativeChain {
    fn last(&self) -> &Detection {
        self.detections.last().expect("chains are never empty")
    }
}

/// Mutable state of one video stream. Call [`TrackerState::step`] once per
/// frame, in increasing frame order.
#[derive(Debug, Clone)]
pub struct TrackerState {
    params: TrackerParams,
    active: Vec<KalmanTrack>,
    retired: Vec<KalmanTrack>,
    tentative: Vec<TentativeChain>,
    next_track_id: TrackId,
    last_frame: Option<usize>,
}

impl TrackerState {
    pub fn new(params: TrackerParams) -> Self {
        Self {
            params,
            active: Vec::new(),
            retired: Vec::new(),
            tentative: Vec::new(),
            next_track_id: 0,
            last_frame: None,
        }
    }

    pub fn from_config(config: &PipelineConfig) -> Self {
        Self::new(TrackerParams::from(config))
    }

    pub fn params(&self) -> &TrackerParams {
        &self.params
    }

    pub fn active_tracks(&self) -> &[KalmanTrack] {
        &self.active
    }

    pub fn retired_tracks(&self) -> &[KalmanTrack] {
        &self.retired
    }

    /// Every track ever born, ordered by track id.
    pub fn all_tracks(&self) -> Vec<&KalmanTrack> {
        let mut all: Vec<_> = self.active.iter().chain(&self.retired).collect();
        all.sort_by_key(|t| t.track_id);
        all
    }

    pub fn next_track_id(&self) -> TrackId {
        self.next_track_id
    }

    pub fn last_frame(&self) -> Option<usize> {
        self.last_frame
    }

    /// Processes the detections of `frame_index` and returns the ones that
    /// were attached to a track, ordered by track id.
    pub fn step(
        &mut self,
        frame_detections: &[Detection],
        frame_index: usize,
    ) -> Result<Vec<TrackedDetection>> {
        if let Some(last) = self.last_frame {
            if frame_index <= last {
                return Err(Error::Tracker(format!(
                    "frame {frame_index} does not follow frame {last}"
                )));
            }
        }
        if let Some(d) = frame_detections.iter().find(|d| d.frame_index != frame_index) {
            return Err(Error::Tracker(format!(
                "detection from frame {} passed for frame {frame_index}",
                d.frame_index
            )));
        }
        self.last_frame = Some(frame_index);

        // frames strictly between the last observation and this one
        self.retire_where(|t| frame_index - t.last_observed_frame - 1);

        let mut predictions = Vec::with_capacity(self.active.len());
        for t in &mut self.active {
            let mut b = t.current_box();
            while t.state_frame < frame_index {
                b = t.predict();
            }
            predictions.push(b);
        }

        let classes: BTreeSet<ClassId> = self
            .active
            .iter()
            .map(|t| t.class_id)
            .chain(frame_detections.iter().map(|d| d.class_id))
            .collect();

        let mut output = Vec::new();
        let mut leftovers: BTreeMap<ClassId, Vec<Detection>> = BTreeMap::new();
        for class in classes {
            let track_idx: Vec<usize> = (0..self.active.len())
                .filter(|&i| self.active[i].class_id == class)
                .collect();
            let dets: Vec<&Detection> =
                frame_detections.iter().filter(|d| d.class_id == class).collect();

            let weights: Vec<Vec<Option<f64>>> = track_idx
                .iter()
                .map(|&ti| {
                    let track = &self.active[ti];
                    let pred = &predictions[ti];
                    dets.iter()
                        .map(|d| self.association_weight(track, pred, d))
                        .collect()
                })
                .collect();
            let assigned = split_assignment(max_weight_assignment(&weights, dets.len()), dets.len());

            for &(row, col) in &assigned.matches {
                let track = &mut self.active[track_idx[row]];
                let det = dets[col];
                track.update(det.bbox, frame_index);
                output.push(TrackedDetection {
                    detection: det.clone(),
                    track_id: track.track_id,
                });
            }
            leftovers.insert(
                class,
                assigned
                    .unmatched_detections
                    .iter()
                    .map(|&c| dets[c].clone())
                    .collect(),
            );
        }

        output.extend(self.advance_chains(leftovers, frame_index));
        output.sort_by_key(|t| t.track_id);
        self.retire_where(|t| frame_index - t.last_observed_frame);
        Ok(output)
    }

    /// Moves tracks whose unobserved-frame count exceeds `delta_t` to the
    /// retired list.
    fn retire_where(&mut self, unobserved: impl Fn(&KalmanTrack) -> usize) {
        let delta_t = self.params.delta_t;
        let (keep, retire): (Vec<_>, Vec<_>) = std::mem::take(&mut self.active)
            .into_iter()
            .partition(|t| unobserved(t) <= delta_t);
        self.active = keep;
        self.retired.extend(retire);
    }

    fn association_weight(
        &self,
        track: &KalmanTrack,
        predicted: &BoundingBox,
        det: &Detection,
    ) -> Option<f64> {
        let overlap = iou(predicted, &det.bbox);
        if overlap < self.params.iou_threshold || overlap <= 0.0 {
            return None;
        }
        let mut weight = overlap;
        if let Some((vx, vy)) = track.motion_direction(self.params.delta_t) {
            let (lx, ly) = track.last_observation().bbox.center();
            let (dx, dy) = det.bbox.center();
            if let Some((ix, iy)) = kalman::unit(dx - lx, dy - ly) {
                let angle = (vx * ix + vy * iy).clamp(-1.0, 1.0).acos();
                let consistency = (std::f64::consts::FRAC_PI_2 - angle) / std::f64::consts::PI;
                weight += self.params.inertia * consistency * det.confidence;
            }
        }
        Some(weight.max(f64::MIN_POSITIVE))
    }

    fn advance_chains(
        &mut self,
        leftovers: BTreeMap<ClassId, Vec<Detection>>,
        frame_index: usize,
    ) -> Vec<TrackedDetection> {
        let previous = std::mem::take(&mut self.tentative);
        let mut born = Vec::new();
        for (class, dets) in leftovers {
            let mut chains: Vec<TentativeChain> = previous
                .iter()
                .filter(|c| c.class_id == class && c.last().frame_index + 1 == frame_index)
                .cloned()
                .collect();
            let tails: Vec<(TrackId, BoundingBox)> =
                chains.iter().map(|c| (0, c.last().bbox)).collect();
            let linked = associate(&tails, &dets, self.params.iou_threshold);

            for &(ci, di) in &linked.matches {
                let chain = &mut chains[ci];
                chain.detections.push(dets[di].clone());
                if chain.detections.len() >= BIRTH_CHAIN_LENGTH {
                    let track = self.promote(chain);
                    born.push(TrackedDetection {
                        detection: dets[di].clone(),
                        track_id: track,
                    });
                } else {
                    self.tentative.push(chain.clone());
                }
            }
            for &di in &linked.unmatched_detections {
                self.tentative.push(TentativeChain {
                    class_id: class,
                    detections: vec![dets[di].clone()],
                });
            }
        }
        born
    }

    fn promote(&mut self, chain: &TentativeChain) -> TrackId {
        let id = self.next_track_id;
        self.next_track_id += 1;
        let first = &chain.detections[0];
        let mut track = KalmanTrack::new(
            id,
            chain.class_id,
            first.bbox,
            first.frame_index,
            self.params.kalman,
        );
        for d in &chain.detections[1..] {
            while track.state_frame < d.frame_index {
                track.predict();
            }
            track.update(d.bbox, d.frame_index);
        }
        self.active.push(track);
        id
    }

    /// Tubelets of every track present at `key_frame`, covering `clip_range`.
    ///
    /// Gaps of at most `interp_max_gap` frames between history entries are
    /// filled by linear interpolation; such slots (and virtual re-update
    /// boxes) are flagged as interpolated.
    pub fn extract_tubelets(&self, clip_range: Range<usize>, key_frame: usize) -> Vec<Tubelet> {
        if !clip_range.contains(&key_frame) {
            return Vec::new();
        }
        self.all_tracks()
            .into_iter()
            .filter_map(|t| track_tubelet(t, clip_range.clone(), self.params.interp_max_gap))
            .filter(|tube| tube.box_at(key_frame).is_some())
            .collect()
    }

    /// One tubelet per track spanning its whole lifetime.
    pub fn lifetime_tubelets(&self) -> Vec<Tubelet> {
        self.all_tracks()
            .into_iter()
            .filter_map(|t| {
                let first = t.observation_history.first()?.frame;
                let last = t.observation_history.last()?.frame;
                track_tubelet(t, first..last + 1, self.params.interp_max_gap)
            })
            .collect()
    }
}

/// Dense per-frame boxes of a track over `range`.
fn track_tubelet(track: &KalmanTrack, range: Range<usize>, max_gap: usize) -> Option<Tubelet> {
    let n = range.len();
    let mut boxes = vec![None; n];
    let mut interpolated = vec![false; n];
    let slot = |frame: usize| range.contains(&frame).then(|| frame - range.start);

    let hist = &track.observation_history;
    for (i, e) in hist.iter().enumerate() {
        if let Some(s) = slot(e.frame) {
            boxes[s] = Some(e.bbox);
            interpolated[s] = !e.observed;
        }
        if let Some(next) = hist.get(i + 1) {
            let gap = next.frame - e.frame;
            if gap > 1 && gap <= max_gap {
                for k in 1..gap {
                    if let Some(s) = slot(e.frame + k) {
                        boxes[s] = Some(e.bbox.lerp(&next.bbox, k as f64 / gap as f64));
                        interpolated[s] = true;
                    }
                }
            }
        }
    }
    if boxes.iter().all(Option::is_none) {
        return None;
    }
    Some(Tubelet {
        track_id: track.track_id,
        class_id: track.class_id,
        start_frame: range.start,
        boxes,
        interpolated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(class: ClassId, cx: f64, cy: f64, frame: usize) -> Detection {
        Detection::new(
            class,
            0.95,
            BoundingBox::from_center(cx, cy, 10.0, 20.0).unwrap(),
            frame,
            frame as f64 * 0.1,
        )
        .unwrap()
    }

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn associate_threshold_examples() {
        let p = vec![(7, bx(0.0, 0.0, 10.0, 10.0))];
        let hit = Detection::new(0, 0.9, bx(0.0, 0.0, 10.0, 9.0), 0, 0.0).unwrap();
        let a = associate(&p, &[hit], 0.3);
        assert_eq!(a.matches, vec![(0, 0)]);

        // IoU 0.1 is below the 0.3 threshold
        let miss = Detection::new(0, 0.9, bx(0.0, 0.0, 10.0, 1.0), 0, 0.0).unwrap();
        let a = associate(&p, &[miss], 0.3);
        assert!(a.matches.is_empty());
        assert_eq!(a.unmatched_tracks, vec![0]);
        assert_eq!(a.unmatched_detections, vec![0]);
    }

    #[test]
    fn single_agent_born_on_third_frame() {
        let mut st = TrackerState::new(TrackerParams::default());
        let mut born_at = None;
        for f in 0..5 {
            let out = st.step(&[det(0, 20.0 + 3.0 * f as f64, 40.0, f)], f).unwrap();
            if !out.is_empty() && born_at.is_none() {
                born_at = Some(f);
            }
            if f >= 2 {
                assert_eq!(out.len(), 1);
                assert_eq!(out[0].track_id, 0);
            }
        }
        assert_eq!(born_at, Some(2));
        assert_eq!(st.next_track_id(), 1);
        let frames: Vec<_> = st.active_tracks()[0]
            .observation_history
            .iter()
            .map(|e| e.frame)
            .collect();
        assert_eq!(frames, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn gap_is_bridged_and_refilled() {
        let mut st = TrackerState::new(TrackerParams::default());
        for f in 0..10 {
            let dets = if f == 5 { vec![] } else { vec![det(0, 20.0 + 3.0 * f as f64, 40.0, f)] };
            let out = st.step(&dets, f).unwrap();
            if f >= 2 && f != 5 {
                assert_eq!(out[0].track_id, 0);
            }
        }
        assert_eq!(st.next_track_id(), 1);
        let t = &st.active_tracks()[0];
        let e5 = t.observation_history.iter().find(|e| e.frame == 5).unwrap();
        assert!(!e5.observed);
        assert!((e5.bbox.center().0 - 35.0).abs() < 1e-9);
    }

    #[test]
    fn long_gap_retires_track() {
        let mut st = TrackerState::new(TrackerParams::default());
        for f in 0..4 {
            st.step(&[det(0, 20.0, 40.0, f)], f).unwrap();
        }
        for f in 4..8 {
            st.step(&[], f).unwrap();
        }
        assert!(st.active_tracks().is_empty());
        assert_eq!(st.retired_tracks().len(), 1);
        for f in 8..11 {
            st.step(&[det(0, 20.0, 40.0, f)], f).unwrap();
        }
        let ids: Vec<_> = st.all_tracks().iter().map(|t| t.track_id).collect();
        assert_eq!(ids, vec![0, 1]);
    }

    #[test]
    fn classes_never_share_tracks() {
        let mut st = TrackerState::new(TrackerParams::default());
        for f in 0..6 {
            // same box, two classes
            st.step(&[det(0, 50.0, 50.0, f), det(1, 50.0, 50.0, f)], f).unwrap();
        }
        let tracks = st.all_tracks();
        assert_eq!(tracks.len(), 2);
        assert_ne!(tracks[0].class_id, tracks[1].class_id);
    }

    #[test]
    fn rejects_non_increasing_frames() {
        let mut st = TrackerState::new(TrackerParams::default());
        st.step(&[], 3).unwrap();
        assert!(st.step(&[], 3).is_err());
        assert!(st.step(&[det(0, 1.0, 1.0, 9)], 4).is_err());
    }

    #[test]
    fn tubelet_examples() {
        let mut st = TrackerState::new(TrackerParams::default());
        for f in 0..6 {
            st.step(&[det(0, 10.0 + f as f64, 40.0, f)], f).unwrap();
        }
        let tubes = st.extract_tubelets(0..6, 3);
        assert_eq!(tubes.len(), 1);
        assert!(tubes[0].boxes.iter().all(Option::is_some));
        assert!(tubes[0].interpolated.iter().all(|i| !i));
        assert!(st.extract_tubelets(0..12, 8).is_empty());
    }

    #[test]
    fn tubelet_interpolates_gaps() {
        let params = KalmanParams::default();
        let mut t = KalmanTrack::new(0, 0, BoundingBox::from_center(0.0, 0.0, 2.0, 2.0).unwrap(), 0, params);
        t.observation_history.push(HistoryEntry {
            frame: 4,
            bbox: BoundingBox::from_center(8.0, 0.0, 2.0, 2.0).unwrap(),
            observed: true,
        });
        let tube = track_tubelet(&t, 0..5, 32).unwrap();
        let centers: Vec<_> = tube.boxes.iter().map(|b| b.unwrap().center()).collect();
        assert_eq!(centers, vec![(0.0, 0.0), (2.0, 0.0), (4.0, 0.0), (6.0, 0.0), (8.0, 0.0)]);
        assert_eq!(tube.interpolated, vec![false, true, true, true, false]);
        // beyond the interpolation limit the slots stay empty
        let tube = track_tubelet(&t, 0..5, 3).unwrap();
        assert!(tube.boxes[2].is_none());
    }
}
