//! Turning per-frame action scores on agent tubes into action tracks, and
//! matching buffered frames to the temporally closest detection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ActionId, BoundingBox, ClassId, TrackId, TrackedDetection, Tubelet};

pub const DEFAULT_EPSILON: f64 = 0.001;

/// A tube with one action-score vector per slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTube {
    pub tubelet: Tubelet,
    pub scores: Vec<Vec<f64>>,
}

impl ScoredTube {
    pub fn new(tubelet: Tubelet, scores: Vec<Vec<f64>>) -> Result<Self> {
        let tube = Self { tubelet, scores };
        tube.validate()?;
        Ok(tube)
    }

    pub fn validate(&self) -> Result<()> {
        self.tubelet.validate()?;
        if self.scores.len() != self.tubelet.len() {
            return Err(Error::shape(format!(
                "tube {} has {} slots but {} score vectors",
                self.tubelet.track_id,
                self.tubelet.len(),
                self.scores.len()
            )));
        }
        let n = self.scores.first().map_or(0, Vec::len);
        for s in &self.scores {
            if s.len() != n {
                return Err(Error::shape("score vectors differ in length"));
            }
            if let Some(bad) = s.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::invalid(format!("score {bad} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// One action of one agent over a contiguous frame interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionTrack {
    pub track_id: TrackId,
    pub class_id: ClassId,
    pub action: ActionId,
    /// First and last absolute frame, inclusive.
    pub start_frame: usize,
    pub end_frame: usize,
    pub boxes: Vec<Option<BoundingBox>>,
    pub scores: Vec<f64>,
}

impl ActionTrack {
    pub fn len(&self) -> usize {
        self.end_frame - self.start_frame + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn box_at(&self, frame: usize) -> Option<&BoundingBox> {
        if frame < self.start_frame || frame > self.end_frame {
            return None;
        }
        self.boxes[frame - self.start_frame].as_ref()
    }

    pub fn mean_score(&self) -> f64 {
        self.scores.iter().sum::<f64>() / self.scores.len() as f64
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0) {
        return Err(Error::invalid(format!("epsilon must be > 0, got {epsilon}")));
    }
    Ok(())
}

/// Every maximal run of slots whose score for `action` is at least `epsilon`.
pub fn trim_tube(tube: &ScoredTube, action: ActionId, epsilon: f64) -> Result<Vec<ActionTrack>> {
    check_epsilon(epsilon)?;
    let k = action as usize;
    if tube.scores.iter().any(|s| s.len() <= k) {
        return Err(Error::invalid(format!("action {action} outside score vectors")));
    }
    let t = &tube.tubelet;
    let emit = |from: usize, to: usize| ActionTrack {
        track_id: t.track_id,
        class_id: t.class_id,
        action,
        start_frame: t.start_frame + from,
        end_frame: t.start_frame + to - 1,
        boxes: t.boxes[from..to].to_vec(),
        scores: tube.scores[from..to].iter().map(|s| s[k]).collect(),
    };
    let mut tracks = Vec::new();
    let mut run_start = None;
    for (i, s) in tube.scores.iter().enumerate() {
        match (s[k] >= epsilon, run_start) {
            (true, None) => run_start = Some(i),
            (false, Some(from)) => {
                tracks.push(emit(from, i));
                run_start = None;
            }
            _ => {}
        }
    }
    if let Some(from) = run_start {
        tracks.push(emit(from, tube.scores.len()));
    }
    Ok(tracks)
}

/// Zeroes scores below `epsilon`.
pub fn online_mask(scores: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    check_epsilon(epsilon)?;
    Ok(scores.iter().map(|&s| if s < epsilon { 0.0 } else { s }).collect())
}

fn check_descending(stamps: impl Iterator<Item = f64>, what: &str) -> Result<()> {
    let mut prev = f64::INFINITY;
    for s in stamps {
        if !s.is_finite() || s > prev {
            return Err(Error::invalid(format!("{what} timestamps must be finite and most-recent-first")));
        }
        prev = s;
    }
    Ok(())
}

/// For each frame timestamp, the detection closest in time. Both lists are
/// most-recent-first; the detection pointer only moves forward, advancing
/// while the next detection is at least as close.
pub fn time_sync(frame_timestamps: &[f64], detections: &[TrackedDetection]) -> Result<Vec<TrackedDetection>> {
    if detections.is_empty() {
        return Err(Error::Empty("detections to sync"));
    }
    check_descending(frame_timestamps.iter().copied(), "frame")?;
    check_descending(detections.iter().map(|d| d.detection.timestamp), "detection")?;
    let mut m = 0;
    let mut out = Vec::with_capacity(frame_timestamps.len());
    for &s in frame_timestamps {
        while m + 1 < detections.len() {
            let here = (s - detections[m].detection.timestamp).abs();
            let next = (s - detections[m + 1].detection.timestamp).abs();
            if here < next {
                break;
            }
            m += 1;
        }
        out.push(detections[m].clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Detection;
    use proptest::prelude::*;

    fn tube(scores: &[f64]) -> ScoredTube {
        let b = BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let t = Tubelet::new(1, 0, 10, vec![Some(b); scores.len()]).unwrap();
        ScoredTube::new(t, scores.iter().map(|s| vec![*s]).collect()).unwrap()
    }

    fn det(ts: f64) -> TrackedDetection {
        TrackedDetection {
            detection: Detection::new(0, 0.9, BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap(), 0, ts).unwrap(),
            track_id: 0,
        }
    }

    #[test]
    fn trim_examples() {
        let tracks = trim_tube(&tube(&[0.0005, 0.6, 0.7, 0.0002]), 0, 0.001).unwrap();
        assert_eq!(tracks.len(), 1);
        assert_eq!((tracks[0].start_frame, tracks[0].end_frame), (11, 12));
        assert_eq!(tracks[0].scores, vec![0.6, 0.7]);

        let whole = trim_tube(&tube(&[0.2, 0.3, 0.9]), 0, 0.001).unwrap();
        assert_eq!(whole.len(), 1);
        assert_eq!(whole[0].len(), 3);

        let split = trim_tube(&tube(&[0.5, 0.0001, 0.5]), 0, 0.001).unwrap();
        let frames: Vec<_> = split.iter().map(|t| (t.start_frame, t.end_frame)).collect();
        assert_eq!(frames, vec![(10, 10), (12, 12)]);

        assert!(trim_tube(&tube(&[0.0, 0.0]), 0, 0.001).unwrap().is_empty());
        assert!(trim_tube(&tube(&[0.5]), 0, 0.0).is_err());
        assert!(trim_tube(&tube(&[0.5]), 1, 0.001).is_err());
    }

    #[test]
    fn mask_examples() {
        assert_eq!(online_mask(&[0.5, 0.2], 0.001).unwrap(), vec![0.5, 0.2]);
        assert_eq!(online_mask(&[0.0001, 0.0], 0.001).unwrap(), vec![0.0, 0.0]);
        assert_eq!(online_mask(&[0.0001, 0.001, 0.3], 0.001).unwrap(), vec![0.0, 0.001, 0.3]);
    }

    #[test]
    fn sync_examples() {
        let dets = [det(9.9), det(7.0)];
        let got = time_sync(&[10.0, 8.0, 6.0], &dets).unwrap();
        let ts: Vec<_> = got.iter().map(|d| d.detection.timestamp).collect();
        assert_eq!(ts, vec![9.9, 7.0, 7.0]);

        let same = [det(3.0), det(2.0), det(1.0)];
        let got = time_sync(&[3.0, 2.0, 1.0], &same).unwrap();
        assert_eq!(got, same.to_vec());

        let got = time_sync(&[5.0, 1.0, -2.0], &[det(0.5)]).unwrap();
        assert!(got.iter().all(|d| d.detection.timestamp == 0.5));

        assert!(time_sync(&[1.0], &[]).is_err());
        assert!(time_sync(&[1.0, 2.0], &[det(1.0)]).is_err());
    }

    proptest! {
        #[test]
        fn mask_is_idempotent_and_non_increasing(v in prop::collection::vec(0.0f64..1.0, 0..20), eps in 0.0001f64..0.5) {
            let once = online_mask(&v, eps).unwrap();
            prop_assert!(once.iter().zip(&v).all(|(a, b)| a <= b));
            prop_assert_eq!(online_mask(&once, eps).unwrap(), once);
        }

        #[test]
        fn low_epsilon_keeps_whole_tube(v in prop::collection::vec(0.01f64..1.0, 1..20)) {
            let tracks = trim_tube(&tube(&v), 0, 0.005).unwrap();
            prop_assert_eq!(tracks.len(), 1);
            prop_assert_eq!(tracks[0].len(), v.len());
        }
    }
}
