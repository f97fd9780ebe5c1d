//! Shared value types: boxes, detections, tubelets, clips and action scores.
//!
//! Boxes use continuous pixel coordinates with the origin at the top-left
//! corner; area is `(x2 - x1) * (y2 - y1)` with no `+1` correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{FeatureTensor, FlowField};

pub type ClassId = u32;
pub type ActionId = u32;
pub type TrackId = u64;

/// Agent classes produced by the detector.
pub mod agent_class {
    use super::ClassId;

    pub const PED: ClassId = 0;
    pub const CAR: ClassId = 1;
    pub const CYC: ClassId = 2;
    /// Pseudo-label class for detected but stationary agents.
    pub const INACTIVE: ClassId = 3;

    const NAMES: [&str; 4] = ["Ped", "Car", "Cyc", "Inactive"];

    pub fn name(id: ClassId) -> Option<&'static str> {
        NAMES.get(id as usize).copied()
    }

    pub fn parse(s: &str) -> Option<ClassId> {
        NAMES
            .iter()
            .position(|n| n.eq_ignore_ascii_case(s))
            .map(|i| i as ClassId)
            .or_else(|| s.parse().ok())
    }
}

/// Road action vocabulary.
pub mod action {
    use super::ActionId;

    pub const STOP: ActionId = 0;
    pub const BRAKING: ActionId = 1;
    pub const TUR_LFT: ActionId = 2;
    pub const TUR_RHT: ActionId = 3;
    pub const XING_LFT: ActionId = 4;
    pub const XING_RHT: ActionId = 5;
    pub const WAIT2X: ActionId = 6;
    pub const MOV: ActionId = 7;
    pub const MOV_AWAY: ActionId = 8;
    pub const MOV_TOW: ActionId = 9;

    pub const COUNT: usize = 10;

    const NAMES: [&str; COUNT] = [
        "Stop", "Braking", "TurLft", "TurRht", "XingLft", "XingRht", "Wait2X", "Mov", "MovAway",
        "MovTow",
    ];

    pub fn name(id: ActionId) -> Option<&'static str> {
        NAMES.get(id as usize).copied()
    }

    /// Accepts either the short action name (case-insensitive) or a numeric id.
    pub fn parse(s: &str) -> Option<ActionId> {
        let s = s.trim();
        NAMES
            .iter()
            .position(|n| n.eq_ignore_ascii_case(s))
            .map(|i| i as ActionId)
            .or_else(|| s.parse().ok())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox")]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

#[derive(Deserialize)]
struct RawBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl TryFrom<RawBox> for BoundingBox {
    type Error = Error;

    fn try_from(r: RawBox) -> Result<Self> {
        BoundingBox::new(r.x1, r.y1, r.x2, r.y2)
    }
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite box ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        if x2 <= x1 || y2 <= y1 {
            return Err(Error::invalid(format!(
                "box ({x1}, {y1}, {x2}, {y2}) has non-positive extent"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BoundingBox {
        BoundingBox {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    /// Multiplies every coordinate by `factor` (`factor > 0`).
    pub fn scale(&self, factor: f64) -> BoundingBox {
        BoundingBox {
            x1: self.x1 * factor,
            y1: self.y1 * factor,
            x2: self.x2 * factor,
            y2: self.y2 * factor,
        }
    }

    /// Corner-wise linear interpolation, `t = 0` gives `self`.
    pub fn lerp(&self, other: &BoundingBox, t: f64) -> BoundingBox {
        let mix = |a: f64, b: f64| a + (b - a) * t;
        BoundingBox {
            x1: mix(self.x1, other.x1),
            y1: mix(self.y1, other.y1),
            x2: mix(self.x2, other.x2),
            y2: mix(self.y2, other.y2),
        }
    }
}

/// Intersection over union of two valid boxes; `0` when disjoint.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: ClassId,
    pub confidence: f64,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub frame_index: usize,
    pub timestamp: f64,
}

impl Detection {
    pub fn new(
        class_id: ClassId,
        confidence: f64,
        bbox: BoundingBox,
        frame_index: usize,
        timestamp: f64,
    ) -> Result<Self> {
        let det = Self {
            class_id,
            confidence,
            bbox,
            frame_index,
            timestamp,
        };
        det.validate()?;
        Ok(det)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::invalid(format!(
                "confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        if !self.timestamp.is_finite() {
            return Err(Error::invalid("non-finite timestamp"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackedDetection {
    pub detection: Detection,
    pub track_id: TrackId,
}

/// An agent's boxes over a run of consecutive frames starting at `start_frame`.
///
/// Absent slots are occluded or missed frames. `interpolated[i]` marks slots
/// whose box was filled in rather than observed by the detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tubelet {
    pub track_id: TrackId,
    pub class_id: ClassId,
    #[serde(default)]
    pub start_frame: usize,
    pub boxes: Vec<Option<BoundingBox>>,
    #[serde(default)]
    pub interpolated: Vec<bool>,
}

impl Tubelet {
    pub fn new(
        track_id: TrackId,
        class_id: ClassId,
        start_frame: usize,
        boxes: Vec<Option<BoundingBox>>,
    ) -> Result<Self> {
        let interpolated = vec![false; boxes.len()];
        let tube = Self {
            track_id,
            class_id,
            start_frame,
            boxes,
            interpolated,
        };
        tube.validate()?;
        Ok(tube)
    }

    pub fn validate(&self) -> Result<()> {
        if self.boxes.iter().all(Option::is_none) {
            return Err(Error::invalid(format!(
                "tubelet {} has no present box",
                self.track_id
            )));
        }
        if !self.interpolated.is_empty() && self.interpolated.len() != self.boxes.len() {
            return Err(Error::shape(format!(
                "tubelet {}: {} interpolation flags for {} slots",
                self.track_id,
                self.interpolated.len(),
                self.boxes.len()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Box at an absolute frame index, if the slot exists and is present.
    pub fn box_at(&self, frame: usize) -> Option<&BoundingBox> {
        frame
            .checked_sub(self.start_frame)
            .and_then(|i| self.boxes.get(i))
            .and_then(Option::as_ref)
    }

    pub fn is_interpolated(&self, slot: usize) -> bool {
        self.interpolated.get(slot).copied().unwrap_or(false)
    }
}

/// A window of `l` frames centred on its key frame.
#[derive(Debug, Clone)]
pub struct Clip {
    pub frames: Vec<FeatureTensor>,
    pub flows: Vec<FlowField>,
    pub key_frame_index: usize,
    pub tubelets: Vec<Tubelet>,
}

impl Clip {
    /// Builds a clip; the key frame is `frames.len() / 2` and every tubelet
    /// must carry a box there (slot indices are clip-relative).
    pub fn new(
        frames: Vec<FeatureTensor>,
        flows: Vec<FlowField>,
        tubelets: Vec<Tubelet>,
    ) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Empty("clip frames"));
        }
        if flows.len() + 1 != frames.len() {
            return Err(Error::shape(format!(
                "{} frames need {} flow fields, got {}",
                frames.len(),
                frames.len() - 1,
                flows.len()
            )));
        }
        let key_frame_index = frames.len() / 2;
        for t in &tubelets {
            t.validate()?;
            if t.boxes.get(key_frame_index).and_then(Option::as_ref).is_none() {
                return Err(Error::invalid(format!(
                    "tubelet {} has no box at key frame {key_frame_index}",
                    t.track_id
                )));
            }
        }
        Ok(Self {
            frames,
            flows,
            key_frame_index,
            tubelets,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Per-agent multi-label action confidences for one key frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionScores {
    pub track_id: TrackId,
    pub key_frame_index: usize,
    pub scores: Vec<f64>,
}

impl ActionScores {
    pub fn new(track_id: TrackId, key_frame_index: usize, scores: Vec<f64>) -> Result<Self> {
        if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::invalid(format!("score {bad} outside [0, 1]")));
        }
        Ok(Self {
            track_id,
            key_frame_index,
            scores,
        })
    }

    /// Index and value of the highest score; ties go to the lowest index.
    pub fn argmax(&self) -> Option<(usize, f64)> {
        self.scores
            .iter()
            .copied()
            .enumerate()
            .fold(None, |best, (i, s)| match best {
                Some((_, b)) if s <= b => best,
                _ => Some((i, s)),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(5.0, 5.0, 6.0, 6.0)), 0.0);
        // touching edges share no area
        assert_eq!(iou(&a, &b(2.0, 0.0, 4.0, 2.0)), 0.0);
        assert!((iou(&a, &b(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_degenerate_boxes() {
        assert!(BoundingBox::new(1.0, 0.0, 1.0, 2.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, f64::NAN, 2.0).is_err());
        assert!(serde_json::from_str::<BoundingBox>(r#"{"x1":3,"y1":0,"x2":1,"y2":1}"#).is_err());
    }

    #[test]
    fn detection_confidence_range() {
        let bx = b(0.0, 0.0, 1.0, 1.0);
        assert!(Detection::new(0, 1.2, bx, 0, 0.0).is_err());
        assert!(Detection::new(0, 1.0, bx, 0, 0.0).is_ok());
    }

    #[test]
    fn tubelet_needs_a_box() {
        assert!(Tubelet::new(1, 0, 0, vec![None, None]).is_err());
        let t = Tubelet::new(1, 0, 5, vec![None, Some(b(0.0, 0.0, 1.0, 1.0))]).unwrap();
        assert!(t.box_at(5).is_none());
        assert!(t.box_at(6).is_some());
        assert!(t.box_at(4).is_none());
    }

    #[test]
    fn clip_requires_key_frame_box() {
        let frames = vec![FeatureTensor::zeros([1, 3, 4, 4]); 4];
        let flows = vec![FlowField::zeros(4, 4); 3];
        let good = Tubelet::new(0, 0, 0, vec![None, None, Some(b(0.0, 0.0, 1.0, 1.0)), None]).unwrap();
        let bad = Tubelet::new(1, 0, 0, vec![Some(b(0.0, 0.0, 1.0, 1.0)), None, None, None]).unwrap();
        let clip = Clip::new(frames.clone(), flows.clone(), vec![good]).unwrap();
        assert_eq!(clip.key_frame_index, 2);
        assert!(Clip::new(frames, flows, vec![bad]).is_err());
    }

    #[test]
    fn vocabulary_parsing() {
        assert_eq!(action::parse("wait2x"), Some(action::WAIT2X));
        assert_eq!(action::parse("7"), Some(7));
        assert_eq!(action::name(action::STOP), Some("Stop"));
        assert_eq!(agent_class::parse("car"), Some(agent_class::CAR));
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        let s = ActionScores::new(0, 0, vec![0.2, 0.6, 0.6]).unwrap();
        assert_eq!(s.argmax(), Some((1, 0.6)));
    }
}
