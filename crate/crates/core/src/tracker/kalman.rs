//! Constant-velocity Kalman filter over `(cx, cy, s, r, vcx, vcy, vs)`,
//! where `s` is box area and `r` the aspect ratio `w / h`.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::model::{BoundingBox, ClassId, TrackId};

pub type State = SVector<f64, 7>;
pub type Covariance = SMatrix<f64, 7, 7>;
type Measurement = SVector<f64, 4>;

const MIN_AREA: f64 = 1e-6;
const MIN_ASPECT: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KalmanParams {
    pub obs_noise_pos: f64,
    pub obs_noise_shape: f64,
    pub process_noise_pos: f64,
    pub process_noise_vel: f64,
}

impl Default for KalmanParams {
    fn default() -> Self {
        Self {
            obs_noise_pos: 1.0,
            obs_noise_shape: 10.0,
            process_noise_pos: 1.0,
            process_noise_vel: 1e-2,
        }
    }
}

/// One entry of a track's observation history. `observed == false` marks a
/// virtual box placed while re-updating across a gap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub frame: usize,
    pub bbox: BoundingBox,
    pub observed: bool,
}

pub(crate) fn box_to_z(b: &BoundingBox) -> Measurement {
    let (cx, cy) = b.center();
    Measurement::new(cx, cy, b.area(), b.width() / b.height())
}

pub(crate) fn state_to_box(x: &State) -> BoundingBox {
    let s = x[2].max(MIN_AREA);
    let r = x[3].max(MIN_ASPECT);
    let w = (s * r).sqrt();
    let h = s / w;
    BoundingBox {
        x1: x[0] - w / 2.0,
        y1: x[1] - h / 2.0,
        x2: x[0] + w / 2.0,
        y2: x[1] + h / 2.0,
    }
}

fn transition() -> Covariance {
    let mut f = Covariance::identity();
    f[(0, 4)] = 1.0;
    f[(1, 5)] = 1.0;
    f[(2, 6)] = 1.0;
    f
}

fn observation() -> SMatrix<f64, 4, 7> {
    let mut h = SMatrix::<f64, 4, 7>::zeros();
    for i in 0..4 {
        h[(i, i)] = 1.0;
    }
    h
}

#[derive(Debug, Clone)]
pub struct KalmanTrack {
    state: State,
    covariance: Covariance,
    pub track_id: TrackId,
    pub class_id: ClassId,
    pub birth_frame: usize,
    pub last_observed_frame: usize,
    /// Frame the state currently refers to (advanced by `predict`).
    pub state_frame: usize,
    pub consecutive_hits: usize,
    pub observation_history: Vec<HistoryEntry>,
    /// Set when a prediction had to clamp the area velocity.
    pub degraded: bool,
    params: KalmanParams,
    /// Filter state right after the last real observation.
    checkpoint: (State, Covariance),
}

impl KalmanTrack {
    pub fn new(
        track_id: TrackId,
        class_id: ClassId,
        bbox: BoundingBox,
        frame: usize,
        params: KalmanParams,
    ) -> Self {
        let z = box_to_z(&bbox);
        let mut state = State::zeros();
        state.fixed_rows_mut::<4>(0).copy_from(&z);
        let mut covariance = Covariance::identity() * 10.0;
        for i in 4..7 {
            covariance[(i, i)] = 1e4;
        }
        Self {
            state,
            covariance,
            track_id,
            class_id,
            birth_frame: frame,
            last_observed_frame: frame,
            state_frame: frame,
            consecutive_hits: 1,
            observation_history: vec![HistoryEntry {
                frame,
                bbox,
                observed: true,
            }],
            degraded: false,
            params,
            checkpoint: (state, covariance),
        }
    }

    pub fn state(&self) -> &State {
        &self.state
    }

    pub fn covariance(&self) -> &Covariance {
        &self.covariance
    }

    pub fn set_velocity(&mut self, vcx: f64, vcy: f64, vs: f64) {
        self.state[4] = vcx;
        self.state[5] = vcy;
        self.state[6] = vs;
    }

    pub fn current_box(&self) -> BoundingBox {
        state_to_box(&self.state)
    }

    pub fn last_observation(&self) -> &HistoryEntry {
        self.observation_history
            .last()
            .expect("a track always has its birth observation")
    }

    fn process_noise(&self) -> Covariance {
        let p = &self.params;
        Covariance::from_diagonal(&State::from_column_slice(&[
            p.process_noise_pos,
            p.process_noise_pos,
            p.process_noise_pos,
            p.process_noise_pos,
            p.process_noise_vel,
            p.process_noise_vel,
            p.process_noise_vel * 1e-2,
        ]))
    }

    /// Advances the state one frame and returns the predicted box.
    pub fn predict(&mut self) -> BoundingBox {
        if self.state[2] + self.state[6] <= 0.0 {
            self.state[6] = 0.0;
            self.degraded = true;
        }
        let f = transition();
        self.state = f * self.state;
        self.covariance = f * self.covariance * f.transpose() + self.process_noise();
        self.symmetrize();
        self.state_frame += 1;
        self.current_box()
    }

    fn correct(&mut self, bbox: &BoundingBox) {
        let h = observation();
        let p = &self.params;
        let r = SMatrix::<f64, 4, 4>::from_diagonal(&Measurement::new(
            p.obs_noise_pos,
            p.obs_noise_pos,
            p.obs_noise_shape,
            p.obs_noise_shape,
        ));
        let innovation = box_to_z(bbox) - h * self.state;
        let s = h * self.covariance * h.transpose() + r;
        let s_inv = s
            .try_inverse()
            .expect("innovation covariance is positive definite");
        let gain = self.covariance * h.transpose() * s_inv;
        self.state += gain * innovation;
        let i_kh = Covariance::identity() - gain * h;
        // Joseph form keeps the covariance symmetric positive semi-definite.
        self.covariance = i_kh * self.covariance * i_kh.transpose() + gain * r * gain.transpose();
        self.symmetrize();
        self.state[2] = self.state[2].max(MIN_AREA);
        self.state[3] = self.state[3].max(MIN_ASPECT);
    }

    fn symmetrize(&mut self) {
        self.covariance = (self.covariance + self.covariance.transpose()) * 0.5;
    }

    /// Incorporates a detection at `frame`, the frame the state was last
    /// predicted to. When the track went unobserved in between, the filter is
    /// rewound to its last real observation and re-run along a linear virtual
    /// trajectory to the new box; the virtual boxes enter the history.
    pub fn update(&mut self, bbox: BoundingBox, frame: usize) {
        let gap = frame.saturating_sub(self.last_observed_frame);
        if gap > 1 {
            let anchor = self.last_observation().bbox;
            let start = self.last_observed_frame;
            (self.state, self.covariance) = self.checkpoint;
            self.state_frame = start;
            for k in 1..gap {
                let t = k as f64 / gap as f64;
                let virtual_box = anchor.lerp(&bbox, t);
                self.predict();
                self.correct(&virtual_box);
                self.observation_history.push(HistoryEntry {
                    frame: start + k,
                    bbox: virtual_box,
                    observed: false,
                });
            }
            self.predict();
            self.consecutive_hits = 0;
        }
        self.correct(&bbox);
        self.state_frame = frame;
        self.last_observed_frame = frame;
        self.consecutive_hits += 1;
        self.observation_history.push(HistoryEntry {
            frame,
            bbox,
            observed: true,
        });
        self.checkpoint = (self.state, self.covariance);
    }

    /// Unit direction of recent motion, from the observation about `delta_t`
    /// frames back to the latest one; `None` with fewer than two entries or
    /// no displacement.
    pub fn motion_direction(&self, delta_t: usize) -> Option<(f64, f64)> {
        let last = self.last_observation();
        let target = last.frame.saturating_sub(delta_t.max(1));
        let earlier = self
            .observation_history
            .iter()
            .rev()
            .skip(1)
            .find(|e| e.frame <= target)
            .or_else(|| self.observation_history.first().filter(|e| e.frame < last.frame))?;
        let (x0, y0) = earlier.bbox.center();
        let (x1, y1) = last.bbox.center();
        unit(x1 - x0, y1 - y0)
    }
}

pub(crate) fn unit(dx: f64, dy: f64) -> Option<(f64, f64)> {
    let n = dx.hypot(dy);
    (n > 1e-9).then(|| (dx / n, dy / n))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn boxc(cx: f64, cy: f64) -> BoundingBox {
        BoundingBox::from_center(cx, cy, 4.0, 8.0).unwrap()
    }

    fn close(a: &BoundingBox, b: &BoundingBox, tol: f64) -> bool {
        (a.x1 - b.x1).abs() < tol
            && (a.y1 - b.y1).abs() < tol
            && (a.x2 - b.x2).abs() < tol
            && (a.y2 - b.y2).abs() < tol
    }

    #[test]
    fn zero_velocity_predicts_same_box() {
        let b = boxc(10.0, 10.0);
        let mut t = KalmanTrack::new(0, 0, b, 0, KalmanParams::default());
        assert!(close(&t.predict(), &b, 1e-9));
    }

    #[test]
    fn constant_velocity_predictions() {
        let mut t = KalmanTrack::new(0, 0, boxc(10.0, 10.0), 0, KalmanParams::default());
        t.set_velocity(2.0, 0.0, 0.0);
        let p1 = t.predict();
        assert!(close(&p1, &boxc(12.0, 10.0), 1e-9));
        let p2 = t.predict();
        assert!(close(&p2, &boxc(14.0, 10.0), 1e-9));
    }

    #[test]
    fn negative_area_velocity_is_clamped() {
        let mut t = KalmanTrack::new(0, 0, boxc(10.0, 10.0), 0, KalmanParams::default());
        t.set_velocity(0.0, 0.0, -1000.0);
        let b = t.predict();
        assert!(t.degraded);
        assert!(b.area() > 0.0);
    }

    #[test]
    fn covariance_stays_symmetric_psd() {
        let mut t = KalmanTrack::new(0, 0, boxc(10.0, 10.0), 0, KalmanParams::default());
        for f in 1..20 {
            t.predict();
            t.update(boxc(10.0 + 1.5 * f as f64, 10.0), f);
        }
        let p = t.covariance();
        assert!((p - p.transpose()).abs().max() < 1e-9);
        let eig = p.symmetric_eigenvalues();
        assert!(eig.iter().all(|e| *e > -1e-9), "{eig:?}");
        assert!(t.state()[2] > 0.0 && t.state()[3] > 0.0);
        // learnt the velocity
        assert!((t.state()[4] - 1.5).abs() < 0.1);
    }

    #[test]
    fn gap_update_adds_virtual_boxes() {
        let mut t = KalmanTrack::new(0, 0, boxc(0.0, 0.0), 0, KalmanParams::default());
        for _ in 0..4 {
            t.predict();
        }
        t.update(boxc(8.0, 0.0), 4);
        let frames: Vec<_> = t.observation_history.iter().map(|e| (e.frame, e.observed)).collect();
        assert_eq!(frames, vec![(0, true), (1, false), (2, false), (3, false), (4, true)]);
        let (cx, _) = t.observation_history[2].bbox.center();
        assert!((cx - 4.0).abs() < 1e-12);
    }

    #[test]
    fn motion_direction_uses_history() {
        let mut t = KalmanTrack::new(0, 0, boxc(0.0, 0.0), 0, KalmanParams::default());
        assert!(t.motion_direction(3).is_none());
        t.predict();
        t.update(boxc(0.0, 3.0), 1);
        let (dx, dy) = t.motion_direction(3).unwrap();
        assert!(dx.abs() < 1e-12 && (dy - 1.0).abs() < 1e-12);
    }
}
