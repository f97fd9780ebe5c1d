//! Scripted synthetic driving scenes: rendered frames, consistent optical
//! flow, ground-truth action boxes and noisy detections.
//!
//! Agent trajectories are given in world coordinates. The camera translates
//! by the ego motion each frame, so an agent's image position is its world
//! position minus the accumulated ego offset, and a static world point shows
//! flow `-ego`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::FrameGroundTruth;
use crate::model::{action, agent_class, iou, ActionId, BoundingBox, ClassId, Detection, TrackId};
use crate::postprocess::ActionTrack;
use crate::tensor::{FeatureTensor, FlowField};

/// A scripted trajectory point; positions between keys are interpolated
/// linearly and the action holds until the next key.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryKey {
    pub frame: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub action: ActionId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioAgent {
    pub class_id: ClassId,
    /// Inactive agents (parked cars and the like) are rendered but carry no
    /// action label and never reach the detector output.
    pub active: bool,
    pub keys: Vec<TrajectoryKey>,
}

impl ScenarioAgent {
    /// World-space `(cx, cy, w, h)` and action at `frame`, if the agent exists.
    pub fn state_at(&self, frame: usize) -> Option<([f64; 4], ActionId)> {
        let first = self.keys.first()?;
        let last = self.keys.last()?;
        if frame < first.frame || frame > last.frame {
            return None;
        }
        let i = self.keys.partition_point(|k| k.frame <= frame) - 1;
        let a = &self.keys[i];
        let Some(b) = self.keys.get(i + 1) else {
            return Some(([a.cx, a.cy, a.w, a.h], a.action));
        };
        let t = (frame - a.frame) as f64 / (b.frame - a.frame) as f64;
        let lerp = |x: f64, y: f64| x + (y - x) * t;
        Some((
            [lerp(a.cx, b.cx), lerp(a.cy, b.cy), lerp(a.w, b.w), lerp(a.h, b.h)],
            a.action,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoiseModel {
    /// Standard deviation of per-coordinate box jitter, pixels.
    pub jitter: f64,
    pub miss_rate: f64,
    /// Expected false positives per frame.
    pub fp_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub seed: u64,
    pub duration: usize,
    pub width: usize,
    pub height: usize,
    pub frame_rate: f64,
    /// Camera translation between frame `t - 1` and `t`, per frame
    /// (entry 0 is unused).
    pub ego: Vec<(f64, f64)>,
    pub noise: NoiseModel,
    pub agents: Vec<ScenarioAgent>,
}

/// Smallest visible box side; smaller remnants count as having left the image.
const MIN_VISIBLE: f64 = 2.0;

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.duration < 2 || self.width == 0 || self.height == 0 {
            return Err(Error::invalid("scenario needs >= 2 frames and a non-empty image"));
        }
        if self.ego.len() != self.duration {
            return Err(Error::shape("ego motion must have one entry per frame"));
        }
        if !(self.frame_rate > 0.0) {
            return Err(Error::invalid("frame rate must be > 0"));
        }
        let n = &self.noise;
        if !(n.jitter >= 0.0) || !(0.0..=1.0).contains(&n.miss_rate) || !(n.fp_rate >= 0.0) {
            return Err(Error::invalid("noise model out of range"));
        }
        for (i, a) in self.agents.iter().enumerate() {
            if a.keys.is_empty() {
                return Err(Error::invalid(format!("agent {i} has no trajectory rows")));
            }
            if a.keys.windows(2).any(|w| w[1].frame <= w[0].frame) {
                return Err(Error::invalid(format!("agent {i} rows must have increasing frames")));
            }
            if a.keys.iter().any(|k| !(k.w > 0.0 && k.h > 0.0)) {
                return Err(Error::invalid(format!("agent {i} has a non-positive box size")));
            }
            if a.keys.iter().any(|k| k.frame >= self.duration) {
                return Err(Error::invalid(format!("agent {i} has rows past the last frame")));
            }
        }
        Ok(())
    }

    /// Accumulated camera offset at `frame`.
    pub fn ego_offset(&self, frame: usize) -> (f64, f64) {
        self.ego[1..=frame]
            .iter()
            .fold((0.0, 0.0), |acc, e| (acc.0 + e.0, acc.1 + e.1))
    }

    /// Image-space box of agent `i` at `frame`, clipped to the image.
    pub fn image_box(&self, agent: usize, frame: usize) -> Option<(BoundingBox, ActionId)> {
        let ([cx, cy, w, h], act) = self.agents[agent].state_at(frame)?;
        let (ox, oy) = self.ego_offset(frame);
        let (cx, cy) = (cx - ox, cy - oy);
        let x1 = (cx - w / 2.0).max(0.0);
        let y1 = (cy - h / 2.0).max(0.0);
        let x2 = (cx + w / 2.0).min(self.width as f64);
        let y2 = (cy + h / 2.0).min(self.height as f64);
        if x2 - x1 < MIN_VISIBLE || y2 - y1 < MIN_VISIBLE {
            return None;
        }
        Some((BoundingBox::new(x1, y1, x2, y2).ok()?, act))
    }

    /// Image-space displacement of agent `i` into `frame`: world velocity
    /// minus ego motion.
    fn image_velocity(&self, agent: usize, frame: usize) -> (f64, f64) {
        let a = &self.agents[agent];
        let world = match (frame.checked_sub(1).and_then(|p| a.state_at(p)), a.state_at(frame)) {
            (Some((p, _)), Some((c, _))) => (c[0] - p[0], c[1] - p[1]),
            (None, Some((c, _))) => match a.state_at(frame + 1) {
                Some((n, _)) => (n[0] - c[0], n[1] - c[1]),
                None => (0.0, 0.0),
            },
            _ => (0.0, 0.0),
        };
        let e = self.ego[frame];
        (world.0 - e.0, world.1 - e.1)
    }

    pub fn parse(text: &str) -> Result<Self> {
        parse_scenario(text)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Serializes back into the text format accepted by [`Scenario::parse`].
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "seed={}\nduration={}\nwidth={}\nheight={}\nframe_rate={}\njitter={}\nmiss_rate={}\nfp_rate={}\n",
            self.seed,
            self.duration,
            self.width,
            self.height,
            self.frame_rate,
            self.noise.jitter,
            self.noise.miss_rate,
            self.noise.fp_rate
        );
        s.push_str("\n[ego]\n");
        for (f, e) in self.ego.iter().enumerate().skip(1) {
            if f == 1 || *e != self.ego[f - 1] {
                s.push_str(&format!("{f},{},{}\n", e.0, e.1));
            }
        }
        for a in &self.agents {
            s.push_str(&format!(
                "\n[agent]\nclass={}\nactive={}\n",
                agent_class::name(a.class_id).unwrap_or("?"),
                a.active
            ));
            for k in &a.keys {
                s.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    k.frame,
                    k.cx,
                    k.cy,
                    k.w,
                    k.h,
                    action::name(k.action).unwrap_or("?")
                ));
            }
        }
        s
    }
}

fn parse_scenario(text: &str) -> Result<Scenario> {
    enum Section {
        Header,
        Ego,
        Agent,
    }
    let bad = |line: usize, msg: String| Error::Config(format!("line {line}: {msg}"));
    let num = |line: usize, key: &str, v: &str| -> Result<f64> {
        v.trim()
            .parse::<f64>()
            .map_err(|_| bad(line, format!("`{key}` expects a number, got `{v}`")))
    };
    let mut header: BTreeMap<String, (usize, String)> = BTreeMap::new();
    let mut ego_rows: Vec<(usize, f64, f64)> = Vec::new();
    let mut agents: Vec<ScenarioAgent> = Vec::new();
    let mut section = Section::Header;
    for (i, raw) in text.lines().enumerate() {
        let ln = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line {
            "[agent]" => {
                agents.push(ScenarioAgent {
                    class_id: agent_class::CAR,
                    active: true,
                    keys: Vec::new(),
                });
                section = Section::Agent;
                continue;
            }
            "[ego]" => {
                section = Section::Ego;
                continue;
            }
            _ => {}
        }
        match section {
            Section::Header => {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| bad(ln, format!("expected key=value, got `{line}`")))?;
                header.insert(k.trim().to_string(), (ln, v.trim().to_string()));
            }
            Section::Ego => {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 3 {
                    return Err(bad(ln, "ego rows are `frame,dx,dy`".into()));
                }
                let frame = num(ln, "frame", f[0])? as usize;
                ego_rows.push((frame, num(ln, "dx", f[1])?, num(ln, "dy", f[2])?));
            }
            Section::Agent => {
                let agent = agents.last_mut().expect("inside an agent section");
                if let Some((k, v)) = line.split_once('=') {
                    match k.trim() {
                        "class" => {
                            agent.class_id = agent_class::parse(v.trim())
                                .ok_or_else(|| bad(ln, format!("unknown agent class `{}`", v.trim())))?;
                        }
                        "active" => {
                            agent.active = v
                                .trim()
                                .parse()
                                .map_err(|_| bad(ln, format!("`active` expects true/false, got `{v}`")))?;
                        }
                        other => return Err(bad(ln, format!("unknown agent key `{other}`"))),
                    }
                    continue;
                }
                let f: Vec<&str> = line.split(',').map(str::trim).collect();
                if f.len() != 6 {
                    return Err(bad(ln, "trajectory rows are `frame,cx,cy,w,h,action`".into()));
                }
                let frame = num(ln, "frame", f[0])?;
                if frame < 0.0 || frame.fract() != 0.0 {
                    return Err(bad(ln, format!("frame must be a non-negative integer, got `{}`", f[0])));
                }
                agent.keys.push(TrajectoryKey {
                    frame: frame as usize,
                    cx: num(ln, "cx", f[1])?,
                    cy: num(ln, "cy", f[2])?,
                    w: num(ln, "w", f[3])?,
                    h: num(ln, "h", f[4])?,
                    action: action::parse(f[5]).ok_or_else(|| bad(ln, format!("unknown action `{}`", f[5])))?,
                });
            }
        }
    }

    let mut take = |key: &str, default: Option<f64>| -> Result<f64> {
        match header.remove(key) {
            Some((ln, v)) => num(ln, key, &v),
            None => default.ok_or_else(|| Error::Config(format!("missing header key `{key}`"))),
        }
    };
    let seed = take("seed", Some(0.0))? as u64;
    let duration = take("duration", None)? as usize;
    let width = take("width", None)? as usize;
    let height = take("height", None)? as usize;
    let frame_rate = take("frame_rate", Some(10.0))?;
    let noise = NoiseModel {
        jitter: take("jitter", Some(0.0))?,
        miss_rate: take("miss_rate", Some(0.0))?,
        fp_rate: take("fp_rate", Some(0.0))?,
    };
    let mut ego = vec![(0.0, 0.0); duration];
    if let Some((ln, v)) = header.remove("ego") {
        let (x, y) = v
            .split_once(',')
            .ok_or_else(|| bad(ln, "ego expects `dx,dy`".into()))?;
        let e = (num(ln, "ego", x)?, num(ln, "ego", y)?);
        ego.iter_mut().skip(1).for_each(|slot| *slot = e);
    }
    if let Some(key) = header.keys().next() {
        let (ln, _) = &header[key];
        return Err(bad(*ln, format!("unknown header key `{key}`")));
    }
    ego_rows.sort_by_key(|r| r.0);
    for (frame, dx, dy) in ego_rows {
        ego.iter_mut().skip(frame.max(1)).for_each(|slot| *slot = (dx, dy));
    }
    let scenario = Scenario {
        seed,
        duration,
        width,
        height,
        frame_rate,
        ego,
        noise,
        agents,
    };
    scenario.validate()?;
    Ok(scenario)
}

/// Everything [`generate`] produces for one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    /// Rendered `1 x 3 x H x W` frames.
    pub frames: Vec<FeatureTensor>,
    /// `flows[t - 1]` is the motion from frame `t - 1` to `t`.
    pub flows: Vec<FlowField>,
    pub ground_truth: Vec<FrameGroundTruth>,
    /// One track per agent and contiguous run of a single action.
    pub gt_tracks: Vec<ActionTrack>,
    /// Raw detector output per frame, before non-maximum suppression.
    pub detections: Vec<Vec<Detection>>,
}

fn class_colour(class: ClassId) -> [f64; 3] {
    match class {
        agent_class::PED => [0.95, 0.25, 0.2],
        agent_class::CAR => [0.2, 0.3, 0.95],
        agent_class::CYC => [0.25, 0.9, 0.3],
        _ => [0.9, 0.9, 0.2],
    }
}

fn background(x: f64, y: f64) -> [f64; 3] {
    [
        0.45 + 0.15 * (0.31 * x).sin() * (0.17 * y).cos(),
        0.45 + 0.15 * (0.23 * x + 0.11 * y).cos(),
        0.45 + 0.1 * (0.19 * y).sin(),
    ]
}

fn inside(b: &BoundingBox, x: usize, y: usize) -> bool {
    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
    px >= b.x1 && px < b.x2 && py >= b.y1 && py < b.y2
}

/// Inactive agents first so active ones sit on top where they overlap.
fn draw_order(s: &Scenario) -> Vec<usize> {
    let mut order: Vec<usize> = (0..s.agents.len()).collect();
    order.sort_by_key(|&i| s.agents[i].active);
    order
}

fn render(s: &Scenario, frame: usize) -> FeatureTensor {
    let (ox, oy) = s.ego_offset(frame);
    let mut img = FeatureTensor::from_fn([1, 3, s.height, s.width], |_, c, y, x| {
        background(x as f64 + ox, y as f64 + oy)[c]
    });
    for i in draw_order(s) {
        let Some((b, _)) = s.image_box(i, frame) else { continue };
        let colour = class_colour(s.agents[i].class_id);
        for y in 0..s.height {
            for x in 0..s.width {
                if inside(&b, x, y) {
                    for (c, v) in colour.iter().enumerate() {
                        img.set(0, c, y, x, *v);
                    }
                }
            }
        }
    }
    img
}

fn flow_into(s: &Scenario, frame: usize) -> FlowField {
    let e = s.ego[frame];
    let mut flow = FlowField::uniform(s.height, s.width, -e.0, -e.1);
    for i in draw_order(s) {
        let Some((b, _)) = s.image_box(i, frame) else { continue };
        let (u, v) = s.image_velocity(i, frame);
        for y in 0..s.height {
            for x in 0..s.width {
                if inside(&b, x, y) {
                    flow.set(y, x, u, v);
                }
            }
        }
    }
    flow
}

/// Greedy per-class non-maximum suppression; keeps boxes whose IoU with every
/// kept higher-scoring box of the same class is at most `threshold`.
pub fn nms(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let clash = kept
            .iter()
            .any(|&k| dets[k].class_id == dets[i].class_id && iou(&dets[k].bbox, &dets[i].bbox) > threshold);
        if !clash {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    kept.into_iter().map(|i| dets[i].clone()).collect()
}

fn detect(s: &Scenario, frame: usize, truth: &[(usize, BoundingBox)], rng: &mut ChaCha8Rng) -> Vec<Detection> {
    let noisy = s.noise != NoiseModel::default();
    let jitter = Normal::new(0.0, s.noise.jitter.max(1e-12)).expect("positive deviation");
    let stamp = frame as f64 / s.frame_rate;
    let mut out = Vec::new();
    for &(agent, b) in truth {
        if !s.agents[agent].active {
            continue;
        }
        if !noisy {
            out.push(Detection {
                class_id: s.agents[agent].class_id,
                confidence: 1.0,
                bbox: b,
                frame_index: frame,
                timestamp: stamp,
            });
            continue;
        }
        if rng.gen::<f64>() < s.noise.miss_rate {
            continue;
        }
        let mut c = [b.x1, b.y1, b.x2, b.y2];
        if s.noise.jitter > 0.0 {
            c.iter_mut().for_each(|v| *v += jitter.sample(rng));
        }
        if let Ok(bbox) = BoundingBox::new(c[0].min(c[2] - 1.0), c[1].min(c[3] - 1.0), c[2], c[3]) {
            out.push(Detection {
                class_id: s.agents[agent].class_id,
                confidence: rng.gen_range(0.6..1.0),
                bbox,
                frame_index: frame,
                timestamp: stamp,
            });
        }
    }
    let mut fp_budget = s.noise.fp_rate;
    while fp_budget > 0.0 {
        if rng.gen::<f64>() < fp_budget.min(1.0) {
            let w = rng.gen_range(6.0..24.0);
            let h = rng.gen_range(6.0..24.0);
            let x = rng.gen_range(0.0..(s.width as f64 - w).max(1.0));
            let y = rng.gen_range(0.0..(s.height as f64 - h).max(1.0));
            if let Ok(bbox) = BoundingBox::new(x, y, x + w, y + h) {
                out.push(Detection {
                    class_id: rng.gen_range(0..3),
                    confidence: rng.gen_range(0.2..0.7),
                    bbox,
                    frame_index: frame,
                    timestamp: stamp,
                });
            }
        }
        fp_budget -= 1.0;
    }
    out
}

fn ground_truth_tracks(s: &Scenario, gt: &[FrameGroundTruth]) -> Vec<ActionTrack> {
    let mut tracks: Vec<ActionTrack> = Vec::new();
    // gt is frame-major; regroup per agent
    let mut per_agent: BTreeMap<TrackId, Vec<&FrameGroundTruth>> = BTreeMap::new();
    for g in gt {
        per_agent.entry(g.track_id).or_default().push(g);
    }
    for (id, rows) in per_agent {
        for g in rows {
            match tracks.last_mut() {
                Some(t) if t.track_id == id && t.action == g.action && t.end_frame + 1 == g.frame => {
                    t.end_frame = g.frame;
                    t.boxes.push(Some(g.bbox));
                    t.scores.push(1.0);
                }
                _ => tracks.push(ActionTrack {
                    track_id: id,
                    class_id: s.agents[id as usize].class_id,
                    action: g.action,
                    start_frame: g.frame,
                    end_frame: g.frame,
                    boxes: vec![Some(g.bbox)],
                    scores: vec![1.0],
                }),
            }
        }
    }
    tracks
}

/// Renders frames, flows, labels and detections; deterministic in `seed`.
pub fn generate(s: &Scenario) -> Result<Generated> {
    s.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut frames = Vec::with_capacity(s.duration);
    let mut flows = Vec::with_capacity(s.duration - 1);
    let mut ground_truth = Vec::new();
    let mut detections = Vec::with_capacity(s.duration);
    for t in 0..s.duration {
        frames.push(render(s, t));
        if t > 0 {
            flows.push(flow_into(s, t));
        }
        let visible: Vec<(usize, BoundingBox)> = (0..s.agents.len())
            .filter_map(|i| s.image_box(i, t).map(|(b, _)| (i, b)))
            .collect();
        for &(i, b) in &visible {
            if s.agents[i].active {
                let (_, act) = s.image_box(i, t).expect("visible");
                ground_truth.push(FrameGroundTruth {
                    frame: t,
                    bbox: b,
                    action: act,
                    track_id: i as TrackId,
                    class_id: s.agents[i].class_id,
                });
            }
        }
        detections.push(detect(s, t, &visible, &mut rng));
    }
    let gt_tracks = ground_truth_tracks(s, &ground_truth);
    Ok(Generated {
        frames,
        flows,
        ground_truth,
        gt_tracks,
        detections,
    })
}

/// Random scenes in the same style as hand-written scenario files, used to
/// fit classifier weights.
///
/// Agents move horizontally in separate lanes. Pedestrians wait or cross
/// left/right; cars stop or move; parked cars are inactive.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScenarioFamily {
    pub width: usize,
    pub height: usize,
    pub duration: usize,
    pub min_agents: usize,
    pub max_agents: usize,
    pub max_ego: f64,
    pub parked_prob: f64,
}

impl Default for ScenarioFamily {
    fn default() -> Self {
        Self {
            width: 128,
            height: 96,
            duration: 40,
            min_agents: 2,
            max_agents: 4,
            max_ego: 0.5,
            parked_prob: 0.3,
        }
    }
}

impl ScenarioFamily {
    pub fn sample(&self, seed: u64) -> Scenario {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(self.min_agents..=self.max_agents);
        let lanes = n + 1;
        let lane_h = self.height as f64 / lanes as f64;
        let ego_x = rng.gen_range(-self.max_ego..=self.max_ego);
        let last = self.duration - 1;
        let mut agents = Vec::new();
        let mut lane_ids: Vec<usize> = (0..lanes).collect();
        rand::seq::SliceRandom::shuffle(&mut lane_ids[..], &mut rng);
        for (slot, &lane) in lane_ids.iter().enumerate() {
            let cy = lane_h * (lane as f64 + 0.5);
            let parked = slot == n;
            if parked && rng.gen::<f64>() >= self.parked_prob {
                continue;
            }
            let is_ped = !parked && rng.gen::<bool>();
            let (w, h) = if is_ped {
                (rng.gen_range(8.0..12.0), rng.gen_range(16.0..22.0f64).min(lane_h * 0.9))
            } else {
                (rng.gen_range(20.0..28.0), rng.gen_range(12.0..16.0f64).min(lane_h * 0.9))
            };
            let class_id = if is_ped { agent_class::PED } else { agent_class::CAR };
            let pick = |rng: &mut ChaCha8Rng| -> (ActionId, f64) {
                let speed = rng.gen_range(1.2..2.2);
                if is_ped {
                    match rng.gen_range(0..3) {
                        0 => (action::WAIT2X, 0.0),
                        1 => (action::XING_LFT, -speed),
                        _ => (action::XING_RHT, speed),
                    }
                } else if rng.gen::<bool>() {
                    (action::STOP, 0.0)
                } else {
                    (action::MOV, if rng.gen::<bool>() { speed } else { -speed })
                }
            };
            let (first, v1) = if parked { (action::STOP, 0.0) } else { pick(&mut rng) };
            let switch = (!parked && rng.gen::<bool>()).then(|| rng.gen_range(last / 3..2 * last / 3));
            let (second, mut v2) = match switch {
                Some(_) => pick(&mut rng),
                None => (first, v1),
            };
            let mut v1 = v1;
            let s = switch.unwrap_or(last);
            // image-space extremes sit at the key frames; slow down until
            // the whole path fits in view
            let (cx0, v1, v2) = loop {
                let ds = (v1 - ego_x) * s as f64;
                let dl = ds + (v2 - ego_x) * (last - s) as f64;
                let lo = w / 2.0 + 2.0 - 0f64.min(ds).min(dl);
                let hi = self.width as f64 - w / 2.0 - 2.0 - 0f64.max(ds).max(dl);
                if hi > lo {
                    break (rng.gen_range(lo..hi), v1, v2);
                }
                v1 *= 0.5;
                v2 *= 0.5;
            };
            let mut keys = vec![TrajectoryKey {
                frame: 0,
                cx: cx0,
                cy,
                w,
                h,
                action: first,
            }];
            let cxs = cx0 + v1 * s as f64;
            if switch.is_some() {
                keys.push(TrajectoryKey {
                    frame: s,
                    cx: cxs,
                    cy,
                    w,
                    h,
                    action: second,
                });
            }
            keys.push(TrajectoryKey {
                frame: last,
                cx: cxs + v2 * (last - s) as f64,
                cy,
                w,
                h,
                action: second,
            });
            agents.push(ScenarioAgent {
                class_id,
                active: !parked,
                keys,
            });
        }
        let mut ego = vec![(ego_x, 0.0); self.duration];
        ego[0] = (0.0, 0.0);
        Scenario {
            seed,
            duration: self.duration,
            width: self.width,
            height: self.height,
            frame_rate: 10.0,
            ego,
            noise: NoiseModel::default(),
            agents,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = "\
seed=3
duration=6
width=32
height=24
ego=2,0

[agent]
class=car
active=false
0,10,12,6,4,Stop
5,10,12,6,4,Stop

[agent]
class=ped
0,20,10,4,6,XingLft
5,15,10,4,6,XingLft
";

    #[test]
    fn parses_and_roundtrips() {
        let s = Scenario::parse(TEXT).unwrap();
        assert_eq!(s.duration, 6);
        assert_eq!(s.ego[3], (2.0, 0.0));
        assert_eq!(s.agents.len(), 2);
        assert!(!s.agents[0].active);
        assert_eq!(s.agents[1].keys[1].action, action::XING_LFT);
        let back = Scenario::parse(&s.to_text()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn rejects_malformed_files() {
        assert!(Scenario::parse("duration=3\nwidth=4\n").is_err());
        assert!(Scenario::parse("duration=3\nwidth=4\nheight=4\nbogus=1\n").is_err());
        let bad_row = "duration=3\nwidth=8\nheight=8\n[agent]\n0,1,1,1\n";
        assert!(Scenario::parse(bad_row).is_err());
        let bad_action = "duration=3\nwidth=8\nheight=8\n[agent]\n0,1,1,1,1,Dance\n";
        assert!(Scenario::parse(bad_action).is_err());
        let past_end = "duration=3\nwidth=8\nheight=8\n[agent]\n5,1,1,1,1,Stop\n";
        assert!(Scenario::parse(past_end).is_err());
    }

    #[test]
    fn interpolates_trajectories() {
        let s = Scenario::parse(TEXT).unwrap();
        let (st, act) = s.agents[1].state_at(2).unwrap();
        assert_eq!(st, [18.0, 10.0, 4.0, 6.0]);
        assert_eq!(act, action::XING_LFT);
        assert!(s.agents[1].state_at(6).is_none());
    }

    #[test]
    fn flow_follows_ego_and_agents() {
        let s = Scenario::parse(TEXT).unwrap();
        let g = generate(&s).unwrap();
        assert_eq!(g.frames.len(), 6);
        assert_eq!(g.flows.len(), 5);
        // background and the parked car both show -ego
        assert_eq!(g.flows[0].at(0, 0), (-2.0, 0.0));
        let (b, _) = s.image_box(0, 1).unwrap();
        let (cx, cy) = b.center();
        assert_eq!(g.flows[0].at(cy as usize, cx as usize), (-2.0, 0.0));
        // pedestrian: world -1 px/frame, camera +2
        let (b, _) = s.image_box(1, 1).unwrap();
        let (cx, cy) = b.center();
        assert_eq!(g.flows[0].at(cy as usize, cx as usize), (-3.0, 0.0));
        // only the active agent is labelled and detected
        assert!(g.ground_truth.iter().all(|gt| gt.track_id == 1));
        assert!(g.detections.iter().all(|d| d.len() == 1 && d[0].class_id == agent_class::PED));
        assert_eq!(g.gt_tracks.len(), 1);
        assert_eq!((g.gt_tracks[0].start_frame, g.gt_tracks[0].end_frame), (0, 5));
    }

    #[test]
    fn static_inactive_scene_has_zero_flow() {
        let text = "duration=4\nwidth=16\nheight=16\n[agent]\nclass=car\nactive=false\n0,8,8,6,4,Stop\n3,8,8,6,4,Stop\n";
        let g = generate(&Scenario::parse(text).unwrap()).unwrap();
        for f in &g.flows {
            assert!(f.u().iter().chain(f.v()).all(|v| *v == 0.0));
        }
        assert!(g.ground_truth.is_empty());
    }

    #[test]
    fn deterministic_with_noise() {
        let mut s = ScenarioFamily::default().sample(5);
        s.noise = NoiseModel {
            jitter: 1.0,
            miss_rate: 0.1,
            fp_rate: 0.5,
        };
        assert_eq!(generate(&s).unwrap(), generate(&s).unwrap());
    }

    #[test]
    fn family_agents_stay_in_view() {
        let fam = ScenarioFamily::default();
        for seed in 0..20 {
            let s = fam.sample(seed);
            s.validate().unwrap();
            for i in 0..s.agents.len() {
                for t in 0..s.duration {
                    assert!(s.image_box(i, t).is_some(), "seed {seed} agent {i} frame {t}");
                }
            }
        }
    }

    #[test]
    fn nms_suppresses_same_class_overlap() {
        let b = |x: f64| BoundingBox::new(x, 0.0, x + 10.0, 10.0).unwrap();
        let d = |c: ClassId, conf: f64, x: f64| Detection::new(c, conf, b(x), 0, 0.0).unwrap();
        let kept = nms(&[d(0, 0.5, 0.0), d(0, 0.9, 1.0), d(1, 0.4, 0.0), d(0, 0.3, 30.0)], 0.3);
        let conf: Vec<f64> = kept.iter().map(|k| k.confidence).collect();
        assert_eq!(conf, vec![0.9, 0.4, 0.3]);
    }
}
