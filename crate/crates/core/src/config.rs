//! Run configuration, read from a flat `key = value` text file.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are rejected.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{action, ActionId};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Frames per clip window (`l`); must be even.
    pub clip_length: usize,
    /// Temporal length of the slow pathway; must divide `clip_length`.
    pub slow_length: usize,
    pub iou_assoc_threshold: f64,
    /// Maximum number of consecutive unobserved frames a track survives.
    pub kalman_delta_t: usize,
    /// Weight of the velocity-direction consistency term in association.
    pub kalman_inertia: f64,
    pub kalman_obs_noise_pos: f64,
    pub kalman_obs_noise_shape: f64,
    pub kalman_process_noise_pos: f64,
    pub kalman_process_noise_vel: f64,
    /// Longest gap (frames) bridged by linear box interpolation in tubelets.
    pub interp_max_gap: usize,
    pub trim_epsilon: f64,
    pub nms_threshold: f64,
    pub pseudo_conf_threshold: f64,
    pub pseudo_iou_threshold: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub interference_set: BTreeSet<ActionId>,
    /// Seconds of action history considered by the conflict decision.
    pub history_window: f64,
    pub roi_out: usize,
    pub roi_samples: usize,
    pub roi_offset: f64,
    pub pyramid_levels: usize,
    pub feature_channels: usize,
    pub feature_seed: u64,
    pub n_actions: usize,
    /// Attention width; `0` means "same as the feature channels".
    pub attention_dim: usize,
    pub interaction_depth: usize,
    pub layer_norm_eps: f64,
    pub norm_gain: f64,
    pub norm_bias: f64,
    pub dropout_rate: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub train_seed: u64,
    /// Number of generated scenes used to fit classifier weights when no
    /// weights file is given.
    pub train_scenes: usize,
    /// Classifier weights for `run`; trained on the scenario family when unset.
    pub weights: Option<PathBuf>,
    /// Frames per second used to derive timestamps.
    pub frame_rate: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            clip_length: 32,
            slow_length: 8,
            iou_assoc_threshold: 0.3,
            kalman_delta_t: 3,
            kalman_inertia: 0.2,
            kalman_obs_noise_pos: 1.0,
            kalman_obs_noise_shape: 10.0,
            kalman_process_noise_pos: 1.0,
            kalman_process_noise_vel: 1e-2,
            interp_max_gap: 32,
            trim_epsilon: 0.001,
            nms_threshold: 0.3,
            pseudo_conf_threshold: 0.9,
            pseudo_iou_threshold: 0.2,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            interference_set: [action::STOP, action::WAIT2X].into_iter().collect(),
            history_window: 5.0,
            roi_out: 7,
            roi_samples: 2,
            roi_offset: 0.0,
            pyramid_levels: 3,
            feature_channels: 8,
            feature_seed: 17,
            n_actions: action::COUNT,
            attention_dim: 0,
            interaction_depth: 1,
            layer_norm_eps: 1e-5,
            norm_gain: 1.0,
            norm_bias: 0.0,
            dropout_rate: 0.2,
            learning_rate: 0.003,
            momentum: 0.9,
            weight_decay: 1e-5,
            epochs: 60,
            batch_size: 16,
            train_seed: 1,
            train_scenes: 12,
            weights: None,
            frame_rate: 10.0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_action_set(value: &str) -> Result<BTreeSet<ActionId>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| action::parse(s).ok_or_else(|| Error::Config(format!("unknown action `{s}`"))))
        .collect()
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "clip_length" => self.clip_length = parse_num(key, value)?,
            "slow_length" => self.slow_length = parse_num(key, value)?,
            "iou_assoc_threshold" => self.iou_assoc_threshold = parse_num(key, value)?,
            "kalman_delta_t" => self.kalman_delta_t = parse_num(key, value)?,
            "kalman_inertia" => self.kalman_inertia = parse_num(key, value)?,
            "kalman_obs_noise_pos" => self.kalman_obs_noise_pos = parse_num(key, value)?,
            "kalman_obs_noise_shape" => self.kalman_obs_noise_shape = parse_num(key, value)?,
            "kalman_process_noise_pos" => self.kalman_process_noise_pos = parse_num(key, value)?,
            "kalman_process_noise_vel" => self.kalman_process_noise_vel = parse_num(key, value)?,
            "interp_max_gap" => self.interp_max_gap = parse_num(key, value)?,
            "trim_epsilon" => self.trim_epsilon = parse_num(key, value)?,
            "nms_threshold" => self.nms_threshold = parse_num(key, value)?,
            "pseudo_conf_threshold" => self.pseudo_conf_threshold = parse_num(key, value)?,
            "pseudo_iou_threshold" => self.pseudo_iou_threshold = parse_num(key, value)?,
            "focal_gamma" => self.focal_gamma = parse_num(key, value)?,
            "focal_alpha" => self.focal_alpha = parse_num(key, value)?,
            "interference_set" => self.interference_set = parse_action_set(value)?,
            "history_window" => self.history_window = parse_num(key, value)?,
            "roi_out" => self.roi_out = parse_num(key, value)?,
            "roi_samples" => self.roi_samples = parse_num(key, value)?,
            "roi_offset" => self.roi_offset = parse_num(key, value)?,
            "pyramid_levels" => self.pyramid_levels = parse_num(key, value)?,
            "feature_channels" => self.feature_channels = parse_num(key, value)?,
            "feature_seed" => self.feature_seed = parse_num(key, value)?,
            "n_actions" => self.n_actions = parse_num(key, value)?,
            "attention_dim" => self.attention_dim = parse_num(key, value)?,
            "interaction_depth" => self.interaction_depth = parse_num(key, value)?,
            "layer_norm_eps" => self.layer_norm_eps = parse_num(key, value)?,
            "norm_gain" => self.norm_gain = parse_num(key, value)?,
            "norm_bias" => self.norm_bias = parse_num(key, value)?,
            "dropout_rate" => self.dropout_rate = parse_num(key, value)?,
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "momentum" => self.momentum = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "train_seed" => self.train_seed = parse_num(key, value)?,
            "train_scenes" => self.train_scenes = parse_num(key, value)?,
            "weights" => {
                self.weights = (!value.is_empty()).then(|| PathBuf::from(value));
            }
            "frame_rate" => self.frame_rate = parse_num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.clip_length == 0 || self.clip_length % 2 != 0 {
            return fail(format!("clip_length {} must be even and > 0", self.clip_length));
        }
        if self.slow_length == 0 || self.clip_length % self.slow_length != 0 {
            return fail(format!(
                "slow_length {} must divide clip_length {}",
                self.slow_length, self.clip_length
            ));
        }
        let unit = [
            ("iou_assoc_threshold", self.iou_assoc_threshold),
            ("kalman_inertia", self.kalman_inertia),
            ("nms_threshold", self.nms_threshold),
            ("pseudo_conf_threshold", self.pseudo_conf_threshold),
            ("pseudo_iou_threshold", self.pseudo_iou_threshold),
            ("dropout_rate", self.dropout_rate),
            ("momentum", self.momentum),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} = {v} must lie in [0, 1]"));
            }
        }
        if self.dropout_rate >= 1.0 {
            return fail("dropout_rate must be < 1".into());
        }
        if !(self.trim_epsilon > 0.0 && self.trim_epsilon < 1.0) {
            return fail(format!("trim_epsilon {} must lie in (0, 1)", self.trim_epsilon));
        }
        if self.focal_gamma < 0.0 || !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            return fail("focal_gamma must be >= 0 and focal_alpha in (0, 1)".into());
        }
        if !(self.history_window > 0.0) {
            return fail("history_window must be > 0".into());
        }
        for (name, v) in [
            ("kalman_obs_noise_pos", self.kalman_obs_noise_pos),
            ("kalman_obs_noise_shape", self.kalman_obs_noise_shape),
            ("kalman_process_noise_pos", self.kalman_process_noise_pos),
            ("kalman_process_noise_vel", self.kalman_process_noise_vel),
            ("layer_norm_eps", self.layer_norm_eps),
            ("frame_rate", self.frame_rate),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.learning_rate < 0.0 || self.weight_decay < 0.0 {
            return fail("learning_rate and weight_decay must be >= 0".into());
        }
        for (name, v) in [
            ("roi_out", self.roi_out),
            ("roi_samples", self.roi_samples),
            ("pyramid_levels", self.pyramid_levels),
            ("feature_channels", self.feature_channels),
            ("n_actions", self.n_actions),
            ("interaction_depth", self.interaction_depth),
            ("batch_size", self.batch_size),
            ("train_scenes", self.train_scenes),
        ] {
            if v == 0 {
                return fail(format!("{name} must be >= 1"));
            }
        }
        Ok(())
    }

    /// Serializes every key, so `parse(to_kv_string())` reproduces `self`.
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let set: Vec<String> = self.interference_set.iter().map(|a| a.to_string()).collect();
        let _ = writeln!(s, "clip_length = {}", self.clip_length);
        let _ = writeln!(s, "slow_length = {}", self.slow_length);
        let _ = writeln!(s, "iou_assoc_threshold = {:?}", self.iou_assoc_threshold);
        let _ = writeln!(s, "kalman_delta_t = {}", self.kalman_delta_t);
        let _ = writeln!(s, "kalman_inertia = {:?}", self.kalman_inertia);
        let _ = writeln!(s, "kalman_obs_noise_pos = {:?}", self.kalman_obs_noise_pos);
        let _ = writeln!(s, "kalman_obs_noise_shape = {:?}", self.kalman_obs_noise_shape);
        let _ = writeln!(s, "kalman_process_noise_pos = {:?}", self.kalman_process_noise_pos);
        let _ = writeln!(s, "kalman_process_noise_vel = {:?}", self.kalman_process_noise_vel);
        let _ = writeln!(s, "interp_max_gap = {}", self.interp_max_gap);
        let _ = writeln!(s, "trim_epsilon = {:?}", self.trim_epsilon);
        let _ = writeln!(s, "nms_threshold = {:?}", self.nms_threshold);
        let _ = writeln!(s, "pseudo_conf_threshold = {:?}", self.pseudo_conf_threshold);
        let _ = writeln!(s, "pseudo_iou_threshold = {:?}", self.pseudo_iou_threshold);
        let _ = writeln!(s, "focal_gamma = {:?}", self.focal_gamma);
        let _ = writeln!(s, "focal_alpha = {:?}", self.focal_alpha);
        let _ = writeln!(s, "interference_set = {}", set.join(","));
        let _ = writeln!(s, "history_window = {:?}", self.history_window);
        let _ = writeln!(s, "roi_out = {}", self.roi_out);
        let _ = writeln!(s, "roi_samples = {}", self.roi_samples);
        let _ = writeln!(s, "roi_offset = {:?}", self.roi_offset);
        let _ = writeln!(s, "pyramid_levels = {}", self.pyramid_levels);
        let _ = writeln!(s, "feature_channels = {}", self.feature_channels);
        let _ = writeln!(s, "feature_seed = {}", self.feature_seed);
        let _ = writeln!(s, "n_actions = {}", self.n_actions);
        let _ = writeln!(s, "attention_dim = {}", self.attention_dim);
        let _ = writeln!(s, "interaction_depth = {}", self.interaction_depth);
        let _ = writeln!(s, "layer_norm_eps = {:?}", self.layer_norm_eps);
        let _ = writeln!(s, "norm_gain = {:?}", self.norm_gain);
        let _ = writeln!(s, "norm_bias = {:?}", self.norm_bias);
        let _ = writeln!(s, "dropout_rate = {:?}", self.dropout_rate);
        let _ = writeln!(s, "learning_rate = {:?}", self.learning_rate);
        let _ = writeln!(s, "momentum = {:?}", self.momentum);
        let _ = writeln!(s, "weight_decay = {:?}", self.weight_decay);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "train_seed = {}", self.train_seed);
        let _ = writeln!(s, "train_scenes = {}", self.train_scenes);
        if let Some(w) = &self.weights {
            let _ = writeln!(s, "weights = {}", w.display());
        }
        let _ = writeln!(s, "frame_rate = {:?}", self.frame_rate);
        s
    }

    pub fn alpha(&self) -> usize {
        self.clip_length / self.slow_length
    }
}
