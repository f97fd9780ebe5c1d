//! Pedestrian conflict decision from recent action history.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::model::{action, ActionId, ActionScores};

/// Minimum score for a predicted action to be recorded.
pub const APPEND_THRESHOLD: f64 = 0.5;

/// Fraction of interfering entries above which the pedestrian counts as
/// interfering.
pub const INTERFERENCE_RATIO: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionHistoryEntry {
    pub label: ActionId,
    pub stamp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConflictDecisionSpec {
    pub interference_set: BTreeSet<ActionId>,
    /// Seconds of history considered.
    pub window: f64,
}

impl Default for ConflictDecisionSpec {
    fn default() -> Self {
        Self {
            interference_set: [action::STOP, action::WAIT2X].into_iter().collect(),
            window: 5.0,
        }
    }
}

impl ConflictDecisionSpec {
    pub fn new(interference_set: BTreeSet<ActionId>, window: f64) -> Result<Self> {
        if !(window > 0.0) {
            return Err(Error::invalid(format!("history window must be > 0, got {window}")));
        }
        Ok(Self {
            interference_set,
            window,
        })
    }
}

impl From<&PipelineConfig> for ConflictDecisionSpec {
    fn from(c: &PipelineConfig) -> Self {
        Self {
            interference_set: c.interference_set.clone(),
            window: c.history_window,
        }
    }
}

/// True when more than half of the entries within `spec.window` seconds of
/// `now` carry an interfering label. `history` is most-recent-first; an
/// empty window gives false.
pub fn handle_pedestrian(history: &[ActionHistoryEntry], now: f64, spec: &ConflictDecisionSpec) -> bool {
    let mut total = 0usize;
    let mut interfering = 0usize;
    for entry in history {
        if now - entry.stamp > spec.window {
            break;
        }
        total += 1;
        interfering += usize::from(spec.interference_set.contains(&entry.label));
    }
    total > 0 && interfering as f64 / total as f64 > INTERFERENCE_RATIO
}

/// Records the top-scoring action at the front of `history` if it beats
/// `threshold`. Ties go to the lowest action id.
pub fn append_action(
    history: &mut VecDeque<ActionHistoryEntry>,
    scores: &ActionScores,
    now: f64,
    threshold: f64,
) -> Option<ActionId> {
    let (label, best) = scores.argmax()?;
    if best <= threshold {
        return None;
    }
    let label = label as ActionId;
    history.push_front(ActionHistoryEntry { label, stamp: now });
    Some(label)
}
