//! Magnitude-based screening of client updates before aggregation.

use std::fmt;

use crate::error::{Error, Result};
use crate::federation::ClientUpdate;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ClipBound {
    Fixed(f64),
    /// Median of this round's submitted norms.
    AdaptiveMedian,
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum DefensePolicy {
    #[default]
    None,
    Clip(ClipBound),
    /// Drop updates whose norm exceeds `threshold_multiplier` times the
    /// median norm.
    FlagOutliers {
        threshold_multiplier: f64,
    },
}

impl DefensePolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DefensePolicy::Clip(ClipBound::Fixed(b)) if !(b > 0.0 && b.is_finite()) => Err(
                Error::InvalidArgument(format!("clip bound must be positive, got {b}")),
            ),
            DefensePolicy::FlagOutliers {
                threshold_multiplier: m,
            } if !(m > 1.0 && m.is_finite()) => Err(Error::InvalidArgument(format!(
                "threshold_multiplier must be greater than 1, got {m}"
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubmittedUpdate {
    pub client_id: usize,
    pub update: ClientUpdate,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DefenseAction {
    Clipped {
        client_id: usize,
        original_norm: f64,
        bound: f64,
    },
    Excluded {
        client_id: usize,
        norm: f64,
        threshold: f64,
    },
}

impl DefenseAction {
    pub fn client_id(&self) -> usize {
        match *self {
            DefenseAction::Clipped { client_id, .. }
            | DefenseAction::Excluded { client_id, .. } => client_id,
        }
    }
}

impl fmt::Display for DefenseAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DefenseAction::Clipped { client_id, .. } => write!(f, "clip:{client_id}"),
            DefenseAction::Excluded { client_id, .. } => write!(f, "exclude:{client_id}"),
        }
    }
}

/// Lower median, i.e. the `(len - 1) / 2`-th order statistic. Being an
/// actual element keeps adaptive clipping idempotent.
pub fn median_norm(norms: &[f64]) -> f64 {
    let mut sorted = norms.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted[(sorted.len() - 1) / 2]
}

/// Rescales `update` so its L2 norm is at most `bound`.
pub fn clip_update(update: &ClientUpdate, bound: f64) -> (ClientUpdate, bool) {
    let norm = update.delta.norm();
    if norm <= bound {
        return (update.clone(), false);
    }
    let clipped = ClientUpdate {
        delta: update.delta.scaled(bound / norm),
        reported_count: update.reported_count,
    };
    (clipped, true)
}

/// Screens a round's updates. Reported counts are never altered; surviving
/// updates keep their original order.
pub fn apply_defense(
    updates: &[SubmittedUpdate],
    policy: &DefensePolicy,
) -> (Vec<SubmittedUpdate>, Vec<DefenseAction>) {
    if updates.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let norms: Vec<f64> = updates.iter().map(|s| s.update.delta.norm()).collect();
    let mut actions = Vec::new();
    let screened = match *policy {
        DefensePolicy::None => updates.to_vec(),
        DefensePolicy::Clip(bound) => {
            let bound = match bound {
                ClipBound::Fixed(b) => b,
                ClipBound::AdaptiveMedian => median_norm(&norms),
            };
            updates
                .iter()
                .zip(&norms)
                .map(|(s, &norm)| {
                    let (update, clipped) = clip_update(&s.update, bound);
                    if clipped {
                        actions.push(DefenseAction::Clipped {
                            client_id: s.client_id,
                            original_norm: norm,
                            bound,
                        });
                    }
                    SubmittedUpdate {
                        client_id: s.client_id,
                        update,
                    }
                })
                .collect()
        }
        DefensePolicy::FlagOutliers {
            threshold_multiplier,
        } => {
            let threshold = threshold_multiplier * median_norm(&norms);
            updates
                .iter()
                .zip(&norms)
                .filter(|(s, &norm)| {
                    let excluded = norm > threshold;
                    if excluded {
                        actions.push(DefenseAction::Excluded {
                            client_id: s.client_id,
                            norm,
                            threshold,
                        });
                    }
                    !excluded
                })
                .map(|(s, _)| s.clone())
                .collect()
        }
    };
    (screened, actions)
}
