use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{HeadGrid, HeadId, Shape};
use crate::probes::Token;

/// One decoding step: the emitted token and every head's attention over
/// the positions visible at that step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub emitted_token: Token,
    pub attention: HeadGrid<Vec<f64>>,
}

/// Per-step, per-head attention recorded while decoding an answer.
///
/// Attention index `i` of head `h` refers to original position
/// `retained[h][i]` when `i` is inside the retained prompt cache, and to
/// the decoded token at position `prompt_len + (i - retained_len)`
/// otherwise. When `retained` is `None` the cache was complete, so index
/// and position coincide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub shape: Shape,
    pub prompt_len: usize,
    pub retained: Option<HeadGrid<Vec<usize>>>,
    pub steps: Vec<StepRecord>,
}

impl AttentionTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Original token position behind attention index `index` of `head`.
    pub fn position_of(&self, head: HeadId, index: usize) -> usize {
        match &self.retained {
            None => index,
            Some(r) => {
                let kept = &r[head];
                if index < kept.len() {
                    kept[index]
                } else {
                    self.prompt_len + (index - kept.len())
                }
            }
        }
    }

    /// Checks that every attention vector is a distribution (sum 1 ± 1e-9).
    pub fn validate(&self) -> Result<()> {
        for (t, step) in self.steps.iter().enumerate() {
            if step.attention.shape() != self.shape {
                return Err(Error::shape(format!("step {t} has a different head shape")));
            }
            for (id, a) in step.attention.iter() {
                let sum: f64 = a.iter().sum();
                if (sum - 1.0).abs() > 1e-9 || a.iter().any(|x| *x < 0.0) {
                    return Err(Error::invalid(format!(
                        "attention of {id} at step {t} is not a distribution (sum {sum})"
                    )));
                }
            }
        }
        Ok(())
    }
}
