//! Teacher nearest-competitor margin over the student's top-K support.

use std::sync::Once;

use crate::error::{Error, Result};
use crate::rollout::{RolloutRecord, TokenCandidates};

pub const DEFAULT_SUPPORT_SIZE: usize = 4;

static CLAMP_WARNING: Once = Once::new();

/// Per-token margins `M_t` with the positions (within each candidate list) of
/// the teacher's first and second choice.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginSeries {
    values: Vec<f64>,
    top1_index: Vec<usize>,
    top2_index: Vec<usize>,
    support_size_used: usize,
}

impl MarginSeries {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn top1_index(&self) -> &[usize] {
        &self.top1_index
    }

    pub fn top2_index(&self) -> &[usize] {
        &self.top2_index
    }

    /// Smallest support actually applied at any position after clamping.
    pub fn support_size_used(&self) -> usize {
        self.support_size_used
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl AsRef<[f64]> for MarginSeries {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

/// Ranks the first `support_size` candidates by teacher log-prob (ties by
/// ascending id) and returns `(top1, top2, margin)`.
///
/// `support_size` is clamped to the available candidates; the caller
/// guarantees at least two remain.
pub fn nearest_competitor(cands: &TokenCandidates, support_size: usize) -> (usize, usize, f64) {
    let k = support_size.min(cands.len());
    debug_assert!(k >= 2);
    let teacher = cands.teacher_logp();
    let ids = cands.candidate_ids();
    let beats = |a: usize, b: usize| {
        teacher[a] > teacher[b] || (teacher[a] == teacher[b] && ids[a] < ids[b])
    };

    let (mut first, mut second) = if beats(1, 0) { (1, 0) } else { (0, 1) };
    for j in 2..k {
        if beats(j, first) {
            second = first;
            first = j;
        } else if beats(j, second) {
            second = j;
        }
    }
    (first, second, teacher[first] - teacher[second])
}

/// Computes `M_t` at every position of `record`.
pub fn teacher_top2_margin(record: &RolloutRecord, support_size: usize) -> Result<MarginSeries> {
    if support_size < 2 {
        return Err(Error::invalid(format!(
            "support size must be at least 2, got {support_size}"
        )));
    }
    let candidates = record.candidates().ok_or_else(|| {
        Error::validation("topk", None, "record carries no top-K candidates")
    })?;

    let t = candidates.len();
    let mut values = Vec::with_capacity(t);
    let mut top1_index = Vec::with_capacity(t);
    let mut top2_index = Vec::with_capacity(t);
    let mut used = support_size;

    for (pos, cands) in candidates.iter().enumerate() {
        if cands.len() < 2 {
            return Err(Error::validation(
                "topk",
                pos,
                "student top-K must expose at least two teacher log-probabilities",
            ));
        }
        if cands.len() < support_size {
            used = used.min(cands.len());
            CLAMP_WARNING.call_once(|| {
                tracing::warn!(
                    rollout_id = record.rollout_id(),
                    requested = support_size,
                    available = cands.len(),
                    "support size exceeds exported top-K; clamping"
                );
            });
        }
        let (first, second, margin) = nearest_competitor(cands, support_size);
        values.push(margin);
        top1_index.push(first);
        top2_index.push(second);
    }

    Ok(MarginSeries {
        values,
        top1_index,
        top2_index,
        support_size_used: used,
    })
}
