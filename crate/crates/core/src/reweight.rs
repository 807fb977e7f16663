//! Prefix masks, loss-mass-preserving rescaling, and the baseline masking
//! strategies (fixed prefix, random release).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::changepoint::ChangeDecision;
use crate::error::{Error, Result};
use crate::segmentation::SegmentIndex;

/// Floor on the kept loss mass in the rescale denominator.
pub const RESCALE_EPS: f64 = 1e-8;

/// Token mask, rescale factor and rescaled advantages for one rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct ReleaseResult {
    pub prefix_mask: Vec<f64>,
    pub scale: f64,
    pub rescaled_advantages: Vec<f64>,
    /// Change-point decision behind the mask; absent for strategies that do
    /// not run the test (`full`, `fixed_prefix`).
    pub decision: Option<ChangeDecision>,
}

/// Mask that keeps the first `keep` segments and drops everything else,
/// including positions no segment covers.
pub fn segment_prefix_mask(
    segments: &SegmentIndex,
    keep: usize,
    response_len: usize,
) -> Result<Vec<f64>> {
    segments.check_range(response_len)?;
    let mut mask = vec![0.0; response_len];
    for &t in segments.iter().take(keep).flatten() {
        mask[t] = 1.0;
    }
    Ok(mask)
}

/// Converts a change decision into a token mask `q_t`.
pub fn build_prefix_mask(
    segments: &SegmentIndex,
    decision: &ChangeDecision,
    response_len: usize,
) -> Result<Vec<f64>> {
    if decision.accepted() {
        segment_prefix_mask(segments, decision.release_segment(), response_len)
    } else {
        segments.check_range(response_len)?;
        Ok(vec![1.0; response_len])
    }
}

/// Scale and masked advantages from [`rescale_advantages`].
#[derive(Debug, Clone, PartialEq)]
pub struct Rescaled {
    pub scale: f64,
    pub advantages: Vec<f64>,
}

/// `A'_t = A_t q_t (sum l) / max(sum l q, eps)`.
pub fn rescale_advantages(
    advantages: &[f64],
    loss_mask: &[f64],
    prefix_mask: &[f64],
    eps: f64,
) -> Result<Rescaled> {
    if advantages.len() != loss_mask.len() || advantages.len() != prefix_mask.len() {
        return Err(Error::invalid(format!(
            "length mismatch: {} advantages, {} loss mask, {} prefix mask",
            advantages.len(),
            loss_mask.len(),
            prefix_mask.len()
        )));
    }
    let total: f64 = loss_mask.iter().sum();
    let kept: f64 = loss_mask.iter().zip(prefix_mask).map(|(l, q)| l * q).sum();
    let scale = total / kept.max(eps);
    let advantages = advantages
        .iter()
        .zip(prefix_mask)
        .map(|(a, q)| a * q * scale)
        .collect();
    Ok(Rescaled { scale, advantages })
}

/// Keeps the first `prefix_tokens` positions regardless of content.
pub fn fixed_prefix_mask(response_len: usize, prefix_tokens: usize) -> Result<Vec<f64>> {
    if prefix_tokens < 1 {
        return Err(Error::invalid("fixed prefix must keep at least one token"));
    }
    let keep = prefix_tokens.min(response_len);
    let mut mask = vec![0.0; response_len];
    mask[..keep].fill(1.0);
    Ok(mask)
}

/// One rollout's release point as seen by the random-release control.
#[derive(Debug, Clone, Copy)]
pub struct ReleaseSlot<'a> {
    pub response_len: usize,
    pub segments: &'a SegmentIndex,
    /// Tokens kept by the rollout's own release.
    pub retained_tokens: usize,
    pub accepted: bool,
}

impl ReleaseSlot<'_> {
    /// Retained tokens over response length.
    pub fn relative_position(&self) -> f64 {
        self.retained_tokens as f64 / self.response_len as f64
    }
}

/// Release point transferred onto a rollout by [`permute_release_points`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReleaseAssignment {
    /// Batch index of the rollout whose release point was transferred.
    pub source: usize,
    /// The source's relative release position, unchanged.
    pub relative_position: f64,
    pub accepted: bool,
    /// Segments kept on the target after snapping.
    pub release_segment: usize,
    pub retained_tokens: usize,
}

impl ReleaseAssignment {
    pub fn mask(&self, slot: &ReleaseSlot<'_>) -> Result<Vec<f64>> {
        if self.accepted {
            segment_prefix_mask(slot.segments, self.release_segment, slot.response_len)
        } else {
            Ok(vec![1.0; slot.response_len])
        }
    }
}

/// First segment boundary whose cumulative token count reaches `cutoff`;
/// always keeps at least one segment.
fn snap_to_boundary(segments: &SegmentIndex, cutoff: f64, response_len: usize) -> (usize, usize) {
    let tol = 1e-9 * response_len as f64;
    let mut kept = 0;
    for (i, seg) in segments.iter().enumerate() {
        kept += seg.len();
        if kept as f64 >= cutoff - tol {
            return (i + 1, kept);
        }
    }
    (segments.len(), kept)
}

/// Random-release control: shuffles release points across the batch with a
/// seeded ChaCha8 permutation.
///
/// Each target receives another rollout's relative release position and
/// acceptance flag. An accepted position is mapped to a token cutoff on the
/// target and snapped forward to the next segment boundary; a non-accepted
/// one means full supervision. The output is indexed by target rollout and
/// depends on batch order.
pub fn permute_release_points(batch: &[ReleaseSlot<'_>], seed: u64) -> Vec<ReleaseAssignment> {
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    order
        .iter()
        .zip(batch)
        .map(|(&source, target)| {
            let src = &batch[source];
            let relative_position = src.relative_position();
            let (release_segment, retained_tokens) = if src.accepted {
                snap_to_boundary(
                    target.segments,
                    relative_position * target.response_len as f64,
                    target.response_len,
                )
            } else {
                (target.segments.len(), target.response_len)
            };
            ReleaseAssignment {
                source,
                relative_position,
                accepted: src.accepted,
                release_segment,
                retained_tokens,
            }
        })
        .collect()
}
