//! Synthetic rollouts with planted teachability drops, plus a naive
//! change-point oracle for checking the detector.
//!
//! Teacher log-probs are built so that the top-2 gap at each token equals a
//! drawn target margin: the teacher's favourite sits at `-0.1`, the runner-up
//! at `-0.1 - m`, and the remaining candidates step down by `1.0` below that.
//! Margins are drawn per token as `max(0, mean + noise_std * z)`.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rollout::{RolloutJson, RolloutRecord, TopkJson};

const TEACHER_TOP: f64 = -0.1;
const TAIL_STEP: f64 = 1.0;
const VOCAB: usize = 50_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub num_segments: usize,
    pub tokens_per_segment: usize,
    /// Last segment before the drop; `None` plants no change.
    pub true_tau: Option<usize>,
    pub pre_margin_mean: f64,
    pub post_margin_mean: f64,
    pub noise_std: f64,
    pub support_size: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_segments: 6,
            tokens_per_segment: 10,
            true_tau: Some(3),
            pre_margin_mean: 2.0,
            post_margin_mean: 0.0,
            noise_std: 0.0,
            support_size: 4,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_segments < 1 || self.tokens_per_segment < 1 {
            return Err(Error::invalid("need at least one segment of at least one token"));
        }
        if self.support_size < 2 {
            return Err(Error::invalid("support size must be at least 2"));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::invalid("noise std must be finite and non-negative"));
        }
        for m in [self.pre_margin_mean, self.post_margin_mean] {
            if !(m.is_finite() && m >= 0.0) {
                return Err(Error::invalid("margin means must be finite and non-negative"));
            }
        }
        if let Some(tau) = self.true_tau {
            if tau < 1 || tau >= self.num_segments {
                return Err(Error::invalid(format!(
                    "true tau {tau} outside [1, {}]",
                    self.num_segments.saturating_sub(1)
                )));
            }
            if self.pre_margin_mean <= self.post_margin_mean {
                return Err(Error::invalid("a planted drop needs pre mean > post mean"));
            }
        }
        Ok(())
    }

    /// Mean margin of every segment.
    pub fn segment_means(&self) -> Vec<f64> {
        (0..self.num_segments)
            .map(|i| match self.true_tau {
                Some(tau) if i >= tau => self.post_margin_mean,
                _ => self.pre_margin_mean,
            })
            .collect()
    }
}

/// What the generator planted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub rollout_id: String,
    pub true_tau: Option<usize>,
    #[serde(skip)]
    pub planted_margins: Vec<f64>,
}

/// Mixes a batch seed with a rollout index (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_piecewise_rollout(config: &SyntheticConfig) -> Result<(RolloutRecord, GroundTruth)> {
    config.validate()?;
    let rollout_id = format!("syn-{}", config.seed);
    let (record, planted_margins) = generate_profile_rollout(
        rollout_id.clone(),
        &config.segment_means(),
        config.tokens_per_segment,
        config.noise_std,
        config.support_size,
        config.seed,
    )?;
    Ok((
        record,
        GroundTruth {
            rollout_id,
            true_tau: config.true_tau,
            planted_margins,
        },
    ))
}

/// Rollout `index` of a batch: seeded by [`derive_seed`] and named
/// `syn-{seed}-{index}`.
pub fn generate_indexed(config: &SyntheticConfig, index: usize) -> Result<(RolloutRecord, GroundTruth)> {
    config.validate()?;
    let rollout_id = format!("syn-{}-{index}", config.seed);
    let (record, planted_margins) = generate_profile_rollout(
        rollout_id.clone(),
        &config.segment_means(),
        config.tokens_per_segment,
        config.noise_std,
        config.support_size,
        derive_seed(config.seed, index as u64),
    )?;
    Ok((
        record,
        GroundTruth {
            rollout_id,
            true_tau: config.true_tau,
            planted_margins,
        },
    ))
}

/// `count` rollouts sharing `config`; see [`generate_indexed`].
pub fn generate_batch(config: &SyntheticConfig, count: usize) -> Result<Vec<(RolloutRecord, GroundTruth)>> {
    (0..count).map(|i| generate_indexed(config, i)).collect()
}

/// Builds a rollout whose per-segment mean margins follow `segment_means`.
/// Returns the record and the exact per-token margins it encodes.
pub fn generate_profile_rollout(
    rollout_id: String,
    segment_means: &[f64],
    tokens_per_segment: usize,
    noise_std: f64,
    support_size: usize,
    seed: u64,
) -> Result<(RolloutRecord, Vec<f64>)> {
    if segment_means.is_empty() || tokens_per_segment == 0 {
        return Err(Error::invalid("need at least one segment of at least one token"));
    }
    if !(2..=VOCAB).contains(&support_size) {
        return Err(Error::invalid("support size must be at least 2"));
    }
    if segment_means.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
        return Err(Error::invalid("margin means must be finite and non-negative"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = segment_means.len() * tokens_per_segment;
    let k = support_size;
    let student_row: Vec<f64> = (0..k).map(|j| -0.2 - 0.5 * j as f64).collect();

    let mut tokens = Vec::with_capacity(t);
    let mut teacher_sampled = Vec::with_capacity(t);
    let mut student_sampled = Vec::with_capacity(t);
    let mut ids = Vec::with_capacity(t);
    let mut teacher_rows = Vec::with_capacity(t);
    let mut planted = Vec::with_capacity(t);
    let mut segments = Vec::with_capacity(segment_means.len());

    for (s, &mean) in segment_means.iter().enumerate() {
        let start = s * tokens_per_segment;
        segments.push((start..start + tokens_per_segment).collect::<Vec<usize>>());
        for j in 0..tokens_per_segment {
            let z: f64 = rng.sample(StandardNormal);
            let target = (mean + noise_std * z).max(0.0);

            let slots = index::sample(&mut rng, k, 2);
            let (first, second) = (slots.index(0), slots.index(1));
            let mut teacher = vec![0.0; k];
            teacher[first] = TEACHER_TOP;
            teacher[second] = TEACHER_TOP - target;
            let mut step = 0.0;
            for (slot, value) in teacher.iter_mut().enumerate() {
                if slot != first && slot != second {
                    step += TAIL_STEP;
                    *value = TEACHER_TOP - target - step;
                }
            }
            planted.push(teacher[first] - teacher[second]);

            let sampled = rng.gen_range(0..k);
            teacher_sampled.push(teacher[sampled]);
            student_sampled.push(student_row[sampled]);
            ids.push(
                index::sample(&mut rng, VOCAB, k)
                    .into_iter()
                    .map(|i| i as u64)
                    .collect::<Vec<u64>>(),
            );
            teacher_rows.push(teacher);
            tokens.push(if j + 1 == tokens_per_segment { "." } else { " t" }.to_string());
        }
    }

    let raw = RolloutJson {
        rollout_id,
        tokens,
        teacher_logp: teacher_sampled,
        student_logp: student_sampled,
        loss_mask: vec![1.0; t],
        topk: Some(TopkJson {
            ids,
            student_logp: vec![student_row; t],
            teacher_logp: teacher_rows,
        }),
        segments: Some(segments),
    };
    Ok((RolloutRecord::from_json(raw, false)?, planted))
}

/// Naive one-drop BIC test: every split recomputes its means and residuals
/// from scratch. Returns `(release_segment, accepted, bic_gain)`.
pub fn oracle_change_point(scores: &[f64]) -> (usize, bool, f64) {
    const EPS: f64 = 1e-12;
    let n = scores.len();
    if n < 2 {
        return (n, false, 0.0);
    }
    fn mean(xs: &[f64]) -> f64 {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
    fn rss(xs: &[f64]) -> f64 {
        let m = mean(xs);
        xs.iter().map(|x| (x - m).powi(2)).sum()
    }
    let nf = n as f64;
    let bic0 = nf * ((rss(scores) + EPS) / nf).ln() + nf.ln();

    let mut best_tau = n;
    let mut best_bic = bic0;
    for tau in 1..n {
        let (left, right) = scores.split_at(tau);
        if mean(right) >= mean(left) {
            continue;
        }
        let bic1 = nf * ((rss(left) + rss(right) + EPS) / nf).ln() + 3.0 * nf.ln();
        if bic1 < best_bic {
            best_bic = bic1;
            best_tau = tau;
        }
    }
    (best_tau, best_tau < n, (bic0 - best_bic).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::margin::teacher_top2_margin;

    #[test]
    fn zero_noise_margins_are_exact_per_segment() {
        let (rec, truth) = generate_piecewise_rollout(&SyntheticConfig::default()).unwrap();
        assert_eq!(rec.len(), 60);
        assert_eq!(truth.true_tau, Some(3));
        let m = teacher_top2_margin(&rec, 4).unwrap();
        for (t, &v) in m.values().iter().enumerate() {
            let want = if t < 30 { 2.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-12, "t={t} v={v}");
            assert_eq!(v, truth.planted_margins[t]);
        }
        assert_eq!(rec.segments().unwrap().len(), 6);
    }

    #[test]
    fn same_seed_same_record() {
        let cfg = SyntheticConfig { noise_std: 0.3, seed: 42, ..Default::default() };
        assert_eq!(generate_piecewise_rollout(&cfg).unwrap(), generate_piecewise_rollout(&cfg).unwrap());
        let other = SyntheticConfig { seed: 43, ..cfg.clone() };
        assert_ne!(generate_piecewise_rollout(&cfg).unwrap().0, generate_piecewise_rollout(&other).unwrap().0);
    }

    #[test]
    fn unplanted_means_stay_near_target() {
        let cfg = SyntheticConfig {
            num_segments: 8,
            tokens_per_segment: 200,
            true_tau: None,
            pre_margin_mean: 1.0,
            post_margin_mean: 1.0,
            noise_std: 0.2,
            seed: 9,
            ..Default::default()
        };
        let (rec, _) = generate_piecewise_rollout(&cfg).unwrap();
        let m = teacher_top2_margin(&rec, 4).unwrap();
        let bound = 3.0 * 0.2 / (200f64).sqrt();
        for seg in m.values().chunks(200) {
            let mean = seg.iter().sum::<f64>() / 200.0;
            assert!((mean - 1.0).abs() < bound, "{mean}");
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = SyntheticConfig::default();
        for bad in [
            SyntheticConfig { true_tau: Some(0), ..base.clone() },
            SyntheticConfig { true_tau: Some(6), ..base.clone() },
            SyntheticConfig { pre_margin_mean: 0.0, ..base.clone() },
            SyntheticConfig { noise_std: -1.0, ..base.clone() },
            SyntheticConfig { support_size: 1, ..base.clone() },
            SyntheticConfig { num_segments: 0, true_tau: None, ..base.clone() },
        ] {
            assert!(generate_piecewise_rollout(&bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn builtin_segmenter_agrees_with_planted_segments() {
        let (rec, _) = generate_piecewise_rollout(&SyntheticConfig::default()).unwrap();
        let builtin = crate::segmentation::segment_tokens(rec.token_surfaces()).unwrap();
        assert_eq!(&builtin, rec.segments().unwrap());
    }

    #[test]
    fn batch_ids_and_seeds_are_distinct() {
        let batch = generate_batch(&SyntheticConfig { noise_std: 0.1, ..Default::default() }, 3).unwrap();
        assert_eq!(batch[1].0.rollout_id(), "syn-0-1");
        assert_eq!(batch[1].1.rollout_id, "syn-0-1");
        assert_ne!(batch[0].0.candidates(), batch[1].0.candidates());
        assert_ne!(derive_seed(1, 0), derive_seed(0, 1));
    }

    #[test]
    fn oracle_examples() {
        let (tau, accepted, gain) = oracle_change_point(&[2.0, 2.0, 2.0, 0.0, 0.0, 0.0]);
        assert_eq!((tau, accepted), (3, true));
        assert!((gain - 172.95).abs() < 1e-2);
        assert_eq!(oracle_change_point(&[0.4; 7]), (7, false, 0.0));
        assert_eq!(oracle_change_point(&[1.0]), (1, false, 0.0));
    }
}
