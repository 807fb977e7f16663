//! Single downward change point in segment scores, chosen by profiled RSS-BIC.
//!
//! The no-change model fits one mean (`k = 1`); the one-drop model fits a mean
//! on each side of a split plus the split itself (`k = 3`). Noise variance is
//! profiled out through `RSS / n`, so
//!
//! ```text
//! BIC = n ln((RSS + eps) / n) + k ln n
//! ```
//!
//! Only splits whose right-hand mean is strictly below the left-hand mean are
//! candidates. Among them the earliest split with minimal BIC wins, and the
//! drop is accepted when it beats the no-change model.

use crate::error::{Error, Result};
use crate::segmentation::SegmentScores;

/// Additive floor inside the log of the profiled BIC.
pub const BIC_EPS: f64 = 1e-12;
/// Free parameters of the no-change model.
pub const NULL_MODEL_PARAMS: usize = 1;
/// Free parameters of the one-drop model.
pub const DROP_MODEL_PARAMS: usize = 3;

/// Outcome of the one-drop test for one rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChangeDecision {
    release_segment: usize,
    accepted: bool,
    bic_gain: f64,
    mu_pre: Option<f64>,
    mu_post: Option<f64>,
    bic_null: Option<f64>,
    bic_drop: Option<f64>,
}

impl ChangeDecision {
    /// Leading segments kept: the split when accepted, `n` otherwise.
    pub fn release_segment(&self) -> usize {
        self.release_segment
    }

    pub fn accepted(&self) -> bool {
        self.accepted
    }

    /// `BIC_0 - BIC_1(split)`, zero when not accepted.
    pub fn bic_gain(&self) -> f64 {
        self.bic_gain
    }

    /// Mean score left of the split, or over all segments when not accepted.
    /// Absent only for an empty score sequence.
    pub fn mu_pre(&self) -> Option<f64> {
        self.mu_pre
    }

    /// Mean score right of the split; present only when accepted.
    pub fn mu_post(&self) -> Option<f64> {
        self.mu_post
    }

    /// BIC of the no-change model; absent when fewer than two scores.
    pub fn bic_null(&self) -> Option<f64> {
        self.bic_null
    }

    /// Best one-drop BIC over downward candidates, whether or not it was accepted.
    pub fn bic_drop(&self) -> Option<f64> {
        self.bic_drop
    }
}

fn bic(n: usize, rss: f64, num_params: usize, eps: f64) -> f64 {
    let nf = n as f64;
    nf * ((rss + eps) / nf).ln() + num_params as f64 * nf.ln()
}

/// Profiled RSS-BIC for a fitted model over `values` with residual sum of
/// squares `rss` and `num_params` free parameters.
pub fn profiled_bic(values: &[f64], rss: f64, num_params: usize) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("BIC requires at least one value"));
    }
    Ok(bic(values.len(), rss, num_params, BIC_EPS))
}

/// Running mean and sum of squared deviations after each prefix of `values`.
fn running_moments<'a>(values: impl Iterator<Item = &'a f64>) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(values.size_hint().0);
    let (mut mean, mut m2) = (0.0f64, 0.0f64);
    for (i, &x) in values.enumerate() {
        let delta = x - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (x - mean);
        out.push((mean, m2));
    }
    out
}

pub fn detect_downward_change(scores: &SegmentScores) -> ChangeDecision {
    detect_downward_change_with_eps(scores.scores(), BIC_EPS)
}

/// Runs the one-drop test on raw scores with an explicit BIC floor.
pub fn detect_downward_change_with_eps(values: &[f64], eps: f64) -> ChangeDecision {
    let n = values.len();
    let mean_all = (n > 0).then(|| values.iter().sum::<f64>() / n as f64);
    if n < 2 {
        return ChangeDecision {
            release_segment: n,
            accepted: false,
            bic_gain: 0.0,
            mu_pre: mean_all,
            mu_post: None,
            bic_null: None,
            bic_drop: None,
        };
    }

    let mean = mean_all.unwrap_or_default();
    let rss0: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    let bic0 = bic(n, rss0, NULL_MODEL_PARAMS, eps);

    // left[i] covers values[..=i]; right[i] covers the last i + 1 values
    let left = running_moments(values.iter());
    let right = running_moments(values.iter().rev());

    let mut best: Option<(usize, f64)> = None;
    for tau in 1..n {
        let (mean_left, rss_left) = left[tau - 1];
        let (mean_right, rss_right) = right[n - tau - 1];
        if mean_right >= mean_left {
            continue;
        }
        let bic1 = bic(n, rss_left + rss_right, DROP_MODEL_PARAMS, eps);
        if best.is_none_or(|(_, b)| bic1 < b) {
            best = Some((tau, bic1));
        }
    }

    match best {
        Some((tau, bic1)) if bic1 < bic0 => ChangeDecision {
            release_segment: tau,
            accepted: true,
            bic_gain: (bic0 - bic1).max(0.0),
            mu_pre: Some(left[tau - 1].0),
            mu_post: Some(right[n - tau - 1].0),
            bic_null: Some(bic0),
            bic_drop: Some(bic1),
        },
        _ => ChangeDecision {
            release_segment: n,
            accepted: false,
            bic_gain: 0.0,
            mu_pre: mean_all,
            mu_post: None,
            bic_null: Some(bic0),
            bic_drop: best.map(|(_, b)| b),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bic_examples() {
        let single = profiled_bic(&[5.0], 0.0, 1).unwrap();
        assert!((single - 1e-12f64.ln()).abs() < 1e-9);
        assert!((single + 27.631).abs() < 1e-3);

        let six = [0.0; 6];
        assert!((profiled_bic(&six, 6.0, 1).unwrap() - 6f64.ln()).abs() < 1e-9);
        assert!((profiled_bic(&six, 6.0, 1).unwrap() - 1.79176).abs() < 1e-5);
        let drop = profiled_bic(&six, 0.0, 3).unwrap();
        assert!((drop - (6.0 * (1e-12f64 / 6.0).ln() + 3.0 * 6f64.ln())).abs() < 1e-9);
        assert!((drop + 171.16).abs() < 1e-2);
    }

    #[test]
    fn bic_needs_values() {
        assert!(profiled_bic(&[], 1.0, 1).is_err());
    }

    #[test]
    fn hand_worked_drop() {
        let d = detect_downward_change_with_eps(&[2.0, 2.0, 2.0, 0.0, 0.0, 0.0], BIC_EPS);
        assert!(d.accepted());
        assert_eq!(d.release_segment(), 3);
        assert!((d.bic_null().unwrap() - 1.79176).abs() < 1e-4);
        assert!((d.bic_drop().unwrap() + 171.16).abs() < 1e-2);
        assert!((d.bic_gain() - 172.95).abs() < 1e-2);
        assert_eq!(d.mu_pre(), Some(2.0));
        assert_eq!(d.mu_post(), Some(0.0));
    }

    #[test]
    fn constant_scores_have_no_candidates() {
        for c in [0.0, 0.1, 0.7, 3.3] {
            let d = detect_downward_change_with_eps(&[c; 4], BIC_EPS);
            assert!(!d.accepted());
            assert_eq!(d.release_segment(), 4);
            assert_eq!(d.bic_gain(), 0.0);
            assert_eq!(d.bic_drop(), None);
        }
    }

    #[test]
    fn upward_shift_is_not_released() {
        let d = detect_downward_change_with_eps(&[0.0, 0.0, 0.0, 2.0, 2.0, 2.0], BIC_EPS);
        assert!(!d.accepted());
        assert_eq!(d.release_segment(), 6);
        assert_eq!(d.bic_drop(), None);
        assert_eq!(d.mu_post(), None);
    }

    #[test]
    fn short_sequences_fall_back() {
        let d = detect_downward_change_with_eps(&[1.0], BIC_EPS);
        assert_eq!((d.release_segment(), d.accepted(), d.bic_gain()), (1, false, 0.0));
        let d = detect_downward_change_with_eps(&[], BIC_EPS);
        assert_eq!((d.release_segment(), d.accepted()), (0, false));
        assert_eq!(d.mu_pre(), None);
    }

    #[test]
    fn two_point_drop_is_not_accepted() {
        // a zero-residual split outweighs the extra 2 ln 2 of penalty
        let d = detect_downward_change_with_eps(&[1.0, 0.0], BIC_EPS);
        let bic0 = 2.0 * ((0.5 + BIC_EPS) / 2.0).ln() + 2f64.ln();
        let bic1 = 2.0 * (BIC_EPS / 2.0).ln() + 3.0 * 2f64.ln();
        assert_eq!(d.accepted(), bic1 < bic0);
        assert_eq!(d.release_segment(), 1);
    }

    #[test]
    fn ties_resolve_to_earliest_split() {
        // splits at 1 and 2 have identical RSS (0.125), exact in binary
        let values = [1.0, 0.5, 0.0];
        let d = detect_downward_change_with_eps(&values, BIC_EPS);
        let rss = |tau: usize| {
            let (l, r) = values.split_at(tau);
            let ss = |s: &[f64]| {
                let m = s.iter().sum::<f64>() / s.len() as f64;
                s.iter().map(|v| (v - m).powi(2)).sum::<f64>()
            };
            ss(l) + ss(r)
        };
        assert_eq!(rss(1), rss(2));
        assert!(d.accepted());
        assert_eq!(d.release_segment(), 1);
    }
}
