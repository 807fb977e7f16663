//! Batch-level rollout diagnostics: positional binning of advantages and
//! margins, release summaries, and the directional SNR release condition.

use std::io::Write;

use serde::Serialize;

use crate::changepoint::ChangeDecision;
use crate::error::{Error, Result};
use crate::segmentation::SegmentScores;

pub const DEFAULT_NUM_BINS: usize = 20;
pub const DEFAULT_GAIN_THRESHOLD: f64 = 6.0;

/// Per-bin statistics over normalized token position. Bins with no tokens
/// carry `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedStats {
    pub num_bins: usize,
    pub bin_mean: Vec<Option<f64>>,
    /// Population standard deviation.
    pub bin_std: Vec<Option<f64>>,
    pub bin_count: Vec<u64>,
    /// `bin_std` over the first non-empty bin's std.
    pub normalized_std: Vec<Option<f64>>,
}

/// Mergeable per-bin count, mean and sum of squared deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct BinAccumulator {
    count: Vec<u64>,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

/// Bin of token `t` in a length-`len` series.
pub fn bin_of(t: usize, len: usize, num_bins: usize) -> usize {
    ((num_bins * t) / len).min(num_bins - 1)
}

impl BinAccumulator {
    pub fn new(num_bins: usize) -> Result<Self> {
        if num_bins < 1 {
            return Err(Error::invalid("number of bins must be at least 1"));
        }
        Ok(Self {
            count: vec![0; num_bins],
            mean: vec![0.0; num_bins],
            m2: vec![0.0; num_bins],
        })
    }

    pub fn num_bins(&self) -> usize {
        self.count.len()
    }

    pub fn push_series(&mut self, values: &[f64]) -> Result<()> {
        if values.is_empty() {
            return Err(Error::invalid("series must hold at least one token"));
        }
        let bins = self.num_bins();
        for (t, &x) in values.iter().enumerate() {
            let b = bin_of(t, values.len(), bins);
            self.count[b] += 1;
            let delta = x - self.mean[b];
            self.mean[b] += delta / self.count[b] as f64;
            self.m2[b] += delta * (x - self.mean[b]);
        }
        Ok(())
    }

    /// Pairwise merge of partial moments.
    pub fn merge(&mut self, other: &BinAccumulator) -> Result<()> {
        if other.num_bins() != self.num_bins() {
            return Err(Error::invalid("cannot merge accumulators with different bin counts"));
        }
        for b in 0..self.num_bins() {
            let (na, nb) = (self.count[b], other.count[b]);
            if nb == 0 {
                continue;
            }
            if na == 0 {
                self.count[b] = nb;
                self.mean[b] = other.mean[b];
                self.m2[b] = other.m2[b];
                continue;
            }
            let n = na + nb;
            let delta = other.mean[b] - self.mean[b];
            self.mean[b] += delta * nb as f64 / n as f64;
            self.m2[b] += other.m2[b] + delta * delta * (na as f64 * nb as f64) / n as f64;
            self.count[b] = n;
        }
        Ok(())
    }

    pub fn finish(&self) -> BinnedStats {
        let bin_mean: Vec<Option<f64>> = (0..self.num_bins())
            .map(|b| (self.count[b] > 0).then_some(self.mean[b]))
            .collect();
        let bin_std: Vec<Option<f64>> = (0..self.num_bins())
            .map(|b| (self.count[b] > 0).then(|| (self.m2[b].max(0.0) / self.count[b] as f64).sqrt()))
            .collect();
        let normalized_std = normalize_by_first(&bin_std, "standard deviation");
        BinnedStats {
            num_bins: self.num_bins(),
            bin_mean,
            bin_std,
            bin_count: self.count.clone(),
            normalized_std,
        }
    }
}

pub(crate) fn normalize_by_first(values: &[Option<f64>], what: &str) -> Vec<Option<f64>> {
    match values.iter().flatten().next() {
        Some(&base) if base != 0.0 => values.iter().map(|v| v.map(|x| x / base)).collect(),
        _ => {
            tracing::warn!("first non-empty bin {what} is zero; normalized values are absent");
            vec![None; values.len()]
        }
    }
}

fn accumulate<S: AsRef<[f64]>>(batch: &[S], num_bins: usize) -> Result<BinAccumulator> {
    let mut acc = BinAccumulator::new(num_bins)?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    for series in batch {
        acc.push_series(series.as_ref())?;
    }
    Ok(acc)
}

/// Pooled mean and population std of token advantages per positional bin.
pub fn binned_advantage_stats<S: AsRef<[f64]>>(batch: &[S], num_bins: usize) -> Result<BinnedStats> {
    Ok(accumulate(batch, num_bins)?.finish())
}

/// Positional margin curve; with `normalize`, bin means are divided by the
/// first non-empty bin's mean.
pub fn binned_margin_curve<S: AsRef<[f64]>>(
    batch: &[S],
    num_bins: usize,
    normalize: bool,
) -> Result<BinnedStats> {
    let mut stats = accumulate(batch, num_bins)?.finish();
    if normalize {
        stats.bin_mean = normalize_by_first(&stats.bin_mean, "mean");
    }
    Ok(stats)
}

/// Batch release statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReleaseSummary {
    pub num_rollouts: usize,
    pub acceptance_rate: f64,
    pub mean_bic_gain: f64,
    pub gain_threshold: f64,
    pub fraction_gain_above_threshold: f64,
    /// Over accepted rollouts only.
    pub mean_relative_release_position: Option<f64>,
    /// Lower midpoint on even counts.
    pub median_relative_release_position: Option<f64>,
    pub mean_pre_margin: Option<f64>,
    pub mean_post_margin: Option<f64>,
}

/// Incremental form of [`release_summary`].
#[derive(Debug, Clone, Default)]
pub struct ReleaseSummaryBuilder {
    num_rollouts: usize,
    gains: Vec<f64>,
    positions: Vec<f64>,
    pre_sum: f64,
    post_sum: f64,
}

impl ReleaseSummaryBuilder {
    pub fn push(&mut self, decision: &ChangeDecision, retained_tokens: usize, response_len: usize) {
        self.num_rollouts += 1;
        self.gains.push(decision.bic_gain());
        if decision.accepted() {
            self.positions.push(retained_tokens as f64 / response_len as f64);
            self.pre_sum += decision.mu_pre().unwrap_or_default();
            self.post_sum += decision.mu_post().unwrap_or_default();
        }
    }

    pub fn is_empty(&self) -> bool {
        self.num_rollouts == 0
    }

    /// Appends another builder's observations after this one's.
    pub fn extend(&mut self, other: &ReleaseSummaryBuilder) {
        self.num_rollouts += other.num_rollouts;
        self.gains.extend_from_slice(&other.gains);
        self.positions.extend_from_slice(&other.positions);
        self.pre_sum += other.pre_sum;
        self.post_sum += other.post_sum;
    }

    pub fn finish(&self, gain_threshold: f64) -> Result<ReleaseSummary> {
        if self.num_rollouts == 0 {
            return Err(Error::EmptyBatch);
        }
        let total = self.num_rollouts as f64;
        let accepted = self.positions.len();
        let over_accepted = |sum: f64| (accepted > 0).then(|| sum / accepted as f64);
        let mut sorted = self.positions.clone();
        sorted.sort_by(f64::total_cmp);
        Ok(ReleaseSummary {
            num_rollouts: self.num_rollouts,
            acceptance_rate: accepted as f64 / total,
            mean_bic_gain: self.gains.iter().sum::<f64>() / total,
            gain_threshold,
            fraction_gain_above_threshold: self.gains.iter().filter(|&&g| g > gain_threshold).count()
                as f64
                / total,
            mean_relative_release_position: over_accepted(self.positions.iter().sum()),
            median_relative_release_position: sorted.get(accepted.saturating_sub(1) / 2).copied(),
            mean_pre_margin: over_accepted(self.pre_sum),
            mean_post_margin: over_accepted(self.post_sum),
        })
    }
}

/// One rollout's inputs to [`release_summary`].
#[derive(Debug, Clone, Copy)]
pub struct ReleaseObservation<'a> {
    pub decision: &'a ChangeDecision,
    pub scores: &'a SegmentScores,
    pub response_len: usize,
}

/// Acceptance rate, BIC gains and relative release positions over a batch.
/// Release positions count retained tokens, not segments.
pub fn release_summary(batch: &[ReleaseObservation<'_>], gain_threshold: f64) -> Result<ReleaseSummary> {
    let mut builder = ReleaseSummaryBuilder::default();
    for obs in batch {
        let retained = if obs.decision.accepted() {
            obs.scores.segment_index().retained_tokens(obs.decision.release_segment())
        } else {
            obs.response_len
        };
        builder.push(obs.decision, retained, obs.response_len);
    }
    builder.finish(gain_threshold)
}

/// Directional SNR of the full update versus the retained prefix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SnrReport {
    pub m_prefix: f64,
    pub v_prefix: f64,
    pub m_suffix: f64,
    pub v_suffix: f64,
    pub snr_full: f64,
    pub snr_release: f64,
    pub release_improves: bool,
    /// `v_R / v_P >= 2 r + r^2` with `r = m_R / m_P`; absent when `m_P = 0`.
    pub inequality_form: Option<bool>,
    pub forms_agree: bool,
}

pub fn snr_release_check(m_prefix: f64, v_prefix: f64, m_suffix: f64, v_suffix: f64) -> Result<SnrReport> {
    if [m_prefix, v_prefix, m_suffix, v_suffix].iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("SNR moments must be finite"));
    }
    if v_prefix <= 0.0 {
        return Err(Error::invalid("prefix variance must be positive"));
    }
    if v_suffix < 0.0 {
        return Err(Error::invalid("suffix variance must be non-negative"));
    }
    let snr_full = (m_prefix + m_suffix).powi(2) / (v_prefix + v_suffix);
    let snr_release = m_prefix * m_prefix / v_prefix;
    let release_improves = snr_release >= snr_full;
    let inequality_form = (m_prefix != 0.0).then(|| {
        let r = m_suffix / m_prefix;
        v_suffix / v_prefix >= 2.0 * r + r * r
    });
    Ok(SnrReport {
        m_prefix,
        v_prefix,
        m_suffix,
        v_suffix,
        snr_full,
        snr_release,
        release_improves,
        inequality_form,
        forms_agree: inequality_form.is_none_or(|f| f == release_improves),
    })
}

/// Spearman rank correlation with average ranks for ties; `None` when either
/// side is constant or fewer than two points.
pub fn spearman_rank_correlation(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut vx, mut vy) = (0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Serialize)]
struct BinRow {
    bin: usize,
    count: u64,
    mean: Option<f64>,
    std: Option<f64>,
    normalized_std: Option<f64>,
}

/// Writes `bin,count,mean,std,normalized_std`; absent values are empty fields.
pub fn write_bins_csv<W: Write>(stats: &BinnedStats, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for b in 0..stats.num_bins {
        w.serialize(BinRow {
            bin: b,
            count: stats.bin_count[b],
            mean: stats.bin_mean[b],
            std: stats.bin_std[b],
            normalized_std: stats.normalized_std[b],
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv<W: Write>(summary: &ReleaseSummary, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.serialize(summary)?;
    w.flush()?;
    Ok(())
}

pub fn write_snr_csv<W: Write>(report: &SnrReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.serialize(report)?;
    w.flush()?;
    Ok(())
}
