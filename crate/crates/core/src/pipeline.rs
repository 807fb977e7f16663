//! End-to-end release computation per rollout and over JSONL batches.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::changepoint::{detect_downward_change_with_eps, ChangeDecision, BIC_EPS};
use crate::diagnostics::{
    normalize_by_first, BinAccumulator, BinnedStats, ReleaseSummary, ReleaseSummaryBuilder,
    DEFAULT_GAIN_THRESHOLD, DEFAULT_NUM_BINS,
};
use crate::error::{Error, Result};
use crate::margin::{teacher_top2_margin, MarginSeries, DEFAULT_SUPPORT_SIZE};
use crate::reweight::{
    build_prefix_mask, fixed_prefix_mask, permute_release_points, rescale_advantages, ReleaseResult,
    ReleaseSlot, RESCALE_EPS,
};
use crate::rollout::{parse_rollout_record_with, sampled_advantage, AdvantageSeries, RolloutRecord};
use crate::segmentation::{aggregate_segment_scores, segment_tokens, SegmentIndex, SegmentScores};

/// How supervision is masked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Trajectory-specific release at the detected drop.
    BicRelease,
    /// Dense supervision everywhere.
    Full,
    /// Keep a fixed number of leading tokens.
    FixedPrefix(usize),
    /// Detected release points shuffled across the batch.
    RandomRelease { seed: u64 },
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::BicRelease => "bic",
            Strategy::Full => "full",
            Strategy::FixedPrefix(_) => "fixed",
            Strategy::RandomRelease { .. } => "random",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::FixedPrefix(k) => write!(f, "fixed:{k}"),
            Strategy::RandomRelease { seed } => write!(f, "random:{seed}"),
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    /// Accepts `bic`, `full`, `fixed:K`, `random` and `random:SEED`.
    fn from_str(s: &str) -> Result<Self> {
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (s, None),
        };
        let number = |a: &str| {
            a.parse::<u64>()
                .map_err(|_| Error::Config(format!("invalid number `{a}` in strategy `{s}`")))
        };
        match (head, arg) {
            ("bic", None) => Ok(Strategy::BicRelease),
            ("full", None) => Ok(Strategy::Full),
            ("fixed", Some(k)) => {
                let k = number(k)? as usize;
                if k < 1 {
                    return Err(Error::Config("fixed prefix must keep at least one token".into()));
                }
                Ok(Strategy::FixedPrefix(k))
            }
            ("random", None) => Ok(Strategy::RandomRelease { seed: 0 }),
            ("random", Some(seed)) => Ok(Strategy::RandomRelease { seed: number(seed)? }),
            _ => Err(Error::Config(format!(
                "unknown strategy `{s}` (expected bic, full, fixed:K or random)"
            ))),
        }
    }
}

/// Where segment boundaries come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentsSource {
    /// Record-supplied segments, falling back to the built-in segmenter.
    Record,
    /// Always the built-in segmenter.
    Builtin,
}

impl FromStr for SegmentsSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "record" => Ok(SegmentsSource::Record),
            "builtin" => Ok(SegmentsSource::Builtin),
            _ => Err(Error::Config(format!("unknown segments source `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub support_size: usize,
    pub bic_eps: f64,
    pub rescale_eps: f64,
    pub num_bins: usize,
    pub gain_threshold: f64,
    pub strategy: Strategy,
    pub segments_source: SegmentsSource,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            support_size: DEFAULT_SUPPORT_SIZE,
            bic_eps: BIC_EPS,
            rescale_eps: RESCALE_EPS,
            num_bins: DEFAULT_NUM_BINS,
            gain_threshold: DEFAULT_GAIN_THRESHOLD,
            strategy: Strategy::BicRelease,
            segments_source: SegmentsSource::Record,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.support_size < 2 {
            return Err(Error::Config("support size must be at least 2".into()));
        }
        if !(self.bic_eps > 0.0 && self.rescale_eps > 0.0) {
            return Err(Error::Config("eps values must be positive".into()));
        }
        if self.num_bins < 1 {
            return Err(Error::Config("number of bins must be at least 1".into()));
        }
        if let Strategy::FixedPrefix(0) = self.strategy {
            return Err(Error::Config("fixed prefix must keep at least one token".into()));
        }
        Ok(())
    }
}

/// Segments used for a record under `source`.
pub fn resolve_segments(record: &RolloutRecord, source: SegmentsSource) -> Result<SegmentIndex> {
    match (source, record.segments()) {
        (SegmentsSource::Record, Some(segments)) => Ok(segments.clone()),
        _ => segment_tokens(record.token_surfaces()),
    }
}

/// Intermediate quantities of the release rule for one rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub advantages: AdvantageSeries,
    pub margins: MarginSeries,
    pub segments: SegmentIndex,
    pub scores: SegmentScores,
    pub decision: ChangeDecision,
}

impl Analysis {
    /// Tokens kept by this rollout's own release.
    pub fn retained_tokens(&self) -> usize {
        if self.decision.accepted() {
            self.segments.retained_tokens(self.decision.release_segment())
        } else {
            self.advantages.len()
        }
    }
}

/// Margins, segment scores and the change decision for one rollout.
pub fn analyze_rollout(record: &RolloutRecord, config: &PipelineConfig) -> Result<Analysis> {
    let margins = teacher_top2_margin(record, config.support_size)?;
    let segments = resolve_segments(record, config.segments_source)?;
    let scores = aggregate_segment_scores(margins.values(), &segments)?;
    let decision = detect_downward_change_with_eps(scores.scores(), config.bic_eps);
    Ok(Analysis {
        advantages: sampled_advantage(record),
        margins,
        segments,
        scores,
        decision,
    })
}

fn finish(
    advantages: &AdvantageSeries,
    record: &RolloutRecord,
    prefix_mask: Vec<f64>,
    decision: Option<ChangeDecision>,
    config: &PipelineConfig,
) -> Result<ReleaseResult> {
    let rescaled = rescale_advantages(advantages.values(), record.loss_mask(), &prefix_mask, config.rescale_eps)?;
    Ok(ReleaseResult {
        prefix_mask,
        scale: rescaled.scale,
        rescaled_advantages: rescaled.advantages,
        decision,
    })
}

/// Release rule for a single rollout. `random_release` needs a batch and is
/// rejected here.
pub fn dynamic_prefix_reweight(record: &RolloutRecord, config: &PipelineConfig) -> Result<ReleaseResult> {
    match config.strategy {
        Strategy::Full => {
            let advantages = sampled_advantage(record);
            finish(&advantages, record, vec![1.0; record.len()], None, config)
        }
        Strategy::FixedPrefix(k) => {
            let advantages = sampled_advantage(record);
            finish(&advantages, record, fixed_prefix_mask(record.len(), k)?, None, config)
        }
        Strategy::BicRelease => {
            let analysis = analyze_rollout(record, config)?;
            release_from_analysis(record, &analysis, config)
        }
        Strategy::RandomRelease { .. } => Err(Error::Config(
            "random release permutes release points across a batch; use process_batch".into(),
        )),
    }
}

fn release_from_analysis(record: &RolloutRecord, analysis: &Analysis, config: &PipelineConfig) -> Result<ReleaseResult> {
    let mask = build_prefix_mask(&analysis.segments, &analysis.decision, record.len())?;
    finish(&analysis.advantages, record, mask, Some(analysis.decision), config)
}

/// The `release` object appended to each output record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReleaseJson {
    pub strategy: String,
    pub accepted: bool,
    /// Segments kept; absent for strategies that ignore segments.
    pub release_segment: Option<usize>,
    pub bic_gain: f64,
    pub scale: f64,
    pub prefix_mask: Vec<f64>,
    pub rescaled_advantages: Vec<f64>,
}

#[derive(Serialize)]
struct OutputLine<'a> {
    #[serde(flatten)]
    rollout: crate::rollout::RolloutView<'a>,
    release: &'a ReleaseJson,
}

/// Serializes a processed record as one output line (no newline).
pub fn output_line(record: &RolloutRecord, segments: Option<&SegmentIndex>, release: &ReleaseJson) -> String {
    let segments = segments.or(record.segments());
    serde_json::to_string(&OutputLine {
        rollout: record.view(segments),
        release,
    })
    .expect("output serialization cannot fail")
}

/// Options for [`process_batch`].
#[derive(Debug, Clone, Copy, Default)]
pub struct BatchOptions {
    /// Abort on the first bad record instead of logging and skipping it.
    pub strict: bool,
    /// Top-K arrays hold probabilities rather than log-probs.
    pub probs: bool,
}

/// Counts and aggregate statistics of one batch run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchReport {
    pub rollouts: usize,
    pub errors: usize,
    pub accepted: usize,
    pub acceptance_rate: f64,
    /// Release statistics of the change-point decisions, when the strategy
    /// computes them.
    pub summary: Option<ReleaseSummary>,
}

struct Processed {
    line: String,
    decision: Option<(ChangeDecision, usize, usize)>,
    accepted: bool,
}

const CHUNK_LINES: usize = 512;

fn record_error(line: usize, text: &str, err: Error) -> Error {
    #[derive(Deserialize)]
    struct IdOnly {
        rollout_id: String,
    }
    let rollout_id = serde_json::from_str::<IdOnly>(text).ok().map(|r| r.rollout_id);
    Error::Record {
        line,
        rollout_id,
        source: Box::new(err),
    }
}

fn process_one(text: &str, config: &PipelineConfig, options: &BatchOptions) -> Result<Processed> {
    let record = parse_rollout_record_with(text, options.probs)?;
    let strategy = config.strategy.name().to_string();
    match config.strategy {
        Strategy::BicRelease => {
            let analysis = analyze_rollout(&record, config)?;
            let result = release_from_analysis(&record, &analysis, config)?;
            let d = analysis.decision;
            let release = ReleaseJson {
                strategy,
                accepted: d.accepted(),
                release_segment: Some(d.release_segment()),
                bic_gain: d.bic_gain(),
                scale: result.scale,
                prefix_mask: result.prefix_mask,
                rescaled_advantages: result.rescaled_advantages,
            };
            Ok(Processed {
                line: output_line(&record, Some(&analysis.segments), &release),
                decision: Some((d, analysis.retained_tokens(), record.len())),
                accepted: d.accepted(),
            })
        }
        Strategy::Full | Strategy::FixedPrefix(_) => {
            let result = dynamic_prefix_reweight(&record, config)?;
            let release = ReleaseJson {
                strategy,
                accepted: false,
                release_segment: None,
                bic_gain: 0.0,
                scale: result.scale,
                prefix_mask: result.prefix_mask,
                rescaled_advantages: result.rescaled_advantages,
            };
            Ok(Processed {
                line: output_line(&record, None, &release),
                decision: None,
                accepted: false,
            })
        }
        Strategy::RandomRelease { .. } => unreachable!("random release runs in two passes"),
    }
}

/// Runs the configured strategy over JSONL rollouts, writing one output line
/// per healthy record in input order.
///
/// Blank lines are skipped. Bad records are logged and skipped unless
/// `options.strict`, which returns the first failure as [`Error::Record`].
/// Random release buffers the whole input, since the permutation spans the
/// batch.
pub fn process_batch<R: BufRead, W: Write>(
    input: R,
    mut output: W,
    config: &PipelineConfig,
    options: &BatchOptions,
) -> Result<BatchReport> {
    config.validate()?;
    let mut report = Tally::default();
    let mut lines = input.lines().enumerate();

    if let Strategy::RandomRelease { seed } = config.strategy {
        let mut healthy = Vec::new();
        loop {
            let chunk = read_chunk(&mut lines)?;
            if chunk.is_empty() {
                break;
            }
            let results: Vec<_> = chunk
                .par_iter()
                .map(|(line_no, text)| {
                    parse_rollout_record_with(text, options.probs)
                        .and_then(|r| analyze_rollout(&r, config).map(|a| (r, a)))
                        .map_err(|e| record_error(*line_no, text, e))
                })
                .collect();
            for result in results {
                match result {
                    Ok(pair) => healthy.push(pair),
                    Err(err) => report.fail(err, options.strict)?,
                }
            }
        }
        write_random_release(&healthy, seed, config, &mut output, &mut report)?;
    } else {
        loop {
            let chunk = read_chunk(&mut lines)?;
            if chunk.is_empty() {
                break;
            }
            let results: Vec<_> = chunk
                .par_iter()
                .map(|(line_no, text)| {
                    process_one(text, config, options).map_err(|e| record_error(*line_no, text, e))
                })
                .collect();
            for result in results {
                match result {
                    Ok(processed) => report.write(processed, &mut output)?,
                    Err(err) => report.fail(err, options.strict)?,
                }
            }
        }
    }
    output.flush()?;
    report.finish(config.gain_threshold)
}

fn write_random_release<W: Write>(
    healthy: &[(RolloutRecord, Analysis)],
    seed: u64,
    config: &PipelineConfig,
    output: &mut W,
    report: &mut Tally,
) -> Result<()> {
    let slots: Vec<ReleaseSlot<'_>> = healthy
        .iter()
        .map(|(record, analysis)| ReleaseSlot {
            response_len: record.len(),
            segments: &analysis.segments,
            retained_tokens: analysis.retained_tokens(),
            accepted: analysis.decision.accepted(),
        })
        .collect();
    let assignments = permute_release_points(&slots, seed);
    let lines: Vec<Result<Processed>> = healthy
        .par_iter()
        .zip(slots.par_iter().zip(&assignments))
        .map(|((record, analysis), (slot, assignment))| {
            let mask = assignment.mask(slot)?;
            let result = finish(&analysis.advantages, record, mask, Some(analysis.decision), config)?;
            let release = ReleaseJson {
                strategy: Strategy::RandomRelease { seed }.name().to_string(),
                accepted: assignment.accepted,
                release_segment: Some(assignment.release_segment),
                bic_gain: healthy[assignment.source].1.decision.bic_gain(),
                scale: result.scale,
                prefix_mask: result.prefix_mask,
                rescaled_advantages: result.rescaled_advantages,
            };
            Ok(Processed {
                line: output_line(record, Some(&analysis.segments), &release),
                decision: Some((analysis.decision, analysis.retained_tokens(), record.len())),
                accepted: assignment.accepted,
            })
        })
        .collect();
    for processed in lines {
        report.write(processed?, output)?;
    }
    Ok(())
}

type NumberedLines<R> = std::iter::Enumerate<std::io::Lines<R>>;

fn read_chunk<R: BufRead>(lines: &mut NumberedLines<R>) -> Result<Vec<(usize, String)>> {
    let mut chunk = Vec::with_capacity(CHUNK_LINES);
    for (i, line) in lines.by_ref() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        chunk.push((i + 1, line));
        if chunk.len() == CHUNK_LINES {
            break;
        }
    }
    Ok(chunk)
}

#[derive(Default)]
struct Tally {
    rollouts: usize,
    errors: usize,
    accepted: usize,
    summary: ReleaseSummaryBuilder,
}

impl Tally {
    fn write<W: Write>(&mut self, processed: Processed, output: &mut W) -> Result<()> {
        output.write_all(processed.line.as_bytes())?;
        output.write_all(b"\n")?;
        self.rollouts += 1;
        self.accepted += usize::from(processed.accepted);
        if let Some((decision, retained, len)) = processed.decision {
            self.summary.push(&decision, retained, len);
        }
        Ok(())
    }

    fn fail(&mut self, err: Error, strict: bool) -> Result<()> {
        if strict {
            return Err(err);
        }
        tracing::error!("skipping {err}");
        self.errors += 1;
        Ok(())
    }

    fn finish(self, gain_threshold: f64) -> Result<BatchReport> {
        let summary = if self.summary.is_empty() {
            None
        } else {
            Some(self.summary.finish(gain_threshold)?)
        };
        Ok(BatchReport {
            rollouts: self.rollouts,
            errors: self.errors,
            accepted: self.accepted,
            acceptance_rate: if self.rollouts == 0 {
                0.0
            } else {
                self.accepted as f64 / self.rollouts as f64
            },
            summary,
        })
    }
}

/// Binned statistics and release summary over a rollout batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnosis {
    pub advantages: BinnedStats,
    /// Normalized by the first non-empty bin's mean.
    pub margins: BinnedStats,
    pub summary: ReleaseSummary,
    pub errors: usize,
}

struct DiagnosisPartial {
    advantages: BinAccumulator,
    margins: BinAccumulator,
    summary: ReleaseSummaryBuilder,
}

/// Release-rule diagnostics over JSONL rollouts. Bad records are skipped and
/// counted unless `options.strict`.
pub fn diagnose_batch<R: BufRead>(input: R, config: &PipelineConfig, options: &BatchOptions) -> Result<Diagnosis> {
    config.validate()?;
    let mut advantages = BinAccumulator::new(config.num_bins)?;
    let mut margins = BinAccumulator::new(config.num_bins)?;
    let mut summary = ReleaseSummaryBuilder::default();
    let mut errors = 0;
    let mut lines = input.lines().enumerate();
    loop {
        let chunk = read_chunk(&mut lines)?;
        if chunk.is_empty() {
            break;
        }
        let results: Vec<Result<Analysis>> = chunk
            .par_iter()
            .map(|(line_no, text)| {
                parse_rollout_record_with(text, options.probs)
                    .and_then(|r| analyze_rollout(&r, config))
                    .map_err(|e| record_error(*line_no, text, e))
            })
            .collect();
        let mut partial = DiagnosisPartial {
            advantages: BinAccumulator::new(config.num_bins)?,
            margins: BinAccumulator::new(config.num_bins)?,
            summary: ReleaseSummaryBuilder::default(),
        };
        for result in results {
            match result {
                Ok(analysis) => {
                    partial.advantages.push_series(analysis.advantages.values())?;
                    partial.margins.push_series(analysis.margins.values())?;
                    partial
                        .summary
                        .push(&analysis.decision, analysis.retained_tokens(), analysis.advantages.len());
                }
                Err(err) if options.strict => return Err(err),
                Err(err) => {
                    tracing::error!("skipping {err}");
                    errors += 1;
                }
            }
        }
        advantages.merge(&partial.advantages)?;
        margins.merge(&partial.margins)?;
        summary.extend(&partial.summary);
    }
    let mut margin_stats = margins.finish();
    margin_stats.bin_mean = normalize_by_first(&margin_stats.bin_mean, "mean");
    Ok(Diagnosis {
        advantages: advantages.finish(),
        margins: margin_stats,
        summary: summary.finish(config.gain_threshold)?,
        errors,
    })
}

/// Applies the random-release control to the output of a `bic` release run.
///
/// Each line must carry a `release` object; its prefix mask gives the
/// rollout's own retained tokens. Segments come from the record, or from the
/// built-in segmenter when absent.
pub fn permute_batch<R: BufRead, W: Write>(
    input: R,
    mut output: W,
    seed: u64,
    config: &PipelineConfig,
    options: &BatchOptions,
) -> Result<BatchReport> {
    #[derive(Deserialize)]
    struct ReleaseOnly {
        release: ReleaseJson,
    }

    config.validate()?;
    let mut report = Tally::default();
    let mut healthy = Vec::new();
    let mut lines = input.lines().enumerate();
    loop {
        let chunk = read_chunk(&mut lines)?;
        if chunk.is_empty() {
            break;
        }
        let results: Vec<_> = chunk
            .par_iter()
            .map(|(line_no, text)| {
                let parsed = parse_rollout_record_with(text, options.probs).and_then(|record| {
                    let release: ReleaseOnly =
                        serde_json::from_str(text).map_err(|e| crate::rollout::json_error(text, &e))?;
                    let release = release.release;
                    if release.prefix_mask.len() != record.len() {
                        return Err(Error::validation(
                            "release.prefix_mask",
                            None,
                            "length does not match the response",
                        ));
                    }
                    let segments = resolve_segments(&record, config.segments_source)?;
                    let retained = release.prefix_mask.iter().filter(|&&q| q > 0.0).count();
                    Ok((record, segments, release, retained))
                });
                parsed.map_err(|e| record_error(*line_no, text, e))
            })
            .collect();
        for result in results {
            match result {
                Ok(entry) => healthy.push(entry),
                Err(err) => report.fail(err, options.strict)?,
            }
        }
    }

    let slots: Vec<ReleaseSlot<'_>> = healthy
        .iter()
        .map(|(record, segments, release, retained)| ReleaseSlot {
            response_len: record.len(),
            segments,
            retained_tokens: if release.accepted { *retained } else { record.len() },
            accepted: release.accepted,
        })
        .collect();
    let assignments = permute_release_points(&slots, seed);
    let lines: Vec<Result<Processed>> = healthy
        .par_iter()
        .zip(slots.par_iter().zip(&assignments))
        .map(|((record, segments, _, _), (slot, assignment))| {
            let mask = assignment.mask(slot)?;
            let advantages = sampled_advantage(record);
            let result = finish(&advantages, record, mask, None, config)?;
            let release = ReleaseJson {
                strategy: "random".to_string(),
                accepted: assignment.accepted,
                release_segment: Some(assignment.release_segment),
                bic_gain: healthy[assignment.source].2.bic_gain,
                scale: result.scale,
                prefix_mask: result.prefix_mask,
                rescaled_advantages: result.rescaled_advantages,
            };
            Ok(Processed {
                line: output_line(record, Some(segments), &release),
                decision: None,
                accepted: assignment.accepted,
            })
        })
        .collect();
    for processed in lines {
        report.write(processed?, &mut output)?;
    }
    output.flush()?;
    report.finish(config.gain_threshold)
}
