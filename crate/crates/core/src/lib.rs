//! Trajectory-specific release of dense on-policy distillation supervision.
//!
//! Per rollout, the teacher's nearest-competitor margin is computed over the
//! student's top-K candidates, averaged over sentence segments, and tested for
//! a single downward shift with a profiled RSS-BIC criterion. When a drop is
//! accepted, token advantages after the drop are masked out and the retained
//! prefix is rescaled so the per-sample loss mass is unchanged.
//!
//! The crate also carries the rollout diagnostics (binned advantage and margin
//! statistics, release summaries, the directional SNR release condition) and a
//! synthetic generator with planted change points.

pub mod changepoint;
pub mod cli;
pub mod diagnostics;
mod error;
pub mod margin;
pub mod pipeline;
pub mod reweight;
pub mod rollout;
pub mod segmentation;
pub mod synthetic;

pub use changepoint::{detect_downward_change, profiled_bic, ChangeDecision, BIC_EPS};
pub use error::{Error, Result};
pub use margin::{teacher_top2_margin, MarginSeries, DEFAULT_SUPPORT_SIZE};
pub use pipeline::{dynamic_prefix_reweight, process_batch, PipelineConfig, Strategy};
pub use reweight::{ReleaseResult, RESCALE_EPS};
pub use rollout::{
    parse_rollout_record, sampled_advantage, AdvantageSeries, RolloutRecord, TokenCandidates,
};
pub use segmentation::{aggregate_segment_scores, segment_tokens, SegmentIndex, SegmentScores};
