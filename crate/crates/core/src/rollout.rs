//! Rollout data model, its JSONL form, and validation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmentation::SegmentIndex;

/// Floor applied to probabilities before taking logs when ingesting `--probs` input.
pub const PROB_FLOOR: f64 = 1e-12;

/// The student's top-K candidates at one prefix, with teacher and student log-probs.
///
/// Candidates are ordered by descending student log-prob, ties by ascending id.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenCandidates {
    ids: Vec<u64>,
    student_logp: Vec<f64>,
    teacher_logp: Vec<f64>,
}

impl TokenCandidates {
    /// Builds a candidate list that must already be in canonical student order.
    pub fn new(ids: Vec<u64>, student_logp: Vec<f64>, teacher_logp: Vec<f64>) -> Result<Self> {
        let candidates = Self {
            ids,
            student_logp,
            teacher_logp,
        };
        candidates.validate(None)?;
        Ok(candidates)
    }

    /// Builds a candidate list from columns in any order, sorting them into
    /// canonical student order first.
    pub fn from_unordered(
        ids: Vec<u64>,
        student_logp: Vec<f64>,
        teacher_logp: Vec<f64>,
    ) -> Result<Self> {
        let mut candidates = Self {
            ids,
            student_logp,
            teacher_logp,
        };
        candidates.check_shape(None)?;
        candidates.canonicalize();
        candidates.validate(None)?;
        Ok(candidates)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn candidate_ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn student_logp(&self) -> &[f64] {
        &self.student_logp
    }

    pub fn teacher_logp(&self) -> &[f64] {
        &self.teacher_logp
    }

    fn canonicalize(&mut self) {
        let mut order: Vec<usize> = (0..self.ids.len()).collect();
        order.sort_by(|&a, &b| {
            self.student_logp[b]
                .total_cmp(&self.student_logp[a])
                .then(self.ids[a].cmp(&self.ids[b]))
        });
        self.ids = order.iter().map(|&i| self.ids[i]).collect();
        self.student_logp = order.iter().map(|&i| self.student_logp[i]).collect();
        self.teacher_logp = order.iter().map(|&i| self.teacher_logp[i]).collect();
    }

    fn check_shape(&self, position: Option<usize>) -> Result<()> {
        let k = self.ids.len();
        if self.student_logp.len() != k || self.teacher_logp.len() != k {
            return Err(Error::validation(
                "topk",
                position,
                format!(
                    "length mismatch: {} ids, {} student_logp, {} teacher_logp",
                    k,
                    self.student_logp.len(),
                    self.teacher_logp.len()
                ),
            ));
        }
        if k < 2 {
            return Err(Error::validation(
                "topk",
                position,
                format!("need at least 2 candidates, got {k}"),
            ));
        }
        Ok(())
    }

    fn validate(&self, position: Option<usize>) -> Result<()> {
        self.check_shape(position)?;
        check_logps("topk.student_logp", position, &self.student_logp)?;
        check_logps("topk.teacher_logp", position, &self.teacher_logp)?;
        for j in 1..self.ids.len() {
            if self.ids[..j].contains(&self.ids[j]) {
                return Err(Error::validation(
                    "topk.ids",
                    position,
                    format!("duplicate candidate id {}", self.ids[j]),
                ));
            }
            let (prev, cur) = (self.student_logp[j - 1], self.student_logp[j]);
            if cur > prev || (cur == prev && self.ids[j] < self.ids[j - 1]) {
                return Err(Error::validation(
                    "topk.student_logp",
                    position,
                    format!("candidates not in student top-K order at slot {j}"),
                ));
            }
        }
        Ok(())
    }
}

fn check_logps(field: &'static str, position: Option<usize>, values: &[f64]) -> Result<()> {
    for &v in values {
        if !v.is_finite() {
            return Err(Error::validation(field, position, "non-finite log-probability"));
        }
        if v > 0.0 {
            return Err(Error::validation(field, position, "log-probability > 0"));
        }
    }
    Ok(())
}

/// Per-token teacher-minus-student log-probability of the sampled token.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageSeries(Vec<f64>);

impl AdvantageSeries {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(t) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation("advantages", t, "non-finite advantage"));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// One student rollout, validated.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    rollout_id: String,
    token_surfaces: Vec<String>,
    sampled_teacher_logp: Vec<f64>,
    sampled_student_logp: Vec<f64>,
    candidates: Option<Vec<TokenCandidates>>,
    loss_mask: Vec<f64>,
    segments: Option<SegmentIndex>,
}

impl RolloutRecord {
    pub fn rollout_id(&self) -> &str {
        &self.rollout_id
    }

    /// Response length T.
    pub fn len(&self) -> usize {
        self.token_surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_surfaces.is_empty()
    }

    pub fn token_surfaces(&self) -> &[String] {
        &self.token_surfaces
    }

    pub fn sampled_teacher_logp(&self) -> &[f64] {
        &self.sampled_teacher_logp
    }

    pub fn sampled_student_logp(&self) -> &[f64] {
        &self.sampled_student_logp
    }

    pub fn candidates(&self) -> Option<&[TokenCandidates]> {
        self.candidates.as_deref()
    }

    pub fn loss_mask(&self) -> &[f64] {
        &self.loss_mask
    }

    pub fn segments(&self) -> Option<&SegmentIndex> {
        self.segments.as_ref()
    }

    /// Validates the serialized form. `probs` reinterprets the top-K arrays as
    /// probabilities and converts them to floored natural logs.
    pub fn from_json(raw: RolloutJson, probs: bool) -> Result<Self> {
        let t = raw.tokens.len();
        if t == 0 {
            return Err(Error::validation("tokens", None, "empty response"));
        }
        for (field, len) in [
            ("teacher_logp", raw.teacher_logp.len()),
            ("student_logp", raw.student_logp.len()),
            ("loss_mask", raw.loss_mask.len()),
        ] {
            if len != t {
                return Err(Error::validation(
                    field,
                    None,
                    format!("length mismatch: {len} values for {t} tokens"),
                ));
            }
        }
        for (field, values) in [
            ("teacher_logp", &raw.teacher_logp),
            ("student_logp", &raw.student_logp),
        ] {
            for (pos, &v) in values.iter().enumerate() {
                check_logps(field, Some(pos), &[v])?;
            }
        }
        for (pos, &l) in raw.loss_mask.iter().enumerate() {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::validation("loss_mask", pos, "value outside [0, 1]"));
            }
        }
        if !raw.loss_mask.iter().any(|&l| l > 0.0) {
            return Err(Error::validation("loss_mask", None, "no token participates in the loss"));
        }

        let candidates = match raw.topk {
            None => None,
            Some(topk) => Some(convert_topk(topk, t, probs)?),
        };

        let segments = match raw.segments {
            None => None,
            Some(lists) => {
                let index = SegmentIndex::from_lists(lists)?;
                index.check_range(t)?;
                Some(index)
            }
        };

        Ok(Self {
            rollout_id: raw.rollout_id,
            token_surfaces: raw.tokens,
            sampled_teacher_logp: raw.teacher_logp,
            sampled_student_logp: raw.student_logp,
            candidates,
            loss_mask: raw.loss_mask,
            segments,
        })
    }

    pub fn to_json(&self) -> RolloutJson {
        RolloutJson {
            rollout_id: self.rollout_id.clone(),
            tokens: self.token_surfaces.clone(),
            teacher_logp: self.sampled_teacher_logp.clone(),
            student_logp: self.sampled_student_logp.clone(),
            loss_mask: self.loss_mask.clone(),
            topk: self.candidates.as_ref().map(|cands| TopkJson {
                ids: cands.iter().map(|c| c.ids.clone()).collect(),
                student_logp: cands.iter().map(|c| c.student_logp.clone()).collect(),
                teacher_logp: cands.iter().map(|c| c.teacher_logp.clone()).collect(),
            }),
            segments: self.segments.as_ref().map(|s| s.to_lists()),
        }
    }

    /// One JSONL line (no trailing newline).
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&self.view(self.segments.as_ref())).expect("rollout serialization cannot fail")
    }

    /// Borrowed serialized form with `segments` overridden.
    pub(crate) fn view<'a>(&'a self, segments: Option<&'a SegmentIndex>) -> RolloutView<'a> {
        RolloutView {
            rollout_id: &self.rollout_id,
            tokens: &self.token_surfaces,
            teacher_logp: &self.sampled_teacher_logp,
            student_logp: &self.sampled_student_logp,
            loss_mask: &self.loss_mask,
            topk: self.candidates.as_ref().map(|cands| TopkView {
                ids: cands.iter().map(|c| c.ids.as_slice()).collect(),
                student_logp: cands.iter().map(|c| c.student_logp.as_slice()).collect(),
                teacher_logp: cands.iter().map(|c| c.teacher_logp.as_slice()).collect(),
            }),
            segments: segments.map(SegmentIndex::as_lists),
        }
    }
}

#[derive(Serialize)]
pub(crate) struct RolloutView<'a> {
    rollout_id: &'a str,
    tokens: &'a [String],
    teacher_logp: &'a [f64],
    student_logp: &'a [f64],
    loss_mask: &'a [f64],
    #[serde(skip_serializing_if = "Option::is_none")]
    topk: Option<TopkView<'a>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    segments: Option<&'a [Vec<usize>]>,
}

#[derive(Serialize)]
struct TopkView<'a> {
    ids: Vec<&'a [u64]>,
    student_logp: Vec<&'a [f64]>,
    teacher_logp: Vec<&'a [f64]>,
}

fn convert_topk(topk: TopkJson, t: usize, probs: bool) -> Result<Vec<TokenCandidates>> {
    for (field, len) in [
        ("topk.ids", topk.ids.len()),
        ("topk.student_logp", topk.student_logp.len()),
        ("topk.teacher_logp", topk.teacher_logp.len()),
    ] {
        if len != t {
            return Err(Error::validation(
                field,
                None,
                format!("length mismatch: {len} positions for {t} tokens"),
            ));
        }
    }
    let rows = topk
        .ids
        .into_iter()
        .zip(topk.student_logp)
        .zip(topk.teacher_logp);
    let mut out = Vec::with_capacity(t);
    for (pos, ((ids, student), teacher)) in rows.enumerate() {
        let mut cands = TokenCandidates {
            ids,
            student_logp: student,
            teacher_logp: teacher,
        };
        if probs {
            cands.check_shape(Some(pos))?;
            cands.student_logp = probs_to_logps("topk.student_logp", pos, &cands.student_logp)?;
            cands.teacher_logp = probs_to_logps("topk.teacher_logp", pos, &cands.teacher_logp)?;
            // flooring can create new ties
            cands.canonicalize();
        }
        cands.validate(Some(pos))?;
        out.push(cands);
    }
    Ok(out)
}

fn probs_to_logps(field: &'static str, pos: usize, probs: &[f64]) -> Result<Vec<f64>> {
    probs
        .iter()
        .map(|&p| {
            if !(0.0..=1.0).contains(&p) {
                Err(Error::validation(field, pos, "probability outside [0, 1]"))
            } else {
                Ok(p.max(PROB_FLOOR).ln())
            }
        })
        .collect()
}

/// Serialized rollout, one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutJson {
    pub rollout_id: String,
    pub tokens: Vec<String>,
    pub teacher_logp: Vec<f64>,
    pub student_logp: Vec<f64>,
    pub loss_mask: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topk: Option<TopkJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segments: Option<Vec<Vec<usize>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopkJson {
    pub ids: Vec<Vec<u64>>,
    pub student_logp: Vec<Vec<f64>>,
    pub teacher_logp: Vec<Vec<f64>>,
}

/// Parses and validates one JSONL record with log-prob top-K arrays.
pub fn parse_rollout_record(line: &str) -> Result<RolloutRecord> {
    parse_rollout_record_with(line, false)
}

pub fn parse_rollout_record_with(line: &str, probs: bool) -> Result<RolloutRecord> {
    let raw: RolloutJson = serde_json::from_str(line).map_err(|e| json_error(line, &e))?;
    RolloutRecord::from_json(raw, probs)
}

/// Converts a serde_json error into a byte-offset parse error.
pub(crate) fn json_error(text: &str, err: &serde_json::Error) -> Error {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(err.line().saturating_sub(1))
        .map(str::len)
        .sum();
    Error::Parse {
        offset: line_start + err.column().saturating_sub(1),
        message: err.to_string(),
    }
}

/// Teacher minus student log-prob of each sampled token.
pub fn sampled_advantage(record: &RolloutRecord) -> AdvantageSeries {
    AdvantageSeries(
        record
            .sampled_teacher_logp
            .iter()
            .zip(&record.sampled_student_logp)
            .map(|(t, s)| t - s)
            .collect(),
    )
}
