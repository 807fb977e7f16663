//! Sentence segments over response tokens and per-segment teachability scores.

use crate::error::{Error, Result};

/// Ordered, disjoint, non-empty token-index lists, one per sentence segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentIndex {
    segments: Vec<Vec<usize>>,
}

impl SegmentIndex {
    /// Validates externally supplied segments. Empty lists are dropped; each
    /// list must be strictly ascending and lie entirely after the previous one.
    pub fn from_lists(lists: Vec<Vec<usize>>) -> Result<Self> {
        let segments: Vec<Vec<usize>> = lists.into_iter().filter(|s| !s.is_empty()).collect();
        if segments.is_empty() {
            return Err(Error::validation("segments", None, "no non-empty segment"));
        }
        let mut last: Option<usize> = None;
        for (i, seg) in segments.iter().enumerate() {
            for &t in seg {
                if last.is_some_and(|prev| t <= prev) {
                    return Err(Error::validation(
                        "segments",
                        i,
                        format!("token {t} breaks ascending, disjoint response order"),
                    ));
                }
                last = Some(t);
            }
        }
        Ok(Self { segments })
    }

    /// Number of segments `n`.
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Vec<usize>> {
        self.segments.iter()
    }

    pub fn segment(&self, i: usize) -> &[usize] {
        &self.segments[i]
    }

    pub fn as_lists(&self) -> &[Vec<usize>] {
        &self.segments
    }

    pub fn to_lists(&self) -> Vec<Vec<usize>> {
        self.segments.clone()
    }

    /// Tokens held by the first `count` segments.
    pub fn retained_tokens(&self, count: usize) -> usize {
        self.segments.iter().take(count).map(Vec::len).sum()
    }

    pub(crate) fn check_range(&self, response_len: usize) -> Result<()> {
        for (i, seg) in self.segments.iter().enumerate() {
            if let Some(&bad) = seg.iter().find(|&&t| t >= response_len) {
                return Err(Error::validation(
                    "segments",
                    i,
                    format!("token index {bad} out of range for response length {response_len}"),
                ));
            }
        }
        Ok(())
    }
}

impl<'a> IntoIterator for &'a SegmentIndex {
    type Item = &'a Vec<usize>;
    type IntoIter = std::slice::Iter<'a, Vec<usize>>;

    fn into_iter(self) -> Self::IntoIter {
        self.segments.iter()
    }
}

const CLOSERS: &[char] = &['"', '\'', ')', ']', '}'];
const TERMINATORS: &[char] = &['.', '!', '?', ';', ':'];

fn closes_segment(surface: &str) -> bool {
    surface.trim_end_matches(CLOSERS).ends_with(TERMINATORS) || surface.contains("\n\n")
}

/// Rule-based sentence segmentation over token surfaces.
///
/// A segment closes after a token whose surface, with trailing closing quotes
/// and brackets removed, ends in `.`, `!`, `?`, `;` or `:`, or after a token
/// containing a blank line. The last token always closes a segment.
pub fn segment_tokens<S: AsRef<str>>(token_surfaces: &[S]) -> Result<SegmentIndex> {
    if token_surfaces.is_empty() {
        return Err(Error::invalid("cannot segment an empty response"));
    }
    let mut segments = Vec::new();
    let mut current = Vec::new();
    for (t, surface) in token_surfaces.iter().enumerate() {
        current.push(t);
        if closes_segment(surface.as_ref()) {
            segments.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        segments.push(current);
    }
    Ok(SegmentIndex { segments })
}

/// Segment teachability scores `S_i = ln(1 + mean margin)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentScores {
    scores: Vec<f64>,
    segment_index: SegmentIndex,
}

impl SegmentScores {
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn segment_index(&self) -> &SegmentIndex {
        &self.segment_index
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Averages token margins within each segment and applies `ln_1p`.
///
/// All tokens of a segment count, whatever their loss mask.
pub fn aggregate_segment_scores(margins: &[f64], segments: &SegmentIndex) -> Result<SegmentScores> {
    segments.check_range(margins.len())?;
    let scores = segments
        .iter()
        .map(|seg| {
            // running mean: exact when all margins in the segment are equal
            let mut mean = 0.0;
            for (k, &t) in seg.iter().enumerate() {
                mean += (margins[t] - mean) / (k + 1) as f64;
            }
            mean.ln_1p()
        })
        .collect();
    Ok(SegmentScores {
        scores,
        segment_index: segments.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lists(index: &SegmentIndex) -> Vec<Vec<usize>> {
        index.to_lists()
    }

    #[test]
    fn single_token_is_one_segment() {
        assert_eq!(lists(&segment_tokens(&["Hello"]).unwrap()), vec![vec![0]]);
    }

    #[test]
    fn punctuation_closes_segments() {
        let toks = ["Let", " x", ".", " Then", " y", "!"];
        assert_eq!(
            lists(&segment_tokens(&toks).unwrap()),
            vec![vec![0, 1, 2], vec![3, 4, 5]]
        );
    }

    #[test]
    fn closers_are_stripped_before_checking() {
        assert_eq!(lists(&segment_tokens(&["a.)", " b"]).unwrap()), vec![vec![0], vec![1]]);
        assert_eq!(
            lists(&segment_tokens(&["x?\"]'", "y", "z;", "w:"]).unwrap()),
            vec![vec![0], vec![1, 2], vec![3]]
        );
    }

    #[test]
    fn blank_lines_close_segments() {
        let toks = ["intro", "\n\n", "body", " text\n", "more"];
        assert_eq!(
            lists(&segment_tokens(&toks).unwrap()),
            vec![vec![0, 1], vec![2, 3, 4]]
        );
    }

    #[test]
    fn decimal_points_inside_tokens_do_not_close() {
        assert_eq!(lists(&segment_tokens(&["3.14", " is", " pi"]).unwrap()), vec![vec![0, 1, 2]]);
    }

    #[test]
    fn empty_input_is_rejected() {
        let empty: [&str; 0] = [];
        assert!(segment_tokens(&empty).is_err());
    }

    #[test]
    fn from_lists_drops_empty_and_checks_order() {
        let idx = SegmentIndex::from_lists(vec![vec![], vec![0, 2], vec![], vec![3]]).unwrap();
        assert_eq!(lists(&idx), vec![vec![0, 2], vec![3]]);
        assert!(SegmentIndex::from_lists(vec![vec![0, 0]]).is_err());
        assert!(SegmentIndex::from_lists(vec![vec![0, 3], vec![2]]).is_err());
        assert!(SegmentIndex::from_lists(vec![vec![], vec![]]).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let one = SegmentIndex::from_lists(vec![vec![0, 1, 2]]).unwrap();
        assert_eq!(aggregate_segment_scores(&[0.0, 0.0, 0.0], &one).unwrap().scores(), &[0.0]);

        let s = aggregate_segment_scores(&[1.0, 1.0, 2.0], &one).unwrap();
        assert!((s.scores()[0] - (7.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!((s.scores()[0] - 0.8473).abs() < 1e-4);

        let two = SegmentIndex::from_lists(vec![vec![0], vec![1]]).unwrap();
        let s = aggregate_segment_scores(&[2.0, 0.0], &two).unwrap();
        assert!((s.scores()[0] - 3f64.ln()).abs() < 1e-12);
        assert_eq!(s.scores()[1], 0.0);
    }

    #[test]
    fn constant_segment_scores_exactly() {
        let idx = SegmentIndex::from_lists(vec![(0..10).collect()]).unwrap();
        for m in [0.1, 0.3, 1.7, 1e-9, 123.456] {
            let s = aggregate_segment_scores(&[m; 10], &idx).unwrap();
            assert_eq!(s.scores()[0], m.ln_1p());
        }
    }

    #[test]
    fn out_of_range_index_names_segment() {
        let idx = SegmentIndex::from_lists(vec![vec![0], vec![1, 5]]).unwrap();
        let err = aggregate_segment_scores(&[0.0, 0.0], &idx).unwrap_err().to_string();
        assert!(err.contains("position 1") && err.contains("token index 5"), "{err}");
    }
}
