use std::ops::Range;

use serde::Serialize;

use crate::error::{Error, Result};

/// One block-processing step: queries are the `center` frames plus copies of
/// the `right` frames; keys span `history ∪ carried ∪ center ∪ right`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Segment {
    /// Left context inherited from before the base window (after the cap).
    pub history: Range<usize>,
    /// Leading part of the base window moved into the left context.
    pub carried: Range<usize>,
    pub center: Range<usize>,
    pub right: Range<usize>,
    /// The unaltered center this chunk was cut from (clamped to the utterance).
    pub base_window: Range<usize>,
}

impl Segment {
    /// Full left block `history ∪ carried`.
    pub fn left(&self) -> Range<usize> {
        self.history.start..self.carried.end
    }

    /// Contiguous frame range visible to this segment's queries.
    pub fn span(&self) -> Range<usize> {
        self.history.start..self.right.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ContextPlan {
    pub frames: usize,
    pub base_segment: usize,
    pub domain_center: usize,
    pub right_ctx: usize,
    pub left_cap: Option<usize>,
    pub segments: Vec<Segment>,
}

/// Split an utterance of `frames` encoder frames into chunks of
/// `domain_center` frames.
///
/// Each chunk is the trailing `domain_center` frames of a `base_segment`-long
/// window; the window's leading `base_segment − domain_center` frames are
/// carried into the left block. History before the window is truncated to the
/// `left_cap` most recent frames when a cap is set.
pub fn plan_contexts(
    frames: usize,
    base_segment: usize,
    domain_center: usize,
    right_ctx: usize,
    left_cap: Option<usize>,
) -> Result<ContextPlan> {
    if domain_center == 0 {
        return Err(Error::InvalidInput("domain center must be at least one frame".into()));
    }
    if domain_center > base_segment {
        return Err(Error::InvalidInput(format!(
            "domain center {domain_center} exceeds base segment {base_segment}"
        )));
    }
    if frames == 0 {
        return Err(Error::InvalidInput("cannot plan an empty utterance".into()));
    }
    let mut segments = Vec::with_capacity(frames.div_ceil(domain_center));
    let mut start = 0;
    while start < frames {
        let end = (start + domain_center).min(frames);
        let window_start = (start + domain_center).saturating_sub(base_segment);
        let history_start = match left_cap {
            Some(cap) => window_start.saturating_sub(cap),
            None => 0,
        };
        segments.push(Segment {
            history: history_start..window_start,
            carried: window_start..start,
            center: start..end,
            right: end..(end + right_ctx).min(frames),
            base_window: window_start..end,
        });
        start = end;
    }
    Ok(ContextPlan {
        frames,
        base_segment,
        domain_center,
        right_ctx,
        left_cap,
        segments,
    })
}

impl ContextPlan {
    pub fn segment_of(&self, frame: usize) -> usize {
        frame / self.domain_center
    }

    /// Attention mask over centers followed by right-context copies.
    pub fn attention_mask(&self) -> AttentionMask {
        AttentionMask::build(self)
    }
}

/// Boolean attention mask over `T + Σ|R_i|` rows.
///
/// Rows `0..T` are the center frames in time order; the remaining rows are the
/// per-segment right-context copies, grouped by segment. Copies are computed
/// within their own segment only and are never visible to other segments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    /// Source frame of every row.
    pub row_frames: Vec<usize>,
    /// Segment every row belongs to.
    pub row_segment: Vec<usize>,
    /// First copy row of each segment.
    pub copy_offsets: Vec<usize>,
    allowed: Vec<bool>,
}

impl AttentionMask {
    fn build(plan: &ContextPlan) -> Self {
        let t = plan.frames;
        let mut row_frames: Vec<usize> = (0..t).collect();
        let mut row_segment: Vec<usize> = (0..t).map(|f| plan.segment_of(f)).collect();
        let mut copy_offsets = Vec::with_capacity(plan.segments.len());
        for (i, seg) in plan.segments.iter().enumerate() {
            copy_offsets.push(row_frames.len());
            for f in seg.right.clone() {
                row_frames.push(f);
                row_segment.push(i);
            }
        }
        let n = row_frames.len();
        let mut allowed = vec![false; n * n];
        for q in 0..n {
            let i = row_segment[q];
            let seg = &plan.segments[i];
            let row = &mut allowed[q * n..(q + 1) * n];
            for k in seg.history.start..seg.center.end {
                row[k] = true;
            }
            let copies = copy_offsets[i];
            for k in copies..copies + seg.right.len() {
                row[k] = true;
            }
        }
        Self {
            row_frames,
            row_segment,
            copy_offsets,
            allowed,
        }
    }

    pub fn rows(&self) -> usize {
        self.row_frames.len()
    }

    pub fn allowed(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.rows() + key]
    }

    /// Frames (not rows) visible to a center frame's query.
    pub fn attended_frames(&self, frame: usize) -> Vec<usize> {
        let mut frames: Vec<usize> = (0..self.rows())
            .filter(|&k| self.allowed(frame, k))
            .map(|k| self.row_frames[k])
            .collect();
        frames.sort_unstable();
        frames.dedup();
        frames
    }

    /// Allowed key rows of every query row, ascending.
    pub fn key_lists(&self) -> Vec<Vec<usize>> {
        let n = self.rows();
        (0..n).map(|q| (0..n).filter(|&k| self.allowed(q, k)).collect()).collect()
    }
}
