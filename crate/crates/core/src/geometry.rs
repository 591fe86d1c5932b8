//! Temporal-interval arithmetic: tIoU, anchor grids, the center/length
//! offset transform and its inverse, clipping and score-based NMS. All
//! segments are half-open real intervals in input-timestep units; the /8
//! feature-grid scaling is applied only inside RoI pooling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Temporal downsampling factor of the encoder (three stride-2 pools).
/// Anchor grids and RoI pooling both key off this constant.
pub const TEMPORAL_DOWNSAMPLE: usize = 8;

/// A half-open temporal interval `[start, end)` in input timesteps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    start: f64,
    end: f64,
}

impl Segment {
    /// Builds a segment, rejecting degenerate or non-finite endpoints.
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !start.is_finite() || !end.is_finite() {
            return Err(Error::Data(format!(
                "segment endpoints must be finite, got [{start}, {end})"
            )));
        }
        if end <= start {
            return Err(Error::Data(format!(
                "segment must have positive length, got [{start}, {end})"
            )));
        }
        Ok(Self { start, end })
    }

    /// Internal constructor for arithmetic results that are validated (or
    /// discarded) by the caller, e.g. decoded proposals before clipping.
    pub(crate) fn new_unchecked(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    pub fn from_center_length(center: f64, length: f64) -> Result<Self> {
        Self::new(center - 0.5 * length, center + 0.5 * length)
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn is_valid(&self) -> bool {
        self.start.is_finite() && self.end.is_finite() && self.end > self.start
    }
}

/// Center/length offsets of a ground-truth segment relative to a reference
/// anchor or proposal: `delta_c = (c* - c)/l`, `delta_l = log(l*/l)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionTarget {
    pub delta_c: f64,
    pub delta_l: f64,
}

/// A segment with a foreground score in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSegment {
    pub segment: Segment,
    pub score: f64,
}

/// Temporal intersection-over-union of two segments. Symmetric, in `[0, 1]`.
pub fn tiou(a: Segment, b: Segment) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.length() + b.length() - inter;
    inter / union
}

/// Transforms a ground-truth segment into offsets relative to a reference.
pub fn encode_offsets(gt: Segment, reference: Segment) -> RegressionTarget {
    let c = reference.center();
    let l = reference.length();
    RegressionTarget {
        delta_c: (gt.center() - c) / l,
        delta_l: (gt.length() / l).ln(),
    }
}

/// Inverse of [`encode_offsets`]: applies predicted offsets to a reference.
/// The result is unvalidated; feed it through [`clip_segment`] before use.
pub fn decode_offsets(reference: Segment, t: RegressionTarget) -> Segment {
    let c = reference.center() + t.delta_c * reference.length();
    let l = reference.length() * t.delta_l.exp();
    Segment::new_unchecked(c - 0.5 * l, c + 0.5 * l)
}

/// Intersects a segment with `[0, horizon)`. Returns `None` when nothing
/// remains (this also discards non-finite decode results).
pub fn clip_segment(s: Segment, horizon: f64) -> Option<Segment> {
    if !s.start.is_finite() || !s.end.is_finite() {
        return None;
    }
    let start = s.start.max(0.0);
    let end = s.end.min(horizon);
    if end > start {
        Some(Segment { start, end })
    } else {
        None
    }
}

fn nms_order(a: &ScoredSegment, b: &ScoredSegment) -> std::cmp::Ordering {
    // Descending score; ties broken by earlier start, then shorter length.
    b.score
        .total_cmp(&a.score)
        .then(a.segment.start.total_cmp(&b.segment.start))
        .then(a.segment.length().total_cmp(&b.segment.length()))
}

/// Greedy non-maximum suppression: keeps each segment unless it overlaps a
/// higher-ranked kept segment with tIoU above `thresh`. Output is ordered
/// by descending score.
pub fn nms(items: &[ScoredSegment], thresh: f64) -> Vec<ScoredSegment> {
    let mut sorted: Vec<ScoredSegment> = items.to_vec();
    sorted.sort_by(nms_order);
    let mut kept: Vec<ScoredSegment> = Vec::new();
    for cand in sorted {
        if kept.iter().all(|k| tiou(k.segment, cand.segment) <= thresh) {
            kept.push(cand);
        }
    }
    kept
}

/// Generates the anchor grid for an input of length `l`: one anchor per
/// scale at each of the `l/8` grid positions, centered at `(t + 0.5) * 8`,
/// in position-major, scale-minor order. Anchors are left unclipped.
pub fn make_anchors(l: usize, scales: &[usize]) -> Result<Vec<Segment>> {
    if l == 0 || l % TEMPORAL_DOWNSAMPLE != 0 {
        return Err(Error::Config(format!(
            "input length {l} must be a positive multiple of {TEMPORAL_DOWNSAMPLE}"
        )));
    }
    if scales.is_empty() {
        return Err(Error::Config("anchor scale set must be non-empty".into()));
    }
    if let Some(bad) = scales.iter().find(|s| **s == 0) {
        return Err(Error::Config(format!("anchor scale must be positive, got {bad}")));
    }
    let positions = l / TEMPORAL_DOWNSAMPLE;
    let mut anchors = Vec::with_capacity(positions * scales.len());
    for t in 0..positions {
        let center = (t as f64 + 0.5) * TEMPORAL_DOWNSAMPLE as f64;
        for &scale in scales {
            let half = 0.5 * scale as f64;
            anchors.push(Segment::new_unchecked(center - half, center + half));
        }
    }
    Ok(anchors)
}
