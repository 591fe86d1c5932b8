//! The two-stage proposal subnet: a dense anchor head over the feature map
//! (binary score plus offsets per anchor), tIoU label assignment with
//! balanced sampling, Stage I -> II selection (NMS at 0.7, top-N, decode,
//! clip), and the RoI-pooled refinement head that also produces the
//! proposal embeddings `f(R_i)` consumed by the similarity branch.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::encoder::{EncoderConfig, FeatureMap};
use crate::error::{Error, Result};
use crate::geometry::{
    clip_segment, decode_offsets, make_anchors, nms, tiou, RegressionTarget, ScoredSegment,
    Segment, TEMPORAL_DOWNSAMPLE,
};

/// Proposal subnet configuration. Thresholds follow the two-stage detector
/// convention: Stage I assigns positives at tIoU >= 0.7 (with forced best
/// matches), Stage II at 0.5 with no ignore band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalConfig {
    /// Anchor lengths in input timesteps.
    pub scales: Vec<usize>,
    /// Temporal RoI pooling bins.
    pub bins: usize,
    pub stage1_pos_thresh: f64,
    pub stage1_neg_thresh: f64,
    pub stage2_pos_thresh: f64,
    pub stage2_neg_thresh: f64,
    /// Stage I -> II NMS threshold.
    pub nms_thresh: f64,
    /// Proposals kept for Stage II during training.
    pub train_top_n: usize,
    /// Proposals kept for Stage II at inference.
    pub eval_top_n: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            scales: vec![8, 16, 32, 64, 128],
            bins: 4,
            stage1_pos_thresh: 0.7,
            stage1_neg_thresh: 0.3,
            stage2_pos_thresh: 0.5,
            stage2_neg_thresh: 0.5,
            nms_thresh: 0.7,
            train_top_n: 32,
            eval_top_n: 100,
        }
    }
}

/// The fixed anchor set for one input length, position-major scale-minor.
#[derive(Debug, Clone)]
pub struct AnchorGrid {
    pub anchors: Vec<Segment>,
    pub input_len: usize,
    pub scales: Vec<usize>,
}

impl AnchorGrid {
    pub fn new(input_len: usize, scales: &[usize]) -> Result<Self> {
        Ok(Self {
            anchors: make_anchors(input_len, scales)?,
            input_len,
            scales: scales.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Registers the Stage I conv heads and Stage II FC pathway:
/// `p1.conv`, `p1.cls`, `p1.reg`, `p2.fc1`, `p2.fc2`, `p2.cls`, `p2.reg`.
pub fn register_proposal_params(
    enc_cfg: &EncoderConfig,
    cfg: &ProposalConfig,
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if cfg.scales.is_empty() {
        return Err(Error::Config("proposal scale set must be non-empty".into()));
    }
    if cfg.bins == 0 {
        return Err(Error::Config("roi bins must be positive".into()));
    }
    let d = enc_cfg.embed_dim;
    let k2 = 2 * cfg.scales.len();
    store.register("p1.conv.w", vec![d, d, 3], d * 3, rng)?;
    store.register("p1.conv.b", vec![d], d * 3, rng)?;
    store.register("p1.cls.w", vec![k2, d, 1], d, rng)?;
    store.register("p1.cls.b", vec![k2], d, rng)?;
    store.register("p1.reg.w", vec![k2, d, 1], d, rng)?;
    store.register("p1.reg.b", vec![k2], d, rng)?;

    let roi_width = cfg.bins * d;
    let fc = enc_cfg.fc_dim;
    store.register("p2.fc1.w", vec![fc, roi_width], roi_width, rng)?;
    store.register("p2.fc1.b", vec![fc], roi_width, rng)?;
    store.register("p2.fc2.w", vec![fc, fc], fc, rng)?;
    store.register("p2.fc2.b", vec![fc], fc, rng)?;
    store.register("p2.cls.w", vec![2, fc], fc, rng)?;
    store.register("p2.cls.b", vec![2], fc, rng)?;
    store.register("p2.reg.w", vec![2, fc], fc, rng)?;
    store.register("p2.reg.b", vec![2], fc, rng)?;
    Ok(())
}

#[derive(Debug)]
enum StageVars {
    /// Stage I: dense conv outputs of shape `[L/8, 2K]`, anchors indexed
    /// position-major scale-minor.
    Grid { cls: Var, reg: Var, channels: usize },
    /// Stage II: one `[2]` head output pair per proposal.
    PerItem { cls: Vec<Var>, reg: Vec<Var> },
}

/// Per-anchor (or per-proposal) foreground probabilities and predicted
/// offsets, with tape handles for loss construction.
#[derive(Debug)]
pub struct StageOutput {
    /// Foreground softmax probability per item.
    pub scores: Vec<f64>,
    pub offsets: Vec<RegressionTarget>,
    vars: StageVars,
}

impl StageOutput {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// The `[background, foreground]` logit pair of item `i`.
    pub fn logits_var(&self, tape: &mut Tape, i: usize) -> Result<Var> {
        match &self.vars {
            StageVars::Grid { cls, channels, .. } => {
                let k = channels / 2;
                let (pos, scale) = (i / k, i % k);
                tape.slice(*cls, pos * channels + 2 * scale, 2)
            }
            StageVars::PerItem { cls, .. } => Ok(cls[i]),
        }
    }

    /// The `(delta_c, delta_l)` regression output of item `i`.
    pub fn offsets_var(&self, tape: &mut Tape, i: usize) -> Result<Var> {
        match &self.vars {
            StageVars::Grid { reg, channels, .. } => {
                let k = channels / 2;
                let (pos, scale) = (i / k, i % k);
                tape.slice(*reg, pos * channels + 2 * scale, 2)
            }
            StageVars::PerItem { reg, .. } => Ok(reg[i]),
        }
    }
}

fn foreground_prob(bg_logit: f64, fg_logit: f64) -> f64 {
    1.0 / (1.0 + (bg_logit - fg_logit).exp())
}

/// Stage I forward pass: a k=3 conv plus relu over the feature map, then
/// two parallel 1x1 conv heads predicting `2K` classification logits and
/// `2K` regression channels per grid position.
pub fn stage1_forward(
    tape: &mut Tape,
    store: &ParamStore,
    map: &FeatureMap,
    grid: &AnchorGrid,
) -> Result<StageOutput> {
    let k = grid.scales.len();
    if grid.len() != k * map.len {
        return Err(Error::Shape(format!(
            "anchor grid has {} anchors, expected {} positions x {} scales",
            grid.len(),
            map.len,
            k
        )));
    }
    let w = tape.param(store, "p1.conv.w")?;
    let b = tape.param(store, "p1.conv.b")?;
    let hidden = tape.conv1d(map.var, w, b, 1, 1)?;
    let hidden = tape.relu(hidden);

    let w_cls = tape.param(store, "p1.cls.w")?;
    let b_cls = tape.param(store, "p1.cls.b")?;
    let cls = tape.conv1d(hidden, w_cls, b_cls, 1, 0)?;
    let w_reg = tape.param(store, "p1.reg.w")?;
    let b_reg = tape.param(store, "p1.reg.b")?;
    let reg = tape.conv1d(hidden, w_reg, b_reg, 1, 0)?;

    let channels = 2 * k;
    let cls_values = tape.values(cls);
    let reg_values = tape.values(reg);
    let mut scores = Vec::with_capacity(grid.len());
    let mut offsets = Vec::with_capacity(grid.len());
    for pos in 0..map.len {
        for scale in 0..k {
            let base = pos * channels + 2 * scale;
            scores.push(foreground_prob(cls_values[base], cls_values[base + 1]));
            offsets.push(RegressionTarget {
                delta_c: reg_values[base],
                delta_l: reg_values[base + 1],
            });
        }
    }
    Ok(StageOutput { scores, offsets, vars: StageVars::Grid { cls, reg, channels } })
}

/// Training label of one candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    /// Matched to ground-truth index `gt` carrying episode class `class`.
    Positive { gt: usize, class: usize },
    Negative,
    /// Held out from every loss.
    Ignore,
}

/// Labels for a candidate list, aligned by index.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub labels: Vec<Label>,
}

impl LabeledSet {
    pub fn positives(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Label::Positive { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn negatives(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Label::Negative))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Assigns positive/negative/ignore labels by tIoU against the ground
/// truth: max-over-gts tIoU >= `pos_thresh` makes a positive matched to the
/// argmax gt, < `neg_thresh` a negative, anything between is ignored. With
/// `force_best_match` the highest-tIoU candidate of every gt becomes
/// positive regardless of threshold.
pub fn assign_labels(
    candidates: &[Segment],
    gts: &[(Segment, usize)],
    pos_thresh: f64,
    neg_thresh: f64,
    force_best_match: bool,
) -> LabeledSet {
    let mut labels = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let mut best = 0.0;
        let mut best_gt = None;
        for (gi, (gt_seg, _)) in gts.iter().enumerate() {
            let v = tiou(*cand, *gt_seg);
            if v > best {
                best = v;
                best_gt = Some(gi);
            }
        }
        let label = match best_gt {
            Some(gi) if best >= pos_thresh => Label::Positive { gt: gi, class: gts[gi].1 },
            _ if best < neg_thresh => Label::Negative,
            _ => Label::Ignore,
        };
        labels.push(label);
    }
    if force_best_match {
        for (gi, (gt_seg, class)) in gts.iter().enumerate() {
            let mut best = f64::NEG_INFINITY;
            let mut best_cand = None;
            for (ci, cand) in candidates.iter().enumerate() {
                let v = tiou(*cand, *gt_seg);
                if v > best {
                    best = v;
                    best_cand = Some(ci);
                }
            }
            if let Some(ci) = best_cand {
                if !matches!(labels[ci], Label::Positive { .. }) {
                    labels[ci] = Label::Positive { gt: gi, class: *class };
                }
            }
        }
    }
    LabeledSet { labels }
}

/// Samples a strictly 1:1 positive/negative batch: `min(batch_size/2,
/// #pos, #neg)` of each, uniformly without replacement. Returns positives
/// first, each group in ascending index order.
pub fn sample_balanced(
    labeled: &LabeledSet,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if batch_size % 2 != 0 {
        return Err(Error::Config(format!("batch size must be even, got {batch_size}")));
    }
    let pos = labeled.positives();
    let neg = labeled.negatives();
    let per_side = (batch_size / 2).min(pos.len()).min(neg.len());
    let mut pick = |from: &[usize]| -> Vec<usize> {
        let mut chosen: Vec<usize> = rand::seq::index::sample(rng, from.len(), per_side)
            .iter()
            .map(|i| from[i])
            .collect();
        chosen.sort_unstable();
        chosen
    };
    let mut out = pick(&pos);
    out.extend(pick(&neg));
    Ok(out)
}

/// A class-agnostic candidate activity interval with a foreground score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub segment: Segment,
    pub score: f64,
}

/// Stage I -> II selection: decode every anchor with its predicted
/// offsets, clip to `[0, L)`, drop scores below `score_floor`, NMS at
/// `nms_thresh`, keep the `top_n` best by score.
pub fn select_proposals(
    out: &StageOutput,
    grid: &AnchorGrid,
    score_floor: f64,
    nms_thresh: f64,
    top_n: usize,
) -> Vec<Proposal> {
    let horizon = grid.input_len as f64;
    let mut scored = Vec::with_capacity(grid.len());
    for (i, anchor) in grid.anchors.iter().enumerate() {
        if out.scores[i] < score_floor {
            continue;
        }
        let decoded = decode_offsets(*anchor, out.offsets[i]);
        if let Some(segment) = clip_segment(decoded, horizon) {
            scored.push(ScoredSegment { segment, score: out.scores[i] });
        }
    }
    let kept = nms(&scored, nms_thresh);
    kept.into_iter()
        .take(top_n)
        .map(|s| Proposal { segment: s.segment, score: s.score })
        .collect()
}

/// Maps a segment into feature-grid cell ranges for each pooling bin. The
/// segment is scaled by 1/8 and clamped to the map; each of the `bins`
/// equal sub-intervals takes every cell it overlaps, falling back to the
/// cell containing its midpoint when it overlaps none.
fn bin_cells(seg: Segment, map_len: usize, bins: usize) -> Vec<(usize, usize)> {
    let scale = TEMPORAL_DOWNSAMPLE as f64;
    let a = (seg.start() / scale).clamp(0.0, map_len as f64);
    let b = (seg.end() / scale).clamp(0.0, map_len as f64);
    let mut cells = Vec::with_capacity(bins);
    for j in 0..bins {
        let b0 = a + (b - a) * j as f64 / bins as f64;
        let b1 = a + (b - a) * (j + 1) as f64 / bins as f64;
        let s = (b0.floor() as usize).min(map_len.saturating_sub(1));
        let e = (b1.ceil() as usize).min(map_len);
        if s < e {
            cells.push((s, e));
        } else {
            let mid = (0.5 * (b0 + b1)).floor() as usize;
            let cell = mid.min(map_len - 1);
            cells.push((cell, cell + 1));
        }
    }
    cells
}

/// Temporal RoI pooling: pools a segment of the feature map into a fixed
/// `bins x D` tensor by per-bin channel-wise max. Gradients route to the
/// argmax cells.
pub fn roi_pool_temporal(
    tape: &mut Tape,
    map: &FeatureMap,
    seg: Segment,
    bins: usize,
) -> Result<Var> {
    if bins == 0 {
        return Err(Error::Config("roi bins must be positive".into()));
    }
    let cells = bin_cells(seg, map.len, bins);
    tape.binned_max(map.var, &cells)
}

/// The shared Stage-II FC pathway: flatten, FC + relu, FC + relu. The
/// output is the embedding space holding both `f(R_i)` and `f(S_j)`.
pub fn stage2_embed(tape: &mut Tape, store: &ParamStore, pooled: Var) -> Result<Var> {
    let flat = tape.flatten(pooled);
    let w1 = tape.param(store, "p2.fc1.w")?;
    let b1 = tape.param(store, "p2.fc1.b")?;
    let h1 = tape.dense(flat, w1, b1)?;
    let h1 = tape.relu(h1);
    let w2 = tape.param(store, "p2.fc2.w")?;
    let b2 = tape.param(store, "p2.fc2.b")?;
    let h2 = tape.dense(h1, w2, b2)?;
    Ok(tape.relu(h2))
}

/// Stage II forward pass: per proposal, RoI pooling, the shared FC
/// pathway, then binary classification and offset-regression heads.
/// Returns the stage output plus the `f(R_i)` embedding of each proposal.
pub fn stage2_forward(
    tape: &mut Tape,
    store: &ParamStore,
    map: &FeatureMap,
    proposals: &[Segment],
    bins: usize,
) -> Result<(StageOutput, Vec<Var>)> {
    let mut scores = Vec::with_capacity(proposals.len());
    let mut offsets = Vec::with_capacity(proposals.len());
    let mut cls_vars = Vec::with_capacity(proposals.len());
    let mut reg_vars = Vec::with_capacity(proposals.len());
    let mut embeddings = Vec::with_capacity(proposals.len());
    for seg in proposals {
        let pooled = roi_pool_temporal(tape, map, *seg, bins)?;
        let embed = stage2_embed(tape, store, pooled)?;
        let w_cls = tape.param(store, "p2.cls.w")?;
        let b_cls = tape.param(store, "p2.cls.b")?;
        let cls = tape.dense(embed, w_cls, b_cls)?;
        let w_reg = tape.param(store, "p2.reg.w")?;
        let b_reg = tape.param(store, "p2.reg.b")?;
        let reg = tape.dense(embed, w_reg, b_reg)?;

        let c = tape.values(cls);
        scores.push(foreground_prob(c[0], c[1]));
        let r = tape.values(reg);
        offsets.push(RegressionTarget { delta_c: r[0], delta_l: r[1] });
        cls_vars.push(cls);
        reg_vars.push(reg);
        embeddings.push(embed);
    }
    Ok((
        StageOutput { scores, offsets, vars: StageVars::PerItem { cls: cls_vars, reg: reg_vars } },
        embeddings,
    ))
}
