//! Two-step prediction and detection evaluation: Stage I proposals, NMS at
//! 0.7, Stage II refinement, similarity labeling, dual-threshold filtering
//! and class-wise NMS; then per-class average precision, mAP@alpha and
//! average mAP over ten IoU thresholds, the episodic meta-test loop, and
//! the proposal-score threshold sweep.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::encoder::{encode_exemplar, encode_untrimmed, EncoderConfig};
use crate::episodes::{sample_episode, Dataset, FeatureSequence, Split, SplitSide};
use crate::error::{Error, Result};
use crate::geometry::{clip_segment, decode_offsets, tiou, Segment};
use crate::proposal::{select_proposals, stage1_forward, stage2_forward, AnchorGrid, ProposalConfig};
use crate::rng::child_seed;
use crate::similarity::{assign_class, kshot_average, similarity_matrix};

/// One final detection: a refined segment with its episode class, both
/// stage scores and the combined confidence
/// `proposal_score * softmax(class scores / tau)[class]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub segment: Segment,
    /// Episode class index in `0..way`.
    pub class: usize,
    pub proposal_score: f64,
    pub similarity_score: f64,
    pub confidence: f64,
}

/// Which score orders detections for NMS and precision-recall ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankBy {
    Confidence,
    ProposalScore,
    Similarity,
}

fn rank_key(d: &Detection, rank: RankBy) -> f64 {
    match rank {
        RankBy::Confidence => d.confidence,
        RankBy::ProposalScore => d.proposal_score,
        RankBy::Similarity => d.similarity_score,
    }
}

/// Prediction-time configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    /// Stage-II foreground score floor.
    pub proposal_thresh: f64,
    /// Averaged-similarity floor.
    pub similarity_thresh: f64,
    /// Class-wise NMS threshold applied to the surviving detections.
    pub final_nms: f64,
    /// Temperature for the confidence softmax over class scores.
    pub tau: f64,
    pub rank_by: RankBy,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            proposal_thresh: 0.3,
            similarity_thresh: 0.02,
            final_nms: 0.5,
            tau: 0.1,
            rank_by: RankBy::Confidence,
        }
    }
}

fn softmax(values: &[f64]) -> Vec<f64> {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

fn detection_order(a: &Detection, b: &Detection, rank: RankBy) -> std::cmp::Ordering {
    rank_key(b, rank)
        .total_cmp(&rank_key(a, rank))
        .then(a.segment.start().total_cmp(&b.segment.start()))
        .then(a.segment.length().total_cmp(&b.segment.length()))
        .then(a.class.cmp(&b.class))
}

fn nms_detections(mut dets: Vec<Detection>, thresh: f64, rank: RankBy) -> Vec<Detection> {
    dets.sort_by(|a, b| detection_order(a, b, rank));
    let mut kept: Vec<Detection> = Vec::new();
    for cand in dets {
        if kept.iter().all(|k| tiou(k.segment, cand.segment) <= thresh) {
            kept.push(cand);
        }
    }
    kept
}

/// Two-step prediction on one untrimmed sequence given an episode support
/// set: Stage I proposals filtered by NMS at 0.7 and top-N, Stage II
/// refinement (inverse coordinate transform, clipping), k-shot-averaged
/// similarity labeling, dual-threshold filtering and class-wise NMS.
pub fn detect(
    store: &ParamStore,
    enc_cfg: &EncoderConfig,
    prop_cfg: &ProposalConfig,
    features: &FeatureSequence,
    support: &[Vec<FeatureSequence>],
    cfg: &DetectConfig,
) -> Result<Vec<Detection>> {
    let way = support.len();
    if way == 0 {
        return Err(Error::Config("empty support set".into()));
    }
    let horizon = features.len() as f64;
    let grid = AnchorGrid::new(features.len(), &prop_cfg.scales)?;
    let mut tape = Tape::new();
    let map = encode_untrimmed(&mut tape, store, enc_cfg, features)?;
    let s1 = stage1_forward(&mut tape, store, &map, &grid)?;
    let proposals =
        select_proposals(&s1, &grid, 0.0, prop_cfg.nms_thresh, prop_cfg.eval_top_n);
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    let segs: Vec<Segment> = proposals.iter().map(|p| p.segment).collect();
    let (s2, embeddings) = stage2_forward(&mut tape, store, &map, &segs, prop_cfg.bins)?;

    // Refine boundaries via the inverse coordinate transform and clip.
    let mut refined: Vec<(Segment, f64)> = Vec::new();
    let mut kept_embeds: Vec<Var> = Vec::new();
    for i in 0..segs.len() {
        if let Some(seg) = clip_segment(decode_offsets(segs[i], s2.offsets[i]), horizon) {
            refined.push((seg, s2.scores[i]));
            kept_embeds.push(embeddings[i]);
        }
    }
    if refined.is_empty() {
        return Ok(Vec::new());
    }

    let mut exemplar_embeds = Vec::new();
    for (label, clips) in support.iter().enumerate() {
        for clip in clips {
            let e = encode_exemplar(&mut tape, store, enc_cfg, prop_cfg.bins, clip)?;
            exemplar_embeds.push((e, label));
        }
    }
    let matrix = similarity_matrix(&mut tape, &exemplar_embeds, &kept_embeds)?;
    let scores = kshot_average(&mut tape, &matrix, way)?;
    let assigned = assign_class(&scores);

    let mut detections = Vec::new();
    for (i, (segment, proposal_score)) in refined.iter().enumerate() {
        let (class, similarity_score) = assigned[i];
        if *proposal_score < cfg.proposal_thresh || similarity_score < cfg.similarity_thresh {
            continue;
        }
        let class_scores: Vec<f64> =
            (0..way).map(|c| scores.value(i, c) / cfg.tau).collect();
        let confidence = proposal_score * softmax(&class_scores)[class];
        detections.push(Detection {
            segment: *segment,
            class,
            proposal_score: *proposal_score,
            similarity_score,
            confidence,
        });
    }

    let mut out = Vec::new();
    for class in 0..way {
        let class_dets: Vec<Detection> =
            detections.iter().filter(|d| d.class == class).copied().collect();
        out.extend(nms_detections(class_dets, cfg.final_nms, cfg.rank_by));
    }
    out.sort_by(|a, b| detection_order(a, b, cfg.rank_by));
    Ok(out)
}

/// Average precision of ranked detections against one class's ground
/// truth: greedy matching of each detection to the unmatched gt of highest
/// tIoU at least `alpha`, then the area under the monotone (all-points
/// interpolated) precision-recall envelope.
fn ap_ranked(ranked: &[(f64, Segment)], gts: &[Segment], alpha: f64) -> f64 {
    if gts.is_empty() {
        return if ranked.is_empty() { 1.0 } else { 0.0 };
    }
    if ranked.is_empty() {
        return 0.0;
    }
    let mut matched = vec![false; gts.len()];
    let mut tp_flags = Vec::with_capacity(ranked.len());
    for (_, seg) in ranked {
        let mut best = 0.0;
        let mut best_gt = None;
        for (gi, gt) in gts.iter().enumerate() {
            if matched[gi] {
                continue;
            }
            let v = tiou(*seg, *gt);
            if v > best {
                best = v;
                best_gt = Some(gi);
            }
        }
        match best_gt {
            Some(gi) if best >= alpha => {
                matched[gi] = true;
                tp_flags.push(true);
            }
            _ => tp_flags.push(false),
        }
    }
    let n = ranked.len();
    let mut precision = Vec::with_capacity(n);
    let mut recall = Vec::with_capacity(n);
    let mut tp = 0usize;
    for (k, flag) in tp_flags.iter().enumerate() {
        if *flag {
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / gts.len() as f64);
    }
    // monotone non-increasing envelope from the right
    let mut envelope = precision.clone();
    for k in (0..n - 1).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..n {
        if recall[k] > prev_recall {
            ap += (recall[k] - prev_recall) * envelope[k];
            prev_recall = recall[k];
        }
    }
    ap
}

fn sort_for_ap(dets: &[Detection], rank: RankBy) -> Vec<(f64, Segment)> {
    let mut sorted: Vec<Detection> = dets.to_vec();
    sorted.sort_by(|a, b| detection_order(a, b, rank));
    sorted.iter().map(|d| (rank_key(d, rank), d.segment)).collect()
}

/// Average precision of one class's detections, ranked by confidence.
pub fn average_precision(dets: &[Detection], gts: &[Segment], alpha: f64) -> f64 {
    ap_ranked(&sort_for_ap(dets, RankBy::Confidence), gts, alpha)
}

/// Mean AP over the episode classes present in the ground truth; classes
/// without ground truth are excluded from the mean. `None` when the episode
/// has no ground truth at all.
pub fn map_at(
    dets: &[Detection],
    gts: &[(Segment, usize)],
    alpha: f64,
    rank: RankBy,
) -> Option<f64> {
    let mut classes: Vec<usize> = gts.iter().map(|(_, c)| *c).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for class in &classes {
        let class_dets: Vec<Detection> =
            dets.iter().filter(|d| d.class == *class).copied().collect();
        let class_gts: Vec<Segment> =
            gts.iter().filter(|(_, c)| c == class).map(|(s, _)| *s).collect();
        total += ap_ranked(&sort_for_ap(&class_dets, rank), &class_gts, alpha);
    }
    Some(total / classes.len() as f64)
}

/// The ten evaluation IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn average_map_alphas() -> Vec<f64> {
    (0..10).map(|k| 0.5 + 0.05 * k as f64).collect()
}

/// One meta-test iteration's metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationEval {
    pub iteration: usize,
    pub map_at_05: f64,
    pub average_map: f64,
}

/// Meta-test report: means over iterations plus the per-iteration values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map_at_05: f64,
    pub average_map: f64,
    pub iterations: usize,
    /// Iterations skipped for lack of ground truth.
    pub skipped: usize,
    pub per_iteration: Vec<IterationEval>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,map_at_05,average_map\n");
        for it in &self.per_iteration {
            out.push_str(&format!("{},{},{}\n", it.iteration, it.map_at_05, it.average_map));
        }
        out.push_str(&format!("mean,{},{}\n", self.map_at_05, self.average_map));
        out
    }
}

/// Meta-test options.
#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub iterations: usize,
    pub way: usize,
    pub shot: usize,
    pub seed: u64,
    /// Worker threads for the iteration loop; 1 runs serially. Results are
    /// identical regardless of thread count.
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { iterations: 1000, way: 5, shot: 1, seed: 0, threads: 1 }
    }
}

fn run_iteration(
    dataset: &Dataset,
    split: &Split,
    store: &ParamStore,
    enc_cfg: &EncoderConfig,
    prop_cfg: &ProposalConfig,
    cfg: &DetectConfig,
    opts: &EvalOptions,
    iteration: usize,
) -> Result<Option<IterationEval>> {
    let ep_seed = child_seed(opts.seed, "eval-episode", iteration as u64);
    let episode = sample_episode(dataset, split, SplitSide::Test, opts.way, opts.shot, ep_seed)?;
    let dets = detect(store, enc_cfg, prop_cfg, &episode.features, &episode.support, cfg)?;
    let Some(map_at_05) = map_at(&dets, &episode.ground_truth, 0.5, cfg.rank_by) else {
        return Ok(None);
    };
    let alphas = average_map_alphas();
    let mut sum = 0.0;
    for alpha in &alphas {
        sum += map_at(&dets, &episode.ground_truth, *alpha, cfg.rank_by)
            .expect("ground truth presence already checked");
    }
    Ok(Some(IterationEval { iteration, map_at_05, average_map: sum / alphas.len() as f64 }))
}

/// Episodic meta-testing on the split's test side: per iteration, sample an
/// episode, detect, and score mAP@0.5 plus the ten-threshold average mAP;
/// report arithmetic means. Deterministic given the seed, including under
/// parallel execution.
pub fn meta_test(
    dataset: &Dataset,
    split: &Split,
    store: &ParamStore,
    enc_cfg: &EncoderConfig,
    prop_cfg: &ProposalConfig,
    cfg: &DetectConfig,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if opts.iterations == 0 {
        return Err(Error::Config("meta-test needs at least one iteration".into()));
    }
    let results: Vec<Option<IterationEval>> = if opts.threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| {
            use rayon::prelude::*;
            (0..opts.iterations)
                .into_par_iter()
                .map(|i| run_iteration(dataset, split, store, enc_cfg, prop_cfg, cfg, opts, i))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        let mut v = Vec::with_capacity(opts.iterations);
        for i in 0..opts.iterations {
            v.push(run_iteration(dataset, split, store, enc_cfg, prop_cfg, cfg, opts, i)?);
        }
        v
    };

    let per_iteration: Vec<IterationEval> = results.iter().flatten().copied().collect();
    let skipped = opts.iterations - per_iteration.len();
    if per_iteration.is_empty() {
        return Err(Error::Data("every meta-test iteration lacked ground truth".into()));
    }
    let n = per_iteration.len() as f64;
    Ok(EvalReport {
        map_at_05: per_iteration.iter().map(|i| i.map_at_05).sum::<f64>() / n,
        average_map: per_iteration.iter().map(|i| i.average_map).sum::<f64>() / n,
        iterations: opts.iterations,
        skipped,
        per_iteration,
    })
}

/// One row of the proposal-threshold sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub map_at_05: f64,
    pub average_map: f64,
}

/// Sweeps the proposal score threshold with a fixed similarity threshold,
/// holding the same episode seed stream for every point.
pub fn threshold_sweep(
    dataset: &Dataset,
    split: &Split,
    store: &ParamStore,
    enc_cfg: &EncoderConfig,
    prop_cfg: &ProposalConfig,
    cfg: &DetectConfig,
    thresholds: &[f64],
    opts: &EvalOptions,
) -> Result<Vec<SweepRow>> {
    if thresholds.is_empty() {
        return Err(Error::Config("threshold sweep needs at least one threshold".into()));
    }
    let mut rows = Vec::with_capacity(thresholds.len());
    for &threshold in thresholds {
        let point_cfg = DetectConfig { proposal_thresh: threshold, ..cfg.clone() };
        let report = meta_test(dataset, split, store, enc_cfg, prop_cfg, &point_cfg, opts)?;
        rows.push(SweepRow { threshold, map_at_05: report.map_at_05, average_map: report.average_map });
    }
    Ok(rows)
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("threshold,map_at_05,average_map\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.threshold, r.map_at_05, r.average_map));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::tiny_configs;
    use crate::episodes::{generate_dataset, split_classes};
    use crate::rng::rng_from_seed;
    use crate::trainer::init_params;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn seg(s: f64, e: f64) -> Segment {
        Segment::new(s, e).unwrap()
    }

    fn det(segment: Segment, class: usize, confidence: f64) -> Detection {
        Detection {
            segment,
            class,
            proposal_score: confidence,
            similarity_score: confidence,
            confidence,
        }
    }

    #[test]
    fn ap_worked_example_fp_then_tp() {
        let gts = vec![seg(0.0, 10.0)];
        let dets = vec![det(seg(50.0, 60.0), 0, 0.9), det(seg(0.0, 10.0), 0, 0.8)];
        assert_abs_diff_eq!(average_precision(&dets, &gts, 0.5), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn ap_edge_cases() {
        let gts = vec![seg(0.0, 10.0)];
        // perfect single detection
        let dets = vec![det(seg(0.0, 10.0), 0, 0.9)];
        assert_eq!(average_precision(&dets, &gts, 0.5), 1.0);
        // no detections
        assert_eq!(average_precision(&[], &gts, 0.5), 0.0);
        // no gts, no dets: defined as 1
        assert_eq!(average_precision(&[], &[], 0.5), 1.0);
        // no gts but detections: 0
        assert_eq!(average_precision(&dets, &[], 0.5), 0.0);
    }

    #[test]
    fn ap_is_monotone_non_increasing_in_alpha() {
        let mut rng = rng_from_seed(3);
        for _ in 0..50 {
            let gts: Vec<Segment> = (0..rng.random_range(1..5))
                .map(|_| {
                    let s = rng.random_range(0.0..80.0);
                    seg(s, s + rng.random_range(4.0..30.0))
                })
                .collect();
            let dets: Vec<Detection> = (0..rng.random_range(0..10))
                .map(|_| {
                    let s = rng.random_range(0.0..80.0);
                    det(seg(s, s + rng.random_range(4.0..30.0)), 0, rng.random_range(0.0..1.0))
                })
                .collect();
            let mut prev = f64::INFINITY;
            for alpha in average_map_alphas() {
                let ap = average_precision(&dets, &gts, alpha);
                assert!((0.0..=1.0).contains(&ap));
                assert!(ap <= prev + 1e-12, "AP rose from {prev} at alpha {alpha}");
                prev = ap;
            }
        }
    }

    /// Exhaustive PR oracle: enumerate all prefix cutoffs, compute the
    /// interpolated precision at each achieved recall level by scanning
    /// every prefix, and integrate.
    fn ap_oracle(ranked: &[(f64, Segment)], gts: &[Segment], alpha: f64) -> f64 {
        if gts.is_empty() {
            return if ranked.is_empty() { 1.0 } else { 0.0 };
        }
        if ranked.is_empty() {
            return 0.0;
        }
        let mut matched = vec![false; gts.len()];
        let mut tp_flags = Vec::new();
        for (_, seg) in ranked {
            let mut best = 0.0;
            let mut best_gt = None;
            for (gi, gt) in gts.iter().enumerate() {
                if matched[gi] {
                    continue;
                }
                let v = tiou(*seg, *gt);
                if v > best {
                    best = v;
                    best_gt = Some(gi);
                }
            }
            if let Some(gi) = best_gt {
                if best >= alpha {
                    matched[gi] = true;
                    tp_flags.push(true);
                    continue;
                }
            }
            tp_flags.push(false);
        }
        // precision/recall at every prefix cutoff
        let prefixes: Vec<(f64, f64)> = (1..=ranked.len())
            .map(|k| {
                let tp = tp_flags[..k].iter().filter(|f| **f).count();
                (tp as f64 / k as f64, tp as f64 / gts.len() as f64)
            })
            .collect();
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for k in 0..prefixes.len() {
            let (_, r) = prefixes[k];
            if r > prev_recall {
                // max precision over any prefix achieving recall >= r
                let p_interp = prefixes
                    .iter()
                    .filter(|(_, rr)| *rr >= r)
                    .map(|(p, _)| *p)
                    .fold(f64::NEG_INFINITY, f64::max);
                ap += (r - prev_recall) * p_interp;
                prev_recall = r;
            }
        }
        ap
    }

    #[test]
    fn ap_matches_exhaustive_oracle_exactly() {
        let mut rng = rng_from_seed(7);
        for case in 0..100 {
            let gts: Vec<Segment> = (0..rng.random_range(1..=5))
                .map(|_| {
                    let s = rng.random_range(0.0..60.0);
                    seg(s, s + rng.random_range(3.0..25.0))
                })
                .collect();
            let n_dets = rng.random_range(0..=10);
            let mut dets: Vec<Detection> = (0..n_dets)
                .map(|i| {
                    let s = rng.random_range(0.0..60.0);
                    // distinct confidences
                    let conf = (i as f64 + rng.random_range(0.01..0.99)) / (n_dets as f64 + 1.0);
                    det(seg(s, s + rng.random_range(3.0..25.0)), 0, conf)
                })
                .collect();
            dets.sort_by(|a, b| detection_order(a, b, RankBy::Confidence));
            let ranked = sort_for_ap(&dets, RankBy::Confidence);
            let fast = average_precision(&dets, &gts, 0.5);
            let slow = ap_oracle(&ranked, &gts, 0.5);
            assert_eq!(fast, slow, "case {case}: {fast} vs {slow}");
        }
    }

    #[test]
    fn map_averages_only_classes_with_ground_truth() {
        let gts = vec![(seg(0.0, 10.0), 0usize), (seg(30.0, 40.0), 2usize)];
        // class 0 perfectly detected, class 2 missed entirely
        let dets = vec![det(seg(0.0, 10.0), 0, 0.9)];
        let m = map_at(&dets, &gts, 0.5, RankBy::Confidence).unwrap();
        assert_abs_diff_eq!(m, 0.5, epsilon = 1e-15);
        assert!(map_at(&dets, &[], 0.5, RankBy::Confidence).is_none());

        let perfect = vec![det(seg(0.0, 10.0), 0, 0.9), det(seg(30.0, 40.0), 2, 0.8)];
        assert_abs_diff_eq!(
            map_at(&perfect, &gts, 0.5, RankBy::Confidence).unwrap(),
            1.0,
            epsilon = 1e-15
        );
    }

    fn eval_fixture() -> (Dataset, Split, ParamStore, EncoderConfig, ProposalConfig) {
        let (enc, prop, _, gen) = tiny_configs();
        let ds = generate_dataset(0, &gen).unwrap();
        let split = split_classes(&ds, 0.5, 0).unwrap();
        let store = init_params(&enc, &prop, 0).unwrap();
        (ds, split, store, enc, prop)
    }

    #[test]
    fn detect_respects_thresholds_and_nms() {
        let (ds, split, store, enc, prop) = eval_fixture();
        let ep = sample_episode(&ds, &split, SplitSide::Test, 5, 1, 1).unwrap();
        let cfg = DetectConfig { proposal_thresh: 0.0, similarity_thresh: -1.0, ..Default::default() };
        let dets = detect(&store, &enc, &prop, &ep.features, &ep.support, &cfg).unwrap();
        assert!(!dets.is_empty(), "untrained model with open thresholds should emit something");
        for d in &dets {
            assert!(d.segment.start() >= 0.0 && d.segment.end() <= ds.seq_len as f64);
            assert!(d.class < 5);
            assert!(d.proposal_score >= cfg.proposal_thresh);
            assert!(d.similarity_score >= cfg.similarity_thresh);
        }
        // class-wise NMS pairwise guarantee
        for (i, a) in dets.iter().enumerate() {
            for b in dets.iter().skip(i + 1) {
                if a.class == b.class {
                    assert!(tiou(a.segment, b.segment) <= cfg.final_nms + 1e-12);
                }
            }
        }
        // unreachable similarity threshold empties the output
        let strict = DetectConfig { similarity_thresh: 1.0 + 1e-9, ..Default::default() };
        assert!(detect(&store, &enc, &prop, &ep.features, &ep.support, &strict)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn meta_test_is_deterministic_and_mean_consistent() {
        let (ds, split, store, enc, prop) = eval_fixture();
        let cfg = DetectConfig { proposal_thresh: 0.0, ..Default::default() };
        let opts = EvalOptions { iterations: 6, ..Default::default() };
        let a = meta_test(&ds, &split, &store, &enc, &prop, &cfg, &opts).unwrap();
        let b = meta_test(&ds, &split, &store, &enc, &prop, &cfg, &opts).unwrap();
        assert_eq!(a, b);
        let mean: f64 =
            a.per_iteration.iter().map(|i| i.map_at_05).sum::<f64>() / a.per_iteration.len() as f64;
        assert_abs_diff_eq!(a.map_at_05, mean, epsilon = 1e-12);

        // thread count does not change the report
        let par = meta_test(
            &ds,
            &split,
            &store,
            &enc,
            &prop,
            &cfg,
            &EvalOptions { threads: 4, ..opts },
        )
        .unwrap();
        assert_eq!(a, par);

        // a single iteration reports exactly that iteration's values
        let one = meta_test(
            &ds,
            &split,
            &store,
            &enc,
            &prop,
            &cfg,
            &EvalOptions { iterations: 1, ..Default::default() },
        )
        .unwrap();
        assert_eq!(one.per_iteration.len(), 1);
        assert_eq!(one.map_at_05, one.per_iteration[0].map_at_05);
    }

    #[test]
    fn sweep_is_seed_reproducible() {
        let (ds, split, store, enc, prop) = eval_fixture();
        let cfg = DetectConfig::default();
        let opts = EvalOptions { iterations: 3, ..Default::default() };
        let t = [0.1, 0.5];
        let a = threshold_sweep(&ds, &split, &store, &enc, &prop, &cfg, &t, &opts).unwrap();
        let b = threshold_sweep(&ds, &split, &store, &enc, &prop, &cfg, &t, &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        let csv = sweep_to_csv(&a);
        assert!(csv.starts_with("threshold,map_at_05,average_map\n"));
        assert_eq!(csv.lines().count(), 3);
    }
}
