//! Joint optimization: composes the Stage I, Stage II and few-shot losses
//! into the total episode loss, runs SGD with momentum over sampled
//! episodes, supports the proposal-only pretraining mode, and checkpoints
//! parameters.
//!
//! Selection (NMS, top-N) is not differentiated: gradients flow through
//! pooled features and heads, never through proposal coordinates. An
//! [`EpisodePlan`] records the discrete choices of one forward pass
//! (selected proposals and sampled batch indices) so a loss can be
//! re-evaluated as a pure function of the parameters, which is what the
//! finite-difference check differentiates.

mod checkpoint;

pub use checkpoint::{config_hash, load_checkpoint_into, load_checkpoint_raw, save_checkpoint};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::encoder::{encode_exemplar, encode_untrimmed, register_encoder_params, EncoderConfig};
use crate::episodes::{sample_episode, Dataset, Episode, Split, SplitSide};
use crate::error::{Error, Result};
use crate::geometry::{encode_offsets, RegressionTarget, Segment};
use crate::proposal::{
    assign_labels, register_proposal_params, sample_balanced, select_proposals, stage1_forward,
    stage2_forward, AnchorGrid, Label, LabeledSet, ProposalConfig, StageOutput,
};
use crate::rng::{child_seed, rng_from_seed};
use crate::similarity::{fewshot_loss, kshot_average, similarity_matrix};

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Regression loss trade-off.
    pub lambda: f64,
    /// Per-stage sampled batch size (split 1:1 positive/negative).
    pub batch_size: usize,
    pub episodes: usize,
    pub seed: u64,
    pub shot: usize,
    pub way: usize,
    /// Similarity temperature scaling cosines into softmax logits.
    pub tau: f64,
    /// Parameter-name prefixes excluded from updates.
    pub freeze: Vec<String>,
    /// Append ground-truth segments to the Stage-II training candidates so
    /// the refinement head and few-shot loss see positives from the start.
    pub stage2_add_gt: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            momentum: 0.9,
            lambda: 1.0,
            batch_size: 8,
            episodes: 2000,
            seed: 0,
            shot: 1,
            way: 5,
            tau: 0.1,
            freeze: Vec::new(),
            stage2_add_gt: true,
        }
    }
}

/// Full joint training or proposal-only pretraining.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Full,
    ProposalPretrain,
}

/// The five loss terms of one episode plus their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_p1_cls: f64,
    pub l_p1_reg: f64,
    pub l_p2_cls: f64,
    pub l_p2_reg: f64,
    pub l_fewshot: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    fn check_finite(&self) -> Result<()> {
        for (name, v) in [
            ("l_p1_cls", self.l_p1_cls),
            ("l_p1_reg", self.l_p1_reg),
            ("l_p2_cls", self.l_p2_cls),
            ("l_p2_reg", self.l_p2_reg),
            ("l_fewshot", self.l_fewshot),
            ("l_total", self.l_total),
        ] {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("loss term {name} is not finite ({v})")));
            }
        }
        Ok(())
    }
}

/// Tape handles of the episode's loss terms.
pub struct LossVars {
    pub p1_cls: Var,
    pub p1_reg: Var,
    pub p2_cls: Var,
    pub p2_reg: Var,
    pub fewshot: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            l_p1_cls: tape.value_scalar(self.p1_cls),
            l_p1_reg: tape.value_scalar(self.p1_reg),
            l_p2_cls: tape.value_scalar(self.p2_cls),
            l_p2_reg: tape.value_scalar(self.p2_reg),
            l_fewshot: tape.value_scalar(self.fewshot),
            l_total: tape.value_scalar(self.total),
        }
    }
}

/// Frozen discrete decisions of one episode forward pass.
#[derive(Debug, Clone)]
pub struct EpisodePlan {
    /// Stage-II candidate segments (selected proposals, plus ground truth
    /// when configured).
    pub proposals: Vec<Segment>,
    pub stage1_sampled: Vec<usize>,
    pub stage2_sampled: Vec<usize>,
}

/// Per-candidate regression targets: positives encode their matched ground
/// truth against the candidate.
pub fn regression_targets(
    candidates: &[Segment],
    gts: &[(Segment, usize)],
    labeled: &LabeledSet,
) -> Vec<Option<RegressionTarget>> {
    labeled
        .labels
        .iter()
        .enumerate()
        .map(|(i, label)| match label {
            Label::Positive { gt, .. } => Some(encode_offsets(gts[*gt].0, candidates[i])),
            _ => None,
        })
        .collect()
}

/// Classification and regression losses of one stage over a sampled batch:
/// mean binary cross entropy over the sampled items, and mean smooth-L1
/// over the sampled positives' offset targets.
pub fn stage_loss(
    tape: &mut Tape,
    out: &StageOutput,
    labeled: &LabeledSet,
    sampled: &[usize],
    targets: &[Option<RegressionTarget>],
) -> Result<(Var, Var)> {
    let mut cls_terms = Vec::with_capacity(sampled.len());
    let mut reg_terms = Vec::new();
    for &i in sampled {
        let binary_target = match labeled.labels[i] {
            Label::Positive { .. } => 1,
            Label::Negative => 0,
            Label::Ignore => {
                return Err(Error::Config(format!("sampled item {i} has an ignore label")))
            }
        };
        let logits = out.logits_var(tape, i)?;
        cls_terms.push(tape.softmax_cross_entropy(logits, binary_target)?);
        if binary_target == 1 {
            let t = targets[i].ok_or_else(|| {
                Error::Config(format!("positive item {i} is missing a regression target"))
            })?;
            let pred = out.offsets_var(tape, i)?;
            let target = tape.leaf_from(vec![2], vec![t.delta_c, t.delta_l])?;
            reg_terms.push(tape.smooth_l1(pred, target)?);
        }
    }
    let cls = if cls_terms.is_empty() { tape.scalar(0.0) } else { tape.mean_scalars(&cls_terms)? };
    let reg = if reg_terms.is_empty() { tape.scalar(0.0) } else { tape.mean_scalars(&reg_terms)? };
    Ok((cls, reg))
}

/// Builds the full episode loss on the tape. When `plan` is given, its
/// discrete decisions are replayed instead of recomputed; otherwise the
/// decisions taken are recorded into the returned plan.
#[allow(clippy::too_many_arguments)]
pub fn episode_loss(
    tape: &mut Tape,
    store: &ParamStore,
    episode: &Episode,
    enc_cfg: &EncoderConfig,
    prop_cfg: &ProposalConfig,
    cfg: &TrainConfig,
    mode: TrainMode,
    sampling_seed: u64,
    plan: Option<&EpisodePlan>,
) -> Result<(LossVars, EpisodePlan)> {
    let grid = AnchorGrid::new(episode.features.len(), &prop_cfg.scales)?;
    let map = encode_untrimmed(tape, store, enc_cfg, &episode.features)?;
    let s1 = stage1_forward(tape, store, &map, &grid)?;

    let gts = &episode.ground_truth;
    let labels1 = assign_labels(
        &grid.anchors,
        gts,
        prop_cfg.stage1_pos_thresh,
        prop_cfg.stage1_neg_thresh,
        true,
    );
    let targets1 = regression_targets(&grid.anchors, gts, &labels1);
    let stage1_sampled = match plan {
        Some(p) => p.stage1_sampled.clone(),
        None => {
            let mut rng = rng_from_seed(child_seed(sampling_seed, "stage1-sample", 0));
            sample_balanced(&labels1, cfg.batch_size, &mut rng)?
        }
    };
    let (p1_cls, p1_reg) = stage_loss(tape, &s1, &labels1, &stage1_sampled, &targets1)?;

    let proposals: Vec<Segment> = match plan {
        Some(p) => p.proposals.clone(),
        None => {
            let mut segs: Vec<Segment> =
                select_proposals(&s1, &grid, 0.0, prop_cfg.nms_thresh, prop_cfg.train_top_n)
                    .into_iter()
                    .map(|p| p.segment)
                    .collect();
            if cfg.stage2_add_gt {
                segs.extend(gts.iter().map(|(s, _)| *s));
            }
            segs
        }
    };

    let (p2_cls, p2_reg, fewshot, stage2_sampled) = if proposals.is_empty() {
        (tape.scalar(0.0), tape.scalar(0.0), tape.scalar(0.0), Vec::new())
    } else {
        let labels2 = assign_labels(
            &proposals,
            gts,
            prop_cfg.stage2_pos_thresh,
            prop_cfg.stage2_neg_thresh,
            false,
        );
        let targets2 = regression_targets(&proposals, gts, &labels2);
        let stage2_sampled = match plan {
            Some(p) => p.stage2_sampled.clone(),
            None => {
                let mut rng = rng_from_seed(child_seed(sampling_seed, "stage2-sample", 0));
                sample_balanced(&labels2, cfg.batch_size, &mut rng)?
            }
        };
        let (s2, embeddings) = stage2_forward(tape, store, &map, &proposals, prop_cfg.bins)?;
        let (p2_cls, p2_reg) = stage_loss(tape, &s2, &labels2, &stage2_sampled, &targets2)?;

        let fewshot = match mode {
            TrainMode::ProposalPretrain => tape.scalar(0.0),
            TrainMode::Full => {
                let mut exemplar_embeds = Vec::new();
                for (label, clips) in episode.support.iter().enumerate() {
                    for clip in clips {
                        let e = encode_exemplar(tape, store, enc_cfg, prop_cfg.bins, clip)?;
                        exemplar_embeds.push((e, label));
                    }
                }
                let matrix = similarity_matrix(tape, &exemplar_embeds, &embeddings)?;
                let scores = kshot_average(tape, &matrix, episode.way)?;
                fewshot_loss(tape, &scores, &labels2, cfg.tau)?
            }
        };
        (p2_cls, p2_reg, fewshot, stage2_sampled)
    };

    let p1_reg_weighted = tape.scale(p1_reg, cfg.lambda);
    let p2_reg_weighted = tape.scale(p2_reg, cfg.lambda);
    let total = tape.add_n(&[p1_cls, p1_reg_weighted, p2_cls, p2_reg_weighted, fewshot])?;
    Ok((
        LossVars { p1_cls, p1_reg, p2_cls, p2_reg, fewshot, total },
        EpisodePlan { proposals, stage1_sampled, stage2_sampled },
    ))
}

/// Runs the full pipeline on one episode and returns the loss values plus
/// the plan that froze its discrete decisions.
pub fn total_loss(
    store: &ParamStore,
    episode: &Episode,
    enc_cfg: &EncoderConfig,
    prop_cfg: &ProposalConfig,
    cfg: &TrainConfig,
    mode: TrainMode,
    sampling_seed: u64,
) -> Result<(LossBreakdown, EpisodePlan)> {
    let mut tape = Tape::new();
    let (vars, plan) =
        episode_loss(&mut tape, store, episode, enc_cfg, prop_cfg, cfg, mode, sampling_seed, None)?;
    Ok((vars.breakdown(&tape), plan))
}

/// Initializes a fresh parameter store for the given architecture.
pub fn init_params(enc_cfg: &EncoderConfig, prop_cfg: &ProposalConfig, seed: u64) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    let mut rng = rng_from_seed(child_seed(seed, "param-init", 0));
    register_encoder_params(enc_cfg, &mut store, &mut rng)?;
    register_proposal_params(enc_cfg, prop_cfg, &mut store, &mut rng)?;
    Ok(store)
}

/// Trained parameters plus the per-episode loss log.
pub struct TrainResult {
    pub params: ParamStore,
    pub log: Vec<LossBreakdown>,
}

fn frozen(name: &str, freeze: &[String]) -> bool {
    freeze.iter().any(|prefix| name.starts_with(prefix.as_str()))
}

struct SgdState {
    velocity: BTreeMap<String, Vec<f64>>,
}

impl SgdState {
    fn new(store: &ParamStore) -> Self {
        let velocity =
            store.iter().map(|(name, t)| (name.to_string(), vec![0.0; t.numel()])).collect();
        Self { velocity }
    }

    fn step(&mut self, store: &mut ParamStore, cfg: &TrainConfig) -> Result<()> {
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for name in names {
            if frozen(&name, &cfg.freeze) {
                continue;
            }
            let v = self.velocity.get_mut(&name).expect("velocity tracks every parameter");
            let t = store.get_mut(&name)?;
            let n = t.numel();
            let grad: Vec<f64> = t.grad().expect("parameters carry gradients").to_vec();
            let values = t.values_mut();
            for i in 0..n {
                v[i] = cfg.momentum * v[i] + grad[i];
                values[i] -= cfg.learning_rate * v[i];
            }
        }
        Ok(())
    }
}

/// SGD-with-momentum training over episodes sampled from the split's train
/// side. One episode per gradient step; deterministic given the seed.
/// `init` starts from existing parameters (e.g. a pretraining checkpoint).
pub fn train(
    dataset: &Dataset,
    split: &Split,
    enc_cfg: &EncoderConfig,
    prop_cfg: &ProposalConfig,
    cfg: &TrainConfig,
    mode: TrainMode,
    init: Option<ParamStore>,
) -> Result<TrainResult> {
    let mut store = match init {
        Some(s) => s,
        None => init_params(enc_cfg, prop_cfg, cfg.seed)?,
    };
    let mut sgd = SgdState::new(&store);
    let mut log = Vec::with_capacity(cfg.episodes);
    for ep in 0..cfg.episodes {
        let ep_seed = child_seed(cfg.seed, "train-episode", ep as u64);
        let episode =
            sample_episode(dataset, split, SplitSide::Train, cfg.way, cfg.shot, ep_seed)?;
        let mut tape = Tape::new();
        let (vars, _plan) = episode_loss(
            &mut tape,
            &store,
            &episode,
            enc_cfg,
            prop_cfg,
            cfg,
            mode,
            child_seed(ep_seed, "sampling", 0),
            None,
        )?;
        let breakdown = vars.breakdown(&tape);
        breakdown
            .check_finite()
            .map_err(|e| Error::Numeric(format!("episode {ep}: {e}")))?;
        store.zero_grads();
        tape.backward(vars.total)?;
        tape.write_grads(&mut store)?;
        sgd.step(&mut store, cfg)?;
        log.push(breakdown);
    }
    Ok(TrainResult { params: store, log })
}

/// Serializes the training log as CSV.
pub fn log_to_csv(log: &[LossBreakdown]) -> String {
    let mut out = String::from("episode,l_p1_cls,l_p1_reg,l_p2_cls,l_p2_reg,l_fewshot,l_total\n");
    for (i, b) in log.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            i, b.l_p1_cls, b.l_p1_reg, b.l_p2_cls, b.l_p2_reg, b.l_fewshot, b.l_total
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{generate_dataset, split_classes, GeneratorConfig};
    use approx::assert_abs_diff_eq;

    fn tiny_enc() -> EncoderConfig {
        EncoderConfig { input_dim: 4, hidden_dims: [6, 6, 6], embed_dim: 6, fc_dim: 8 }
    }

    fn tiny_prop() -> ProposalConfig {
        ProposalConfig { scales: vec![8, 16], bins: 2, train_top_n: 8, ..ProposalConfig::default() }
    }

    fn tiny_dataset() -> (Dataset, Split) {
        let gen = GeneratorConfig {
            num_classes: 10,
            num_videos: 12,
            seq_len: 32,
            feat_dim: 4,
            noise_sigma: 0.2,
            instances_per_video: (1, 2),
            instance_len: (6, 14),
            exemplars_per_class: 6,
            ..GeneratorConfig::default()
        };
        let ds = generate_dataset(0, &gen).unwrap();
        let split = split_classes(&ds, 0.5, 0).unwrap();
        (ds, split)
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig { batch_size: 4, episodes: 4, ..TrainConfig::default() }
    }

    fn one_episode(ds: &Dataset, split: &Split, seed: u64) -> Episode {
        sample_episode(ds, split, SplitSide::Train, 5, 1, seed).unwrap()
    }

    #[test]
    fn loss_breakdown_is_additive_and_non_negative() {
        let (ds, split) = tiny_dataset();
        let cfg = tiny_train_cfg();
        let store = init_params(&tiny_enc(), &tiny_prop(), 0).unwrap();
        for seed in 0..5 {
            let ep = one_episode(&ds, &split, seed);
            let (b, _) =
                total_loss(&store, &ep, &tiny_enc(), &tiny_prop(), &cfg, TrainMode::Full, seed)
                    .unwrap();
            let sum = b.l_p1_cls
                + cfg.lambda * b.l_p1_reg
                + b.l_p2_cls
                + cfg.lambda * b.l_p2_reg
                + b.l_fewshot;
            assert_abs_diff_eq!(b.l_total, sum, epsilon = 1e-9);
            for v in [b.l_p1_cls, b.l_p1_reg, b.l_p2_cls, b.l_p2_reg, b.l_fewshot] {
                assert!(v >= 0.0, "negative loss term {v}");
            }
        }
    }

    #[test]
    fn lambda_zero_removes_regression_from_total() {
        let (ds, split) = tiny_dataset();
        let cfg = TrainConfig { lambda: 0.0, ..tiny_train_cfg() };
        let store = init_params(&tiny_enc(), &tiny_prop(), 0).unwrap();
        let ep = one_episode(&ds, &split, 3);
        let (b, _) =
            total_loss(&store, &ep, &tiny_enc(), &tiny_prop(), &cfg, TrainMode::Full, 3).unwrap();
        assert!(b.l_p1_reg > 0.0);
        assert_abs_diff_eq!(b.l_total, b.l_p1_cls + b.l_p2_cls + b.l_fewshot, epsilon = 1e-12);
    }

    #[test]
    fn duplicated_episode_gives_identical_breakdowns() {
        let (ds, split) = tiny_dataset();
        let cfg = tiny_train_cfg();
        let store = init_params(&tiny_enc(), &tiny_prop(), 1).unwrap();
        let ep = one_episode(&ds, &split, 9);
        let (a, _) =
            total_loss(&store, &ep, &tiny_enc(), &tiny_prop(), &cfg, TrainMode::Full, 42).unwrap();
        let (b, _) =
            total_loss(&store, &ep, &tiny_enc(), &tiny_prop(), &cfg, TrainMode::Full, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn all_ignore_labels_leave_only_fewshot() {
        let mut tape = Tape::new();
        let set = LabeledSet { labels: vec![Label::Ignore; 4] };
        let mut rng = rng_from_seed(0);
        let sampled = sample_balanced(&set, 4, &mut rng).unwrap();
        assert!(sampled.is_empty());
        // stage_loss over an empty sample is exactly (0, 0)
        let out_dummy = {
            let store = init_params(&tiny_enc(), &tiny_prop(), 0).unwrap();
            let (ds, split) = tiny_dataset();
            let ep = one_episode(&ds, &split, 0);
            let map = encode_untrimmed(&mut tape, &store, &tiny_enc(), &ep.features).unwrap();
            let grid = AnchorGrid::new(32, &tiny_prop().scales).unwrap();
            stage1_forward(&mut tape, &store, &map, &grid).unwrap()
        };
        let targets = vec![None; out_dummy.len()];
        let (cls, reg) = stage_loss(&mut tape, &out_dummy, &set, &sampled, &targets).unwrap();
        assert_eq!(tape.value_scalar(cls), 0.0);
        assert_eq!(tape.value_scalar(reg), 0.0);
    }

    #[test]
    fn pretrain_mode_has_zero_fewshot_loss() {
        let (ds, split) = tiny_dataset();
        let cfg = tiny_train_cfg();
        let result = train(
            &ds,
            &split,
            &tiny_enc(),
            &tiny_prop(),
            &cfg,
            TrainMode::ProposalPretrain,
            None,
        )
        .unwrap();
        assert_eq!(result.log.len(), cfg.episodes);
        assert!(result.log.iter().all(|b| b.l_fewshot == 0.0));
    }

    #[test]
    fn zero_episodes_leave_parameters_at_initialization() {
        let (ds, split) = tiny_dataset();
        let cfg = TrainConfig { episodes: 0, ..tiny_train_cfg() };
        let result =
            train(&ds, &split, &tiny_enc(), &tiny_prop(), &cfg, TrainMode::Full, None).unwrap();
        let fresh = init_params(&tiny_enc(), &tiny_prop(), cfg.seed).unwrap();
        for (name, t) in fresh.iter() {
            assert_eq!(t.values(), result.params.get(name).unwrap().values());
        }
    }

    #[test]
    fn training_is_reproducible() {
        let (ds, split) = tiny_dataset();
        let cfg = tiny_train_cfg();
        let a = train(&ds, &split, &tiny_enc(), &tiny_prop(), &cfg, TrainMode::Full, None).unwrap();
        let b = train(&ds, &split, &tiny_enc(), &tiny_prop(), &cfg, TrainMode::Full, None).unwrap();
        assert_eq!(a.log, b.log);
        for (name, t) in a.params.iter() {
            assert_eq!(t.values(), b.params.get(name).unwrap().values());
        }
    }

    #[test]
    fn frozen_prefixes_are_not_updated() {
        let (ds, split) = tiny_dataset();
        let cfg = TrainConfig {
            freeze: vec!["enc.conv1".into(), "enc.conv2".into()],
            ..tiny_train_cfg()
        };
        let init = init_params(&tiny_enc(), &tiny_prop(), cfg.seed).unwrap();
        let result =
            train(&ds, &split, &tiny_enc(), &tiny_prop(), &cfg, TrainMode::Full, None).unwrap();
        for name in ["enc.conv1.w", "enc.conv1.b", "enc.conv2.w", "enc.conv2.b"] {
            assert_eq!(init.get(name).unwrap().values(), result.params.get(name).unwrap().values());
        }
        assert_ne!(
            init.get("enc.conv3.w").unwrap().values(),
            result.params.get("enc.conv3.w").unwrap().values()
        );
    }

    #[test]
    fn repeated_steps_on_a_frozen_episode_reduce_the_loss() {
        let (ds, split) = tiny_dataset();
        let cfg = TrainConfig { batch_size: 4, ..TrainConfig::default() };
        let mut store = init_params(&tiny_enc(), &tiny_prop(), 0).unwrap();
        let ep = one_episode(&ds, &split, 5);
        let mut sgd = SgdState::new(&store);
        let mut first = None;
        let mut last = None;
        for _ in 0..50 {
            let mut tape = Tape::new();
            let (vars, _) = episode_loss(
                &mut tape,
                &store,
                &ep,
                &tiny_enc(),
                &tiny_prop(),
                &cfg,
                TrainMode::Full,
                7,
                None,
            )
            .unwrap();
            let b = vars.breakdown(&tape);
            first.get_or_insert(b.l_total);
            last = Some(b.l_total);
            store.zero_grads();
            tape.backward(vars.total).unwrap();
            tape.write_grads(&mut store).unwrap();
            sgd.step(&mut store, &cfg).unwrap();
        }
        let (first, last) = (first.unwrap(), last.unwrap());
        assert!(last <= first, "loss rose from {first} to {last} over 50 steps");
    }

    /// End-to-end gradient of the total loss against central finite
    /// differences on a frozen tiny episode.
    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let result = crate::diagnostics::end_to_end_gradient_error(2).unwrap();
        assert!(
            result.max_rel_err < 1e-3,
            "end-to-end gradient check failed: {} (checked {}, skipped {})",
            result.max_rel_err,
            result.checked,
            result.skipped
        );
    }
}
