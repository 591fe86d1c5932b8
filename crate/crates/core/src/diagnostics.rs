//! Gradient verification suites: per-primitive finite-difference checks,
//! composite checks through RoI pooling / cosine similarity / the losses,
//! and the end-to-end check of the total episode loss.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, no_skip, ParamStore, Tape, Tensor, Var, GRAD_CHECK_H, KINK_TOL};
use crate::encoder::{EncoderConfig, FeatureMap};
use crate::episodes::{generate_dataset, sample_episode, split_classes, GeneratorConfig, SplitSide};
use crate::error::{Error, Result};
use crate::geometry::Segment;
use crate::proposal::{roi_pool_temporal, ProposalConfig};
use crate::rng::{child_seed, rng_from_seed};
use crate::trainer::{episode_loss, init_params, TrainConfig, TrainMode};

/// Result of one operator's gradient check across seeds.
#[derive(Debug, Clone)]
pub struct OpGradCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub seeds: usize,
}

fn tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
        .expect("shape matches generated length")
}

type BuildFn = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

fn check_one(
    name: &'static str,
    seeds: usize,
    make_inputs: &dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    build: &BuildFn,
    skip_for: &dyn Fn(&[Tensor]) -> Box<dyn Fn(usize, usize) -> bool>,
) -> Result<OpGradCheck> {
    let mut worst = 0.0f64;
    for s in 0..seeds {
        let mut rng = rng_from_seed(child_seed(0xd1a6, name, s as u64));
        let inputs = make_inputs(&mut rng);
        let skip = skip_for(&inputs);
        let err = grad_check(&build, &inputs, s as u64, skip.as_ref())?;
        if err > worst {
            worst = err;
        }
    }
    Ok(OpGradCheck { name, max_rel_err: worst, seeds })
}

fn no_mask(_: &[Tensor]) -> Box<dyn Fn(usize, usize) -> bool> {
    Box::new(no_skip)
}

/// Mask for relu inputs: skip coordinates within the kink tolerance of 0.
fn relu_mask(inputs: &[Tensor]) -> Box<dyn Fn(usize, usize) -> bool> {
    let values = inputs[0].values().to_vec();
    Box::new(move |i, c| i == 0 && values[c].abs() < KINK_TOL)
}

/// Runs the finite-difference gradient suite over every primitive and the
/// RoI-pool / cosine / loss composites, each across `seeds` seeds.
pub fn gradient_suite(seeds: usize) -> Result<Vec<OpGradCheck>> {
    let mut out = Vec::new();

    out.push(check_one(
        "conv1d",
        seeds,
        &|rng| {
            vec![
                tensor(rng, vec![7, 3], -1.0, 1.0),
                tensor(rng, vec![4, 3, 3], -1.0, 1.0),
                tensor(rng, vec![4], -0.5, 0.5),
            ]
        },
        &|tape, v| tape.conv1d(v[0], v[1], v[2], 1, 1),
        &no_mask,
    )?);

    out.push(check_one(
        "conv1d_stride2",
        seeds,
        &|rng| {
            vec![
                tensor(rng, vec![9, 2], -1.0, 1.0),
                tensor(rng, vec![3, 2, 3], -1.0, 1.0),
                tensor(rng, vec![3], -0.5, 0.5),
            ]
        },
        &|tape, v| tape.conv1d(v[0], v[1], v[2], 2, 0),
        &no_mask,
    )?);

    out.push(check_one(
        "maxpool1d",
        seeds,
        &|rng| vec![tensor(rng, vec![8, 3], -1.0, 1.0)],
        &|tape, v| tape.maxpool1d(v[0], 2, 2),
        &no_mask,
    )?);

    out.push(check_one(
        "dense",
        seeds,
        &|rng| {
            vec![
                tensor(rng, vec![5], -1.0, 1.0),
                tensor(rng, vec![4, 5], -1.0, 1.0),
                tensor(rng, vec![4], -0.5, 0.5),
            ]
        },
        &|tape, v| tape.dense(v[0], v[1], v[2]),
        &no_mask,
    )?);

    out.push(check_one(
        "relu",
        seeds,
        &|rng| vec![tensor(rng, vec![9], -1.0, 1.0)],
        &|tape, v| Ok(tape.relu(v[0])),
        &relu_mask,
    )?);

    out.push(check_one(
        "cosine_similarity",
        seeds,
        &|rng| vec![tensor(rng, vec![6], -1.0, 1.0), tensor(rng, vec![6], -1.0, 1.0)],
        &|tape, v| tape.cosine_similarity(v[0], v[1]),
        &no_mask,
    )?);

    out.push(check_one(
        "softmax_cross_entropy",
        seeds,
        &|rng| vec![tensor(rng, vec![5], -2.0, 2.0)],
        &|tape, v| tape.softmax_cross_entropy(v[0], 2),
        &no_mask,
    )?);

    out.push(check_one(
        "smooth_l1",
        seeds,
        &|rng| vec![tensor(rng, vec![4], -2.0, 2.0), tensor(rng, vec![4], -2.0, 2.0)],
        &|tape, v| tape.smooth_l1(v[0], v[1]),
        &no_mask,
    )?);

    out.push(check_one(
        "roi_pool",
        seeds,
        &|rng| vec![tensor(rng, vec![6, 3], -1.0, 1.0)],
        &|tape, v| {
            let map = FeatureMap { len: 6, channels: 3, var: v[0] };
            roi_pool_temporal(tape, &map, Segment::new(5.0, 43.0)?, 2)
        },
        &no_mask,
    )?);

    out.push(check_one(
        "roi_fc_loss_composite",
        seeds,
        &|rng| {
            vec![
                tensor(rng, vec![6, 3], -1.0, 1.0),
                tensor(rng, vec![4, 6], -1.0, 1.0),
                tensor(rng, vec![4], -0.5, 0.5),
            ]
        },
        &|tape, v| {
            let map = FeatureMap { len: 6, channels: 3, var: v[0] };
            let pooled = roi_pool_temporal(tape, &map, Segment::new(2.0, 46.0)?, 2)?;
            let flat = tape.flatten(pooled);
            let h = tape.dense(flat, v[1], v[2])?;
            let h = tape.relu(h);
            tape.softmax_cross_entropy(h, 1)
        },
        &no_mask,
    )?);

    out.push(check_one(
        "cosine_composite",
        seeds,
        &|rng| {
            vec![
                tensor(rng, vec![5], -1.0, 1.0),
                tensor(rng, vec![5], -1.0, 1.0),
                tensor(rng, vec![4, 5], -1.0, 1.0),
                tensor(rng, vec![4], -0.5, 0.5),
            ]
        },
        &|tape, v| {
            let u = tape.dense(v[0], v[2], v[3])?;
            let u = tape.relu(u);
            let w = tape.dense(v[1], v[2], v[3])?;
            let w = tape.relu(w);
            tape.cosine_similarity(u, w)
        },
        &no_mask,
    )?);

    out.push(check_one(
        "loss_composite",
        seeds,
        &|rng| {
            vec![
                tensor(rng, vec![5], -1.0, 1.0),
                tensor(rng, vec![3, 5], -1.0, 1.0),
                tensor(rng, vec![3], -0.5, 0.5),
                tensor(rng, vec![3], -1.5, 1.5),
            ]
        },
        &|tape, v| {
            let logits = tape.dense(v[0], v[1], v[2])?;
            let ce = tape.softmax_cross_entropy(logits, 0)?;
            let sl = tape.smooth_l1(logits, v[3])?;
            tape.add_n(&[ce, sl])
        },
        &no_mask,
    )?);

    Ok(out)
}

/// Architecture used by the end-to-end gradient check: a tiny frozen
/// episode (L = 32, two anchor scales) small enough to finite-difference
/// every parameter coordinate.
pub fn tiny_configs() -> (EncoderConfig, ProposalConfig, TrainConfig, GeneratorConfig) {
    let enc = EncoderConfig { input_dim: 4, hidden_dims: [6, 6, 6], embed_dim: 6, fc_dim: 8 };
    let prop = ProposalConfig {
        scales: vec![8, 16],
        bins: 2,
        train_top_n: 8,
        ..ProposalConfig::default()
    };
    let train = TrainConfig { batch_size: 4, ..TrainConfig::default() };
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
    (enc, prop, train, gen)
}

/// Outcome of the end-to-end gradient check.
#[derive(Debug, Clone, Copy)]
pub struct EndToEndGradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates whose finite-difference window crossed a relu/argmax
    /// decision boundary and were skipped.
    pub skipped: usize,
}

/// Compares the gradient of the total episode loss with central finite
/// differences over every parameter coordinate, on a frozen tiny episode.
/// The episode plan (selected proposals, sampled batches) is frozen so the
/// differentiated function is exactly the one the backward pass sees;
/// coordinates whose FD window crosses a discrete decision are skipped.
pub fn end_to_end_gradient_error(seed: u64) -> Result<EndToEndGradCheck> {
    let (enc, prop, train_cfg, gen) = tiny_configs();
    let dataset = generate_dataset(child_seed(seed, "e2e-data", 0), &gen)?;
    let split = split_classes(&dataset, 0.5, child_seed(seed, "e2e-split", 0))?;
    let episode =
        sample_episode(&dataset, &split, SplitSide::Train, 5, 1, child_seed(seed, "e2e-ep", 0))?;
    let mut store = init_params(&enc, &prop, child_seed(seed, "e2e-init", 0))?;
    let sampling_seed = child_seed(seed, "e2e-sampling", 0);

    let mut tape = Tape::new();
    let (vars, plan) = episode_loss(
        &mut tape,
        &store,
        &episode,
        &enc,
        &prop,
        &train_cfg,
        TrainMode::Full,
        sampling_seed,
        None,
    )?;
    store.zero_grads();
    tape.backward(vars.total)?;
    tape.write_grads(&mut store)?;
    let analytic: Vec<(String, Vec<f64>)> =
        store.iter().map(|(n, t)| (n.to_string(), t.grad().unwrap().to_vec())).collect();

    let eval = |store: &ParamStore| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let (vars, _) = episode_loss(
            &mut tape,
            store,
            &episode,
            &enc,
            &prop,
            &train_cfg,
            TrainMode::Full,
            sampling_seed,
            Some(&plan),
        )?;
        Ok((tape.value_scalar(vars.total), tape.decision_digest()))
    };

    let mut result = EndToEndGradCheck { max_rel_err: 0.0, checked: 0, skipped: 0 };
    for (name, grads) in &analytic {
        for (i, &g) in grads.iter().enumerate() {
            let base = store.get(name)?.values()[i];
            store.get_mut(name)?.values_mut()[i] = base + GRAD_CHECK_H;
            let (plus, digest_plus) = eval(&store)?;
            store.get_mut(name)?.values_mut()[i] = base - GRAD_CHECK_H;
            let (minus, digest_minus) = eval(&store)?;
            store.get_mut(name)?.values_mut()[i] = base;
            if digest_plus != digest_minus {
                result.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * GRAD_CHECK_H);
            let rel = (g - numeric).abs() / g.abs().max(numeric.abs()).max(1e-6);
            if rel > result.max_rel_err {
                result.max_rel_err = rel;
            }
            result.checked += 1;
        }
    }
    if result.checked < result.skipped * 10 {
        return Err(Error::Numeric(format!(
            "end-to-end gradient check skipped too many coordinates ({} of {})",
            result.skipped,
            result.checked + result.skipped
        )));
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_suite_passes_across_seeds() {
        for check in gradient_suite(10).unwrap() {
            assert!(
                check.max_rel_err < 1e-4,
                "{} failed gradient check: {}",
                check.name,
                check.max_rel_err
            );
        }
    }
}
