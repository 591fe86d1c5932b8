//! Shared feature extractor: a fully-convolutional temporal encoder with
//! /8 downsampling applied to untrimmed sequences, and a weight-shared
//! exemplar branch producing one fixed-length embedding per trimmed clip.
//! The exemplar branch runs the identical conv stack (same named
//! parameters) and then the Stage-II RoI-pool-and-FC pathway over the full
//! clip extent, so exemplar and proposal embeddings live in the same space.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::episodes::{FeatureSequence, EXEMPLAR_LEN};
use crate::error::{Error, Result};
use crate::geometry::{Segment, TEMPORAL_DOWNSAMPLE};
use crate::proposal::{roi_pool_temporal, stage2_embed};
use rand_chacha::ChaCha8Rng;

/// Encoder dimensions. The downsampling factor is fixed at 8 (three
/// stride-2 pools); the third block's channel count is the feature-map
/// width `embed_dim`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Per-timestep input feature width `F`.
    pub input_dim: usize,
    /// Output channels of the three conv blocks.
    pub hidden_dims: [usize; 3],
    /// Channels `D` of the final `L/8` feature map; must equal the third
    /// hidden dim.
    pub embed_dim: usize,
    /// Width of the Stage-II embedding space holding `f(S_j)` and `f(R_i)`.
    pub fc_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { input_dim: 16, hidden_dims: [32, 32, 32], embed_dim: 32, fc_dim: 64 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 || self.fc_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("encoder hidden dims must be positive".into()));
        }
        if self.embed_dim != self.hidden_dims[2] {
            return Err(Error::Config(format!(
                "embed_dim {} must equal the third hidden dim {}",
                self.embed_dim, self.hidden_dims[2]
            )));
        }
        Ok(())
    }
}

/// The encoder's output: an `L/8 x D` temporal feature map on the tape.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap {
    pub len: usize,
    pub channels: usize,
    pub var: Var,
}

/// Registers the three conv blocks' weights under `enc.conv{1,2,3}.{w,b}`.
pub fn register_encoder_params(
    cfg: &EncoderConfig,
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    cfg.validate()?;
    let mut in_ch = cfg.input_dim;
    for (i, &out_ch) in cfg.hidden_dims.iter().enumerate() {
        let fan_in = in_ch * 3;
        store.register(&format!("enc.conv{}.w", i + 1), vec![out_ch, in_ch, 3], fan_in, rng)?;
        store.register(&format!("enc.conv{}.b", i + 1), vec![out_ch], fan_in, rng)?;
        in_ch = out_ch;
    }
    Ok(())
}

/// Three blocks of (conv1d k=3 pad=1, relu, maxpool window=2 stride=2).
fn conv_stack(tape: &mut Tape, store: &ParamStore, input: Var) -> Result<Var> {
    let mut x = input;
    for i in 1..=3 {
        let w = tape.param(store, &format!("enc.conv{i}.w"))?;
        let b = tape.param(store, &format!("enc.conv{i}.b"))?;
        x = tape.conv1d(x, w, b, 1, 1)?;
        x = tape.relu(x);
        x = tape.maxpool1d(x, 2, 2)?;
    }
    Ok(x)
}

/// Encodes an untrimmed sequence into its `L/8 x D` feature map.
pub fn encode_untrimmed(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &EncoderConfig,
    seq: &FeatureSequence,
) -> Result<FeatureMap> {
    if seq.dim() != cfg.input_dim {
        return Err(Error::Shape(format!(
            "sequence feature width {} does not match encoder input_dim {}",
            seq.dim(),
            cfg.input_dim
        )));
    }
    if seq.len() < TEMPORAL_DOWNSAMPLE || seq.len() % TEMPORAL_DOWNSAMPLE != 0 {
        return Err(Error::Config(format!(
            "sequence length {} must be a positive multiple of {TEMPORAL_DOWNSAMPLE}",
            seq.len()
        )));
    }
    let input = tape.leaf_from(vec![seq.len(), seq.dim()], seq.values().to_vec())?;
    let out = conv_stack(tape, store, input)?;
    Ok(FeatureMap {
        len: seq.len() / TEMPORAL_DOWNSAMPLE,
        channels: cfg.embed_dim,
        var: out,
    })
}

/// Encodes a 16-step exemplar clip into an `fc_dim` embedding `f(S_j)`:
/// the shared conv stack, then a full-extent temporal RoI pool and the
/// shared Stage-II FC layers.
pub fn encode_exemplar(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &EncoderConfig,
    bins: usize,
    clip: &FeatureSequence,
) -> Result<Var> {
    if clip.len() != EXEMPLAR_LEN {
        return Err(Error::Shape(format!(
            "exemplar clip must have length {EXEMPLAR_LEN}, got {}",
            clip.len()
        )));
    }
    let map = encode_untrimmed(tape, store, cfg, clip)?;
    let extent = Segment::new(0.0, EXEMPLAR_LEN as f64)?;
    let pooled = roi_pool_temporal(tape, &map, extent, bins)?;
    stage2_embed(tape, store, pooled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proposal::{register_proposal_params, ProposalConfig};
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn test_cfg() -> EncoderConfig {
        EncoderConfig { input_dim: 4, hidden_dims: [6, 6, 6], embed_dim: 6, fc_dim: 8 }
    }

    fn test_store(cfg: &EncoderConfig) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(0);
        register_encoder_params(cfg, &mut store, &mut rng).unwrap();
        let pcfg = ProposalConfig { bins: 2, ..ProposalConfig::default() };
        register_proposal_params(cfg, &pcfg, &mut store, &mut rng).unwrap();
        store
    }

    fn random_seq(len: usize, dim: usize, seed: u64) -> FeatureSequence {
        let mut rng = rng_from_seed(seed);
        let data = (0..len * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureSequence::new(len, dim, data).unwrap()
    }

    #[test]
    fn output_lengths_are_exactly_l_over_8() {
        let cfg = test_cfg();
        let store = test_store(&cfg);
        for (l, want) in [(512, 64), (8, 1), (768, 96)] {
            let seq = random_seq(l, 4, 1);
            let mut tape = Tape::new();
            let map = encode_untrimmed(&mut tape, &store, &cfg, &seq).unwrap();
            assert_eq!(map.len, want);
            assert_eq!(tape.shape(map.var), &[want, 6]);
        }
    }

    #[test]
    fn invalid_lengths_are_configuration_errors() {
        let cfg = test_cfg();
        let store = test_store(&cfg);
        let seq = random_seq(12, 4, 1);
        assert!(encode_untrimmed(&mut Tape::new(), &store, &cfg, &seq).is_err());
    }

    #[test]
    fn embed_dim_must_match_third_block() {
        let cfg = EncoderConfig { embed_dim: 12, ..test_cfg() };
        let mut store = ParamStore::new();
        let err = register_encoder_params(&cfg, &mut store, &mut rng_from_seed(0)).unwrap_err();
        assert!(err.to_string().contains("embed_dim"));
    }

    #[test]
    fn branches_share_the_same_named_parameters() {
        let cfg = test_cfg();
        let store = test_store(&cfg);

        let mut tape_u = Tape::new();
        encode_untrimmed(&mut tape_u, &store, &cfg, &random_seq(16, 4, 2)).unwrap();
        let conv_names: Vec<String> = tape_u.param_names().map(str::to_string).collect();

        let mut tape_e = Tape::new();
        encode_exemplar(&mut tape_e, &store, &cfg, 2, &random_seq(16, 4, 3)).unwrap();
        let exemplar_names: Vec<String> = tape_e.param_names().map(str::to_string).collect();

        for n in &conv_names {
            assert!(exemplar_names.contains(n), "exemplar branch missing {n}");
        }
        assert!(exemplar_names.iter().any(|n| n.starts_with("p2.fc")));
    }

    #[test]
    fn encoder_is_fully_convolutional_on_interior_positions() {
        let cfg = test_cfg();
        let store = test_store(&cfg);
        let base = random_seq(64, 4, 5);
        let mut doubled = FeatureSequence::zeros(128, 4);
        for t in 0..64 {
            doubled.row_mut(t).copy_from_slice(base.row(t));
            doubled.row_mut(t + 64).copy_from_slice(base.row(t));
        }
        let mut tape = Tape::new();
        let m1 = encode_untrimmed(&mut tape, &store, &cfg, &base).unwrap();
        let m2 = encode_untrimmed(&mut tape, &store, &cfg, &doubled).unwrap();
        let v1 = tape.values(m1.var);
        let v2 = tape.values(m2.var);
        let d = m1.channels;
        // receptive field of output cell t is input [8t-7, 8t+15), so
        // positions 1..=6 of the single copy are boundary-free
        for t in 1..=6 {
            for c in 0..d {
                assert_eq!(v1[t * d + c], v2[t * d + c], "first copy, cell {t}");
                assert_eq!(v1[t * d + c], v2[(t + 8) * d + c], "second copy, cell {t}");
            }
        }
    }

    #[test]
    fn identical_exemplars_embed_identically() {
        let cfg = test_cfg();
        let store = test_store(&cfg);
        let clip = random_seq(16, 4, 9);
        let mut tape = Tape::new();
        let a = encode_exemplar(&mut tape, &store, &cfg, 2, &clip).unwrap();
        let b = encode_exemplar(&mut tape, &store, &cfg, 2, &clip).unwrap();
        assert_eq!(tape.values(a), tape.values(b));
        assert_eq!(tape.values(a).len(), cfg.fc_dim);
        assert!(tape.values(a).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn wrong_clip_length_is_rejected() {
        let cfg = test_cfg();
        let store = test_store(&cfg);
        let clip = random_seq(8, 4, 9);
        assert!(encode_exemplar(&mut Tape::new(), &store, &cfg, 2, &clip).is_err());
    }
}
