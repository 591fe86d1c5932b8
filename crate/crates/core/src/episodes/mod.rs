//! Synthetic dataset generation, a JSONL dataset format, class-subset
//! splits, and the episodic sampler for meta-training and meta-testing.
//!
//! Untrimmed samples are feature sequences with planted class instances:
//! timesteps inside an instance emit that class's prototype plus gaussian
//! noise, background timesteps emit a shared background prototype plus
//! noise. Exemplars are 16-step trimmed clips, either generated fresh from
//! prototypes or cropped out of untrimmed samples.

mod io;

pub use io::{load_dataset, save_dataset};

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Segment;
use crate::rng::{child_seed, rng_from_seed};

/// Fixed length of trimmed exemplar clips.
pub const EXEMPLAR_LEN: usize = 16;

/// An `len x dim` array of per-timestep feature vectors, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    len: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureSequence {
    pub fn new(len: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != len * dim {
            return Err(Error::Shape(format!(
                "feature sequence {len}x{dim} needs {} values, got {}",
                len * dim,
                data.len()
            )));
        }
        Ok(Self { len, dim, data })
    }

    pub fn zeros(len: usize, dim: usize) -> Self {
        Self { len, dim, data: vec![0.0; len * dim] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let len = rows.len();
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(len * dim);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::Shape(format!(
                    "feature row {i} has width {}, expected {dim}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Self { len, dim, data })
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.len).map(|t| self.row(t).to_vec()).collect()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.dim..(t + 1) * self.dim]
    }
}

/// A synthetic activity class: a unit-norm prototype feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityClass {
    pub id: usize,
    pub prototype: Vec<f64>,
}

/// A ground-truth activity instance inside an untrimmed sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annotation {
    pub segment: Segment,
    pub class_id: usize,
}

/// An untrimmed feature sequence with its activity annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct UntrimmedSample {
    pub features: FeatureSequence,
    pub annotations: Vec<Annotation>,
}

/// A trimmed 16-step exemplar clip of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct Exemplar {
    pub features: FeatureSequence,
    pub class_id: usize,
}

/// An in-memory dataset: untrimmed samples plus per-class exemplar pools.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    /// Untrimmed sequence length `L`.
    pub seq_len: usize,
    /// Feature dimension `F`.
    pub feat_dim: usize,
    /// Class prototypes, when the dataset was generated synthetically.
    pub prototypes: Option<Vec<Vec<f64>>>,
    pub videos: Vec<UntrimmedSample>,
    pub exemplars: Vec<Exemplar>,
}

impl Dataset {
    /// Indices into `exemplars` belonging to `class_id`.
    pub fn exemplar_pool(&self, class_id: usize) -> Vec<usize> {
        self.exemplars
            .iter()
            .enumerate()
            .filter(|(_, e)| e.class_id == class_id)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Where exemplar clips come from: generated fresh from prototypes, or
/// cropped out of untrimmed samples' annotated instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExemplarSource {
    Fresh,
    Cropped,
}

/// Synthetic generator configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub num_classes: usize,
    pub num_videos: usize,
    pub seq_len: usize,
    pub feat_dim: usize,
    pub noise_sigma: f64,
    /// Inclusive range of instances planted per video.
    pub instances_per_video: (usize, usize),
    /// Inclusive range of instance lengths in timesteps.
    pub instance_len: (usize, usize),
    pub exemplars_per_class: usize,
    pub exemplar_source: ExemplarSource,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_classes: 15,
            num_videos: 100,
            seq_len: 512,
            feat_dim: 16,
            noise_sigma: 0.3,
            instances_per_video: (1, 3),
            instance_len: (20, 120),
            exemplars_per_class: 10,
            exemplar_source: ExemplarSource::Fresh,
        }
    }
}

fn normal_noise(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    let n: f64 = StandardNormal.sample(rng);
    sigma * n
}

/// Draws `count + 1` unit prototypes (classes plus background),
/// orthonormalized when the feature dimension allows it.
fn draw_prototypes(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let orthogonalize = count <= dim;
    let mut protos: Vec<Vec<f64>> = Vec::with_capacity(count);
    while protos.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| normal_noise(rng, 1.0)).collect();
        if orthogonalize {
            for q in &protos {
                let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                for (vi, qi) in v.iter_mut().zip(q) {
                    *vi -= d * qi;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue; // degenerate draw, resample
        }
        v.iter_mut().for_each(|x| *x /= norm);
        protos.push(v);
    }
    protos
}

/// Generates a synthetic dataset. Fully deterministic given the seed.
pub fn generate_dataset(seed: u64, cfg: &GeneratorConfig) -> Result<Dataset> {
    if cfg.num_classes < 10 {
        return Err(Error::Config(format!(
            "need at least 10 classes for a 5-way test split, got {}",
            cfg.num_classes
        )));
    }
    if cfg.seq_len == 0 || cfg.seq_len % 8 != 0 {
        return Err(Error::Config(format!(
            "sequence length {} must be a positive multiple of 8",
            cfg.seq_len
        )));
    }
    if cfg.instances_per_video.0 > cfg.instances_per_video.1
        || cfg.instance_len.0 > cfg.instance_len.1
        || cfg.instance_len.0 == 0
        || cfg.instances_per_video.0 == 0
    {
        return Err(Error::Config("instance count/length ranges are invalid".into()));
    }
    if cfg.instances_per_video.1 * cfg.instance_len.1 > cfg.seq_len {
        return Err(Error::Config(format!(
            "up to {} instances of length up to {} cannot fit in {} timesteps",
            cfg.instances_per_video.1, cfg.instance_len.1, cfg.seq_len
        )));
    }

    let mut proto_rng = rng_from_seed(child_seed(seed, "prototypes", 0));
    let mut all = draw_prototypes(&mut proto_rng, cfg.num_classes + 1, cfg.feat_dim);
    let background = all.pop().expect("count + 1 prototypes were drawn");
    let prototypes = all;

    let mut videos = Vec::with_capacity(cfg.num_videos);
    for vid in 0..cfg.num_videos {
        let mut rng = rng_from_seed(child_seed(seed, "video", vid as u64));
        let n_inst = rng.random_range(cfg.instances_per_video.0..=cfg.instances_per_video.1);
        let lens: Vec<usize> =
            (0..n_inst).map(|_| rng.random_range(cfg.instance_len.0..=cfg.instance_len.1)).collect();
        let used: usize = lens.iter().sum();
        if used > cfg.seq_len {
            return Err(Error::Data(format!(
                "video {vid}: {n_inst} instances totalling {used} timesteps do not fit in {}",
                cfg.seq_len
            )));
        }
        // Place instances in order with random gaps: n cut points over the
        // free budget give n + 1 gap lengths.
        let free = cfg.seq_len - used;
        let mut cuts: Vec<usize> = (0..n_inst).map(|_| rng.random_range(0..=free)).collect();
        cuts.sort_unstable();
        let mut annotations = Vec::with_capacity(n_inst);
        let mut cursor = 0usize;
        let mut prev_cut = 0usize;
        for (len, cut) in lens.iter().zip(&cuts) {
            cursor += cut - prev_cut;
            prev_cut = *cut;
            let class_id = rng.random_range(0..cfg.num_classes);
            let start = cursor;
            cursor += len;
            annotations.push(Annotation {
                segment: Segment::new(start as f64, cursor as f64)?,
                class_id,
            });
        }

        let mut features = FeatureSequence::zeros(cfg.seq_len, cfg.feat_dim);
        for t in 0..cfg.seq_len {
            let proto = annotations
                .iter()
                .find(|a| (t as f64) >= a.segment.start() && (t as f64) < a.segment.end())
                .map_or(&background, |a| &prototypes[a.class_id]);
            let row = features.row_mut(t);
            for (d, p) in row.iter_mut().zip(proto) {
                *d = p + normal_noise(&mut rng, cfg.noise_sigma);
            }
        }
        videos.push(UntrimmedSample { features, annotations });
    }

    let exemplars = match cfg.exemplar_source {
        ExemplarSource::Fresh => {
            let mut out = Vec::with_capacity(cfg.num_classes * cfg.exemplars_per_class);
            for class_id in 0..cfg.num_classes {
                let mut rng = rng_from_seed(child_seed(seed, "exemplar", class_id as u64));
                for _ in 0..cfg.exemplars_per_class {
                    let mut features = FeatureSequence::zeros(EXEMPLAR_LEN, cfg.feat_dim);
                    for t in 0..EXEMPLAR_LEN {
                        let row = features.row_mut(t);
                        for (d, p) in row.iter_mut().zip(&prototypes[class_id]) {
                            *d = p + normal_noise(&mut rng, cfg.noise_sigma);
                        }
                    }
                    out.push(Exemplar { features, class_id });
                }
            }
            out
        }
        ExemplarSource::Cropped => {
            let mut out = Vec::new();
            for video in &videos {
                for ann in &video.annotations {
                    out.push(Exemplar {
                        features: crop_exemplar(&video.features, ann.segment),
                        class_id: ann.class_id,
                    });
                }
            }
            for class_id in 0..cfg.num_classes {
                if !out.iter().any(|e| e.class_id == class_id) {
                    return Err(Error::Data(format!(
                        "cropped exemplar mode: class {class_id} has no instances; \
                         increase num_videos or instances_per_video"
                    )));
                }
            }
            out
        }
    };

    Ok(Dataset {
        num_classes: cfg.num_classes,
        seq_len: cfg.seq_len,
        feat_dim: cfg.feat_dim,
        prototypes: Some(prototypes),
        videos,
        exemplars,
    })
}

/// Samples 16 uniformly spaced timesteps from inside a segment.
fn crop_exemplar(features: &FeatureSequence, segment: Segment) -> FeatureSequence {
    let mut out = FeatureSequence::zeros(EXEMPLAR_LEN, features.dim());
    let (s, len) = (segment.start(), segment.length());
    for i in 0..EXEMPLAR_LEN {
        let pos = s + len * (i as f64 + 0.5) / EXEMPLAR_LEN as f64;
        let t = (pos.floor() as usize).min(features.len() - 1);
        out.row_mut(i).copy_from_slice(features.row(t));
    }
    out
}

/// A disjoint class partition plus the induced video assignment. Videos
/// whose annotations mix splits go to the side owning the majority of
/// their instances (ties to train); annotations of the other side's
/// classes are dropped at episode-sampling time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train_classes: Vec<usize>,
    pub test_classes: Vec<usize>,
    pub train_videos: Vec<usize>,
    pub test_videos: Vec<usize>,
}

/// Which side of a [`Split`] to draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitSide {
    Train,
    Test,
}

impl Split {
    pub fn classes(&self, side: SplitSide) -> &[usize] {
        match side {
            SplitSide::Train => &self.train_classes,
            SplitSide::Test => &self.test_classes,
        }
    }

    pub fn videos(&self, side: SplitSide) -> &[usize] {
        match side {
            SplitSide::Train => &self.train_videos,
            SplitSide::Test => &self.test_videos,
        }
    }
}

/// Randomly partitions the dataset's classes into disjoint train/test
/// subsets and assigns videos by majority instance count.
pub fn split_classes(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<Split> {
    let n = dataset.num_classes;
    let n_test = (n as f64 * test_fraction).round() as usize;
    let n_train = n - n_test.min(n);
    if n_test < 5 || n_train < 5 {
        return Err(Error::Config(format!(
            "split of {n} classes at fraction {test_fraction} leaves {n_train} train / \
             {n_test} test; both sides need at least 5 for 5-way episodes"
        )));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    let mut rng = rng_from_seed(child_seed(seed, "class-split", 0));
    ids.shuffle(&mut rng);
    let mut test_classes: Vec<usize> = ids[..n_test].to_vec();
    let mut train_classes: Vec<usize> = ids[n_test..].to_vec();
    train_classes.sort_unstable();
    test_classes.sort_unstable();

    let test_set: BTreeSet<usize> = test_classes.iter().copied().collect();
    let mut train_videos = Vec::new();
    let mut test_videos = Vec::new();
    for (i, video) in dataset.videos.iter().enumerate() {
        let test_count = video.annotations.iter().filter(|a| test_set.contains(&a.class_id)).count();
        let train_count = video.annotations.len() - test_count;
        if test_count > train_count {
            test_videos.push(i);
        } else {
            train_videos.push(i);
        }
    }
    Ok(Split { train_classes, test_classes, train_videos, test_videos })
}

/// One meta-learning unit: an untrimmed sample, a `way`-class support set
/// with `shot` exemplars per class, and a random class-index permutation.
/// Ground-truth annotations are remapped to episode labels `0..way`;
/// annotations of classes outside the episode are dropped.
#[derive(Debug, Clone)]
pub struct Episode {
    pub features: FeatureSequence,
    pub ground_truth: Vec<(Segment, usize)>,
    /// `support[label]` holds the exemplar clips for episode label `label`.
    pub support: Vec<Vec<FeatureSequence>>,
    /// Episode label to global class id; injective.
    pub label_map: Vec<usize>,
    pub way: usize,
    pub shot: usize,
    pub video_index: usize,
}

const OVERLAP_ATTEMPTS: usize = 1000;

/// Samples one episode from the given split side: an annotated video drawn
/// uniformly, `way` distinct classes of which at least one appears in the
/// video's ground truth, `shot` exemplars per class, and a uniformly random
/// label permutation.
pub fn sample_episode(
    dataset: &Dataset,
    split: &Split,
    side: SplitSide,
    way: usize,
    shot: usize,
    seed: u64,
) -> Result<Episode> {
    let classes = split.classes(side);
    if classes.len() < way {
        return Err(Error::Config(format!(
            "{way}-way episode needs {way} classes, split side has {}",
            classes.len()
        )));
    }
    if shot == 0 {
        return Err(Error::Config("shot must be at least 1".into()));
    }
    let class_set: BTreeSet<usize> = classes.iter().copied().collect();

    // Structure and support draws come from independent streams so that
    // episodes with different shot counts share video/class/label choices.
    let mut rng = rng_from_seed(child_seed(seed, "episode-structure", 0));
    let mut support_rng = rng_from_seed(child_seed(seed, "episode-support", 0));

    let candidates: Vec<usize> = split
        .videos(side)
        .iter()
        .copied()
        .filter(|&v| dataset.videos[v].annotations.iter().any(|a| class_set.contains(&a.class_id)))
        .collect();
    if candidates.is_empty() {
        return Err(Error::Data("no annotated untrimmed video available on this split side".into()));
    }
    let video_index = candidates[rng.random_range(0..candidates.len())];
    let video = &dataset.videos[video_index];
    let video_classes: BTreeSet<usize> = video
        .annotations
        .iter()
        .map(|a| a.class_id)
        .filter(|c| class_set.contains(c))
        .collect();

    let mut chosen: Vec<usize> = Vec::new();
    for attempt in 0..=OVERLAP_ATTEMPTS {
        if attempt == OVERLAP_ATTEMPTS {
            // Rejection cap reached: force-include one annotated class.
            let forced = *video_classes
                .iter()
                .nth(rng.random_range(0..video_classes.len()))
                .expect("candidate videos have at least one in-split annotation");
            let rest: Vec<usize> = classes.iter().copied().filter(|c| *c != forced).collect();
            let picks = rand::seq::index::sample(&mut rng, rest.len(), way - 1);
            chosen = picks.iter().map(|i| rest[i]).collect();
            chosen.push(forced);
            break;
        }
        let picks = rand::seq::index::sample(&mut rng, classes.len(), way);
        chosen = picks.iter().map(|i| classes[i]).collect();
        if chosen.iter().any(|c| video_classes.contains(c)) {
            break;
        }
    }
    // The position after shuffling is the episode label.
    chosen.shuffle(&mut rng);
    let label_map = chosen;

    let mut support = Vec::with_capacity(way);
    for &class_id in &label_map {
        let pool = dataset.exemplar_pool(class_id);
        if pool.is_empty() {
            return Err(Error::Data(format!("class {class_id} has no exemplars")));
        }
        let picked: Vec<usize> = if pool.len() >= shot {
            rand::seq::index::sample(&mut support_rng, pool.len(), shot)
                .iter()
                .map(|i| pool[i])
                .collect()
        } else {
            (0..shot).map(|_| pool[support_rng.random_range(0..pool.len())]).collect()
        };
        support.push(picked.into_iter().map(|i| dataset.exemplars[i].features.clone()).collect());
    }

    let ground_truth: Vec<(Segment, usize)> = video
        .annotations
        .iter()
        .filter_map(|a| {
            label_map.iter().position(|c| *c == a.class_id).map(|label| (a.segment, label))
        })
        .collect();

    Ok(Episode {
        features: video.features.clone(),
        ground_truth,
        support,
        label_map,
        way,
        shot,
        video_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> GeneratorConfig {
        GeneratorConfig {
            num_classes: 12,
            num_videos: 20,
            seq_len: 128,
            feat_dim: 16,
            noise_sigma: 0.2,
            instance_len: (10, 30),
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let a = generate_dataset(0, &small_cfg()).unwrap();
        let b = generate_dataset(0, &small_cfg()).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(1, &small_cfg()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn generator_counts_match_config() {
        let cfg = GeneratorConfig { num_classes: 15, num_videos: 50, ..GeneratorConfig::default() };
        let ds = generate_dataset(3, &cfg).unwrap();
        assert_eq!(ds.videos.len(), 50);
        assert_eq!(ds.prototypes.as_ref().unwrap().len(), 15);
        assert_eq!(ds.exemplars.len(), 15 * cfg.exemplars_per_class);
        for v in &ds.videos {
            let n = v.annotations.len();
            assert!((1..=3).contains(&n));
            // non-overlapping by construction
            for (i, a) in v.annotations.iter().enumerate() {
                for b in v.annotations.iter().skip(i + 1) {
                    assert!(crate::geometry::tiou(a.segment, b.segment) == 0.0);
                }
            }
        }
    }

    #[test]
    fn noiseless_instances_equal_prototypes() {
        let cfg = GeneratorConfig { noise_sigma: 0.0, ..small_cfg() };
        let ds = generate_dataset(7, &cfg).unwrap();
        let protos = ds.prototypes.as_ref().unwrap();
        for v in &ds.videos {
            for a in &v.annotations {
                let t = a.segment.start() as usize;
                assert_eq!(v.features.row(t), protos[a.class_id].as_slice());
            }
        }
    }

    #[test]
    fn noiseless_prototype_cosines_separate_classes() {
        let cfg = GeneratorConfig { noise_sigma: 0.0, ..small_cfg() };
        let ds = generate_dataset(11, &cfg).unwrap();
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        // exemplar mean vs in-segment mean: 1 for same class, < 1 otherwise
        let ex = &ds.exemplars[0];
        let mean_ex: Vec<f64> = (0..ds.feat_dim)
            .map(|d| {
                (0..EXEMPLAR_LEN).map(|t| ex.features.row(t)[d]).sum::<f64>() / EXEMPLAR_LEN as f64
            })
            .collect();
        for v in &ds.videos {
            for a in &v.annotations {
                let (s, e) = (a.segment.start() as usize, a.segment.end() as usize);
                let mean_seg: Vec<f64> = (0..ds.feat_dim)
                    .map(|d| (s..e).map(|t| v.features.row(t)[d]).sum::<f64>() / (e - s) as f64)
                    .collect();
                let c = cos(&mean_ex, &mean_seg);
                if a.class_id == ex.class_id {
                    assert!((c - 1.0).abs() < 1e-9, "same-class cosine {c}");
                } else {
                    assert!(c < 1.0 - 1e-6, "cross-class cosine {c}");
                }
            }
        }
    }

    #[test]
    fn generator_rejects_bad_configs() {
        let mut cfg = small_cfg();
        cfg.num_classes = 8;
        assert!(generate_dataset(0, &cfg).is_err());

        let mut cfg = small_cfg();
        cfg.seq_len = 100; // not a multiple of 8
        assert!(generate_dataset(0, &cfg).is_err());

        let mut cfg = small_cfg();
        cfg.instance_len = (60, 60);
        cfg.instances_per_video = (3, 3); // 180 > 128
        assert!(generate_dataset(0, &cfg).is_err());
    }

    #[test]
    fn cropped_exemplars_come_from_videos() {
        let cfg = GeneratorConfig {
            exemplar_source: ExemplarSource::Cropped,
            noise_sigma: 0.0,
            num_videos: 40,
            ..small_cfg()
        };
        let ds = generate_dataset(5, &cfg).unwrap();
        assert_eq!(ds.exemplars.len(), ds.videos.iter().map(|v| v.annotations.len()).sum::<usize>());
        let protos = ds.prototypes.as_ref().unwrap();
        for e in &ds.exemplars {
            assert_eq!(e.features.len(), EXEMPLAR_LEN);
            assert_eq!(e.features.row(0), protos[e.class_id].as_slice());
        }
    }

    #[test]
    fn split_partitions_and_is_seeded() {
        let ds = generate_dataset(0, &GeneratorConfig::default()).unwrap();
        let s1 = split_classes(&ds, 1.0 / 3.0, 9).unwrap();
        let s2 = split_classes(&ds, 1.0 / 3.0, 9).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(s1.train_classes.len(), 10);
        assert_eq!(s1.test_classes.len(), 5);
        let overlap = s1.train_classes.iter().any(|c| s1.test_classes.contains(c));
        assert!(!overlap);
        assert_eq!(s1.train_videos.len() + s1.test_videos.len(), ds.videos.len());

        // 4 test classes is too few
        let ds12 = generate_dataset(0, &GeneratorConfig { num_classes: 12, ..Default::default() })
            .unwrap();
        assert!(split_classes(&ds12, 1.0 / 3.0, 0).is_err());
    }

    #[test]
    fn episodes_satisfy_protocol_invariants() {
        let ds = generate_dataset(0, &small_cfg()).unwrap();
        let split = split_classes(&ds, 5.0 / 12.0, 1).unwrap();
        for i in 0..200 {
            let ep = sample_episode(&ds, &split, SplitSide::Test, 5, 1, i).unwrap();
            // bijective label map into the test split
            let set: BTreeSet<usize> = ep.label_map.iter().copied().collect();
            assert_eq!(set.len(), 5);
            for c in &ep.label_map {
                assert!(split.test_classes.contains(c), "class {c} not in test split");
            }
            // overlap constraint: at least one episode class is annotated
            assert!(!ep.ground_truth.is_empty());
            for (seg, label) in &ep.ground_truth {
                assert!(*label < 5);
                assert!(seg.end() <= ds.seq_len as f64);
            }
            assert_eq!(ep.support.len(), 5);
            assert!(ep.support.iter().all(|s| s.len() == 1));
        }
    }

    #[test]
    fn five_shot_support_has_25_exemplars() {
        let ds = generate_dataset(0, &small_cfg()).unwrap();
        let split = split_classes(&ds, 5.0 / 12.0, 1).unwrap();
        let ep = sample_episode(&ds, &split, SplitSide::Train, 5, 5, 42).unwrap();
        assert_eq!(ep.support.iter().map(Vec::len).sum::<usize>(), 25);
    }

    #[test]
    fn shot_count_does_not_change_episode_structure() {
        let ds = generate_dataset(0, &small_cfg()).unwrap();
        let split = split_classes(&ds, 5.0 / 12.0, 1).unwrap();
        let one = sample_episode(&ds, &split, SplitSide::Test, 5, 1, 7).unwrap();
        let five = sample_episode(&ds, &split, SplitSide::Test, 5, 5, 7).unwrap();
        assert_eq!(one.video_index, five.video_index);
        assert_eq!(one.label_map, five.label_map);
        assert_eq!(one.ground_truth, five.ground_truth);
    }

    #[test]
    fn exactly_five_split_classes_are_always_chosen() {
        let ds = generate_dataset(2, &small_cfg()).unwrap();
        // force a 5-class test side: 12 classes, fraction 5/12
        let split = split_classes(&ds, 5.0 / 12.0, 3).unwrap();
        assert_eq!(split.test_classes.len(), 5);
        for i in 0..50 {
            let ep = sample_episode(&ds, &split, SplitSide::Test, 5, 1, i).unwrap();
            let mut sorted = ep.label_map.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, split.test_classes);
        }
    }
}
