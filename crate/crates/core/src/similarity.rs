//! Few-shot classification branch: cosine similarities between exemplar
//! and proposal embeddings, k-shot per-class averaging, argmax labeling,
//! and the few-shot multi-class loss. This branch has no parameters of its
//! own; gradients flow into both embedding paths.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::proposal::{Label, LabeledSet};

/// Similarity scores `SS(S_j, R_i)` between every exemplar row `j` and
/// proposal column `i`, kept on the tape so the loss stays differentiable.
#[derive(Debug)]
pub struct SimilarityMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Episode class label of each exemplar row.
    pub exemplar_class: Vec<usize>,
    entries: Vec<Var>,
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    fn entry(&self, row: usize, col: usize) -> Var {
        self.entries[row * self.cols + col]
    }
}

/// Builds the similarity matrix from exemplar embeddings (with their
/// episode labels) and proposal embeddings.
pub fn similarity_matrix(
    tape: &mut Tape,
    exemplars: &[(Var, usize)],
    proposals: &[Var],
) -> Result<SimilarityMatrix> {
    let mut entries = Vec::with_capacity(exemplars.len() * proposals.len());
    let mut values = Vec::with_capacity(entries.capacity());
    for (ex, _) in exemplars {
        for p in proposals {
            let s = tape.cosine_similarity(*ex, *p)?;
            values.push(tape.value_scalar(s));
            entries.push(s);
        }
    }
    Ok(SimilarityMatrix {
        rows: exemplars.len(),
        cols: proposals.len(),
        exemplar_class: exemplars.iter().map(|(_, c)| *c).collect(),
        entries,
        values,
    })
}

/// Per-proposal class scores: the per-class arithmetic mean of exemplar
/// similarities, one `[way]` vector per proposal.
#[derive(Debug)]
pub struct ClassScores {
    pub way: usize,
    vars: Vec<Var>,
    /// Row-major `[proposal][class]` score values.
    pub values: Vec<f64>,
}

impl ClassScores {
    pub fn num_proposals(&self) -> usize {
        self.vars.len()
    }

    pub fn value(&self, proposal: usize, class: usize) -> f64 {
        self.values[proposal * self.way + class]
    }

    pub fn scores_var(&self, proposal: usize) -> Var {
        self.vars[proposal]
    }

    /// Assembles class scores from existing `[way]` nodes.
    pub fn from_vars(tape: &Tape, vars: Vec<Var>, way: usize) -> Result<Self> {
        let mut values = Vec::with_capacity(vars.len() * way);
        for v in &vars {
            if tape.values(*v).len() != way {
                return Err(Error::Shape(format!(
                    "class score vector has {} entries, expected {way}",
                    tape.values(*v).len()
                )));
            }
            values.extend_from_slice(tape.values(*v));
        }
        Ok(Self { way, vars, values })
    }
}

/// Averages similarity scores within each class: entry `(i, c)` is the
/// mean over class `c`'s exemplar rows of `SS(S_j, R_i)`. Every class in
/// `0..way` must have at least one exemplar row.
pub fn kshot_average(tape: &mut Tape, m: &SimilarityMatrix, way: usize) -> Result<ClassScores> {
    let mut rows_of: Vec<Vec<usize>> = vec![Vec::new(); way];
    for (j, c) in m.exemplar_class.iter().enumerate() {
        if *c >= way {
            return Err(Error::Data(format!("exemplar class {c} out of range for {way}-way")));
        }
        rows_of[*c].push(j);
    }
    if let Some(empty) = rows_of.iter().position(Vec::is_empty) {
        return Err(Error::Data(format!("class {empty} has no exemplar rows")));
    }
    let mut vars = Vec::with_capacity(m.cols);
    for i in 0..m.cols {
        let mut per_class = Vec::with_capacity(way);
        for rows in &rows_of {
            let cells: Vec<Var> = rows.iter().map(|j| m.entry(*j, i)).collect();
            per_class.push(tape.mean_scalars(&cells)?);
        }
        vars.push(tape.stack_scalars(&per_class)?);
    }
    ClassScores::from_vars(tape, vars, way)
}

/// Argmax class and maximum averaged similarity per proposal; ties break
/// to the lowest class index.
pub fn assign_class(scores: &ClassScores) -> Vec<(usize, f64)> {
    (0..scores.num_proposals())
        .map(|i| {
            let mut best = (0usize, f64::NEG_INFINITY);
            for c in 0..scores.way {
                let v = scores.value(i, c);
                if v > best.1 {
                    best = (c, v);
                }
            }
            best
        })
        .collect()
}

/// Few-shot multi-class loss: the mean over positive-labeled proposals of
/// the cross entropy of `scores / tau` against the matched episode class.
/// Negative and ignored proposals contribute nothing; returns a zero node
/// when no positives exist.
pub fn fewshot_loss(
    tape: &mut Tape,
    scores: &ClassScores,
    labels: &LabeledSet,
    tau: f64,
) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if labels.labels.len() != scores.num_proposals() {
        return Err(Error::Shape(format!(
            "{} labels for {} proposals",
            labels.labels.len(),
            scores.num_proposals()
        )));
    }
    let mut terms = Vec::new();
    for (i, label) in labels.labels.iter().enumerate() {
        let Label::Positive { class, .. } = label else { continue };
        if *class >= scores.way {
            return Err(Error::Data(format!(
                "matched class {class} out of range for {}-way episode",
                scores.way
            )));
        }
        let logits = tape.scale(scores.scores_var(i), 1.0 / tau);
        terms.push(tape.softmax_cross_entropy(logits, *class)?);
    }
    if terms.is_empty() {
        Ok(tape.scalar(0.0))
    } else {
        tape.mean_scalars(&terms)
    }
}
