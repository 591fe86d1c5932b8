use std::collections::BTreeMap;

use crate::autodiff::tensor::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Epsilon floor for cosine-similarity denominators.
pub const COSINE_EPS: f64 = 1e-8;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Relu,
    AddN,
    Scale(f64),
    Slice { offset: usize },
    StackScalars,
    WeightedSum { weights: Vec<f64> },
    Conv1d { stride: usize, padding: usize },
    MaxPool1d { argmax: Vec<usize> },
    BinnedMax { argmax: Vec<usize> },
    Dense,
    CosineSim,
    SoftmaxCrossEntropy { target: usize, probs: Vec<f64> },
    SmoothL1,
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
    parents: Vec<usize>,
    op: Op,
}

/// A single forward/backward recording. Nodes are appended during the
/// forward pass; [`Tape::backward`] walks them in reverse creation order.
/// Parameters are copied in by name and their accumulated gradients are
/// written back with [`Tape::write_grads`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: BTreeMap<String, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn values(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    pub fn value_scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].values.len(), 1);
        self.nodes[v.0].values[0]
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, parents: Vec<usize>, op: Op) -> Var {
        debug_assert_eq!(values.len(), shape.iter().product::<usize>());
        let grad = vec![0.0; values.len()];
        self.nodes.push(Node { shape, values, grad, parents, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant input node.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push(tensor.shape().to_vec(), tensor.values().to_vec(), vec![], Op::Leaf)
    }

    pub fn leaf_from(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, values)?;
        Ok(self.leaf(&t))
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(vec![], vec![v], vec![], Op::Leaf)
    }

    /// Brings a named parameter onto the tape. Repeated requests for the
    /// same name return the same node, which is how weight sharing between
    /// the untrimmed and exemplar branches happens.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(v) = self.param_vars.get(name) {
            return Ok(*v);
        }
        let t = store.get(name)?;
        let v = self.push(t.shape().to_vec(), t.values().to_vec(), vec![], Op::Param);
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let values: Vec<f64> = self.nodes[x.0].values.iter().map(|v| v.max(0.0)).collect();
        self.push(self.nodes[x.0].shape.clone(), values, vec![x.0], Op::Relu)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let values: Vec<f64> = self.nodes[x.0].values.iter().map(|v| c * v).collect();
        self.push(self.nodes[x.0].shape.clone(), values, vec![x.0], Op::Scale(c))
    }

    /// Elementwise sum of one or more same-shaped inputs.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::Shape("add_n of zero inputs".into()))?;
        let shape = self.nodes[first.0].shape.clone();
        for x in xs {
            if self.nodes[x.0].shape != shape {
                return Err(Error::Shape(format!(
                    "add_n input shape {:?} differs from {:?}",
                    self.nodes[x.0].shape, shape
                )));
            }
        }
        let mut values = vec![0.0; self.nodes[first.0].values.len()];
        for x in xs {
            for (acc, v) in values.iter_mut().zip(&self.nodes[x.0].values) {
                *acc += v;
            }
        }
        Ok(self.push(shape, values, xs.iter().map(|v| v.0).collect(), Op::AddN))
    }

    /// Arithmetic mean of scalar nodes.
    pub fn mean_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        let sum = self.add_n(xs)?;
        Ok(self.scale(sum, 1.0 / xs.len() as f64))
    }

    /// Contiguous flat slice `[offset, offset + len)` of a node, reshaped
    /// to a vector. With the full range this doubles as flatten.
    pub fn slice(&mut self, x: Var, offset: usize, len: usize) -> Result<Var> {
        let total = self.nodes[x.0].values.len();
        if offset + len > total {
            return Err(Error::Shape(format!(
                "slice [{offset}, {}) out of bounds for {total} elements",
                offset + len
            )));
        }
        let values = self.nodes[x.0].values[offset..offset + len].to_vec();
        Ok(self.push(vec![len], values, vec![x.0], Op::Slice { offset }))
    }

    pub fn flatten(&mut self, x: Var) -> Var {
        let len = self.nodes[x.0].values.len();
        self.slice(x, 0, len).expect("full-range slice is always in bounds")
    }

    /// Stacks scalar nodes into a vector.
    pub fn stack_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        let mut values = Vec::with_capacity(xs.len());
        for x in xs {
            if self.nodes[x.0].values.len() != 1 {
                return Err(Error::Shape(format!(
                    "stack_scalars input has shape {:?}",
                    self.nodes[x.0].shape
                )));
            }
            values.push(self.nodes[x.0].values[0]);
        }
        Ok(self.push(vec![xs.len()], values, xs.iter().map(|v| v.0).collect(), Op::StackScalars))
    }

    /// Fixed-weight dot product reducing any node to a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.nodes[x.0].values.len() {
            return Err(Error::Shape(format!(
                "weighted_sum with {} weights over {} elements",
                weights.len(),
                self.nodes[x.0].values.len()
            )));
        }
        let value: f64 = self.nodes[x.0].values.iter().zip(&weights).map(|(v, w)| v * w).sum();
        Ok(self.push(vec![], vec![value], vec![x.0], Op::WeightedSum { weights }))
    }

    /// Temporal cross-correlation: input `[L, F_in]`, weights
    /// `[F_out, F_in, k]`, bias `[F_out]`, producing `[L_out, F_out]` with
    /// `L_out = (L + 2*padding - k)/stride + 1`.
    pub fn conv1d(
        &mut self,
        input: Var,
        weights: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (l, f_in) = match self.nodes[input.0].shape[..] {
            [l, f] => (l, f),
            ref s => return Err(Error::Shape(format!("conv1d input must be [L, F_in], got {s:?}"))),
        };
        let (f_out, w_fin, k) = match self.nodes[weights.0].shape[..] {
            [o, i, k] => (o, i, k),
            ref s => {
                return Err(Error::Shape(format!(
                    "conv1d weights must be [F_out, F_in, k], got {s:?}"
                )))
            }
        };
        if w_fin != f_in {
            return Err(Error::Shape(format!(
                "conv1d channel mismatch: input F_in = {f_in}, weights F_in = {w_fin}"
            )));
        }
        if k % 2 == 0 {
            return Err(Error::Shape(format!("conv1d kernel size must be odd, got {k}")));
        }
        if self.nodes[bias.0].shape[..] != [f_out] {
            return Err(Error::Shape(format!(
                "conv1d bias must be [F_out = {f_out}], got {:?}",
                self.nodes[bias.0].shape
            )));
        }
        if stride == 0 {
            return Err(Error::Shape("conv1d stride must be positive".into()));
        }
        let padded = l + 2 * padding;
        if padded < k {
            return Err(Error::Shape(format!(
                "conv1d kernel {k} longer than padded input {padded}"
            )));
        }
        let l_out = (padded - k) / stride + 1;

        let x = &self.nodes[input.0].values;
        let w = &self.nodes[weights.0].values;
        let b = &self.nodes[bias.0].values;
        let mut out = vec![0.0; l_out * f_out];
        for t in 0..l_out {
            for fo in 0..f_out {
                let mut acc = b[fo];
                for j in 0..k {
                    let ti = (t * stride + j) as isize - padding as isize;
                    if ti < 0 || ti >= l as isize {
                        continue;
                    }
                    let xrow = ti as usize * f_in;
                    let wrow = fo * f_in * k + j;
                    for fi in 0..f_in {
                        acc += x[xrow + fi] * w[wrow + fi * k];
                    }
                }
                out[t * f_out + fo] = acc;
            }
        }
        Ok(self.push(
            vec![l_out, f_out],
            out,
            vec![input.0, weights.0, bias.0],
            Op::Conv1d { stride, padding },
        ))
    }

    /// Per-channel max pooling over time: `[L, F]` to `[L_out, F]` with
    /// `L_out = (L - window)/stride + 1`. Gradient routes to the first
    /// argmax in each window.
    pub fn maxpool1d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let (l, f) = match self.nodes[input.0].shape[..] {
            [l, f] => (l, f),
            ref s => return Err(Error::Shape(format!("maxpool1d input must be [L, F], got {s:?}"))),
        };
        if window == 0 || stride == 0 {
            return Err(Error::Shape("maxpool1d window and stride must be positive".into()));
        }
        if window > l {
            return Err(Error::Shape(format!("maxpool1d window {window} exceeds length {l}")));
        }
        let l_out = (l - window) / stride + 1;
        let x = &self.nodes[input.0].values;
        let mut out = vec![0.0; l_out * f];
        let mut argmax = vec![0usize; l_out * f];
        for t in 0..l_out {
            for c in 0..f {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for j in 0..window {
                    let idx = (t * stride + j) * f + c;
                    if x[idx] > best {
                        best = x[idx];
                        best_idx = idx;
                    }
                }
                out[t * f + c] = best;
                argmax[t * f + c] = best_idx;
            }
        }
        Ok(self.push(vec![l_out, f], out, vec![input.0], Op::MaxPool1d { argmax }))
    }

    /// Channel-wise max over explicit row ranges of a `[L, D]` map: bin `b`
    /// takes the max over rows `cells[b].0 .. cells[b].1`. Used by temporal
    /// RoI pooling, which computes the ranges from a segment.
    pub fn binned_max(&mut self, input: Var, cells: &[(usize, usize)]) -> Result<Var> {
        let (l, d) = match self.nodes[input.0].shape[..] {
            [l, d] => (l, d),
            ref s => return Err(Error::Shape(format!("binned_max input must be [L, D], got {s:?}"))),
        };
        let bins = cells.len();
        if bins == 0 {
            return Err(Error::Shape("binned_max needs at least one bin".into()));
        }
        for &(s, e) in cells {
            if s >= e || e > l {
                return Err(Error::Shape(format!(
                    "binned_max cell range [{s}, {e}) invalid for {l} rows"
                )));
            }
        }
        let x = &self.nodes[input.0].values;
        let mut out = vec![0.0; bins * d];
        let mut argmax = vec![0usize; bins * d];
        for (b, &(s, e)) in cells.iter().enumerate() {
            for c in 0..d {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for r in s..e {
                    let idx = r * d + c;
                    if x[idx] > best {
                        best = x[idx];
                        best_idx = idx;
                    }
                }
                out[b * d + c] = best;
                argmax[b * d + c] = best_idx;
            }
        }
        Ok(self.push(vec![bins, d], out, vec![input.0], Op::BinnedMax { argmax }))
    }

    /// Affine map `W x + b`: input `[n]`, weights `[m, n]`, bias `[m]`.
    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let n = match self.nodes[input.0].shape[..] {
            [n] => n,
            ref s => return Err(Error::Shape(format!("dense input must be a vector, got {s:?}"))),
        };
        let (m, w_n) = match self.nodes[weights.0].shape[..] {
            [m, n] => (m, n),
            ref s => return Err(Error::Shape(format!("dense weights must be [m, n], got {s:?}"))),
        };
        if w_n != n {
            return Err(Error::Shape(format!(
                "dense input width {n} does not match weight width {w_n}"
            )));
        }
        if self.nodes[bias.0].shape[..] != [m] {
            return Err(Error::Shape(format!(
                "dense bias must be [m = {m}], got {:?}",
                self.nodes[bias.0].shape
            )));
        }
        let x = &self.nodes[input.0].values;
        let w = &self.nodes[weights.0].values;
        let b = &self.nodes[bias.0].values;
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = i * n;
            let mut acc = b[i];
            for j in 0..n {
                acc += w[row + j] * x[j];
            }
            out[i] = acc;
        }
        Ok(self.push(vec![m], out, vec![input.0, weights.0, bias.0], Op::Dense))
    }

    /// Cosine similarity of two equal-length vectors, with norms floored at
    /// [`COSINE_EPS`]. Differentiable with respect to both inputs.
    pub fn cosine_similarity(&mut self, u: Var, v: Var) -> Result<Var> {
        let nu_len = self.nodes[u.0].values.len();
        let nv_len = self.nodes[v.0].values.len();
        if nu_len != nv_len {
            return Err(Error::Shape(format!(
                "cosine_similarity lengths differ: {nu_len} vs {nv_len}"
            )));
        }
        let a = &self.nodes[u.0].values;
        let b = &self.nodes[v.0].values;
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(COSINE_EPS);
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(COSINE_EPS);
        let value = dot / (na * nb);
        Ok(self.push(vec![], vec![value], vec![u.0, v.0], Op::CosineSim))
    }

    /// Negative log softmax probability of `target`, computed with
    /// max-subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let c = self.nodes[logits.0].values.len();
        if target >= c {
            return Err(Error::Shape(format!(
                "cross-entropy target {target} out of range for {c} classes"
            )));
        }
        let x = &self.nodes[logits.0].values;
        let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let loss = z.ln() - (x[target] - m);
        Ok(self.push(vec![], vec![loss], vec![logits.0], Op::SoftmaxCrossEntropy { target, probs }))
    }

    /// Smooth-L1 (Huber with delta 1) of `pred - target`, summed over
    /// coordinates.
    pub fn smooth_l1(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.nodes[pred.0].shape != self.nodes[target.0].shape {
            return Err(Error::Shape(format!(
                "smooth_l1 shapes differ: {:?} vs {:?}",
                self.nodes[pred.0].shape, self.nodes[target.0].shape
            )));
        }
        let p = &self.nodes[pred.0].values;
        let t = &self.nodes[target.0].values;
        let mut loss = 0.0;
        for (a, b) in p.iter().zip(t) {
            let d = (a - b).abs();
            loss += if d < 1.0 { 0.5 * d * d } else { d - 0.5 };
        }
        Ok(self.push(vec![], vec![loss], vec![pred.0, target.0], Op::SmoothL1))
    }

    /// Reverse pass from a scalar node. Gradients of nodes not on a path to
    /// `loss` stay zero and their backward work is skipped.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut reached = vec![false; loss.0 + 1];
        reached[loss.0] = true;
        for i in (0..=loss.0).rev() {
            if !reached[i] {
                continue;
            }
            for &p in &self.nodes[i].parents {
                reached[p] = true;
            }
        }
        self.nodes[loss.0].grad[0] = 1.0;
        for i in (0..=loss.0).rev() {
            if !reached[i] || self.nodes[i].parents.is_empty() {
                continue;
            }
            let contribs = self.backward_contributions(i);
            let parents: Vec<usize> = self.nodes[i].parents.clone();
            for (p, c) in parents.into_iter().zip(contribs) {
                for (g, d) in self.nodes[p].grad.iter_mut().zip(c) {
                    *g += d;
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `i` to each of its parents, in parent
    /// order.
    fn backward_contributions(&self, i: usize) -> Vec<Vec<f64>> {
        let node = &self.nodes[i];
        let g = &node.grad;
        let pval = |k: usize| -> &[f64] { &self.nodes[node.parents[k]].values };
        match &node.op {
            Op::Leaf | Op::Param => Vec::new(),
            Op::Relu => {
                let x = pval(0);
                vec![x.iter().zip(g).map(|(v, go)| if *v > 0.0 { *go } else { 0.0 }).collect()]
            }
            Op::AddN => node.parents.iter().map(|_| g.clone()).collect(),
            Op::Scale(c) => vec![g.iter().map(|go| c * go).collect()],
            Op::Slice { offset } => {
                let mut gp = vec![0.0; pval(0).len()];
                for (j, go) in g.iter().enumerate() {
                    gp[offset + j] = *go;
                }
                vec![gp]
            }
            Op::StackScalars => g.iter().map(|go| vec![*go]).collect(),
            Op::WeightedSum { weights } => {
                vec![weights.iter().map(|w| w * g[0]).collect()]
            }
            Op::Conv1d { stride, padding } => {
                let x = pval(0);
                let w = pval(1);
                let [l, f_in] = self.nodes[node.parents[0]].shape[..] else { unreachable!() };
                let [f_out, _, k] = self.nodes[node.parents[1]].shape[..] else { unreachable!() };
                let l_out = node.shape[0];
                let mut gx = vec![0.0; x.len()];
                let mut gw = vec![0.0; w.len()];
                let mut gb = vec![0.0; f_out];
                for t in 0..l_out {
                    for fo in 0..f_out {
                        let go = g[t * f_out + fo];
                        if go == 0.0 {
                            continue;
                        }
                        gb[fo] += go;
                        for j in 0..k {
                            let ti = (t * stride + j) as isize - *padding as isize;
                            if ti < 0 || ti >= l as isize {
                                continue;
                            }
                            let xrow = ti as usize * f_in;
                            let wrow = fo * f_in * k + j;
                            for fi in 0..f_in {
                                gx[xrow + fi] += go * w[wrow + fi * k];
                                gw[wrow + fi * k] += go * x[xrow + fi];
                            }
                        }
                    }
                }
                vec![gx, gw, gb]
            }
            Op::MaxPool1d { argmax } | Op::BinnedMax { argmax } => {
                let mut gp = vec![0.0; pval(0).len()];
                for (o, &idx) in argmax.iter().enumerate() {
                    gp[idx] += g[o];
                }
                vec![gp]
            }
            Op::Dense => {
                let x = pval(0);
                let w = pval(1);
                let [m, n] = self.nodes[node.parents[1]].shape[..] else { unreachable!() };
                let mut gx = vec![0.0; n];
                let mut gw = vec![0.0; w.len()];
                let mut gb = vec![0.0; m];
                for i_row in 0..m {
                    let go = g[i_row];
                    if go == 0.0 {
                        continue;
                    }
                    gb[i_row] += go;
                    let row = i_row * n;
                    for j in 0..n {
                        gx[j] += go * w[row + j];
                        gw[row + j] += go * x[j];
                    }
                }
                vec![gx, gw, gb]
            }
            Op::CosineSim => {
                let u = pval(0);
                let v = pval(1);
                let go = g[0];
                let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
                let nu_raw = u.iter().map(|a| a * a).sum::<f64>().sqrt();
                let nv_raw = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                let nu = nu_raw.max(COSINE_EPS);
                let nv = nv_raw.max(COSINE_EPS);
                let s = dot / (nu * nv);
                let gu: Vec<f64> = u
                    .iter()
                    .zip(v)
                    .map(|(ui, vi)| {
                        let mut d = vi / (nu * nv);
                        if nu_raw > COSINE_EPS {
                            d -= s * ui / (nu * nu);
                        }
                        go * d
                    })
                    .collect();
                let gv: Vec<f64> = u
                    .iter()
                    .zip(v)
                    .map(|(ui, vi)| {
                        let mut d = ui / (nu * nv);
                        if nv_raw > COSINE_EPS {
                            d -= s * vi / (nv * nv);
                        }
                        go * d
                    })
                    .collect();
                vec![gu, gv]
            }
            Op::SoftmaxCrossEntropy { target, probs } => {
                let go = g[0];
                vec![probs
                    .iter()
                    .enumerate()
                    .map(|(j, p)| go * (p - if j == *target { 1.0 } else { 0.0 }))
                    .collect()]
            }
            Op::SmoothL1 => {
                let p = pval(0);
                let t = pval(1);
                let go = g[0];
                let d: Vec<f64> = p
                    .iter()
                    .zip(t)
                    .map(|(a, b)| {
                        let x = a - b;
                        go * if x.abs() < 1.0 { x } else { x.signum() }
                    })
                    .collect();
                let neg: Vec<f64> = d.iter().map(|v| -v).collect();
                vec![d, neg]
            }
        }
    }

    /// Names of the parameters this tape has touched, in sorted order.
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.param_vars.keys().map(String::as_str)
    }

    /// Hash of every discrete decision taken during the forward pass (relu
    /// sign patterns and pooling argmax choices). Two evaluations with the
    /// same digest lie on the same smooth piece of the function, which is
    /// what finite-difference checks need to verify.
    pub fn decision_digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let eat = |h: &mut u64, v: u64| {
            *h ^= v;
            *h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu => {
                    for (i, v) in self.nodes[node.parents[0]].values.iter().enumerate() {
                        if *v > 0.0 {
                            eat(&mut h, i as u64 + 1);
                        }
                    }
                    eat(&mut h, u64::MAX);
                }
                Op::MaxPool1d { argmax } | Op::BinnedMax { argmax } => {
                    for &a in argmax {
                        eat(&mut h, a as u64);
                    }
                    eat(&mut h, u64::MAX - 1);
                }
                _ => {}
            }
        }
        h
    }

    /// Adds each parameter node's gradient into the store.
    pub fn write_grads(&self, store: &mut ParamStore) -> Result<()> {
        for (name, var) in &self.param_vars {
            store.accumulate_grad(name, &self.nodes[var.0].grad)?;
        }
        Ok(())
    }
}
