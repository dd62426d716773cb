//! Reverse-mode differentiation over a dynamically recorded tape.
//!
//! Every operation appends a node holding its value and the handles of its
//! inputs. Nodes are therefore stored in topological order, and
//! [`Tape::backward`] walks them once in reverse, summing the contributions
//! of every consumer into each input's gradient.
//!
//! The tape is rebuilt for every forward pass; graphs referenced by graph
//! operations only need to outlive the tape.
//!
//! ```
//! use scone::numerics::{Matrix, Tape};
//!
//! let mut tape = Tape::new();
//! let w = tape.param(Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
//! let s = tape.sum(w);
//! let grads = tape.backward(s).unwrap();
//! assert_eq!(grads.wrt(&tape, w).as_slice(), &[1.0; 4]);
//! ```

use crate::error::{Result, SconeError};
use crate::gat::kernel;
use crate::graph::KnnGraph;

use super::matrix::{gemm, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<'g> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    PoolSum(Vec<(Var, Vec<usize>)>),
    ConcatRows(Var, Var),
    NeighborMean(Var, &'g KnnGraph),
    RowDot(Var, Var, Vec<(usize, usize)>),
    Attention {
        target: Var,
        source: Var,
        attn: Var,
        value: Var,
        graph: &'g KnnGraph,
        slope: f64,
        alpha: Vec<f64>,
    },
    Sum(Var),
    Mse(Var, Var),
    BceLogits(Var, Var),
}

struct Node<'g> {
    value: Matrix,
    op: Op<'g>,
    requires_grad: bool,
}

/// Recorded computation plus live-memory accounting.
pub struct Tape<'g> {
    nodes: Vec<Node<'g>>,
    live_bytes: usize,
    peak_bytes: usize,
    evaluations: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, zeros when the loss does not depend on it.
    pub fn wrt(&self, tape: &Tape<'_>, var: Var) -> Matrix {
        match self.get(var) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = tape.value(var).shape();
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, var: Var) -> Option<Matrix> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'g> Tape<'g> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            live_bytes: 0,
            peak_bytes: 0,
            evaluations: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by node values and saved buffers right now.
    pub fn live_bytes(&self) -> usize {
        self.live_bytes
    }

    /// High-water mark of [`Tape::live_bytes`], including gradient buffers
    /// allocated during the backward pass.
    pub fn peak_bytes(&self) -> usize {
        self.peak_bytes
    }

    /// Number of pairwise scores produced by [`Tape::row_dot`] so far.
    pub fn row_dot_evaluations(&self) -> usize {
        self.evaluations
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true, 0)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false, 0)
    }

    fn push(&mut self, value: Matrix, op: Op<'g>, requires_grad: bool, extra_bytes: usize) -> Var {
        self.live_bytes += value.size_bytes() + extra_bytes;
        self.peak_bytes = self.peak_bytes.max(self.live_bytes);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg, 0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg, 0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg, 0))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg, 0))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).scale(factor);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg, 0)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(a);
        self.push(value, Op::LeakyRelu(a, slope), rg, 0)
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let src = self.value(a);
        if start > end || end > src.rows() {
            return Err(SconeError::Dimension(format!(
                "row slice {start}..{end} of a {}-row matrix",
                src.rows()
            )));
        }
        let cols = src.cols();
        let value = Matrix::new(
            end - start,
            cols,
            src.as_slice()[start * cols..end * cols].to_vec(),
        )?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceRows(a, start), rg, 0))
    }

    /// Output row `r` is input row `indices[r]`.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let src = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.rows()) {
            return Err(SconeError::Dimension(format!(
                "gather index {bad} out of {} rows",
                src.rows()
            )));
        }
        let value = src.select_rows(indices);
        let rg = self.rg(a);
        let extra = std::mem::size_of_val(indices);
        Ok(self.push(value, Op::GatherRows(a, indices.to_vec()), rg, extra))
    }

    /// Sums input row `r` into output row `targets[r]` of an `out_rows`-row result.
    pub fn scatter_rows(&mut self, a: Var, targets: &[usize], out_rows: usize) -> Result<Var> {
        let src = self.value(a);
        if targets.len() != src.rows() {
            return Err(SconeError::Dimension(format!(
                "scatter of {} rows with {} targets",
                src.rows(),
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= out_rows) {
            return Err(SconeError::Dimension(format!(
                "scatter target {bad} out of {out_rows} rows"
            )));
        }
        let mut value = Matrix::zeros(out_rows, src.cols());
        for (r, &t) in targets.iter().enumerate() {
            for (o, v) in value.row_mut(t).iter_mut().zip(src.row(r)) {
                *o += v;
            }
        }
        let rg = self.rg(a);
        let extra = std::mem::size_of_val(targets);
        Ok(self.push(value, Op::ScatterRows(a, targets.to_vec()), rg, extra))
    }

    /// [`pooled_sum`] of several scattered inputs.
    pub fn pool_sum(&mut self, parts: &[(Var, &[usize])], out_rows: usize) -> Result<Var> {
        let values: Vec<(&Matrix, &[usize])> = parts.iter().map(|&(v, idx)| (self.value(v), idx)).collect();
        let value = pooled_sum(&values, out_rows)?;
        let rg = parts.iter().any(|&(v, _)| self.rg(v));
        let extra = parts.iter().map(|p| p.1.len()).sum::<usize>() * std::mem::size_of::<usize>();
        let op = Op::PoolSum(parts.iter().map(|&(v, idx)| (v, idx.to_vec())).collect());
        Ok(self.push(value, op, rg, extra))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).vstack(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::ConcatRows(a, b), rg, 0))
    }

    /// Row `i` becomes the mean of the rows of `i`'s graph neighbors (self excluded).
    pub fn neighbor_mean(&mut self, a: Var, graph: &'g KnnGraph) -> Result<Var> {
        let src = self.value(a);
        if src.rows() != graph.node_count() {
            return Err(SconeError::Dimension(format!(
                "neighbor mean over {} rows with a {}-node graph",
                src.rows(),
                graph.node_count()
            )));
        }
        let value = graph.neighborhood_means(src);
        let rg = self.rg(a);
        Ok(self.push(value, Op::NeighborMean(a, graph), rg, 0))
    }

    /// Column vector whose entry `p` is `a[pairs[p].0] . b[pairs[p].1]`.
    pub fn row_dot(&mut self, a: Var, b: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let (ma, mb) = (self.value(a), self.value(b));
        if ma.cols() != mb.cols() {
            return Err(SconeError::Dimension(format!(
                "row dot of widths {} and {}",
                ma.cols(),
                mb.cols()
            )));
        }
        if pairs.iter().any(|&(i, j)| i >= ma.rows() || j >= mb.rows()) {
            return Err(SconeError::Dimension("row dot pair out of range".into()));
        }
        let value = Matrix::from_fn(pairs.len(), 1, |p, _| {
            let (i, j) = pairs[p];
            dot(ma.row(i), mb.row(j))
        });
        self.evaluations += pairs.len();
        let rg = self.rg(a) || self.rg(b);
        let extra = pairs.len() * 2 * std::mem::size_of::<usize>();
        Ok(self.push(value, Op::RowDot(a, b, pairs.to_vec()), rg, extra))
    }

    /// Attention-weighted aggregation over each node's neighbors plus itself.
    ///
    /// For edge `j -> i` the score is `attn . leaky_relu(target[i] + source[j])`;
    /// scores are softmax-normalized per target node and output row `i` is
    /// `sum_j alpha_ij * value[j]`.
    pub fn attention(
        &mut self,
        target: Var,
        source: Var,
        attn: Var,
        value: Var,
        graph: &'g KnnGraph,
        slope: f64,
    ) -> Result<Var> {
        let (t, s, a, v) = (
            self.value(target),
            self.value(source),
            self.value(attn),
            self.value(value),
        );
        let n = graph.node_count();
        if t.rows() != n || s.rows() != n || v.rows() != n {
            return Err(SconeError::Dimension(format!(
                "attention inputs of {}, {}, {} rows over a {n}-node graph",
                t.rows(),
                s.rows(),
                v.rows()
            )));
        }
        if t.cols() != s.cols() || a.shape() != (t.cols(), 1) {
            return Err(SconeError::Dimension(format!(
                "attention projections {}x{} / {}x{} with vector {}x{}",
                t.rows(),
                t.cols(),
                s.rows(),
                s.cols(),
                a.rows(),
                a.cols()
            )));
        }
        let alpha = kernel::attention_weights(t, s, a, graph, slope);
        let out = kernel::aggregate(&alpha, v, graph);
        let rg = self.rg(target) || self.rg(source) || self.rg(attn) || self.rg(value);
        let extra = alpha.len() * std::mem::size_of::<f64>();
        Ok(self.push(
            out,
            Op::Attention {
                target,
                source,
                attn,
                value,
                graph,
                slope,
                alpha,
            },
            rg,
            extra,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg, 0)
    }

    /// Mean squared error over all entries.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(SconeError::Dimension(format!(
                "mse of {:?} against {:?}",
                p.shape(),
                t.shape()
            )));
        }
        if p.is_empty() {
            return Err(SconeError::Dimension("mse of empty matrices".into()));
        }
        let sse: f64 = p
            .as_slice()
            .iter()
            .zip(t.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let value = Matrix::scalar(sse / p.len() as f64);
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(value, Op::Mse(pred, target), rg, 0))
    }

    /// Mean binary cross-entropy of `logits` against probabilities `target`.
    pub fn bce_logits(&mut self, logits: Var, target: Var) -> Result<Var> {
        let (x, p) = (self.value(logits), self.value(target));
        if x.shape() != p.shape() {
            return Err(SconeError::Dimension(format!(
                "bce of {:?} against {:?}",
                x.shape(),
                p.shape()
            )));
        }
        if x.is_empty() {
            return Err(SconeError::Dimension("bce of empty matrices".into()));
        }
        if let Some(bad) = p.as_slice().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(SconeError::Domain(format!(
                "target probability {bad} outside [0, 1]"
            )));
        }
        let total: f64 = x
            .as_slice()
            .iter()
            .zip(p.as_slice())
            .map(|(&x, &p)| bce_with_logit(x, p))
            .sum();
        let value = Matrix::scalar(total / x.len() as f64);
        let rg = self.rg(logits) || self.rg(target);
        Ok(self.push(value, Op::BceLogits(logits, target), rg, 0))
    }

    /// Gradients of the scalar `loss` with respect to every node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(SconeError::Contract(format!(
                "backward needs a 1x1 loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        let forward_bytes = self.live_bytes;
        let mut grad_bytes = 0usize;
        grads[loss.0] = Some(Matrix::scalar(1.0));
        grad_bytes += 8;

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            let mut out = Vec::with_capacity(4);
            self.local_gradients(&node.op, &g, &mut out);
            for (v, contrib) in out {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&contrib),
                    slot @ None => {
                        grad_bytes += contrib.size_bytes();
                        *slot = Some(contrib);
                    }
                }
            }
            self.peak_bytes = self.peak_bytes.max(forward_bytes + grad_bytes);
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            } else {
                grad_bytes -= g.size_bytes();
            }
        }
        Ok(Gradients { grads })
    }

    fn local_gradients(&self, op: &Op<'g>, g: &Matrix, acc: &mut Vec<(Var, Matrix)>) {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ma, mb) = (val(*a), val(*b));
                if needs(*a) {
                    let mut da = Matrix::zeros(ma.rows(), ma.cols());
                    gemm(g, false, mb, true, &mut da, 0.0);
                    acc.push((*a, da));
                }
                if needs(*b) {
                    let mut db = Matrix::zeros(mb.rows(), mb.cols());
                    gemm(ma, true, g, false, &mut db, 0.0);
                    acc.push((*b, db));
                }
            }
            Op::Add(a, b) => {
                acc.push((*a, g.clone()));
                acc.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                acc.push((*a, g.clone()));
                acc.push((*b, g.scale(-1.0)));
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc.push((*a, g.hadamard(val(*b)).expect("shapes checked on record")));
                }
                if needs(*b) {
                    acc.push((*b, g.hadamard(val(*a)).expect("shapes checked on record")));
                }
            }
            Op::Scale(a, f) => acc.push((*a, g.scale(*f))),
            Op::LeakyRelu(a, slope) => {
                let x = val(*a);
                let mut d = g.clone();
                for (dv, &xv) in d.as_mut_slice().iter_mut().zip(x.as_slice()) {
                    if xv <= 0.0 {
                        *dv *= slope;
                    }
                }
                acc.push((*a, d));
            }
            Op::SliceRows(a, start) => {
                let src = val(*a);
                let mut d = Matrix::zeros(src.rows(), src.cols());
                let c = src.cols();
                d.as_mut_slice()[start * c..start * c + g.len()].copy_from_slice(g.as_slice());
                acc.push((*a, d));
            }
            Op::GatherRows(a, idx) => {
                let src = val(*a);
                let mut d = Matrix::zeros(src.rows(), src.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, v) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc.push((*a, d));
            }
            Op::ScatterRows(a, targets) => {
                acc.push((*a, g.select_rows(targets)));
            }
            Op::PoolSum(parts) => {
                for (a, targets) in parts {
                    if needs(*a) {
                        acc.push((*a, g.select_rows(targets)));
                    }
                }
            }
            Op::ConcatRows(a, b) => {
                let ra = val(*a).rows();
                let c = g.cols();
                let (top, bottom) = g.as_slice().split_at(ra * c);
                acc.push((*a, Matrix::new(ra, c, top.to_vec()).expect("split")));
                acc.push((
                    *b,
                    Matrix::new(g.rows() - ra, c, bottom.to_vec()).expect("split"),
                ));
            }
            Op::NeighborMean(a, graph) => {
                let src = val(*a);
                let mut d = Matrix::zeros(src.rows(), src.cols());
                let inv = 1.0 / graph.k() as f64;
                for i in 0..graph.node_count() {
                    for &j in graph.neighbors(i) {
                        for (o, v) in d.row_mut(j).iter_mut().zip(g.row(i)) {
                            *o += inv * v;
                        }
                    }
                }
                acc.push((*a, d));
            }
            Op::RowDot(a, b, pairs) => {
                let (ma, mb) = (val(*a), val(*b));
                let mut da = Matrix::zeros(ma.rows(), ma.cols());
                let mut db = Matrix::zeros(mb.rows(), mb.cols());
                for (p, &(i, j)) in pairs.iter().enumerate() {
                    let gp = g[(p, 0)];
                    for (o, v) in da.row_mut(i).iter_mut().zip(mb.row(j)) {
                        *o += gp * v;
                    }
                    for (o, v) in db.row_mut(j).iter_mut().zip(ma.row(i)) {
                        *o += gp * v;
                    }
                }
                acc.push((*a, da));
                acc.push((*b, db));
            }
            Op::Attention {
                target,
                source,
                attn,
                value,
                graph,
                slope,
                alpha,
            } => {
                let grads = kernel::attention_backward(
                    val(*target),
                    val(*source),
                    val(*attn),
                    val(*value),
                    graph,
                    *slope,
                    alpha,
                    g,
                );
                acc.push((*target, grads.target));
                acc.push((*source, grads.source));
                acc.push((*attn, grads.attn));
                acc.push((*value, grads.value));
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                acc.push((*a, Matrix::filled(r, c, g[(0, 0)])));
            }
            Op::Mse(p, t) => {
                let (mp, mt) = (val(*p), val(*t));
                let f = 2.0 * g[(0, 0)] / mp.len() as f64;
                let diff = mp.sub(mt).expect("shapes checked on record").scale(f);
                if needs(*t) {
                    acc.push((*t, diff.scale(-1.0)));
                }
                acc.push((*p, diff));
            }
            Op::BceLogits(x, p) => {
                let (mx, mp) = (val(*x), val(*p));
                let f = g[(0, 0)] / mx.len() as f64;
                let d = Matrix::from_fn(mx.rows(), mx.cols(), |r, c| {
                    f * (sigmoid(mx[(r, c)]) - mp[(r, c)])
                });
                acc.push((*x, d));
                if needs(*p) {
                    let dp = mx.scale(-f);
                    acc.push((*p, dp));
                }
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row `targets[r]` of the result sums row `r` of every part. Contributions to
/// each entry are added in ascending order, so the result does not depend on
/// the order of `parts`.
pub fn pooled_sum(parts: &[(&Matrix, &[usize])], out_rows: usize) -> Result<Matrix> {
    let d = parts.first().map_or(0, |p| p.0.cols());
    let mut sources: Vec<Vec<(usize, usize)>> = vec![Vec::new(); out_rows];
    for (pi, &(z, targets)) in parts.iter().enumerate() {
        if z.rows() != targets.len() || z.cols() != d {
            return Err(SconeError::Dimension(format!(
                "pooled input {}x{} with {} targets and width {d}",
                z.rows(),
                z.cols(),
                targets.len()
            )));
        }
        for (r, &t) in targets.iter().enumerate() {
            if t >= out_rows {
                return Err(SconeError::Dimension(format!("pool target {t} out of {out_rows} rows")));
            }
            sources[t].push((pi, r));
        }
    }
    let mut out = Matrix::zeros(out_rows, d);
    let mut terms = Vec::new();
    for (i, src) in sources.iter().enumerate() {
        if src.is_empty() {
            continue;
        }
        for c in 0..d {
            terms.clear();
            terms.extend(src.iter().map(|&(pi, r)| parts[pi].0[(r, c)]));
            terms.sort_by(f64::total_cmp);
            out[(i, c)] = terms.iter().fold(0.0, |a, &b| a + b);
        }
    }
    Ok(out)
}

/// Logistic function, evaluated without overflow for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-[p ln sigmoid(x) + (1-p) ln(1 - sigmoid(x))]` in log1p form.
pub fn bce_with_logit(x: f64, p: f64) -> f64 {
    x.max(0.0) - x * p + (-x.abs()).exp().ln_1p()
}
