//! GATv2 layer with dynamic attention.
//!
//! For a target node `i` and each source `j` in its KNN neighborhood plus
//! `i` itself, the layer scores
//!
//! ```text
//! e(i, j) = a . LeakyReLU([h_i || h_j] W)
//! ```
//!
//! normalizes the scores with a per-node softmax into `alpha_ij`, and
//! outputs `act(sum_j alpha_ij * h_j W_v)`. Splitting `W` into its top
//! (target) and bottom (source) halves lets the concatenation be computed
//! as `h_i W_top + h_j W_bottom`, so only node-level projections are
//! materialized.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SconeError};
use crate::graph::KnnGraph;
use crate::numerics::{Matrix, SeededRng, Tape, Var};

pub const DEFAULT_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    LeakyRelu,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatLayer {
    /// Concatenation transform, `2 d_in x d_out`; top half acts on the target node.
    pub w: Matrix,
    /// Attention projection, `d_out x 1`.
    pub attn: Matrix,
    /// Value transform, `d_in x d_out`.
    pub w_value: Matrix,
    pub slope: f64,
    pub activation: Activation,
}

/// Handles of a layer's parameters registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GatVars {
    pub w: Var,
    pub attn: Var,
    pub w_value: Var,
}

/// Per target node, `(source, alpha)` over the neighborhood plus self.
#[derive(Clone, Debug)]
pub struct AttentionMap {
    pub weights: Vec<Vec<(usize, f64)>>,
}

impl GatLayer {
    /// Glorot-uniform initialization of every parameter matrix.
    pub fn new(d_in: usize, d_out: usize, activation: Activation, rng: &mut SeededRng) -> Result<Self> {
        if d_in == 0 || d_out == 0 {
            return Err(SconeError::Parameter(format!(
                "GAT layer dimensions must be positive, got {d_in} -> {d_out}"
            )));
        }
        let glorot = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();
        Ok(GatLayer {
            w: rng.uniform_matrix(2 * d_in, d_out, glorot(2 * d_in, d_out)),
            attn: rng.uniform_matrix(d_out, 1, glorot(d_out, 1)),
            w_value: rng.uniform_matrix(d_in, d_out, glorot(d_in, d_out)),
            slope: DEFAULT_SLOPE,
            activation,
        })
    }

    pub fn zeros(d_in: usize, d_out: usize, activation: Activation) -> Self {
        GatLayer {
            w: Matrix::zeros(2 * d_in, d_out),
            attn: Matrix::zeros(d_out, 1),
            w_value: Matrix::zeros(d_in, d_out),
            slope: DEFAULT_SLOPE,
            activation,
        }
    }

    pub fn d_in(&self) -> usize {
        self.w_value.rows()
    }

    pub fn d_out(&self) -> usize {
        self.w_value.cols()
    }

    pub fn parameters(&self) -> [&Matrix; 3] {
        [&self.w, &self.attn, &self.w_value]
    }

    pub fn parameters_mut(&mut self) -> [&mut Matrix; 3] {
        [&mut self.w, &mut self.attn, &mut self.w_value]
    }

    fn check_input(&self, h: &Matrix, g: &KnnGraph) -> Result<()> {
        if h.rows() != g.node_count() {
            return Err(SconeError::Dimension(format!(
                "layer input has {} rows for a {}-node graph",
                h.rows(),
                g.node_count()
            )));
        }
        if h.cols() != self.d_in() {
            return Err(SconeError::Dimension(format!(
                "layer expects {} input features, got {}",
                self.d_in(),
                h.cols()
            )));
        }
        Ok(())
    }

    fn projections(&self, h: &Matrix) -> Result<(Matrix, Matrix)> {
        let d = self.d_in();
        let top = Matrix::new(d, self.d_out(), self.w.as_slice()[..d * self.d_out()].to_vec())?;
        let bottom = Matrix::new(d, self.d_out(), self.w.as_slice()[d * self.d_out()..].to_vec())?;
        Ok((h.matmul(&top)?, h.matmul(&bottom)?))
    }

    /// Raw scores `e(h_i, h_j)` laid out per node as `[self, neighbors...]`.
    pub fn attention_scores(&self, h: &Matrix, g: &KnnGraph) -> Result<Vec<f64>> {
        self.check_input(h, g)?;
        let (t, s) = self.projections(h)?;
        Ok(kernel::edge_scores(&t, &s, &self.attn, g, self.slope))
    }

    pub fn attention_map(&self, h: &Matrix, g: &KnnGraph) -> Result<AttentionMap> {
        self.check_input(h, g)?;
        let (t, s) = self.projections(h)?;
        let alpha = kernel::attention_weights(&t, &s, &self.attn, g, self.slope);
        let width = g.k() + 1;
        let weights = (0..g.node_count())
            .map(|i| {
                kernel::sources(g, i)
                    .zip(&alpha[i * width..(i + 1) * width])
                    .map(|(j, &a)| (j, a))
                    .collect()
            })
            .collect();
        Ok(AttentionMap { weights })
    }

    /// Forward pass outside any tape.
    pub fn forward(&self, h: &Matrix, g: &KnnGraph) -> Result<Matrix> {
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let vars = self.register(&mut tape, false);
        let out = self.forward_on_tape(&mut tape, hv, g, vars)?;
        Ok(tape.value(out).clone())
    }

    /// Puts the layer's parameters on `tape`, as trainable leaves or constants.
    pub fn register(&self, tape: &mut Tape<'_>, trainable: bool) -> GatVars {
        let mut leaf = |m: &Matrix| {
            if trainable {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        GatVars {
            w: leaf(&self.w),
            attn: leaf(&self.attn),
            w_value: leaf(&self.w_value),
        }
    }

    pub fn forward_on_tape<'g>(
        &self,
        tape: &mut Tape<'g>,
        h: Var,
        g: &'g KnnGraph,
        vars: GatVars,
    ) -> Result<Var> {
        self.check_input(tape.value(h), g)?;
        let d = self.d_in();
        let w_target = tape.slice_rows(vars.w, 0, d)?;
        let w_source = tape.slice_rows(vars.w, d, 2 * d)?;
        let target = tape.matmul(h, w_target)?;
        let source = tape.matmul(h, w_source)?;
        let value = tape.matmul(h, vars.w_value)?;
        let out = tape.attention(target, source, vars.attn, value, g, self.slope)?;
        Ok(match self.activation {
            Activation::LeakyRelu => tape.leaky_relu(out, self.slope),
            Activation::Identity => out,
        })
    }
}

pub(crate) mod kernel {
    //! Edge-level attention arithmetic shared by the tape and direct evaluation.

    use crate::graph::KnnGraph;
    use crate::numerics::Matrix;

    pub(crate) struct AttentionGrads {
        pub target: Matrix,
        pub source: Matrix,
        pub attn: Matrix,
        pub value: Matrix,
    }

    /// Sources feeding node `i`: itself first, then its KNN neighbors.
    pub(crate) fn sources(g: &KnnGraph, i: usize) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(i).chain(g.neighbors(i).iter().copied())
    }

    #[inline]
    fn leaky(x: f64, slope: f64) -> f64 {
        if x > 0.0 {
            x
        } else {
            slope * x
        }
    }

    pub(crate) fn edge_scores(t: &Matrix, s: &Matrix, a: &Matrix, g: &KnnGraph, slope: f64) -> Vec<f64> {
        let a = a.as_slice();
        let mut scores = Vec::with_capacity(g.node_count() * (g.k() + 1));
        for i in 0..g.node_count() {
            let ti = t.row(i);
            for j in sources(g, i) {
                let sj = s.row(j);
                let mut e = 0.0;
                for c in 0..a.len() {
                    e += a[c] * leaky(ti[c] + sj[c], slope);
                }
                scores.push(e);
            }
        }
        scores
    }

    pub(crate) fn attention_weights(t: &Matrix, s: &Matrix, a: &Matrix, g: &KnnGraph, slope: f64) -> Vec<f64> {
        let mut alpha = edge_scores(t, s, a, g, slope);
        for row in alpha.chunks_mut(g.k() + 1) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        alpha
    }

    pub(crate) fn aggregate(alpha: &[f64], v: &Matrix, g: &KnnGraph) -> Matrix {
        let width = g.k() + 1;
        let mut out = Matrix::zeros(g.node_count(), v.cols());
        for i in 0..g.node_count() {
            let row = out.row_mut(i);
            for (j, &w) in sources(g, i).zip(&alpha[i * width..(i + 1) * width]) {
                for (o, x) in row.iter_mut().zip(v.row(j)) {
                    *o += w * x;
                }
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn attention_backward(
        t: &Matrix,
        s: &Matrix,
        a: &Matrix,
        v: &Matrix,
        g: &KnnGraph,
        slope: f64,
        alpha: &[f64],
        grad_out: &Matrix,
    ) -> AttentionGrads {
        let width = g.k() + 1;
        let d = a.rows();
        let av = a.as_slice();
        let mut dt = Matrix::zeros(t.rows(), t.cols());
        let mut ds = Matrix::zeros(s.rows(), s.cols());
        let mut da = vec![0.0; d];
        let mut dv = Matrix::zeros(v.rows(), v.cols());
        let mut dalpha = vec![0.0; width];
        let mut du = vec![0.0; d];
        for i in 0..g.node_count() {
            let gi = grad_out.row(i);
            let alpha_i = &alpha[i * width..(i + 1) * width];
            for (e, j) in sources(g, i).enumerate() {
                for (o, x) in dv.row_mut(j).iter_mut().zip(gi) {
                    *o += alpha_i[e] * x;
                }
                dalpha[e] = gi.iter().zip(v.row(j)).map(|(x, y)| x * y).sum();
            }
            let mean: f64 = alpha_i.iter().zip(&dalpha).map(|(x, y)| x * y).sum();
            let ti = t.row(i);
            for (e, j) in sources(g, i).enumerate() {
                let dscore = alpha_i[e] * (dalpha[e] - mean);
                if dscore == 0.0 {
                    continue;
                }
                let sj = s.row(j);
                for c in 0..d {
                    let u = ti[c] + sj[c];
                    da[c] += dscore * leaky(u, slope);
                    du[c] = dscore * av[c] * if u > 0.0 { 1.0 } else { slope };
                }
                for (o, x) in dt.row_mut(i).iter_mut().zip(&du) {
                    *o += x;
                }
                for (o, x) in ds.row_mut(j).iter_mut().zip(&du) {
                    *o += x;
                }
            }
        }
        AttentionGrads {
            target: dt,
            source: ds,
            attn: Matrix::new(d, 1, da).expect("attention vector shape"),
            value: dv,
        }
    }
}
