//! The multi-view architecture: per-view GATv2 encoders and decoders, sum
//! pooling into a joint latent space, bilinear contrastive heads, and every
//! loss term of the training objective.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Likelihood;
use crate::error::{Result, SconeError};
use crate::gat::{Activation, GatLayer, GatVars};
use crate::graph::KnnGraph;
use crate::io::{read_text, write_atomic};
use crate::numerics::{bce_with_logit, pooled_sum, Matrix, SeededRng, Tape, Var};
use crate::subset::{PairLists, SubsetBatch, SubsetView};

const CHECKPOINT_FORMAT: &str = "scone-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewDescriptor {
    pub name: String,
    pub dim: usize,
    pub likelihood: Likelihood,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub latent: usize,
    /// Neighbors per node in every KNN graph the model sees.
    pub k_k: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 256,
            latent: 128,
            k_k: 15,
        }
    }
}

/// Encoder, decoder and contrastive head of one view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewNetwork {
    pub encoder: [GatLayer; 2],
    pub decoder: [GatLayer; 2],
    /// Bilinear discriminator, `latent x latent`.
    pub head: Matrix,
}

impl ViewNetwork {
    fn new(dim: usize, cfg: ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        let limit = (6.0 / (2 * cfg.latent) as f64).sqrt();
        Ok(ViewNetwork {
            encoder: [
                GatLayer::new(dim, cfg.hidden, Activation::LeakyRelu, rng)?,
                GatLayer::new(cfg.hidden, cfg.latent, Activation::LeakyRelu, rng)?,
            ],
            decoder: [
                GatLayer::new(cfg.latent, cfg.hidden, Activation::LeakyRelu, rng)?,
                GatLayer::new(cfg.hidden, dim, Activation::Identity, rng)?,
            ],
            head: rng.uniform_matrix(cfg.latent, cfg.latent, limit),
        })
    }

    fn layers(&self) -> impl Iterator<Item = &GatLayer> {
        self.encoder.iter().chain(&self.decoder)
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut GatLayer> {
        self.encoder.iter_mut().chain(&mut self.decoder)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SconeModel {
    pub config: ModelConfig,
    pub views: Vec<ViewDescriptor>,
    pub networks: Vec<ViewNetwork>,
}

/// Tape handles of one view's parameters.
#[derive(Clone, Copy, Debug)]
pub struct ViewVars {
    pub encoder: [GatVars; 2],
    pub decoder: [GatVars; 2],
    pub head: Var,
}

/// Tape handles of every parameter, in [`SconeModel::parameters`] order.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub views: Vec<ViewVars>,
}

impl ModelVars {
    pub fn flat(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for v in &self.views {
            for g in v.encoder.iter().chain(&v.decoder) {
                out.extend([g.w, g.attn, g.w_value]);
            }
            out.push(v.head);
        }
        out
    }
}

/// Per-view and weighted total losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reconstruction: Vec<f64>,
    pub contrastive: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub total: f64,
}

/// `alpha * sum(rec) + beta * sum(contrastive)`.
pub fn loss_total(reconstruction: Vec<f64>, contrastive: Vec<f64>, alpha: f64, beta: f64) -> LossBreakdown {
    let total = alpha * reconstruction.iter().sum::<f64>() + beta * contrastive.iter().sum::<f64>();
    LossBreakdown {
        reconstruction,
        contrastive,
        alpha,
        beta,
        total,
    }
}

/// Tape outputs of the training objective.
#[derive(Clone, Debug)]
pub struct ObjectiveVars {
    pub total: Var,
    pub reconstruction: Vec<Var>,
    pub contrastive: Vec<Var>,
}

impl ObjectiveVars {
    pub fn breakdown(&self, tape: &Tape<'_>, alpha: f64, beta: f64) -> LossBreakdown {
        let value = |v: &Var| tape.value(*v).as_slice()[0];
        loss_total(
            self.reconstruction.iter().map(value).collect(),
            self.contrastive.iter().map(value).collect(),
            alpha,
            beta,
        )
    }
}

impl SconeModel {
    pub fn new(views: Vec<ViewDescriptor>, config: ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        if views.is_empty() {
            return Err(SconeError::Parameter("model needs at least one view".into()));
        }
        if config.hidden == 0 || config.latent == 0 || config.k_k == 0 {
            return Err(SconeError::Parameter("hidden width, latent width and k_k must be positive".into()));
        }
        let networks = views
            .iter()
            .map(|v| ViewNetwork::new(v.dim, config, rng))
            .collect::<Result<_>>()?;
        Ok(SconeModel {
            config,
            views,
            networks,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent
    }

    /// Per view: both encoder layers, both decoder layers (`w`, `attn`, `w_value`
    /// each), then the head.
    pub fn parameters(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for net in &self.networks {
            for layer in net.layers() {
                out.extend(layer.parameters());
            }
            out.push(&net.head);
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for net in &mut self.networks {
            let ViewNetwork { encoder, decoder, head } = net;
            for layer in encoder.iter_mut().chain(decoder.iter_mut()) {
                out.extend(layer.parameters_mut());
            }
            out.push(head);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|m| m.len()).sum()
    }

    /// Zeroes every encoder parameter.
    pub fn zero_encoders(&mut self) {
        for net in &mut self.networks {
            for layer in &mut net.encoder {
                for p in layer.parameters_mut() {
                    p.as_mut_slice().fill(0.0);
                }
            }
        }
    }

    pub fn zero_all(&mut self) {
        for net in &mut self.networks {
            for layer in net.layers_mut() {
                for p in layer.parameters_mut() {
                    p.as_mut_slice().fill(0.0);
                }
            }
            net.head.as_mut_slice().fill(0.0);
        }
    }

    fn check_view(&self, view: usize) -> Result<&ViewNetwork> {
        self.networks
            .get(view)
            .ok_or_else(|| SconeError::Parameter(format!("view index {view} out of range")))
    }

    /// Two-layer GATv2 pass `d_o -> hidden -> latent`.
    pub fn encode_view(&self, view: usize, x: &Matrix, g: &KnnGraph) -> Result<Matrix> {
        let net = self.check_view(view)?;
        if x.cols() != self.views[view].dim {
            return Err(SconeError::Dimension(format!(
                "view {} has {} features, the model expects {}",
                self.views[view].name,
                x.cols(),
                self.views[view].dim
            )));
        }
        let h = net.encoder[0].forward(x, g)?;
        net.encoder[1].forward(&h, g)
    }

    /// Two-layer GATv2 pass `latent -> hidden -> d_o`; logits for Bernoulli views.
    pub fn decode_view(&self, view: usize, z: &Matrix, g: &KnnGraph) -> Result<Matrix> {
        let net = self.check_view(view)?;
        if z.cols() != self.config.latent {
            return Err(SconeError::Dimension(format!(
                "decoder input width {} differs from latent width {}",
                z.cols(),
                self.config.latent
            )));
        }
        let h = net.decoder[0].forward(z, g)?;
        net.decoder[1].forward(&h, g)
    }

    pub fn register(&self, tape: &mut Tape<'_>, trainable: bool) -> ModelVars {
        let views = self
            .networks
            .iter()
            .map(|net| ViewVars {
                encoder: [net.encoder[0].register(tape, trainable), net.encoder[1].register(tape, trainable)],
                decoder: [net.decoder[0].register(tape, trainable), net.decoder[1].register(tape, trainable)],
                head: if trainable {
                    tape.param(net.head.clone())
                } else {
                    tape.constant(net.head.clone())
                },
            })
            .collect();
        ModelVars { views }
    }

    pub fn encode_on_tape<'g>(
        &self,
        tape: &mut Tape<'g>,
        vars: &ModelVars,
        view: usize,
        x: Var,
        g: &'g KnnGraph,
    ) -> Result<Var> {
        let net = self.check_view(view)?;
        let v = &vars.views[view];
        let h = net.encoder[0].forward_on_tape(tape, x, g, v.encoder[0])?;
        net.encoder[1].forward_on_tape(tape, h, g, v.encoder[1])
    }

    pub fn decode_on_tape<'g>(
        &self,
        tape: &mut Tape<'g>,
        vars: &ModelVars,
        view: usize,
        z: Var,
        g: &'g KnnGraph,
    ) -> Result<Var> {
        let net = self.check_view(view)?;
        let v = &vars.views[view];
        let h = net.decoder[0].forward_on_tape(tape, z, g, v.decoder[0])?;
        net.decoder[1].forward_on_tape(tape, h, g, v.decoder[1])
    }

    /// The objective of one subset pair: reconstruction of both subsets'
    /// inputs from the pooled latents, and the per-view contrastive loss.
    pub fn objective_on_tape<'g>(
        &self,
        tape: &mut Tape<'g>,
        vars: &ModelVars,
        batch: &'g SubsetBatch,
        alpha: f64,
        beta: f64,
    ) -> Result<ObjectiveVars> {
        let k_s = batch.pair.k_s();
        let n_views = self.views.len();
        let mut encoded = [Vec::with_capacity(n_views), Vec::with_capacity(n_views)];
        let mut inputs = [Vec::with_capacity(n_views), Vec::with_capacity(n_views)];
        for (side, subset) in [&batch.first, &batch.second].into_iter().enumerate() {
            for sv in subset.iter() {
                let x = tape.constant(sv.x.clone());
                inputs[side].push(x);
                encoded[side].push(self.encode_on_tape(tape, vars, sv.view, x, &sv.graph)?);
            }
        }
        let mut decoded = [Vec::with_capacity(n_views), Vec::with_capacity(n_views)];
        for (side, subset) in [&batch.first, &batch.second].into_iter().enumerate() {
            let parts: Vec<(Var, &[usize])> = subset
                .iter()
                .zip(&encoded[side])
                .map(|(sv, &z)| (z, sv.positions.as_slice()))
                .collect();
            let joint = pool_on_tape(tape, &parts, k_s)?;
            for sv in subset.iter() {
                let zv = tape.gather_rows(joint, &sv.positions)?;
                decoded[side].push(self.decode_on_tape(tape, vars, sv.view, zv, &sv.graph)?);
            }
        }

        let mut reconstruction = Vec::with_capacity(n_views);
        let mut contrastive = Vec::with_capacity(n_views);
        for o in 0..n_views {
            let target = tape.concat_rows(inputs[0][o], inputs[1][o])?;
            let pred = tape.concat_rows(decoded[0][o], decoded[1][o])?;
            reconstruction.push(match self.views[o].likelihood {
                Likelihood::Gaussian => tape.mse(pred, target)?,
                Likelihood::Bernoulli => tape.bce_logits(pred, target)?,
            });
            contrastive.push(contrastive_on_tape(
                tape,
                encoded[0][o],
                &batch.first[o].graph,
                encoded[1][o],
                &batch.second[o].graph,
                &batch.view_pairs[o],
                vars.views[o].head,
            )?);
        }
        let rec_sum = sum_scalars(tape, &reconstruction)?;
        let con_sum = sum_scalars(tape, &contrastive)?;
        let a = tape.scale(rec_sum, alpha);
        let b = tape.scale(con_sum, beta);
        let total = tape.add(a, b)?;
        Ok(ObjectiveVars {
            total,
            reconstruction,
            contrastive,
        })
    }

    /// The same objective as [`SconeModel::objective_on_tape`], evaluated
    /// directly on matrices.
    pub fn objective(&self, batch: &SubsetBatch, alpha: f64, beta: f64) -> Result<LossBreakdown> {
        let k_s = batch.pair.k_s();
        let side = |subset: &[SubsetView]| -> Result<(Vec<Matrix>, Vec<Matrix>)> {
            let z: Vec<Matrix> = subset
                .iter()
                .map(|sv| self.encode_view(sv.view, &sv.x, &sv.graph))
                .collect::<Result<_>>()?;
            let parts: Vec<(&Matrix, &[usize])> = z.iter().zip(subset).map(|(z, sv)| (z, sv.positions.as_slice())).collect();
            let joint = pool(&parts, k_s)?;
            let dec = subset
                .iter()
                .map(|sv| self.decode_view(sv.view, &joint.select_rows(&sv.positions), &sv.graph))
                .collect::<Result<_>>()?;
            Ok((z, dec))
        };
        let (z1, d1) = side(&batch.first)?;
        let (z2, d2) = side(&batch.second)?;
        let mut rec = Vec::new();
        let mut con = Vec::new();
        for o in 0..self.views.len() {
            let x = batch.first[o].x.vstack(&batch.second[o].x)?;
            let xh = d1[o].vstack(&d2[o])?;
            rec.push(match self.views[o].likelihood {
                Likelihood::Gaussian => loss_rec_mse(&x, &xh)?,
                Likelihood::Bernoulli => loss_rec_bce(&x, &xh)?,
            });
            con.push(loss_contrastive(
                &z1[o],
                &batch.first[o].graph,
                &z2[o],
                &batch.second[o].graph,
                &batch.view_pairs[o],
                &self.networks[o].head,
            )?);
        }
        Ok(loss_total(rec, con, alpha, beta))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Envelope<'a> {
            format: &'a str,
            version: u32,
            model: &'a SconeModel,
        }
        let text = serde_json::to_string(&Envelope {
            format: CHECKPOINT_FORMAT,
            version: CHECKPOINT_VERSION,
            model: self,
        })
        .map_err(|e| SconeError::Format(e.to_string()))?;
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Envelope {
            format: String,
            version: u32,
            model: SconeModel,
        }
        let text = read_text(path)?;
        let env: Envelope = serde_json::from_str(&text).map_err(|e| SconeError::Format(format!("{}: {e}", path.display())))?;
        if env.format != CHECKPOINT_FORMAT || env.version != CHECKPOINT_VERSION {
            return Err(SconeError::Format(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                env.format,
                env.version
            )));
        }
        env.model.validate()?;
        Ok(env.model)
    }

    fn validate(&self) -> Result<()> {
        if self.views.len() != self.networks.len() {
            return Err(SconeError::Format("view and network counts differ".into()));
        }
        for (v, net) in self.views.iter().zip(&self.networks) {
            let ok = net.encoder[0].d_in() == v.dim
                && net.encoder[0].d_out() == self.config.hidden
                && net.encoder[1].d_out() == self.config.latent
                && net.decoder[0].d_in() == self.config.latent
                && net.decoder[1].d_out() == v.dim
                && net.head.shape() == (self.config.latent, self.config.latent);
            if !ok {
                return Err(SconeError::Format(format!("layer shapes of view {} are inconsistent", v.name)));
            }
        }
        Ok(())
    }
}

fn sum_scalars(tape: &mut Tape<'_>, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

fn check_cover(covered: &[bool]) -> Result<()> {
    match covered.iter().position(|c| !c) {
        Some(i) => Err(SconeError::Contract(format!("union sample {i} is missing from every view"))),
        None => Ok(()),
    }
}

/// Sum pooling: `z[i]` is the sum of `z_o[i]` over views containing `i`.
/// `parts` pairs each view's latent with the union index of each of its rows.
pub fn pool(parts: &[(&Matrix, &[usize])], n: usize) -> Result<Matrix> {
    let mut covered = vec![false; n];
    for (_, index) in parts {
        for &i in *index {
            if i < n {
                covered[i] = true;
            }
        }
    }
    let out = pooled_sum(parts, n)?;
    check_cover(&covered)?;
    Ok(out)
}

pub fn pool_on_tape(tape: &mut Tape<'_>, parts: &[(Var, &[usize])], n: usize) -> Result<Var> {
    let mut covered = vec![false; n];
    for (_, index) in parts {
        for &i in *index {
            if i < n {
                covered[i] = true;
            }
        }
    }
    check_cover(&covered)?;
    if parts.is_empty() {
        return Err(SconeError::Contract("nothing to pool".into()));
    }
    tape.pool_sum(parts, n)
}

pub fn loss_rec_mse(x: &Matrix, x_hat: &Matrix) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(SconeError::Dimension(format!(
            "reconstruction of {:?} against {:?}",
            x_hat.shape(),
            x.shape()
        )));
    }
    let sse: f64 = x.as_slice().iter().zip(x_hat.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sse / x.len() as f64)
}

/// Mean binary cross-entropy of probabilities `p` against decoder logits.
pub fn loss_rec_bce(p: &Matrix, logits: &Matrix) -> Result<f64> {
    if p.shape() != logits.shape() {
        return Err(SconeError::Dimension(format!(
            "reconstruction of {:?} against {:?}",
            logits.shape(),
            p.shape()
        )));
    }
    if let Some(bad) = p.as_slice().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(SconeError::Domain(format!("target probability {bad} outside [0, 1]")));
    }
    let total: f64 = logits.as_slice().iter().zip(p.as_slice()).map(|(&x, &p)| bce_with_logit(x, p)).sum();
    Ok(total / p.len() as f64)
}

/// `n1[i] W n2[j]^T` over the neighborhood averages of the two subsets.
pub fn contrastive_score(
    z1: &Matrix,
    g1: &KnnGraph,
    i: usize,
    z2: &Matrix,
    g2: &KnnGraph,
    j: usize,
    head: &Matrix,
) -> Result<f64> {
    if i >= g1.node_count() || j >= g2.node_count() {
        return Err(SconeError::Dimension(format!("score indices ({i}, {j}) out of range")));
    }
    if head.shape() != (z1.cols(), z2.cols()) {
        return Err(SconeError::Dimension(format!(
            "head {:?} for latents of width {} and {}",
            head.shape(),
            z1.cols(),
            z2.cols()
        )));
    }
    let a = g1.neighborhood_average(z1, i);
    let b = g2.neighborhood_average(z2, j);
    let mut s = 0.0;
    for (r, &ar) in a.iter().enumerate() {
        let row = head.row(r);
        s += ar * row.iter().zip(&b).map(|(w, bv)| w * bv).sum::<f64>();
    }
    Ok(s)
}

/// Binary cross-entropy of the pair scores: positives labelled 1, negatives 0,
/// averaged over all pairs.
pub fn loss_contrastive(
    z1: &Matrix,
    g1: &KnnGraph,
    z2: &Matrix,
    g2: &KnnGraph,
    pairs: &PairLists,
    head: &Matrix,
) -> Result<f64> {
    if pairs.positives.is_empty() {
        return Err(SconeError::Sampling("contrastive loss without positive pairs".into()));
    }
    let mut total = 0.0;
    for &(i, j) in &pairs.positives {
        total += bce_with_logit(contrastive_score(z1, g1, i, z2, g2, j, head)?, 1.0);
    }
    for &(i, j) in &pairs.negatives {
        total += bce_with_logit(contrastive_score(z1, g1, i, z2, g2, j, head)?, 0.0);
    }
    Ok(total / pairs.len() as f64)
}

pub fn contrastive_on_tape<'g>(
    tape: &mut Tape<'g>,
    z1: Var,
    g1: &'g KnnGraph,
    z2: Var,
    g2: &'g KnnGraph,
    pairs: &PairLists,
    head: Var,
) -> Result<Var> {
    if pairs.positives.is_empty() {
        return Err(SconeError::Sampling("contrastive loss without positive pairs".into()));
    }
    let n1 = tape.neighbor_mean(z1, g1)?;
    let n2 = tape.neighbor_mean(z2, g2)?;
    let projected = tape.matmul(n1, head)?;
    let logits = tape.row_dot(projected, n2, &pairs.all())?;
    let labels = Matrix::from_fn(pairs.len(), 1, |p, _| if p < pairs.positives.len() { 1.0 } else { 0.0 });
    let labels = tape.constant(labels);
    tape.bce_logits(logits, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::OmicsView;
    use crate::graph::build_knn;
    use crate::subset::{build_pairs, AlignedViews, SubsetPair};

    fn small_config() -> ModelConfig {
        ModelConfig {
            hidden: 6,
            latent: 4,
            k_k: 3,
        }
    }

    fn descriptors() -> Vec<ViewDescriptor> {
        vec![
            ViewDescriptor {
                name: "a".into(),
                dim: 5,
                likelihood: Likelihood::Gaussian,
            },
            ViewDescriptor {
                name: "b".into(),
                dim: 3,
                likelihood: Likelihood::Bernoulli,
            },
        ]
    }

    #[test]
    fn zero_weights_give_zero_outputs() {
        let mut rng = SeededRng::new(1);
        let mut m = SconeModel::new(descriptors(), small_config(), &mut rng).unwrap();
        m.zero_all();
        let x = rng.normal_matrix(6, 5, 1.0);
        let g = build_knn(&x, 2).unwrap();
        assert_eq!(m.encode_view(0, &x, &g).unwrap().max_abs(), 0.0);
        let z = rng.normal_matrix(6, 4, 1.0);
        assert_eq!(m.decode_view(0, &z, &g).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn encode_and_decode_compose_layers() {
        let mut rng = SeededRng::new(2);
        let m = SconeModel::new(descriptors(), small_config(), &mut rng).unwrap();
        let x = rng.normal_matrix(5, 5, 1.0);
        let g = build_knn(&x, 2).unwrap();
        let net = &m.networks[0];
        let want = net.encoder[1].forward(&net.encoder[0].forward(&x, &g).unwrap(), &g).unwrap();
        assert_eq!(m.encode_view(0, &x, &g).unwrap(), want);
        let z = rng.normal_matrix(5, 4, 1.0);
        let want = net.decoder[1].forward(&net.decoder[0].forward(&z, &g).unwrap(), &g).unwrap();
        assert_eq!(m.decode_view(0, &z, &g).unwrap(), want);
        assert!(m.encode_view(0, &rng.normal_matrix(5, 3, 1.0), &g).is_err());
    }

    #[test]
    fn encoding_is_permutation_equivariant() {
        let mut rng = SeededRng::new(3);
        let m = SconeModel::new(descriptors(), small_config(), &mut rng).unwrap();
        let x = rng.normal_matrix(8, 5, 1.0);
        let z = m.encode_view(0, &x, &build_knn(&x, 3).unwrap()).unwrap();
        let perm = [3, 7, 0, 5, 1, 6, 2, 4];
        let xp = x.select_rows(&perm);
        let zp = m.encode_view(0, &xp, &build_knn(&xp, 3).unwrap()).unwrap();
        assert!(zp.sub(&z.select_rows(&perm)).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn pooling_laws() {
        let mut rng = SeededRng::new(4);
        let za = rng.normal_matrix(3, 2, 1.0);
        let zb = rng.normal_matrix(2, 2, 1.0);
        let ia = [0usize, 1, 2];
        let ib = [2usize, 0];
        assert_eq!(pool(&[(&za, &ia)], 3).unwrap(), za);
        let ab = pool(&[(&za, &ia), (&zb, &ib)], 3).unwrap();
        let ba = pool(&[(&zb, &ib), (&za, &ia)], 3).unwrap();
        assert_eq!(ab, ba);
        assert_eq!(ab.row(1), za.row(1));
        assert_eq!(ab.row(0), &[za[(0, 0)] + zb[(1, 0)], za[(0, 1)] + zb[(1, 1)]]);
        let err = pool(&[(&zb, &ib)], 3).unwrap_err();
        assert!(matches!(err, SconeError::Contract(_)));
    }

    #[test]
    fn reconstruction_losses() {
        let mut rng = SeededRng::new(5);
        let x = rng.normal_matrix(4, 3, 1.0);
        assert_eq!(loss_rec_mse(&x, &x).unwrap(), 0.0);
        assert!((loss_rec_mse(&x, &x.map(|v| v + 1.0)).unwrap() - 1.0).abs() < 1e-12);
        let y = rng.normal_matrix(4, 3, 1.0);
        let mut sse = 0.0;
        for r in 0..4 {
            for c in 0..3 {
                sse += (x[(r, c)] - y[(r, c)]).powi(2);
            }
        }
        assert!((loss_rec_mse(&x, &y).unwrap() - sse / 12.0).abs() < 1e-12);

        let half = Matrix::filled(2, 2, 0.5);
        assert!((loss_rec_bce(&half, &Matrix::zeros(2, 2)).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(loss_rec_bce(&Matrix::filled(1, 1, 1.0), &Matrix::filled(1, 1, 40.0)).unwrap() < 1e-15);
        let p = rng.uniform_matrix(3, 3, 1.0).map(f64::abs);
        let logits = rng.normal_matrix(3, 3, 2.0);
        let mut want = 0.0;
        for (&pv, &l) in p.as_slice().iter().zip(logits.as_slice()) {
            let q = (1.0 / (1.0 + (-l).exp())).clamp(1e-15, 1.0 - 1e-15);
            want -= pv * q.ln() + (1.0 - pv) * (1.0 - q).ln();
        }
        assert!((loss_rec_bce(&p, &logits).unwrap() - want / 9.0).abs() < 1e-10);
        assert!(matches!(
            loss_rec_bce(&Matrix::filled(1, 1, 1.5), &Matrix::zeros(1, 1)),
            Err(SconeError::Domain(_))
        ));
    }

    #[test]
    fn pooling_three_views_is_order_free_bitwise() {
        let mut rng = SeededRng::new(16);
        let idx: [Vec<usize>; 3] = [vec![0, 1, 2, 3], vec![3, 1, 0], vec![2, 0, 3, 1]];
        let zs: Vec<Matrix> = idx.iter().map(|i| rng.normal_matrix(i.len(), 5, 1e3)).collect();
        let parts: Vec<(&Matrix, &[usize])> = zs.iter().zip(&idx).map(|(z, i)| (z, i.as_slice())).collect();
        let base = pool(&parts, 4).unwrap();
        for order in [[1, 0, 2], [2, 1, 0], [0, 2, 1]] {
            let p: Vec<_> = order.iter().map(|&o| parts[o]).collect();
            assert_eq!(pool(&p, 4).unwrap(), base);
            let mut tape = Tape::new();
            let vars: Vec<(Var, &[usize])> = p.iter().map(|&(z, i)| (tape.constant(z.clone()), i)).collect();
            let pooled = pool_on_tape(&mut tape, &vars, 4).unwrap();
            assert_eq!(tape.value(pooled), &base);
        }
    }

    #[test]
    fn contrastive_scores() {
        let mut rng = SeededRng::new(6);
        let z = rng.normal_matrix(5, 3, 1.0);
        let g = build_knn(&z, 2).unwrap();
        let n0 = g.neighborhood_average(&z, 0);
        let norm2: f64 = n0.iter().map(|v| v * v).sum();
        let s = contrastive_score(&z, &g, 0, &z, &g, 0, &Matrix::identity(3)).unwrap();
        assert!((s - norm2).abs() < 1e-12);
        assert_eq!(contrastive_score(&z, &g, 1, &z, &g, 2, &Matrix::zeros(3, 3)).unwrap(), 0.0);

        let z2 = rng.normal_matrix(6, 3, 1.0);
        let g2 = build_knn(&z2, 3).unwrap();
        let w = rng.normal_matrix(3, 3, 1.0);
        let mut want = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                let na: f64 = g.neighbors(4).iter().map(|&j| z[(j, a)]).sum::<f64>() / 2.0;
                let nb: f64 = g2.neighbors(5).iter().map(|&j| z2[(j, b)]).sum::<f64>() / 3.0;
                want += na * w[(a, b)] * nb;
            }
        }
        assert!((contrastive_score(&z, &g, 4, &z2, &g2, 5, &w).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn contrastive_loss_cases() {
        let mut rng = SeededRng::new(7);
        let z1 = rng.normal_matrix(5, 3, 1.0);
        let z2 = rng.normal_matrix(5, 3, 1.0);
        let (g1, g2) = (build_knn(&z1, 2).unwrap(), build_knn(&z2, 2).unwrap());
        let pairs = PairLists {
            positives: vec![(0, 1), (2, 2)],
            negatives: vec![(4, 3)],
        };
        let zero = Matrix::zeros(3, 3);
        assert!((loss_contrastive(&z1, &g1, &z2, &g2, &pairs, &zero).unwrap() - 2f64.ln()).abs() < 1e-15);

        let w = rng.normal_matrix(3, 3, 1.0);
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut want = 0.0;
        for &(i, j) in &pairs.positives {
            want -= sig(contrastive_score(&z1, &g1, i, &z2, &g2, j, &w).unwrap()).ln();
        }
        for &(i, j) in &pairs.negatives {
            want -= (1.0 - sig(contrastive_score(&z1, &g1, i, &z2, &g2, j, &w).unwrap())).ln();
        }
        let got = loss_contrastive(&z1, &g1, &z2, &g2, &pairs, &w).unwrap();
        assert!((got - want / 3.0).abs() < 1e-10);

        let mut tape = Tape::new();
        let (a, b, h) = (tape.constant(z1.clone()), tape.constant(z2.clone()), tape.constant(w.clone()));
        let on_tape = contrastive_on_tape(&mut tape, a, &g1, b, &g2, &pairs, h).unwrap();
        assert!((tape.value(on_tape).as_slice()[0] - got).abs() < 1e-12);

        let empty = PairLists::default();
        assert!(matches!(
            loss_contrastive(&z1, &g1, &z2, &g2, &empty, &w),
            Err(SconeError::Sampling(_))
        ));
    }

    #[test]
    fn total_loss_arithmetic() {
        let b = loss_total(vec![0.5], vec![0.1], 1.0, 10.0);
        assert!((b.total - 1.5).abs() < 1e-12);
        assert_eq!(loss_total(vec![0.3, 0.2], vec![7.0], 2.0, 0.0).total, 1.0);
        assert_eq!(loss_total(vec![0.3], vec![0.7], 0.0, 1.0).total, 0.7);
    }

    fn toy_batch(seed: u64) -> (SconeModel, AlignedViews, SubsetBatch) {
        let mut rng = SeededRng::new(seed);
        let ids: Vec<String> = (0..12).map(|i| format!("s{i:02}")).collect();
        let a = OmicsView::new(
            "a",
            ids.clone(),
            (0..5).map(|i| format!("a{i}")).collect(),
            rng.normal_matrix(12, 5, 1.0),
            Likelihood::Gaussian,
        )
        .unwrap();
        let b = OmicsView::new(
            "b",
            ids[..10].to_vec(),
            (0..3).map(|i| format!("b{i}")).collect(),
            rng.uniform_matrix(10, 3, 1.0).map(f64::abs),
            Likelihood::Bernoulli,
        )
        .unwrap();
        let al = AlignedViews::new(&[a, b]).unwrap();
        let pair = SubsetPair {
            s1: vec![0, 1, 2, 3, 4, 5, 6, 7],
            s2: vec![3, 4, 5, 6, 7, 8, 9, 10],
        };
        let pairs = build_pairs(&pair, &mut rng).unwrap();
        let batch = SubsetBatch::new(&al, pair, pairs, 3).unwrap();
        let model = SconeModel::new(descriptors(), small_config(), &mut rng).unwrap();
        (model, al, batch)
    }

    #[test]
    fn tape_objective_matches_direct_evaluation() {
        let (model, _, batch) = toy_batch(8);
        let direct = model.objective(&batch, 1.0, 10.0).unwrap();
        let mut tape = Tape::new();
        let vars = model.register(&mut tape, true);
        let obj = model.objective_on_tape(&mut tape, &vars, &batch, 1.0, 10.0).unwrap();
        let b = obj.breakdown(&tape, 1.0, 10.0);
        for (x, y) in b.reconstruction.iter().zip(&direct.reconstruction) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in b.contrastive.iter().zip(&direct.contrastive) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((tape.value(obj.total).as_slice()[0] - b.total).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (mut model, _, batch) = toy_batch(9);
        let mut tape = Tape::new();
        let vars = model.register(&mut tape, true);
        let obj = model.objective_on_tape(&mut tape, &vars, &batch, 1.0, 10.0).unwrap();
        let grads = tape.backward(obj.total).unwrap();
        let analytic: Vec<Matrix> = vars.flat().iter().map(|&v| grads.wrt(&tape, v)).collect();
        drop(tape);
        let h = 1e-5;
        let n_params = model.parameters().len();
        for p in 0..n_params {
            let len = model.parameters()[p].len();
            for e in 0..len {
                let orig = model.parameters()[p].as_slice()[e];
                model.parameters_mut()[p].as_mut_slice()[e] = orig + h;
                let up = model.objective(&batch, 1.0, 10.0).unwrap().total;
                model.parameters_mut()[p].as_mut_slice()[e] = orig - h;
                let down = model.objective(&batch, 1.0, 10.0).unwrap().total;
                model.parameters_mut()[p].as_mut_slice()[e] = orig;
                let fd = (up - down) / (2.0 * h);
                let ad = analytic[p].as_slice()[e];
                assert!(
                    (fd - ad).abs() <= 1e-3 * fd.abs().max(ad.abs()).max(1e-4),
                    "parameter {p} entry {e}: {ad} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn permuting_samples_leaves_losses_unchanged() {
        let (model, _, batch) = toy_batch(10);
        let base = model.objective(&batch, 1.0, 10.0).unwrap();
        // Reverse both subsets; positions, pairs and graphs are rebuilt consistently.
        let mut pair = batch.pair.clone();
        pair.s1.reverse();
        pair.s2.reverse();
        let k = pair.k_s();
        let flip = |l: &[(usize, usize)]| l.iter().map(|&(a, b)| (k - 1 - a, k - 1 - b)).collect();
        let pairs = PairLists {
            positives: flip(&batch.pairs.positives),
            negatives: flip(&batch.pairs.negatives),
        };
        let (_, al, _) = toy_batch(10);
        let permuted = SubsetBatch::new(&al, pair, pairs, 3).unwrap();
        let other = model.objective(&permuted, 1.0, 10.0).unwrap();
        assert!((base.total - other.total).abs() < 1e-10);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let (model, _, _) = toy_batch(11);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        let back = SconeModel::load(&path).unwrap();
        for (a, b) in model.parameters().iter().zip(back.parameters()) {
            let bits = |m: &Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back, model);
        std::fs::write(&path, "{\"format\":\"other\",\"version\":1}").unwrap();
        assert!(matches!(SconeModel::load(&path), Err(SconeError::Format(_))));
    }
}
