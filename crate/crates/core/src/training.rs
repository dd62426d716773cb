//! The epoch loop and full-graph inference.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::OmicsView;
use crate::error::{Result, SconeError};
use crate::graph::build_knn;
use crate::io::{write_atomic, KvConfig};
use crate::memory::PeakScope;
use crate::model::{pool, LossBreakdown, ModelConfig, SconeModel, ViewDescriptor};
use crate::numerics::{AdamState, Matrix, SeededRng, Tape};
use crate::subset::{check_feasible, AlignedViews, SubsetBatch};

/// Subset size as an absolute count or a fraction of the union size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SubsetSize {
    Count(usize),
    Fraction(f64),
}

impl SubsetSize {
    /// Fractions resolve to `round(f * n)`.
    pub fn resolve(self, n: usize) -> usize {
        match self {
            SubsetSize::Count(k) => k,
            SubsetSize::Fraction(f) => (f * n as f64).round() as usize,
        }
    }
}

impl std::str::FromStr for SubsetSize {
    type Err = SconeError;

    /// `200` is a count; `0.2` is a fraction.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Ok(k) = s.parse::<usize>() {
            return Ok(SubsetSize::Count(k));
        }
        match s.parse::<f64>() {
            Ok(f) if f > 0.0 && f < 1.0 => Ok(SubsetSize::Fraction(f)),
            _ => Err(SconeError::Parameter(format!(
                "subset size {s:?} is neither a count nor a fraction in (0, 1)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub k_s: SubsetSize,
    pub alpha: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub min_overlap: f64,
    /// Epochs between checkpoints; 0 disables them.
    pub checkpoint_interval: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 128,
            k_s: SubsetSize::Fraction(0.2),
            alpha: 1.0,
            beta: 10.0,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            min_overlap: 0.1,
            checkpoint_interval: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(SconeError::Parameter("epochs must be at least 1".into()));
        }
        if !(self.min_overlap > 0.0 && self.min_overlap < 1.0) {
            return Err(SconeError::Parameter(format!(
                "min_overlap must lie in (0, 1), got {}",
                self.min_overlap
            )));
        }
        if self.model.k_k == 0 {
            return Err(SconeError::Parameter("k_k must be at least 1".into()));
        }
        if self.learning_rate < 0.0 || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(SconeError::Parameter("invalid Adam hyperparameters".into()));
        }
        Ok(())
    }

    /// Overrides defaults with any keys present in `cfg`.
    pub fn from_config(cfg: &KvConfig) -> Result<Self> {
        let d = TrainConfig::default();
        let out = TrainConfig {
            epochs: cfg.get_or("epochs", d.epochs)?,
            k_s: cfg.get_or("k_s", d.k_s)?,
            alpha: cfg.get_or("alpha", d.alpha)?,
            beta: cfg.get_or("beta", d.beta)?,
            learning_rate: cfg.get_or("learning_rate", d.learning_rate)?,
            beta1: cfg.get_or("beta1", d.beta1)?,
            beta2: cfg.get_or("beta2", d.beta2)?,
            seed: cfg.get_or("seed", d.seed)?,
            min_overlap: cfg.get_or("min_overlap", d.min_overlap)?,
            checkpoint_interval: cfg.get_or("checkpoint_interval", d.checkpoint_interval)?,
            model: ModelConfig {
                hidden: cfg.get_or("hidden", d.model.hidden)?,
                latent: cfg.get_or("latent", d.model.latent)?,
                k_k: cfg.get_or("k_k", d.model.k_k)?,
            },
        };
        out.validate()?;
        Ok(out)
    }

    pub fn to_config(&self) -> KvConfig {
        let mut cfg = KvConfig::default();
        cfg.set("epochs", self.epochs);
        cfg.set(
            "k_s",
            match self.k_s {
                SubsetSize::Count(k) => k.to_string(),
                SubsetSize::Fraction(f) => f.to_string(),
            },
        );
        cfg.set("alpha", self.alpha);
        cfg.set("beta", self.beta);
        cfg.set("learning_rate", self.learning_rate);
        cfg.set("beta1", self.beta1);
        cfg.set("beta2", self.beta2);
        cfg.set("seed", self.seed);
        cfg.set("min_overlap", self.min_overlap);
        cfg.set("checkpoint_interval", self.checkpoint_interval);
        cfg.set("hidden", self.model.hidden);
        cfg.set("latent", self.model.latent);
        cfg.set("k_k", self.model.k_k);
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub wall_ms: f64,
    pub peak_bytes: usize,
    /// Contrastive score evaluations in this epoch, summed over views.
    pub contrastive_evaluations: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.epochs {
            out.push_str(&serde_json::to_string(r).map_err(|e| SconeError::Format(e.to_string()))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl()?.as_bytes())
    }

    pub fn first_total(&self) -> Option<f64> {
        self.epochs.first().map(|r| r.loss.total)
    }

    pub fn last_total(&self) -> Option<f64> {
        self.epochs.last().map(|r| r.loss.total)
    }
}

fn descriptors(views: &[OmicsView]) -> Vec<ViewDescriptor> {
    views
        .iter()
        .map(|v| ViewDescriptor {
            name: v.name.clone(),
            dim: v.n_features(),
            likelihood: v.likelihood,
        })
        .collect()
}

/// Trains a fresh model on `views`.
pub fn train(views: &[OmicsView], config: &TrainConfig) -> Result<(SconeModel, TrainLog)> {
    train_with(views, config, |_, _| Ok(()))
}

/// [`train`] with a hook called after every completed epoch.
pub fn train_with(
    views: &[OmicsView],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &SconeModel) -> Result<()>,
) -> Result<(SconeModel, TrainLog)> {
    config.validate()?;
    let aligned = AlignedViews::new(views)?;
    let k_k = config.model.k_k;
    for v in views {
        if !v.x.is_finite() {
            return Err(SconeError::Domain(format!("view {} contains non-finite values", v.name)));
        }
        if v.n_samples() <= k_k {
            return Err(SconeError::Parameter(format!(
                "view {} has {} samples, needs more than k_k = {k_k}",
                v.name,
                v.n_samples()
            )));
        }
    }
    let k_s = config.k_s.resolve(aligned.n());
    check_feasible(aligned.n(), k_s, config.min_overlap)?;

    let mut rng = SeededRng::new(config.seed);
    let mut model = SconeModel::new(descriptors(views), config.model, &mut rng)?;
    let mut sampler = rng.fork();
    let shapes: Vec<(usize, usize)> = model.parameters().iter().map(|m| m.shape()).collect();
    let mut adam = AdamState::new(shapes, config.learning_rate, config.beta1, config.beta2);
    let mut log = TrainLog::default();

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let scope = PeakScope::start();
        let batch = SubsetBatch::sample(&aligned, k_s, config.min_overlap, k_k, &mut sampler, 100)?;
        let (loss, grads, tape_peak, evaluations) = {
            let mut tape = Tape::new();
            let vars = model.register(&mut tape, true);
            let obj = model.objective_on_tape(&mut tape, &vars, &batch, config.alpha, config.beta)?;
            let loss = obj.breakdown(&tape, config.alpha, config.beta);
            if !loss.total.is_finite() {
                return Err(SconeError::Training {
                    epoch,
                    message: format!("non-finite loss {}", loss.total),
                });
            }
            let g = tape.backward(obj.total)?;
            let grads: Vec<Matrix> = vars.flat().iter().map(|&v| g.wrt(&tape, v)).collect();
            (loss, grads, tape.peak_bytes(), tape.row_dot_evaluations())
        };
        adam.step(&mut model.parameters_mut(), &grads)
            .map_err(|e| SconeError::Training {
                epoch,
                message: e.to_string(),
            })?;
        drop(grads);
        let record = EpochRecord {
            epoch,
            loss,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            peak_bytes: scope.finish(tape_peak),
            contrastive_evaluations: evaluations,
        };
        on_epoch(&record, &model)?;
        log.epochs.push(record);
    }
    Ok((model, log))
}

/// Per-view and joint latents over the union of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSpace {
    /// Sorted union of sample ids; row `i` of `z` belongs to `union_ids[i]`.
    pub union_ids: Vec<String>,
    pub z: Matrix,
    pub per_view: Vec<Matrix>,
    /// Union index of each row of `per_view[o]`.
    pub view_rows: Vec<Vec<usize>>,
}

/// Full-data KNN per view, full encoding, and pooling over all views.
pub fn infer_latent(model: &SconeModel, views: &[OmicsView]) -> Result<LatentSpace> {
    if views.len() != model.views.len() {
        return Err(SconeError::Dimension(format!(
            "model has {} views, {} were given",
            model.views.len(),
            views.len()
        )));
    }
    for (v, d) in views.iter().zip(&model.views) {
        if v.n_features() != d.dim {
            return Err(SconeError::Dimension(format!(
                "view {} has {} features, the model expects {} for view {}",
                v.name,
                v.n_features(),
                d.dim,
                d.name
            )));
        }
    }
    let aligned = AlignedViews::new(views)?;
    let mut per_view = Vec::with_capacity(views.len());
    for (o, v) in aligned.views.iter().enumerate() {
        let g = build_knn(&v.x, model.config.k_k)?;
        per_view.push(model.encode_view(o, &v.x, &g)?);
    }
    let parts: Vec<(&Matrix, &[usize])> = per_view
        .iter()
        .zip(&aligned.views)
        .map(|(z, v)| (z, v.union_index.as_slice()))
        .collect();
    let z = pool(&parts, aligned.n())?;
    Ok(LatentSpace {
        union_ids: aligned.union_ids.clone(),
        z,
        per_view,
        view_rows: aligned.views.iter().map(|v| v.union_index.clone()).collect(),
    })
}
