//! Memory and time scaling of subset-pair epochs against full-graph epochs.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, OmicsView, SyntheticSpec, SyntheticViewSpec};
use crate::error::{Result, SconeError};
use crate::graph::build_knn;
use crate::io::write_atomic;
use crate::memory::PeakScope;
use crate::model::{contrastive_on_tape, pool_on_tape, ModelConfig, SconeModel, ViewDescriptor};
use crate::numerics::{SeededRng, Tape, Var};
use crate::subset::{AlignedViews, PairLists, SubsetBatch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EpochMode {
    SubsetPair,
    FullGraph,
}

impl std::fmt::Display for EpochMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EpochMode::SubsetPair => "subset-pair",
            EpochMode::FullGraph => "full-graph",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRecord {
    pub n: usize,
    pub k_s: usize,
    pub mode: EpochMode,
    pub peak_bytes: usize,
    pub epoch_ms: f64,
    pub contrastive_evaluations: usize,
    /// KNN edges over every graph the epoch built.
    pub edges: usize,
    pub failed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SubsetRule {
    Half,
    Fraction(f64),
}

impl SubsetRule {
    pub fn k_s(self, n: usize) -> usize {
        match self {
            SubsetRule::Half => n / 2,
            SubsetRule::Fraction(f) => (f * n as f64).round() as usize,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub model: ModelConfig,
    pub view_dims: Vec<usize>,
    pub min_overlap: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            model: ModelConfig::default(),
            view_dims: vec![20, 10],
            min_overlap: 0.1,
            seed: 0,
        }
    }
}

fn bench_views(n: usize, cfg: &BenchConfig) -> Result<Vec<OmicsView>> {
    let views = cfg
        .view_dims
        .iter()
        .enumerate()
        .map(|(i, &d)| SyntheticViewSpec::gaussian(format!("view{i}"), d, 2.0))
        .collect();
    Ok(generate_synthetic(&SyntheticSpec::new(n, 3, views, cfg.seed))?.views)
}

fn backward_all(tape: &mut Tape<'_>, total: Var, params: &[Var]) -> Result<usize> {
    let grads = tape.backward(total)?;
    Ok(params.iter().filter(|&&p| grads.get(p).is_some()).count())
}

/// One forward and backward pass over a subset pair; returns tape peak bytes
/// and contrastive evaluations.
pub fn subset_epoch(model: &SconeModel, batch: &SubsetBatch) -> Result<(usize, usize)> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, true);
    let obj = model.objective_on_tape(&mut tape, &vars, batch, 1.0, 10.0)?;
    backward_all(&mut tape, obj.total, &vars.flat())?;
    Ok((tape.peak_bytes(), tape.row_dot_evaluations()))
}

/// One forward and backward pass over the whole data: encode, pool, decode and
/// reconstruct every sample, with a contrastive term pairing every node with
/// itself (positive) and with a shuffled partner (negative).
pub fn full_graph_epoch(model: &SconeModel, aligned: &AlignedViews, rng: &mut SeededRng) -> Result<(usize, usize, usize)> {
    let k_k = model.config.k_k;
    let graphs = aligned
        .views
        .iter()
        .map(|v| build_knn(&v.x, k_k))
        .collect::<Result<Vec<_>>>()?;
    let edges = graphs.iter().map(|g| g.edge_count()).sum();
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, true);
    let mut latents = Vec::new();
    let mut inputs = Vec::new();
    for (o, (v, g)) in aligned.views.iter().zip(&graphs).enumerate() {
        let x = tape.constant(v.x.clone());
        inputs.push(x);
        latents.push(model.encode_on_tape(&mut tape, &vars, o, x, g)?);
    }
    let parts: Vec<(Var, &[usize])> = latents
        .iter()
        .zip(&aligned.views)
        .map(|(&z, v)| (z, v.union_index.as_slice()))
        .collect();
    let joint = pool_on_tape(&mut tape, &parts, aligned.n())?;
    let mut terms = Vec::new();
    for (o, (v, g)) in aligned.views.iter().zip(&graphs).enumerate() {
        let zv = tape.gather_rows(joint, &v.union_index)?;
        let dec = model.decode_on_tape(&mut tape, &vars, o, zv, g)?;
        terms.push(tape.mse(dec, inputs[o])?);
        let n_o = v.x.rows();
        let mut perm: Vec<usize> = (0..n_o).collect();
        rng.shuffle(&mut perm);
        let pairs = PairLists {
            positives: (0..n_o).map(|i| (i, i)).collect(),
            negatives: (0..n_o).map(|i| (i, perm[i])).collect(),
        };
        let c = contrastive_on_tape(&mut tape, latents[o], g, latents[o], g, &pairs, vars.views[o].head)?;
        terms.push(tape.scale(c, 10.0));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    backward_all(&mut tape, total, &vars.flat())?;
    Ok((tape.peak_bytes(), tape.row_dot_evaluations(), edges))
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}

/// For each `n`: `reps` full-graph and subset-pair epochs on the same data,
/// reported as medians. A failing measurement marks its record as failed.
pub fn run_scaling(n_list: &[usize], rule: SubsetRule, reps: usize, cfg: &BenchConfig) -> Result<Vec<ScalingRecord>> {
    if reps < 3 {
        return Err(SconeError::Parameter(format!("at least 3 repetitions are required, got {reps}")));
    }
    if n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SconeError::Parameter("sample sizes must be strictly ascending".into()));
    }
    let mut out = Vec::new();
    for &n in n_list {
        let k_s = rule.k_s(n);
        let mut rng = SeededRng::new(cfg.seed ^ n as u64);
        let views = bench_views(n, cfg)?;
        let aligned = AlignedViews::new(&views)?;
        let descriptors = views
            .iter()
            .map(|v| ViewDescriptor {
                name: v.name.clone(),
                dim: v.n_features(),
                likelihood: v.likelihood,
            })
            .collect();
        let model = SconeModel::new(descriptors, cfg.model, &mut rng)?;
        for mode in [EpochMode::FullGraph, EpochMode::SubsetPair] {
            let mut peaks = Vec::new();
            let mut times = Vec::new();
            let mut evaluations = 0;
            let mut edges = 0;
            let mut failed = false;
            for _ in 0..reps {
                let started = Instant::now();
                let scope = PeakScope::start();
                let result = match mode {
                    EpochMode::FullGraph => full_graph_epoch(&model, &aligned, &mut rng),
                    EpochMode::SubsetPair => {
                        SubsetBatch::sample(&aligned, k_s, cfg.min_overlap, cfg.model.k_k, &mut rng, 100).and_then(|batch| {
                            let (peak, evals) = subset_epoch(&model, &batch)?;
                            Ok((peak, evals, batch.edge_count()))
                        })
                    }
                };
                match result {
                    Ok((tape_peak, evals, e)) => {
                        peaks.push(scope.finish(tape_peak) as f64);
                        times.push(started.elapsed().as_secs_f64() * 1e3);
                        evaluations = evals;
                        edges = e;
                    }
                    Err(_) => {
                        failed = true;
                        break;
                    }
                }
            }
            out.push(ScalingRecord {
                n,
                k_s: if mode == EpochMode::FullGraph { n } else { k_s },
                mode,
                peak_bytes: if failed { 0 } else { median(&mut peaks) as usize },
                epoch_ms: if failed { 0.0 } else { median(&mut times) },
                contrastive_evaluations: evaluations,
                edges,
                failed,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalingField {
    PeakBytes,
    EpochMs,
    ContrastiveEvaluations,
}

impl ScalingField {
    fn get(self, r: &ScalingRecord) -> f64 {
        match self {
            ScalingField::PeakBytes => r.peak_bytes as f64,
            ScalingField::EpochMs => r.epoch_ms,
            ScalingField::ContrastiveEvaluations => r.contrastive_evaluations as f64,
        }
    }
}

/// Least-squares slope of `log(field)` against `log(n)`.
pub fn fit_exponent(records: &[ScalingRecord], field: ScalingField) -> Result<f64> {
    let points: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| !r.failed)
        .map(|r| ((r.n as f64).ln(), field.get(r)))
        .collect();
    let mut distinct: Vec<f64> = points.iter().map(|p| p.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(SconeError::Parameter(format!(
            "fitting an exponent needs at least 3 distinct n, got {}",
            distinct.len()
        )));
    }
    if points.iter().any(|p| p.1 <= 0.0 || !p.1.is_finite()) {
        return Err(SconeError::Undefined("field values must be positive to fit on a log scale".into()));
    }
    let pts: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x, y.ln())).collect();
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if syy < 1e-24 {
        return Err(SconeError::Undefined("field is constant across n".into()));
    }
    Ok(sxy / sxx)
}

/// Tab-separated table with one record per row.
pub fn records_to_text(records: &[ScalingRecord]) -> String {
    let mut out = String::from("n\tk_s\tmode\tpeak_bytes\tepoch_ms\tcontrastive_evaluations\tedges\tfailed\n");
    for r in records {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{:.3}\t{}\t{}\t{}\n",
            r.n, r.k_s, r.mode, r.peak_bytes, r.epoch_ms, r.contrastive_evaluations, r.edges, r.failed
        ));
    }
    out
}

pub fn write_records(path: &std::path::Path, records: &[ScalingRecord]) -> Result<()> {
    write_atomic(path, records_to_text(records).as_bytes())
}

/// Ratio of subset-pair to full-graph peak bytes for every `n`.
pub fn peak_ratios(records: &[ScalingRecord]) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    for full in records.iter().filter(|r| r.mode == EpochMode::FullGraph && !r.failed) {
        if let Some(sub) = records
            .iter()
            .find(|r| r.mode == EpochMode::SubsetPair && r.n == full.n && !r.failed)
        {
            out.push((full.n, sub.peak_bytes as f64 / full.peak_bytes as f64));
        }
    }
    out
}
