//! Omics views, preprocessing transforms and the synthetic multi-view generator.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SconeError};
use crate::evaluation::SurvivalRecord;
use crate::io::{KvConfig, Table};
use crate::numerics::{Matrix, SeededRng};

/// Reconstruction likelihood of a view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Likelihood {
    Gaussian,
    Bernoulli,
}

impl std::str::FromStr for Likelihood {
    type Err = SconeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" | "mse" => Ok(Likelihood::Gaussian),
            "bernoulli" | "binary" | "bce" => Ok(Likelihood::Bernoulli),
            other => Err(SconeError::Parameter(format!("unknown likelihood {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PreprocessingState {
    Raw,
    Normalized,
    ZScored,
}

/// One modality: samples by features.
#[derive(Clone, Debug, PartialEq)]
pub struct OmicsView {
    pub name: String,
    pub sample_ids: Vec<String>,
    pub feature_names: Vec<String>,
    pub x: Matrix,
    pub likelihood: Likelihood,
    pub state: PreprocessingState,
}

impl OmicsView {
    pub fn new(
        name: impl Into<String>,
        sample_ids: Vec<String>,
        feature_names: Vec<String>,
        x: Matrix,
        likelihood: Likelihood,
    ) -> Result<Self> {
        let name = name.into();
        if x.rows() != sample_ids.len() || x.cols() != feature_names.len() {
            return Err(SconeError::Dimension(format!(
                "view {name}: {}x{} matrix with {} sample ids and {} feature names",
                x.rows(),
                x.cols(),
                sample_ids.len(),
                feature_names.len()
            )));
        }
        let mut seen = HashSet::with_capacity(sample_ids.len());
        if let Some(dup) = sample_ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(SconeError::Parameter(format!("view {name}: duplicate sample id {dup}")));
        }
        Ok(OmicsView {
            name,
            sample_ids,
            feature_names,
            x,
            likelihood,
            state: PreprocessingState::Raw,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.x.rows()
    }

    pub fn n_features(&self) -> usize {
        self.x.cols()
    }

    /// Loads a delimited view file: header of feature names, first column sample ids.
    pub fn load(path: &Path, likelihood: Likelihood) -> Result<Self> {
        let table = Table::read(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "view".into());
        OmicsView::new(name, table.row_ids, table.columns, table.values, likelihood)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Table {
            row_ids: self.sample_ids.clone(),
            columns: self.feature_names.clone(),
            values: self.x.clone(),
        }
        .write(path)
    }

    fn require_non_negative(&self, what: &str) -> Result<()> {
        match self.x.as_slice().iter().find(|&&v| v < 0.0) {
            Some(v) => Err(SconeError::Domain(format!(
                "{what} of view {} needs non-negative entries, found {v}",
                self.name
            ))),
            None => Ok(()),
        }
    }

    /// Scales each row to sum to `target_sum`, then applies `ln(1 + x)`.
    /// All-zero rows stay zero.
    pub fn normalize_counts(&self, target_sum: f64) -> Result<OmicsView> {
        self.require_non_negative("count normalization")?;
        let mut out = self.clone();
        for r in 0..out.x.rows() {
            let row = out.x.row_mut(r);
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                let f = target_sum / total;
                row.iter_mut().for_each(|v| *v = (*v * f).ln_1p());
            }
        }
        out.state = PreprocessingState::Normalized;
        Ok(out)
    }

    /// Centered log-ratio with pseudocount 1, per row.
    pub fn clr_transform(&self) -> Result<OmicsView> {
        self.require_non_negative("CLR")?;
        let mut out = self.clone();
        for r in 0..out.x.rows() {
            let row = out.x.row_mut(r);
            row.iter_mut().for_each(|v| *v = v.ln_1p());
            let mean = row.iter().sum::<f64>() / row.len().max(1) as f64;
            row.iter_mut().for_each(|v| *v -= mean);
        }
        out.state = PreprocessingState::Normalized;
        Ok(out)
    }

    /// Per-column standardization with the population standard deviation;
    /// constant columns become zeros.
    pub fn zscore(&self) -> OmicsView {
        let mut out = self.clone();
        zscore_columns(&mut out.x);
        out.state = PreprocessingState::ZScored;
        out
    }
}

pub(crate) fn zscore_columns(x: &mut Matrix) {
    let (n, d) = x.shape();
    if n == 0 {
        return;
    }
    for c in 0..d {
        let mean = (0..n).map(|r| x[(r, c)]).sum::<f64>() / n as f64;
        let var = (0..n).map(|r| (x[(r, c)] - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        for r in 0..n {
            x[(r, c)] = if std > 1e-12 * mean.abs().max(1.0) {
                (x[(r, c)] - mean) / std
            } else {
                0.0
            };
        }
    }
}

/// Per-view generator settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticViewSpec {
    pub name: String,
    pub dim: usize,
    /// Scale of the cluster centers in units of `noise`.
    pub separation: f64,
    pub noise: f64,
    pub informative_fraction: f64,
    pub missing_fraction: f64,
    /// Cluster -> center group. Clusters sharing a group are indistinguishable
    /// in this view. Defaults to one group per cluster.
    pub cluster_groups: Option<Vec<usize>>,
    pub likelihood: Likelihood,
}

impl SyntheticViewSpec {
    pub fn gaussian(name: impl Into<String>, dim: usize, separation: f64) -> Self {
        SyntheticViewSpec {
            name: name.into(),
            dim,
            separation,
            noise: 1.0,
            informative_fraction: 0.5,
            missing_fraction: 0.0,
            cluster_groups: None,
            likelihood: Likelihood::Gaussian,
        }
    }
}

/// Settings for [`generate_synthetic`].
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub proportions: Vec<f64>,
    pub views: Vec<SyntheticViewSpec>,
    /// Event rate of cluster 0; cluster `c` has rate `base_rate * hazard_ratio^c`.
    pub base_rate: f64,
    pub hazard_ratio: f64,
    pub censoring: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(n: usize, clusters: usize, views: Vec<SyntheticViewSpec>, seed: u64) -> Self {
        SyntheticSpec {
            n,
            proportions: vec![1.0 / clusters as f64; clusters],
            views,
            base_rate: 0.1,
            hazard_ratio: 1.0,
            censoring: 0.2,
            seed,
        }
    }

    pub fn clusters(&self) -> usize {
        self.proportions.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.clusters();
        if k == 0 || self.n == 0 || self.views.is_empty() {
            return Err(SconeError::Parameter(
                "synthetic data needs samples, clusters and at least one view".into(),
            ));
        }
        let total: f64 = self.proportions.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.proportions.iter().any(|&p| p < 0.0) {
            return Err(SconeError::Parameter(format!(
                "cluster proportions must be non-negative and sum to 1, got {total}"
            )));
        }
        let max_missing = (self.views.len() - 1) as f64 / self.views.len() as f64;
        for v in &self.views {
            if v.dim == 0 || v.noise <= 0.0 || v.separation < 0.0 {
                return Err(SconeError::Parameter(format!(
                    "view {}: dimension and noise must be positive, separation non-negative",
                    v.name
                )));
            }
            if !(0.0..=1.0).contains(&v.informative_fraction) {
                return Err(SconeError::Parameter(format!(
                    "view {}: informative fraction outside [0, 1]",
                    v.name
                )));
            }
            if v.missing_fraction < 0.0 || v.missing_fraction > max_missing + 1e-12 {
                return Err(SconeError::Parameter(format!(
                    "view {}: missing fraction {} exceeds {max_missing:.3}, which would leave samples in no view",
                    v.name, v.missing_fraction
                )));
            }
            if let Some(groups) = &v.cluster_groups {
                if groups.len() != k {
                    return Err(SconeError::Parameter(format!(
                        "view {}: {} cluster groups for {k} clusters",
                        v.name,
                        groups.len()
                    )));
                }
            }
        }
        if self.base_rate <= 0.0 || self.hazard_ratio <= 0.0 || !(0.0..1.0).contains(&self.censoring) {
            return Err(SconeError::Parameter(
                "survival rates must be positive and censoring in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    /// Reads the flat key-value form, e.g.
    ///
    /// ```text
    /// n = 600
    /// clusters = 3
    /// seed = 7
    /// views = rna, protein
    /// view.rna.dim = 20
    /// view.rna.separation = 4
    /// view.rna.missing = 0.3
    /// ```
    pub fn from_config(cfg: &KvConfig) -> Result<Self> {
        let n = cfg
            .get("n")?
            .ok_or_else(|| SconeError::Parameter("synthetic spec needs n".into()))?;
        let clusters: usize = cfg.get_or("clusters", 3)?;
        let names: Vec<String> = cfg
            .get_list("views")?
            .unwrap_or_else(|| vec!["view0".to_string(), "view1".to_string()]);
        let mut views = Vec::with_capacity(names.len());
        for name in names {
            let key = |field: &str| format!("view.{name}.{field}");
            let mut v = SyntheticViewSpec::gaussian(name.clone(), cfg.get_or(&key("dim"), 20)?, cfg.get_or(&key("separation"), 4.0)?);
            v.noise = cfg.get_or(&key("noise"), v.noise)?;
            v.informative_fraction = cfg.get_or(&key("informative"), v.informative_fraction)?;
            v.missing_fraction = cfg.get_or(&key("missing"), v.missing_fraction)?;
            v.cluster_groups = cfg.get_list(&key("groups"))?;
            if let Some(l) = cfg.get_str(&key("likelihood")) {
                v.likelihood = l.parse()?;
            }
            views.push(v);
        }
        let mut spec = SyntheticSpec::new(n, clusters, views, cfg.get_or("seed", 0)?);
        if let Some(p) = cfg.get_list("proportions")? {
            spec.proportions = p;
        }
        spec.base_rate = cfg.get_or("survival.base_rate", spec.base_rate)?;
        spec.hazard_ratio = cfg.get_or("survival.hazard_ratio", spec.hazard_ratio)?;
        spec.censoring = cfg.get_or("survival.censoring", spec.censoring)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Output of [`generate_synthetic`]; `labels[i]` belongs to `sample_ids[i]`.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub views: Vec<OmicsView>,
    pub sample_ids: Vec<String>,
    pub labels: Vec<usize>,
    pub survival: Vec<SurvivalRecord>,
}

/// Draws clustered multi-view data with missing samples and survival times.
///
/// Informative features carry the mean of the sample's cluster group plus
/// Gaussian noise; the remaining features are noise only. Missingness keeps
/// every sample in at least one view: each sample is pinned to one uniformly
/// chosen view and dropped from each other view with probability
/// `m * V / (V - 1)`, which makes the marginal missing rate of every view `m`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = SeededRng::new(spec.seed);
    let n = spec.n;
    let width = n.saturating_sub(1).to_string().len().max(4);
    let sample_ids: Vec<String> = (0..n).map(|i| format!("s{i:0width$}")).collect();

    let cumulative: Vec<f64> = spec
        .proportions
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect();
    let labels: Vec<usize> = (0..n)
        .map(|_| {
            let u = rng.uniform();
            cumulative.iter().position(|&c| u < c).unwrap_or(spec.clusters() - 1)
        })
        .collect();

    let n_views = spec.views.len();
    let pinned: Vec<usize> = (0..n).map(|_| rng.below(n_views)).collect();
    let mut views = Vec::with_capacity(n_views);
    for (vi, vs) in spec.views.iter().enumerate() {
        let groups: Vec<usize> = vs.cluster_groups.clone().unwrap_or_else(|| (0..spec.clusters()).collect());
        let n_groups = groups.iter().copied().max().unwrap_or(0) + 1;
        let informative = ((vs.dim as f64 * vs.informative_fraction).round() as usize).min(vs.dim);
        let centers = rng.normal_matrix(n_groups, informative.max(1), vs.separation * vs.noise);
        let drop_p = if n_views > 1 {
            vs.missing_fraction * n_views as f64 / (n_views - 1) as f64
        } else {
            0.0
        };
        let mut rows = Vec::new();
        let mut ids = Vec::new();
        for i in 0..n {
            let keep_draw = rng.uniform();
            let mut row = Vec::with_capacity(vs.dim);
            for f in 0..vs.dim {
                let mean = if f < informative { centers[(groups[labels[i]], f)] } else { 0.0 };
                row.push(mean + vs.noise * rng.normal());
            }
            if pinned[i] == vi || keep_draw >= drop_p {
                if vs.likelihood == Likelihood::Bernoulli {
                    row.iter_mut().for_each(|v| *v = crate::numerics::sigmoid(*v));
                }
                rows.push(row);
                ids.push(sample_ids[i].clone());
            }
        }
        let features = (0..vs.dim).map(|f| format!("{}_f{f}", vs.name)).collect();
        let x = Matrix::from_rows(&rows)?;
        let x = if rows.is_empty() { Matrix::zeros(0, vs.dim) } else { x };
        views.push(OmicsView::new(vs.name.clone(), ids, features, x, vs.likelihood)?);
    }

    let survival = (0..n)
        .map(|i| {
            let rate = spec.base_rate * spec.hazard_ratio.powi(labels[i] as i32);
            let time = rng.exponential(rate);
            let censored = rng.uniform() < spec.censoring;
            let cut = rng.uniform();
            SurvivalRecord {
                sample_id: sample_ids[i].clone(),
                duration: if censored { time * cut } else { time },
                event: !censored,
                group: labels[i],
            }
        })
        .collect();

    Ok(SyntheticData {
        views,
        sample_ids,
        labels,
        survival,
    })
}
