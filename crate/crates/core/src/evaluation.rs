//! Partition agreement scores and the multi-group logrank test.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_ur, ln_gamma};

use crate::error::{Result, SconeError};

/// Counts `n_ij` of samples with true class `i` and predicted cluster `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<u64>>,
    pub row_sums: Vec<u64>,
    pub col_sums: Vec<u64>,
    pub n: u64,
}

impl ContingencyTable {
    /// Labels may be arbitrary integers; they are compacted in sorted order.
    pub fn new(truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(SconeError::Dimension(format!(
                "{} true labels and {} predicted labels",
                truth.len(),
                pred.len()
            )));
        }
        if truth.len() < 2 {
            return Err(SconeError::Parameter(format!(
                "comparing partitions needs at least 2 samples, got {}",
                truth.len()
            )));
        }
        let compact = |labels: &[usize]| {
            let ids: BTreeMap<usize, usize> = labels
                .iter()
                .copied()
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .enumerate()
                .map(|(i, l)| (l, i))
                .collect();
            let mapped: Vec<usize> = labels.iter().map(|l| ids[l]).collect();
            (ids.len(), mapped)
        };
        let (r, t) = compact(truth);
        let (c, p) = compact(pred);
        let mut counts = vec![vec![0u64; c]; r];
        for (&i, &j) in t.iter().zip(&p) {
            counts[i][j] += 1;
        }
        let row_sums = counts.iter().map(|row| row.iter().sum()).collect();
        let col_sums = (0..c).map(|j| counts.iter().map(|row| row[j]).sum()).collect();
        Ok(ContingencyTable {
            counts,
            row_sums,
            col_sums,
            n: truth.len() as u64,
        })
    }
}

fn choose2(x: u64) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index. Two single-cluster partitions score 1.
pub fn ari(truth: &[usize], pred: &[usize]) -> Result<f64> {
    let t = ContingencyTable::new(truth, pred)?;
    let index: f64 = t.counts.iter().flatten().map(|&c| choose2(c)).sum();
    let a: f64 = t.row_sums.iter().map(|&c| choose2(c)).sum();
    let b: f64 = t.col_sums.iter().map(|&c| choose2(c)).sum();
    let total = choose2(t.n);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = a * b / total;
    let max = 0.5 * (a + b);
    if (max - expected).abs() < 1e-12 {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

fn entropy(sums: &[u64], n: f64) -> f64 {
    sums.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

fn mutual_information(t: &ContingencyTable) -> f64 {
    let n = t.n as f64;
    let mut mi = 0.0;
    for (i, row) in t.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / n * (n * c / (t.row_sums[i] as f64 * t.col_sums[j] as f64)).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Expected mutual information under the hypergeometric permutation model.
fn expected_mutual_information(t: &ContingencyTable) -> f64 {
    let n = t.n;
    let nf = n as f64;
    let lg = |x: u64| ln_gamma(x as f64 + 1.0);
    let lg_n = lg(n);
    let mut emi = 0.0;
    for &a in &t.row_sums {
        for &b in &t.col_sums {
            let lo = (a + b).saturating_sub(n).max(1);
            let hi = a.min(b);
            let fixed = lg(a) + lg(b) + lg(n - a) + lg(n - b) - lg_n;
            for nij in lo..=hi {
                let x = nij as f64;
                let term = x / nf * (nf * x / (a as f64 * b as f64)).ln();
                let log_p = fixed - lg(nij) - lg(a - nij) - lg(b - nij) - lg(n + nij - a - b);
                emi += term * log_p.exp();
            }
        }
    }
    emi
}

/// Adjusted mutual information with the arithmetic-mean normalizer.
pub fn ami(truth: &[usize], pred: &[usize]) -> Result<f64> {
    let t = ContingencyTable::new(truth, pred)?;
    let (r, c) = (t.row_sums.len(), t.col_sums.len());
    let n = t.n as usize;
    if (r == 1 && c == 1) || (r == n && c == n) {
        return Ok(1.0);
    }
    let mi = mutual_information(&t);
    let emi = expected_mutual_information(&t);
    let nf = t.n as f64;
    let normalizer = 0.5 * (entropy(&t.row_sums, nf) + entropy(&t.col_sums, nf));
    let mut denom = normalizer - emi;
    if denom.abs() < f64::EPSILON {
        denom = if denom < 0.0 { -f64::EPSILON } else { f64::EPSILON };
    }
    Ok((mi - emi) / denom)
}

/// One right-censored observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub sample_id: String,
    pub duration: f64,
    /// `true` for an observed event, `false` for censoring.
    pub event: bool,
    pub group: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogrankResult {
    pub statistic: f64,
    pub degrees_of_freedom: usize,
    pub p_value: f64,
    /// `-log10(p)`; the p-value is floored at the smallest positive normal `f64`.
    pub neg_log10_p: f64,
    pub observed: Vec<f64>,
    pub expected: Vec<f64>,
}

/// Multi-group logrank test of equal hazards.
pub fn logrank(records: &[SurvivalRecord]) -> Result<LogrankResult> {
    let groups: Vec<usize> = records
        .iter()
        .map(|r| r.group)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    if groups.len() < 2 {
        return Err(SconeError::Degenerate(format!(
            "logrank needs at least two groups, found {}",
            groups.len()
        )));
    }
    if let Some(r) = records.iter().find(|r| !r.duration.is_finite() || r.duration < 0.0) {
        return Err(SconeError::Domain(format!(
            "sample {} has invalid duration {}",
            r.sample_id, r.duration
        )));
    }
    if !records.iter().any(|r| r.event) {
        return Err(SconeError::Undefined("logrank without any observed event".into()));
    }
    let g = groups.len();
    let slot = |group: usize| groups.binary_search(&group).unwrap();

    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].duration.total_cmp(&records[b].duration));
    let mut at_risk = vec![0f64; g];
    for r in records {
        at_risk[slot(r.group)] += 1.0;
    }

    let mut observed = vec![0.0; g];
    let mut expected = vec![0.0; g];
    let mut var = DMatrix::<f64>::zeros(g, g);
    let mut i = 0;
    while i < order.len() {
        let time = records[order[i]].duration;
        let mut j = i;
        let mut deaths = vec![0f64; g];
        let mut leaving = vec![0f64; g];
        while j < order.len() && records[order[j]].duration == time {
            let r = &records[order[j]];
            let s = slot(r.group);
            leaving[s] += 1.0;
            if r.event {
                deaths[s] += 1.0;
            }
            j += 1;
        }
        let d: f64 = deaths.iter().sum();
        let n: f64 = at_risk.iter().sum();
        if d > 0.0 {
            for a in 0..g {
                observed[a] += deaths[a];
                expected[a] += at_risk[a] * d / n;
            }
            if n > 1.0 {
                let f = d * (n - d) / (n - 1.0);
                for a in 0..g {
                    let pa = at_risk[a] / n;
                    for b in 0..g {
                        let delta = if a == b { 1.0 } else { 0.0 };
                        var[(a, b)] += f * pa * (delta - at_risk[b] / n);
                    }
                }
            }
        }
        for a in 0..g {
            at_risk[a] -= leaving[a];
        }
        i = j;
    }

    let diff = nalgebra::DVector::from_iterator(g, (0..g).map(|a| observed[a] - expected[a]));
    // Pseudo-inverse through the eigenbasis of the symmetric variance matrix.
    let eig = var.symmetric_eigen();
    let top = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-10 * top.max(1e-300);
    let mut statistic = 0.0;
    let mut rank = 0;
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda > tol {
            let proj = eig.eigenvectors.column(k).dot(&diff);
            statistic += proj * proj / lambda;
            rank += 1;
        }
    }
    if rank == 0 {
        return Err(SconeError::Degenerate("logrank variance matrix is zero".into()));
    }

    let p_value = if statistic > 0.0 {
        gamma_ur(rank as f64 / 2.0, statistic / 2.0)
    } else {
        1.0
    };
    Ok(LogrankResult {
        statistic,
        degrees_of_freedom: rank,
        p_value,
        neg_log10_p: -p_value.max(f64::MIN_POSITIVE).log10(),
        observed,
        expected,
    })
}
