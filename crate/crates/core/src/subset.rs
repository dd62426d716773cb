//! Per-epoch overlapping subset pairs, their per-view matrices and graphs,
//! and the positive/negative pair lists that feed the contrastive loss.

use std::collections::{BTreeSet, HashMap};

use crate::data::{Likelihood, OmicsView};
use crate::error::{Result, SconeError};
use crate::graph::{build_knn, KnnGraph};
use crate::numerics::{Matrix, SeededRng};

/// Two equally sized subsets of union sample indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubsetPair {
    pub s1: Vec<usize>,
    pub s2: Vec<usize>,
}

impl SubsetPair {
    pub fn k_s(&self) -> usize {
        self.s1.len()
    }

    pub fn overlap(&self) -> usize {
        let a: BTreeSet<_> = self.s1.iter().collect();
        self.s2.iter().filter(|i| a.contains(i)).count()
    }
}

/// Aligned position pairs: `(position in first subset, position in second)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PairLists {
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
}

impl PairLists {
    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Positives followed by negatives.
    pub fn all(&self) -> Vec<(usize, usize)> {
        self.positives.iter().chain(&self.negatives).copied().collect()
    }
}

/// Smallest overlap that satisfies both the fraction and `|s1 u s2| <= n`.
fn overlap_range(n: usize, k_s: usize, min_overlap: f64) -> Result<(usize, usize)> {
    if !(min_overlap > 0.0 && min_overlap < 1.0) {
        return Err(SconeError::Parameter(format!(
            "minimum overlap must lie in (0, 1), got {min_overlap}"
        )));
    }
    if k_s < 2 {
        return Err(SconeError::Parameter(format!("subset size must be at least 2, got {k_s}")));
    }
    let lo = ((min_overlap * k_s as f64).ceil() as usize).max(1).max((2 * k_s).saturating_sub(n));
    let hi = k_s - 1;
    if lo > hi || k_s >= n {
        return Err(SconeError::Parameter(format!(
            "cannot draw two distinct subsets of {k_s} from {n} samples with at least {:.0}% overlap",
            min_overlap * 100.0
        )));
    }
    Ok((lo, hi))
}

/// Checks that `sample_subsets(n, k_s, min_overlap)` can succeed.
pub fn check_feasible(n: usize, k_s: usize, min_overlap: f64) -> Result<()> {
    overlap_range(n, k_s, min_overlap).map(|_| ())
}

/// Draws the overlap size uniformly from its admissible range, then the shared
/// indices and two disjoint remainders. Both subsets are returned shuffled.
pub fn sample_subsets(n: usize, k_s: usize, min_overlap: f64, rng: &mut SeededRng) -> Result<SubsetPair> {
    let (lo, hi) = overlap_range(n, k_s, min_overlap)?;
    let v = rng.int_inclusive(lo, hi);
    let drawn = rng.sample_indices(n, 2 * k_s - v);
    let (shared, rest) = drawn.split_at(v);
    let (only1, only2) = rest.split_at(k_s - v);
    let mut s1: Vec<usize> = shared.iter().chain(only1).copied().collect();
    let mut s2: Vec<usize> = shared.iter().chain(only2).copied().collect();
    rng.shuffle(&mut s1);
    rng.shuffle(&mut s2);
    Ok(SubsetPair { s1, s2 })
}

/// Positives for every shared sample, negatives matched one-to-one between the
/// two exclusive sets after a seeded shuffle.
pub fn build_pairs(pair: &SubsetPair, rng: &mut SeededRng) -> Result<PairLists> {
    let pos2: HashMap<usize, usize> = pair.s2.iter().enumerate().map(|(p, &i)| (i, p)).collect();
    let pos1: HashMap<usize, usize> = pair.s1.iter().enumerate().map(|(p, &i)| (i, p)).collect();
    let mut positives = Vec::new();
    let mut excl1 = Vec::new();
    for (p, i) in pair.s1.iter().enumerate() {
        match pos2.get(i) {
            Some(&q) => positives.push((p, q)),
            None => excl1.push(p),
        }
    }
    let mut excl2: Vec<usize> = (0..pair.s2.len()).filter(|&q| !pos1.contains_key(&pair.s2[q])).collect();
    if excl1.is_empty() || excl2.is_empty() {
        return Err(SconeError::Sampling("subsets have no exclusive samples to pair as negatives".into()));
    }
    rng.shuffle(&mut excl1);
    rng.shuffle(&mut excl2);
    let negatives = excl1.into_iter().zip(excl2).collect();
    Ok(PairLists { positives, negatives })
}

/// Views aligned to the sorted union of their sample ids.
#[derive(Clone, Debug)]
pub struct AlignedViews {
    pub union_ids: Vec<String>,
    pub views: Vec<AlignedView>,
}

#[derive(Clone, Debug)]
pub struct AlignedView {
    pub name: String,
    pub x: Matrix,
    pub likelihood: Likelihood,
    /// Union index of each row.
    pub union_index: Vec<usize>,
    /// Row of each union sample, if the view contains it.
    pub row_of: Vec<Option<usize>>,
}

impl AlignedViews {
    pub fn new(views: &[OmicsView]) -> Result<Self> {
        if views.is_empty() {
            return Err(SconeError::Parameter("at least one view is required".into()));
        }
        let union_ids: Vec<String> = views
            .iter()
            .flat_map(|v| v.sample_ids.iter().cloned())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let lookup: HashMap<&str, usize> = union_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let aligned = views
            .iter()
            .map(|v| {
                let union_index: Vec<usize> = v.sample_ids.iter().map(|s| lookup[s.as_str()]).collect();
                let mut row_of = vec![None; union_ids.len()];
                for (r, &u) in union_index.iter().enumerate() {
                    row_of[u] = Some(r);
                }
                AlignedView {
                    name: v.name.clone(),
                    x: v.x.clone(),
                    likelihood: v.likelihood,
                    union_index,
                    row_of,
                }
            })
            .collect();
        Ok(AlignedViews {
            union_ids,
            views: aligned,
        })
    }

    pub fn n(&self) -> usize {
        self.union_ids.len()
    }
}

/// One view restricted to a subset.
#[derive(Clone, Debug)]
pub struct SubsetView {
    pub view: usize,
    pub x: Matrix,
    pub graph: KnnGraph,
    /// Subset position of each extracted row.
    pub positions: Vec<usize>,
}

/// Extracts the subset's rows present in the view, in subset order, and builds
/// a fresh KNN graph on them.
pub fn materialize_view(view: usize, aligned: &AlignedView, subset: &[usize], k_k: usize) -> Result<SubsetView> {
    let mut rows = Vec::with_capacity(subset.len());
    let mut positions = Vec::with_capacity(subset.len());
    for (p, &u) in subset.iter().enumerate() {
        if let Some(r) = aligned.row_of[u] {
            rows.push(r);
            positions.push(p);
        }
    }
    if rows.len() <= k_k {
        return Err(SconeError::Parameter(format!(
            "view {} has {} samples in the subset, needs more than k_k = {k_k}",
            aligned.name,
            rows.len()
        )));
    }
    let x = aligned.x.select_rows(&rows);
    let graph = build_knn(&x, k_k)?;
    Ok(SubsetView {
        view,
        x,
        graph,
        positions,
    })
}

/// Restricts subset-position pairs to samples present in both views' subset
/// rows and re-expresses them as view-local row indices.
pub fn pairs_for_view(pairs: &PairLists, first: &SubsetView, second: &SubsetView, k_s: usize) -> PairLists {
    let local = |positions: &[usize]| {
        let mut map = vec![None; k_s];
        for (r, &p) in positions.iter().enumerate() {
            map[p] = Some(r);
        }
        map
    };
    let (m1, m2) = (local(&first.positions), local(&second.positions));
    let keep = |list: &[(usize, usize)]| {
        list.iter()
            .filter_map(|&(p, q)| Some((m1[p]?, m2[q]?)))
            .collect::<Vec<_>>()
    };
    PairLists {
        positives: keep(&pairs.positives),
        negatives: keep(&pairs.negatives),
    }
}

/// Everything one training epoch consumes.
#[derive(Clone, Debug)]
pub struct SubsetBatch {
    pub pair: SubsetPair,
    pub pairs: PairLists,
    pub first: Vec<SubsetView>,
    pub second: Vec<SubsetView>,
    pub view_pairs: Vec<PairLists>,
}

impl SubsetBatch {
    pub fn new(aligned: &AlignedViews, pair: SubsetPair, pairs: PairLists, k_k: usize) -> Result<Self> {
        let k_s = pair.k_s();
        let mut first = Vec::with_capacity(aligned.views.len());
        let mut second = Vec::with_capacity(aligned.views.len());
        let mut view_pairs = Vec::with_capacity(aligned.views.len());
        for (o, v) in aligned.views.iter().enumerate() {
            let a = materialize_view(o, v, &pair.s1, k_k)?;
            let b = materialize_view(o, v, &pair.s2, k_k)?;
            view_pairs.push(pairs_for_view(&pairs, &a, &b, k_s));
            first.push(a);
            second.push(b);
        }
        Ok(SubsetBatch {
            pair,
            pairs,
            first,
            second,
            view_pairs,
        })
    }

    /// Draws subsets until every view has enough rows and at least one positive.
    pub fn sample(
        aligned: &AlignedViews,
        k_s: usize,
        min_overlap: f64,
        k_k: usize,
        rng: &mut SeededRng,
        max_attempts: usize,
    ) -> Result<Self> {
        let mut last = None;
        for _ in 0..max_attempts.max(1) {
            let pair = sample_subsets(aligned.n(), k_s, min_overlap, rng)?;
            let pairs = build_pairs(&pair, rng)?;
            match SubsetBatch::new(aligned, pair, pairs, k_k) {
                Ok(batch) if batch.view_pairs.iter().all(|p| !p.positives.is_empty()) => return Ok(batch),
                Ok(_) => last = Some(SconeError::Sampling("a view has no shared samples in the subset pair".into())),
                Err(e) => last = Some(e),
            }
        }
        Err(last.unwrap_or_else(|| SconeError::Sampling("no subset pair drawn".into())))
    }

    pub fn edge_count(&self) -> usize {
        self.first.iter().chain(&self.second).map(|v| v.graph.edge_count()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bounds_at_n10() {
        let mut rng = SeededRng::new(1);
        for _ in 0..500 {
            let p = sample_subsets(10, 5, 0.1, &mut rng).unwrap();
            let v = p.overlap();
            assert!((1..=4).contains(&v));
            assert!((6..=9).contains(&(10 - v)));
        }
        assert!(sample_subsets(4, 4, 0.1, &mut rng).is_err());
        assert!(sample_subsets(10, 5, 0.0, &mut rng).is_err());
    }

    #[test]
    fn invariants_hold_over_many_draws() {
        let mut rng = SeededRng::new(2);
        for _ in 0..10_000 {
            let p = sample_subsets(100, 20, 0.1, &mut rng).unwrap();
            let a: BTreeSet<_> = p.s1.iter().collect();
            let b: BTreeSet<_> = p.s2.iter().collect();
            assert_eq!(a.len(), 20);
            assert_eq!(b.len(), 20);
            assert_ne!(a, b);
            assert!(a.union(&b).count() > 20);
            assert!(a.intersection(&b).count() >= 2);
            assert!(p.s1.iter().chain(&p.s2).all(|&i| i < 100));
        }
    }

    #[test]
    fn selection_frequency_is_uniform() {
        let (n, k_s, epochs) = (200, 50, 2000);
        let mut rng = SeededRng::new(3);
        let mut counts = vec![0f64; n];
        let mut total = 0.0;
        for _ in 0..epochs {
            let p = sample_subsets(n, k_s, 0.1, &mut rng).unwrap();
            let union: BTreeSet<_> = p.s1.iter().chain(&p.s2).collect();
            total += union.len() as f64;
            for &i in union {
                counts[i] += 1.0;
            }
        }
        let expected = total / n as f64;
        let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        // chi-square with 199 df: mean 199, sd ~ 20; allow 3 sd.
        assert!((chi2 - 199.0).abs() < 3.0 * (2.0f64 * 199.0).sqrt(), "chi2 {chi2}");
    }

    #[test]
    fn pair_example() {
        let pair = SubsetPair {
            s1: vec![1, 2, 3],
            s2: vec![2, 3, 4],
        };
        let lists = build_pairs(&pair, &mut SeededRng::new(0)).unwrap();
        assert_eq!(lists.positives, vec![(1, 0), (2, 1)]);
        assert_eq!(lists.negatives, vec![(0, 2)]);
        let same = SubsetPair {
            s1: vec![1, 2],
            s2: vec![2, 1],
        };
        assert!(matches!(build_pairs(&same, &mut SeededRng::new(0)), Err(SconeError::Sampling(_))));
    }

    #[test]
    fn negatives_follow_min_rule_and_are_deterministic() {
        let pair = SubsetPair {
            s1: vec![0, 1, 2, 3, 10, 11, 12, 13, 14],
            s2: vec![0, 1, 2, 3, 4, 5, 6, 20, 21],
        };
        let a = build_pairs(&pair, &mut SeededRng::new(9)).unwrap();
        let b = build_pairs(&pair, &mut SeededRng::new(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.positives.len(), 4);
        assert_eq!(a.negatives.len(), 5);
        let firsts: BTreeSet<_> = a.negatives.iter().map(|n| n.0).collect();
        let seconds: BTreeSet<_> = a.negatives.iter().map(|n| n.1).collect();
        assert_eq!(firsts.len(), 5);
        assert_eq!(seconds.len(), 5);
        for &(p, q) in &a.negatives {
            assert!(!pair.s2.contains(&pair.s1[p]));
            assert!(!pair.s1.contains(&pair.s2[q]));
        }
    }

    fn aligned_from(x: Matrix, ids: &[&str]) -> AlignedViews {
        let feats = (0..x.cols()).map(|i| format!("f{i}")).collect();
        let v = OmicsView::new("v", ids.iter().map(|s| s.to_string()).collect(), feats, x, Likelihood::Gaussian).unwrap();
        AlignedViews::new(&[v]).unwrap()
    }

    #[test]
    fn materialize_full_subset_reproduces_data() {
        let mut rng = SeededRng::new(4);
        let x = rng.normal_matrix(12, 3, 1.0);
        let ids: Vec<String> = (0..12).map(|i| format!("s{i:02}")).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let al = aligned_from(x.clone(), &refs);
        let all: Vec<usize> = (0..12).collect();
        let sv = materialize_view(0, &al.views[0], &all, 3).unwrap();
        assert_eq!(sv.x, x);
        assert_eq!(sv.graph, build_knn(&x, 3).unwrap());

        let subset = vec![7, 2, 9, 0, 5];
        let sv = materialize_view(0, &al.views[0], &subset, 2).unwrap();
        for (r, &u) in subset.iter().enumerate() {
            assert_eq!(sv.x.row(r), x.row(u));
        }
        let err = materialize_view(0, &al.views[0], &[1, 2], 2).unwrap_err();
        assert!(err.to_string().contains("view v"));
    }

    #[test]
    fn duplicate_rows_break_ties_deterministically() {
        let x = Matrix::from_rows(&[[1.0], [1.0], [1.0], [1.0], [5.0]]).unwrap();
        let al = aligned_from(x, &["a", "b", "c", "d", "e"]);
        let a = materialize_view(0, &al.views[0], &[4, 3, 2, 1, 0], 2).unwrap();
        let b = materialize_view(0, &al.views[0], &[4, 3, 2, 1, 0], 2).unwrap();
        assert_eq!(a.graph, b.graph);
        assert_eq!(a.graph.neighbors(1), &[2, 3]);
    }

    #[test]
    fn subset_graph_differs_from_full_graph() {
        // Node 0's nearest neighbor is node 1 in the full data; dropping 1 leaves 2.
        let x = Matrix::from_rows(&[[0.0], [1.0], [3.0], [10.0], [11.0]]).unwrap();
        let al = aligned_from(x.clone(), &["a", "b", "c", "d", "e"]);
        let full = build_knn(&x, 1).unwrap();
        assert_eq!(full.neighbors(0), &[1]);
        let sub = materialize_view(0, &al.views[0], &[0, 2, 3, 4], 1).unwrap();
        assert_eq!(sub.graph.neighbors(0), &[1]);
        assert_eq!(sub.x.row(1), &[3.0]);
    }

    #[test]
    fn view_pairs_skip_missing_samples() {
        let mut rng = SeededRng::new(5);
        let ids_a: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
        let ids_b: Vec<String> = (0..10).filter(|i| i % 2 == 0).map(|i| format!("s{i}")).collect();
        let fa = (0..2).map(|i| format!("a{i}")).collect();
        let fb = (0..2).map(|i| format!("b{i}")).collect();
        let a = OmicsView::new("a", ids_a, fa, rng.normal_matrix(10, 2, 1.0), Likelihood::Gaussian).unwrap();
        let b = OmicsView::new("b", ids_b, fb, rng.normal_matrix(5, 2, 1.0), Likelihood::Gaussian).unwrap();
        let al = AlignedViews::new(&[a, b]).unwrap();
        let pair = SubsetPair {
            s1: vec![0, 1, 2, 3, 4, 5],
            s2: vec![2, 3, 4, 5, 6, 7],
        };
        let pairs = build_pairs(&pair, &mut rng).unwrap();
        let batch = SubsetBatch::new(&al, pair.clone(), pairs, 1).unwrap();
        assert_eq!(batch.view_pairs[0].len(), batch.pairs.len());
        let vb = &batch.view_pairs[1];
        for &(r, s) in vb.positives.iter().chain(&vb.negatives) {
            let u1 = pair.s1[batch.first[1].positions[r]];
            let u2 = pair.s2[batch.second[1].positions[s]];
            let id_even = |u: usize| al.union_ids[u].trim_start_matches('s').parse::<usize>().unwrap() % 2 == 0;
            assert!(id_even(u1) && id_even(u2));
        }
        assert_eq!(vb.positives.len(), 2);
    }

    proptest! {
        #[test]
        fn pair_positions_are_valid(seed in 0u64..500, n in 12usize..60, frac in 0.2f64..0.5) {
            let k_s = ((n as f64 * frac) as usize).max(3);
            let mut rng = SeededRng::new(seed);
            let p = sample_subsets(n, k_s, 0.1, &mut rng).unwrap();
            let lists = build_pairs(&p, &mut rng).unwrap();
            prop_assert_eq!(lists.positives.len(), p.overlap());
            for &(a, b) in &lists.positives {
                prop_assert_eq!(p.s1[a], p.s2[b]);
            }
            for &(a, b) in &lists.negatives {
                prop_assert!(a < k_s && b < k_s && p.s1[a] != p.s2[b]);
            }
            prop_assert_eq!(lists.negatives.len(), k_s - p.overlap());
        }
    }
}
