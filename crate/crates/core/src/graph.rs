//! KNN graphs over sample rows, their undirected form, and modularity.

use crate::error::{Result, SconeError};
use crate::numerics::Matrix;

/// Directed k-nearest-neighbor graph: `neighbors(i)` lists the nodes whose
/// features flow into `i`, ordered nearest first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnnGraph {
    n: usize,
    k: usize,
    neighbors: Vec<usize>,
}

impl KnnGraph {
    /// Builds a graph from explicit neighbor lists, checking the KNN invariants.
    pub fn from_neighbors(lists: Vec<Vec<usize>>) -> Result<Self> {
        let n = lists.len();
        let k = lists.first().map_or(0, Vec::len);
        if k == 0 {
            return Err(SconeError::Parameter(
                "KNN graph needs at least one neighbor per node".into(),
            ));
        }
        let mut flat = Vec::with_capacity(n * k);
        for (i, list) in lists.into_iter().enumerate() {
            if list.len() != k {
                return Err(SconeError::Parameter(format!(
                    "node {i} has {} neighbors, expected {k}",
                    list.len()
                )));
            }
            for (p, &j) in list.iter().enumerate() {
                if j >= n || j == i || list[..p].contains(&j) {
                    return Err(SconeError::Parameter(format!(
                        "node {i} has invalid neighbor {j}"
                    )));
                }
            }
            flat.extend(list);
        }
        Ok(KnnGraph {
            n,
            k,
            neighbors: flat,
        })
    }

    #[inline]
    pub fn node_count(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.len()
    }

    /// Mean of the rows of `i`'s neighbors.
    pub fn neighborhood_average(&self, z: &Matrix, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; z.cols()];
        for &j in self.neighbors(i) {
            for (o, v) in out.iter_mut().zip(z.row(j)) {
                *o += v;
            }
        }
        let inv = 1.0 / self.k as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        out
    }

    /// [`KnnGraph::neighborhood_average`] for every node, as rows.
    pub fn neighborhood_means(&self, z: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.n, z.cols());
        for i in 0..self.n {
            let avg = self.neighborhood_average(z, i);
            out.row_mut(i).copy_from_slice(&avg);
        }
        out
    }

    /// Union of both edge directions with unit weights.
    pub fn symmetrize(&self) -> UndirectedWeightedGraph {
        let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(self.neighbors.len());
        for i in 0..self.n {
            for &j in self.neighbors(i) {
                pairs.push((i.min(j), i.max(j)));
            }
        }
        pairs.sort_unstable();
        pairs.dedup();
        let edges = pairs.into_iter().map(|(a, b)| (a, b, 1.0)).collect();
        UndirectedWeightedGraph::new(self.n, edges).expect("KNN edges are valid")
    }
}

/// Exact brute-force Euclidean KNN over the rows of `x`, self excluded.
///
/// Ties in distance are broken by the lower row index.
pub fn build_knn(x: &Matrix, k: usize) -> Result<KnnGraph> {
    let n = x.rows();
    if k == 0 {
        return Err(SconeError::Parameter("k must be at least 1".into()));
    }
    if n <= k {
        return Err(SconeError::Parameter(format!(
            "KNN with k={k} needs more than {k} rows, got {n}"
        )));
    }
    if !x.is_finite() {
        return Err(SconeError::Domain("KNN input contains non-finite values".into()));
    }
    let mut neighbors = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        cand.clear();
        let xi = x.row(i);
        for j in 0..n {
            if j == i {
                continue;
            }
            cand.push((sq_dist(xi, x.row(j)), j));
        }
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        cand.select_nth_unstable_by(k - 1, cmp);
        let nearest = &mut cand[..k];
        nearest.sort_unstable_by(cmp);
        neighbors.extend(nearest.iter().map(|&(_, j)| j));
    }
    Ok(KnnGraph { n, k, neighbors })
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Undirected graph with non-negative edge weights and no self-loops.
#[derive(Clone, Debug)]
pub struct UndirectedWeightedGraph {
    n: usize,
    edges: Vec<(usize, usize, f64)>,
    adjacency: Vec<Vec<(usize, f64)>>,
    total_weight: f64,
}

impl UndirectedWeightedGraph {
    /// Each `(i, j, w)` is one undirected edge; duplicates are merged by summing.
    pub fn new(n: usize, edges: Vec<(usize, usize, f64)>) -> Result<Self> {
        let mut norm: Vec<(usize, usize, f64)> = Vec::with_capacity(edges.len());
        for (i, j, w) in edges {
            if i >= n || j >= n {
                return Err(SconeError::Parameter(format!("edge ({i}, {j}) out of {n} nodes")));
            }
            if i == j {
                return Err(SconeError::Parameter(format!("self-loop at node {i}")));
            }
            if !(w >= 0.0 && w.is_finite()) {
                return Err(SconeError::Parameter(format!("edge weight {w} is not >= 0")));
            }
            norm.push((i.min(j), i.max(j), w));
        }
        norm.sort_by_key(|e| (e.0, e.1));
        let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(norm.len());
        for e in norm {
            match merged.last_mut() {
                Some(last) if (last.0, last.1) == (e.0, e.1) => last.2 += e.2,
                _ => merged.push(e),
            }
        }
        let mut adjacency = vec![Vec::new(); n];
        let mut total = 0.0;
        for &(i, j, w) in &merged {
            adjacency[i].push((j, w));
            adjacency[j].push((i, w));
            total += w;
        }
        Ok(UndirectedWeightedGraph {
            n,
            edges: merged,
            adjacency,
            total_weight: total,
        })
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    pub fn adjacency(&self, i: usize) -> &[(usize, f64)] {
        &self.adjacency[i]
    }

    /// Sum of edge weights, `m`.
    pub fn total_weight(&self) -> f64 {
        self.total_weight
    }

    pub fn degree(&self, i: usize) -> f64 {
        self.adjacency[i].iter().map(|&(_, w)| w).sum()
    }

    /// Resolution-parameterized Newman modularity of `partition`.
    pub fn modularity(&self, partition: &[usize], resolution: f64) -> Result<f64> {
        if self.total_weight <= 0.0 {
            return Err(SconeError::Undefined("modularity of a graph without edges".into()));
        }
        if partition.len() != self.n {
            return Err(SconeError::Contract(format!(
                "partition labels {} nodes of a {}-node graph",
                partition.len(),
                self.n
            )));
        }
        if resolution <= 0.0 {
            return Err(SconeError::Parameter(format!(
                "resolution must be positive, got {resolution}"
            )));
        }
        let communities = partition.iter().copied().max().map_or(0, |m| m + 1);
        let mut internal = vec![0.0; communities];
        let mut degree = vec![0.0; communities];
        for &(i, j, w) in &self.edges {
            if partition[i] == partition[j] {
                internal[partition[i]] += w;
            }
        }
        for i in 0..self.n {
            degree[partition[i]] += self.degree(i);
        }
        let m = self.total_weight;
        Ok(internal
            .iter()
            .zip(&degree)
            .map(|(&l, &d)| l / m - resolution * (d / (2.0 * m)).powi(2))
            .sum())
    }
}
