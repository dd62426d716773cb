//! Louvain community detection and the resolution sweep.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SconeError};
use crate::graph::{build_knn, UndirectedWeightedGraph};
use crate::numerics::{Matrix, SeededRng};

/// The sweep grid `0.1, 0.2, ..., 2.0`.
pub fn sweep_resolutions() -> Vec<f64> {
    (1..=20).map(|k| k as f64 / 10.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    /// Contiguous labels from 0, numbered by first appearance.
    pub labels: Vec<usize>,
    pub count: usize,
    /// Modularity at `resolution`.
    pub modularity: f64,
    pub resolution: f64,
    /// Modularity at resolution 1.
    pub standard_modularity: f64,
}

impl Partition {
    fn from_labels(g: &UndirectedWeightedGraph, labels: &[usize], resolution: f64) -> Result<Self> {
        let labels = relabel(labels);
        let count = labels.iter().max().map_or(0, |m| m + 1);
        Ok(Partition {
            modularity: g.modularity(&labels, resolution)?,
            standard_modularity: g.modularity(&labels, 1.0)?,
            labels,
            count,
            resolution,
        })
    }
}

fn relabel(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect()
}

/// Weighted graph in the form the local-move phase works on.
struct Level {
    adj: Vec<Vec<(usize, f64)>>,
    self_loops: Vec<f64>,
    degree: Vec<f64>,
}

impl Level {
    fn from_graph(g: &UndirectedWeightedGraph) -> Self {
        let n = g.node_count();
        let adj: Vec<Vec<(usize, f64)>> = (0..n).map(|i| g.adjacency(i).to_vec()).collect();
        let degree = (0..n).map(|i| g.degree(i)).collect();
        Level {
            adj,
            self_loops: vec![0.0; n],
            degree,
        }
    }

    fn len(&self) -> usize {
        self.adj.len()
    }

    /// Collapses each community into a node; internal weight becomes a self loop.
    fn aggregate(&self, comm: &[usize], count: usize) -> Level {
        let mut self_loops = vec![0.0; count];
        let mut degree = vec![0.0; count];
        let mut maps: Vec<std::collections::BTreeMap<usize, f64>> = vec![Default::default(); count];
        for i in 0..self.len() {
            let ci = comm[i];
            degree[ci] += self.degree[i];
            self_loops[ci] += self.self_loops[i];
            for &(j, w) in &self.adj[i] {
                let cj = comm[j];
                if ci == cj {
                    // Each internal edge is seen from both ends.
                    self_loops[ci] += 0.5 * w;
                } else {
                    *maps[ci].entry(cj).or_insert(0.0) += w;
                }
            }
        }
        Level {
            adj: maps.into_iter().map(|m| m.into_iter().collect()).collect(),
            self_loops,
            degree,
        }
    }
}

/// One local-move sweep to convergence; returns whether any node moved.
fn local_moves(level: &Level, comm: &mut [usize], m: f64, resolution: f64, rng: &mut SeededRng) -> bool {
    let n = level.len();
    let mut total: Vec<f64> = vec![0.0; n];
    for i in 0..n {
        total[comm[i]] += level.degree[i];
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut weights_to = vec![0.0; n];
    let mut touched: Vec<usize> = Vec::new();
    let mut moved_any = false;
    loop {
        let mut moved = false;
        for &i in &order {
            let ci = comm[i];
            let ki = level.degree[i];
            for &(j, w) in &level.adj[i] {
                let cj = comm[j];
                if weights_to[cj] == 0.0 {
                    touched.push(cj);
                }
                weights_to[cj] += w;
            }
            total[ci] -= ki;
            let gain = |c: usize, w_in: f64, total: &[f64]| w_in / m - resolution * total[c] * ki / (2.0 * m * m);
            let mut best = ci;
            let mut best_gain = gain(ci, weights_to[ci], &total);
            for &c in &touched {
                let g = gain(c, weights_to[c], &total);
                if g > best_gain + 1e-12 {
                    best = c;
                    best_gain = g;
                }
            }
            total[best] += ki;
            if best != ci {
                comm[i] = best;
                moved = true;
                moved_any = true;
            }
            for &c in &touched {
                weights_to[c] = 0.0;
            }
            touched.clear();
        }
        if !moved {
            break;
        }
    }
    moved_any
}

/// Louvain run with the modularity reached after every aggregation level.
#[derive(Clone, Debug)]
pub struct LouvainTrace {
    pub partition: Partition,
    pub level_modularity: Vec<f64>,
}

pub fn louvain_traced(g: &UndirectedWeightedGraph, resolution: f64, rng: &mut SeededRng) -> Result<LouvainTrace> {
    if resolution <= 0.0 {
        return Err(SconeError::Parameter(format!("resolution must be positive, got {resolution}")));
    }
    let n = g.node_count();
    let m = g.total_weight();
    if n == 0 || m <= 0.0 {
        return Err(SconeError::Undefined("Louvain needs a graph with edges".into()));
    }
    let mut node_comm: Vec<usize> = (0..n).collect();
    let mut level = Level::from_graph(g);
    let mut level_modularity = vec![g.modularity(&node_comm, resolution)?];
    loop {
        let mut comm: Vec<usize> = (0..level.len()).collect();
        if !local_moves(&level, &mut comm, m, resolution, rng) {
            break;
        }
        let comm = relabel(&comm);
        let count = comm.iter().max().map_or(0, |c| c + 1);
        for c in node_comm.iter_mut() {
            *c = comm[*c];
        }
        let q = g.modularity(&node_comm, resolution)?;
        let prev = *level_modularity.last().unwrap();
        if q < prev - 1e-10 {
            return Err(SconeError::Contract(format!(
                "Louvain level lowered modularity from {prev} to {q}"
            )));
        }
        level_modularity.push(q);
        if count == level.len() {
            break;
        }
        level = level.aggregate(&comm, count);
    }
    Ok(LouvainTrace {
        partition: Partition::from_labels(g, &node_comm, resolution)?,
        level_modularity,
    })
}

/// Two-phase Louvain: local moves from singletons, then aggregation, repeated
/// until no move improves modularity. Node visit order is shuffled by `rng`.
pub fn louvain(g: &UndirectedWeightedGraph, resolution: f64, rng: &mut SeededRng) -> Result<Partition> {
    Ok(louvain_traced(g, resolution, rng)?.partition)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepMode {
    BestModularity,
    TargetK(usize),
}

/// Every sweep point's partition, in grid order.
pub fn sweep_all(g: &UndirectedWeightedGraph, rng: &mut SeededRng) -> Result<Vec<Partition>> {
    sweep_resolutions()
        .into_iter()
        .map(|r| louvain(g, r, &mut rng.fork()))
        .collect()
}

fn pick_best(candidates: impl Iterator<Item = Partition>) -> Option<Partition> {
    // Strictly greater keeps the lowest resolution among ties.
    candidates.fold(None, |best: Option<Partition>, p| match best {
        Some(b) if b.modularity >= p.modularity => Some(b),
        _ => Some(p),
    })
}

/// Louvain at every grid resolution; returns the partition with the highest
/// modularity at its own resolution, optionally among those with exactly `k`
/// communities.
pub fn resolution_sweep(g: &UndirectedWeightedGraph, mode: SweepMode, rng: &mut SeededRng) -> Result<Partition> {
    if let SweepMode::TargetK(k) = mode {
        if k < 2 {
            return Err(SconeError::Parameter(format!("target cluster count must be at least 2, got {k}")));
        }
    }
    let all = sweep_all(g, rng)?;
    match mode {
        SweepMode::BestModularity => {
            pick_best(all.into_iter()).ok_or_else(|| SconeError::Undefined("empty sweep".into()))
        }
        SweepMode::TargetK(k) => {
            pick_best(all.into_iter().filter(|p| p.count == k)).ok_or(SconeError::NoValidClustering { target: k })
        }
    }
}

/// KNN graph of an embedding, symmetrized with unit weights.
pub fn embedding_graph(z: &Matrix, k: usize) -> Result<UndirectedWeightedGraph> {
    Ok(build_knn(z, k)?.symmetrize())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cliques(count: usize, size: usize, bridge: bool) -> UndirectedWeightedGraph {
        let mut edges = Vec::new();
        for c in 0..count {
            for i in 0..size {
                for j in i + 1..size {
                    edges.push((c * size + i, c * size + j, 1.0));
                }
            }
            if bridge && c + 1 < count {
                edges.push((c * size, (c + 1) * size, 1.0));
            }
        }
        UndirectedWeightedGraph::new(count * size, edges).unwrap()
    }

    #[test]
    fn disconnected_cliques_are_recovered() {
        let g = cliques(2, 10, false);
        for seed in 0..5 {
            let p = louvain(&g, 1.0, &mut SeededRng::new(seed)).unwrap();
            assert_eq!(p.count, 2);
            assert!(p.labels[..10].iter().all(|&l| l == p.labels[0]));
            assert!(p.labels[10..].iter().all(|&l| l == p.labels[10]));
            assert!((p.modularity - g.modularity(&p.labels, 1.0).unwrap()).abs() < 1e-9);
        }
    }

    fn set_partitions(n: usize) -> Vec<Vec<usize>> {
        fn rec(i: usize, n: usize, cur: &mut Vec<usize>, max: usize, out: &mut Vec<Vec<usize>>) {
            if i == n {
                out.push(cur.clone());
                return;
            }
            for l in 0..=max + 1 {
                cur.push(l);
                rec(i + 1, n, cur, max.max(l), out);
                cur.pop();
            }
        }
        let mut out = Vec::new();
        let mut cur = vec![0];
        rec(1, n, &mut cur, 0, &mut out);
        out
    }

    #[test]
    fn complete_graph_is_one_community() {
        for n in 3..=8 {
            let edges = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j, 1.0))).collect();
            let g = UndirectedWeightedGraph::new(n, edges).unwrap();
            let best = set_partitions(n)
                .iter()
                .map(|p| g.modularity(p, 1.0).unwrap())
                .fold(f64::NEG_INFINITY, f64::max);
            let p = louvain(&g, 1.0, &mut SeededRng::new(n as u64)).unwrap();
            assert_eq!(p.count, 1);
            assert!((p.modularity - best).abs() < 1e-12);
        }
    }

    #[test]
    fn louvain_matches_exhaustive_optimum_on_small_graphs() {
        let mut rng = SeededRng::new(17);
        for _ in 0..20 {
            let n = 8;
            let mut edges = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    if rng.uniform() < 0.35 {
                        edges.push((i, j, 1.0 + rng.uniform()));
                    }
                }
            }
            if edges.is_empty() {
                continue;
            }
            let g = UndirectedWeightedGraph::new(n, edges).unwrap();
            let best = set_partitions(n)
                .iter()
                .map(|p| g.modularity(p, 1.0).unwrap())
                .fold(f64::NEG_INFINITY, f64::max);
            let trace = louvain_traced(&g, 1.0, &mut rng.fork()).unwrap();
            let singletons = g.modularity(&(0..n).collect::<Vec<_>>(), 1.0).unwrap();
            assert!(trace.partition.modularity >= singletons - 1e-12);
            assert!(trace.partition.modularity <= best + 1e-12);
            for w in trace.level_modularity.windows(2) {
                assert!(w[1] >= w[0] - 1e-10);
            }
        }
    }

    fn blobs(seed: u64) -> Matrix {
        let mut rng = SeededRng::new(seed);
        let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
        Matrix::from_fn(90, 2, |r, c| centers[r / 30][c] + rng.normal())
    }

    #[test]
    fn sweep_finds_three_blobs() {
        let g = embedding_graph(&blobs(3), 10).unwrap();
        let mut rng = SeededRng::new(1);
        let best = resolution_sweep(&g, SweepMode::BestModularity, &mut rng.fork()).unwrap();
        assert_eq!(best.count, 3);
        let truth: Vec<usize> = (0..90).map(|i| i / 30).collect();
        assert_eq!(crate::evaluation::ari(&truth, &best.labels).unwrap(), 1.0);
        let k3 = resolution_sweep(&g, SweepMode::TargetK(3), &mut rng.fork()).unwrap();
        assert_eq!(k3.labels, best.labels);
        let all = sweep_all(&g, &mut rng.fork()).unwrap();
        assert!(all.iter().all(|p| best.modularity >= p.modularity));
    }

    #[test]
    fn impossible_target_is_reported() {
        let g = cliques(2, 5, true);
        let err = resolution_sweep(&g, SweepMode::TargetK(50), &mut SeededRng::new(0)).unwrap_err();
        assert!(matches!(err, SconeError::NoValidClustering { target: 50 }));
        assert!(resolution_sweep(&g, SweepMode::TargetK(1), &mut SeededRng::new(0)).is_err());
    }

    #[test]
    fn labels_are_contiguous_and_deterministic() {
        let g = cliques(4, 6, true);
        let a = louvain(&g, 1.0, &mut SeededRng::new(5)).unwrap();
        let b = louvain(&g, 1.0, &mut SeededRng::new(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.labels[0], 0);
        let max = *a.labels.iter().max().unwrap();
        assert_eq!(max + 1, a.count);
        assert_eq!(a.count, 4);
    }
}
