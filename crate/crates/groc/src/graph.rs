//! Graph representation, preprocessing, receptive fields, synthetic
//! generation, and on-disk I/O.
//!
//! A [`Graph`] is immutable after construction: undirected simple edges in
//! canonical `u < v` order (edge ids are positions in that list), binary node
//! features, and optional labels/splits. Self-loops are never stored; the
//! propagation operator adds them during normalization.

use std::collections::VecDeque;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::rng::{derive_rng, stream};

pub mod io;

/// Probability that a one-hot feature bit is flipped by the synthetic
/// generator.
const SBM_FEATURE_NOISE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub u: u32,
    pub v: u32,
    pub w: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    features: DenseMatrix,
    edges: Vec<Edge>,
    labels: Option<Vec<u32>>,
    splits: Option<Splits>,
}

/// Unvalidated input: features may be arbitrary reals, edges may be directed,
/// duplicated, or self-looping. [`preprocess`] turns this into a [`Graph`].
#[derive(Clone, Debug, Default)]
pub struct RawGraph {
    pub num_nodes: usize,
    pub features: Vec<Vec<f64>>,
    pub edges: Vec<(usize, usize, f64)>,
    pub labels: Option<Vec<u32>>,
    pub splits: Option<Splits>,
}

impl From<&Graph> for RawGraph {
    fn from(g: &Graph) -> Self {
        RawGraph {
            num_nodes: g.num_nodes,
            features: (0..g.num_nodes).map(|i| g.features.row(i).to_vec()).collect(),
            edges: g
                .edges
                .iter()
                .map(|e| (e.u as usize, e.v as usize, e.w))
                .collect(),
            labels: g.labels.clone(),
            splits: g.splits.clone(),
        }
    }
}

/// Binarize features (x > 0), symmetrize and dedupe edges, drop self-loops.
///
/// Duplicate edges keep the maximum weight so the merge is independent of
/// input order. Isolated nodes are kept; they receive self-loop-only
/// propagation downstream.
pub fn preprocess(raw: RawGraph) -> Result<Graph> {
    let n = raw.num_nodes;
    if n == 0 {
        return Err(Error::InvalidGraph("empty graph (n = 0)".into()));
    }
    if raw.features.len() != n {
        return Err(Error::InvalidGraph(format!(
            "feature rows {} != num_nodes {}",
            raw.features.len(),
            n
        )));
    }
    let d = raw.features.first().map(|r| r.len()).unwrap_or(0);
    let mut values = Vec::with_capacity(n * d);
    for row in &raw.features {
        if row.len() != d {
            return Err(Error::InvalidGraph("ragged feature rows".into()));
        }
        for &x in row {
            if !x.is_finite() {
                return Err(Error::InvalidGraph("non-finite feature value".into()));
            }
            values.push(if x > 0.0 { 1.0 } else { 0.0 });
        }
    }
    let features = DenseMatrix::from_vec(n, d, values)?;

    let mut canonical: Vec<Edge> = Vec::with_capacity(raw.edges.len());
    for &(a, b, w) in &raw.edges {
        if a >= n || b >= n {
            return Err(Error::InvalidGraph(format!(
                "edge ({a},{b}) references a node >= {n}"
            )));
        }
        if a == b {
            continue;
        }
        if !w.is_finite() || w <= 0.0 || w > 1.0 {
            return Err(Error::InvalidGraph(format!(
                "edge ({a},{b}) weight {w} outside (0,1]"
            )));
        }
        let (u, v) = if a < b { (a, b) } else { (b, a) };
        canonical.push(Edge {
            u: u as u32,
            v: v as u32,
            w,
        });
    }
    canonical.sort_by_key(|e| (e.u, e.v));
    canonical.dedup_by(|next, kept| {
        if (kept.u, kept.v) == (next.u, next.v) {
            kept.w = kept.w.max(next.w);
            true
        } else {
            false
        }
    });

    if let Some(labels) = &raw.labels {
        if labels.len() != n {
            return Err(Error::InvalidGraph("label count != num_nodes".into()));
        }
    }
    if let Some(splits) = &raw.splits {
        validate_splits(splits, n)?;
    }
    let splits = raw.splits.map(|mut s| {
        s.train.sort_unstable();
        s.val.sort_unstable();
        s.test.sort_unstable();
        s
    });

    Ok(Graph {
        num_nodes: n,
        features,
        edges: canonical,
        labels: raw.labels,
        splits,
    })
}

fn validate_splits(splits: &Splits, n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for (name, ids) in [
        ("train", &splits.train),
        ("val", &splits.val),
        ("test", &splits.test),
    ] {
        for &id in ids {
            if id as usize >= n {
                return Err(Error::InvalidGraph(format!(
                    "{name} split references node {id} >= {n}"
                )));
            }
            if seen[id as usize] {
                return Err(Error::InvalidGraph(format!(
                    "node {id} appears in more than one split"
                )));
            }
            seen[id as usize] = true;
        }
    }
    Ok(())
}

impl Graph {
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn splits(&self) -> Option<&Splits> {
        self.splits.as_ref()
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().copied().max().map_or(0, |m| m as usize + 1))
    }

    /// Same metadata, different edge set. Edges must already be simple; they
    /// are re-canonicalized here.
    pub fn with_edges(&self, edges: Vec<Edge>) -> Result<Graph> {
        let mut edges = edges;
        for e in &mut edges {
            if e.u == e.v {
                return Err(Error::InvalidGraph("self-loop in edge set".into()));
            }
            if e.u > e.v {
                std::mem::swap(&mut e.u, &mut e.v);
            }
        }
        edges.sort_by_key(|e| (e.u, e.v));
        for pair in edges.windows(2) {
            if (pair[0].u, pair[0].v) == (pair[1].u, pair[1].v) {
                return Err(Error::InvalidGraph(format!(
                    "duplicate edge ({},{})",
                    pair[0].u, pair[0].v
                )));
            }
        }
        Ok(Graph {
            num_nodes: self.num_nodes,
            features: self.features.clone(),
            edges,
            labels: self.labels.clone(),
            splits: self.splits.clone(),
        })
    }

    /// Same structure, different feature matrix (used by feature masking).
    pub fn with_features(&self, features: DenseMatrix) -> Result<Graph> {
        if features.shape() != self.features.shape() {
            return Err(Error::ShapeMismatch("with_features".into()));
        }
        Ok(Graph {
            num_nodes: self.num_nodes,
            features,
            edges: self.edges.clone(),
            labels: self.labels.clone(),
            splits: self.splits.clone(),
        })
    }

    /// Per-node incidence lists `(neighbor, edge id)`, built on demand.
    pub fn incidence(&self) -> Vec<Vec<(u32, u32)>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for (id, e) in self.edges.iter().enumerate() {
            adj[e.u as usize].push((e.v, id as u32));
            adj[e.v as usize].push((e.u, id as u32));
        }
        adj
    }

    /// Unweighted degrees.
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.num_nodes];
        for e in &self.edges {
            deg[e.u as usize] += 1;
            deg[e.v as usize] += 1;
        }
        deg
    }
}

/// Nodes and edges that influence a node's embedding in an l-layer
/// message-passing encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ReceptiveField {
    pub center: u32,
    /// Nodes within distance l, sorted, includes the center.
    pub nodes: Vec<u32>,
    /// Edge ids with an endpoint within distance l-1 of the center, sorted.
    pub edges: Vec<u32>,
}

/// BFS-based receptive fields for every node, indexed by node id.
pub fn receptive_fields(g: &Graph, l: usize) -> Result<Vec<ReceptiveField>> {
    if l == 0 {
        return Err(Error::InvalidConfig("receptive field depth must be >= 1".into()));
    }
    let adj = g.incidence();
    let fields = (0..g.num_nodes)
        .into_par_iter()
        .map(|center| single_field(g, &adj, center as u32, l))
        .collect();
    Ok(fields)
}

fn single_field(g: &Graph, adj: &[Vec<(u32, u32)>], center: u32, l: usize) -> ReceptiveField {
    let mut dist = vec![usize::MAX; g.num_nodes];
    dist[center as usize] = 0;
    let mut queue = VecDeque::from([center]);
    let mut nodes = vec![center];
    while let Some(x) = queue.pop_front() {
        let dx = dist[x as usize];
        if dx == l {
            continue;
        }
        for &(y, _) in &adj[x as usize] {
            if dist[y as usize] == usize::MAX {
                dist[y as usize] = dx + 1;
                nodes.push(y);
                queue.push_back(y);
            }
        }
    }
    nodes.sort_unstable();

    let mut edges: Vec<u32> = Vec::new();
    for &x in &nodes {
        if dist[x as usize] <= l - 1 {
            for &(_, eid) in &adj[x as usize] {
                edges.push(eid);
            }
        }
    }
    edges.sort_unstable();
    edges.dedup();

    ReceptiveField {
        center,
        nodes,
        edges,
    }
}

/// Edge centrality as the mean of its endpoints' unweighted degrees.
pub fn degree_centrality(g: &Graph) -> Vec<f64> {
    let deg = g.degrees();
    g.edges()
        .iter()
        .map(|e| (deg[e.u as usize] + deg[e.v as usize]) as f64 / 2.0)
        .collect()
}

/// Deterministic stochastic block model fixture.
///
/// Labels are block ids, features are one-hot block indicators with each bit
/// independently flipped with probability 0.05, and splits are stratified
/// 10% train / 10% val / 80% test per block.
pub fn sbm_generate(seed: u64, block_sizes: &[usize], p_in: f64, p_out: f64) -> Result<Graph> {
    let n: usize = block_sizes.iter().sum();
    if n == 0 {
        return Err(Error::InvalidConfig("block sizes sum to zero".into()));
    }
    if !(0.0..=1.0).contains(&p_in) || !(0.0..=1.0).contains(&p_out) || p_out > p_in {
        return Err(Error::InvalidConfig(format!(
            "need 0 <= p_out <= p_in <= 1, got p_in={p_in} p_out={p_out}"
        )));
    }

    let mut block_of = Vec::with_capacity(n);
    for (b, &size) in block_sizes.iter().enumerate() {
        block_of.extend(std::iter::repeat(b as u32).take(size));
    }

    let num_blocks = block_sizes.len();
    let mut feat_rng = derive_rng(seed, &[stream::SBM_FEATURES]);
    let mut features = Vec::with_capacity(n);
    for &b in &block_of {
        let mut row = vec![0.0; num_blocks];
        row[b as usize] = 1.0;
        for bit in &mut row {
            if feat_rng.gen::<f64>() < SBM_FEATURE_NOISE {
                *bit = 1.0 - *bit;
            }
        }
        features.push(row);
    }

    let mut edge_rng = derive_rng(seed, &[stream::SBM_EDGES]);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if block_of[u] == block_of[v] { p_in } else { p_out };
            if edge_rng.gen::<f64>() < p {
                edges.push((u, v, 1.0));
            }
        }
    }

    let mut split_rng = derive_rng(seed, &[stream::SBM_SPLITS]);
    let mut splits = Splits {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    let mut start = 0usize;
    for &size in block_sizes {
        let mut ids: Vec<u32> = (start as u32..(start + size) as u32).collect();
        use rand::seq::SliceRandom;
        ids.shuffle(&mut split_rng);
        let n_train = (size / 10).max(1).min(size);
        let n_val = (size / 10).max(1).min(size.saturating_sub(n_train));
        splits.train.extend(&ids[..n_train]);
        splits.val.extend(&ids[n_train..n_train + n_val]);
        splits.test.extend(&ids[n_train + n_val..]);
        start += size;
    }

    preprocess(RawGraph {
        num_nodes: n,
        features,
        edges,
        labels: Some(block_of),
        splits: Some(splits),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path_graph(n: usize) -> Graph {
        preprocess(RawGraph {
            num_nodes: n,
            features: vec![vec![1.0]; n],
            edges: (0..n - 1).map(|i| (i, i + 1, 1.0)).collect(),
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn preprocess_binarizes_features() {
        let g = preprocess(RawGraph {
            num_nodes: 2,
            features: vec![vec![0.0, 2.5], vec![-1.0, 0.0]],
            edges: vec![],
            ..Default::default()
        })
        .unwrap();
        assert_eq!(g.features().values(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn preprocess_symmetrizes_and_drops_self_loops() {
        let g = preprocess(RawGraph {
            num_nodes: 3,
            features: vec![vec![1.0]; 3],
            edges: vec![(1, 0, 1.0), (0, 1, 1.0), (2, 2, 1.0)],
            ..Default::default()
        })
        .unwrap();
        assert_eq!(g.edges().len(), 1);
        assert_eq!((g.edges()[0].u, g.edges()[0].v, g.edges()[0].w), (0, 1, 1.0));
    }

    #[test]
    fn preprocess_rejects_empty_and_non_finite() {
        assert!(preprocess(RawGraph::default()).is_err());
        let res = preprocess(RawGraph {
            num_nodes: 1,
            features: vec![vec![f64::NAN]],
            edges: vec![],
            ..Default::default()
        });
        assert!(res.is_err());
    }

    #[test]
    fn preprocess_is_idempotent() {
        let g = sbm_generate(3, &[10, 10], 0.4, 0.1).unwrap();
        let again = preprocess(RawGraph::from(&g)).unwrap();
        assert_eq!(g, again);
    }

    #[test]
    fn receptive_field_on_path() {
        let g = path_graph(3);
        let l1 = receptive_fields(&g, 1).unwrap();
        assert_eq!(l1[0].nodes, vec![0, 1]);
        assert_eq!(l1[0].edges, vec![0]);

        let l2 = receptive_fields(&g, 2).unwrap();
        assert_eq!(l2[0].nodes, vec![0, 1, 2]);
        assert_eq!(l2[0].edges, vec![0, 1]);
    }

    #[test]
    fn receptive_fields_nest_with_depth() {
        let g = sbm_generate(11, &[12, 12], 0.3, 0.05).unwrap();
        let l1 = receptive_fields(&g, 1).unwrap();
        let l2 = receptive_fields(&g, 2).unwrap();
        for (a, b) in l1.iter().zip(&l2) {
            assert!(a.nodes.iter().all(|x| b.nodes.binary_search(x).is_ok()));
            assert!(a.edges.iter().all(|x| b.edges.binary_search(x).is_ok()));
        }
    }

    /// All-pairs shortest path oracle: recompute V_l and E_l from a
    /// Floyd-Warshall distance matrix and compare.
    fn fields_match_apsp_oracle(g: &Graph, l: usize) {
        let n = g.num_nodes();
        let inf = usize::MAX / 2;
        let mut dist = vec![vec![inf; n]; n];
        for i in 0..n {
            dist[i][i] = 0;
        }
        for e in g.edges() {
            dist[e.u as usize][e.v as usize] = 1;
            dist[e.v as usize][e.u as usize] = 1;
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    let via = dist[i][k] + dist[k][j];
                    if via < dist[i][j] {
                        dist[i][j] = via;
                    }
                }
            }
        }
        let fields = receptive_fields(g, l).unwrap();
        for v in 0..n {
            let nodes: Vec<u32> = (0..n).filter(|&u| dist[v][u] <= l).map(|u| u as u32).collect();
            let edges: Vec<u32> = g
                .edges()
                .iter()
                .enumerate()
                .filter(|(_, e)| dist[v][e.u as usize].min(dist[v][e.v as usize]) + 1 <= l)
                .map(|(id, _)| id as u32)
                .collect();
            assert_eq!(fields[v].nodes, nodes, "V_l mismatch at node {v}");
            assert_eq!(fields[v].edges, edges, "E_l mismatch at node {v}");
        }
    }

    #[test]
    fn receptive_fields_match_floyd_warshall() {
        let g = sbm_generate(7, &[20, 20], 0.15, 0.02).unwrap();
        fields_match_apsp_oracle(&g, 1);
        fields_match_apsp_oracle(&g, 2);
        fields_match_apsp_oracle(&g, 3);
    }

    #[test]
    fn sbm_degenerate_probabilities() {
        let g = sbm_generate(0, &[3, 3], 1.0, 0.0).unwrap();
        // Two disjoint triangles.
        assert_eq!(g.edges().len(), 6);
        assert!(g.edges().iter().all(|e| {
            let labels = g.labels().unwrap();
            labels[e.u as usize] == labels[e.v as usize]
        }));

        let empty = sbm_generate(0, &[4, 4], 0.0, 0.0).unwrap();
        assert!(empty.edges().is_empty());
    }

    #[test]
    fn sbm_edge_count_within_three_sigma() {
        let g = sbm_generate(7, &[100, 100], 0.05, 0.005).unwrap();
        // Within-block pairs: 2 * C(100,2) = 9900, cross pairs: 10000.
        let mean = 9900.0 * 0.05 + 10000.0 * 0.005;
        let var: f64 = 9900.0 * 0.05 * 0.95 + 10000.0 * 0.005 * 0.995;
        let sigma = var.sqrt();
        let count = g.edges().len() as f64;
        assert!(
            (count - mean).abs() <= 3.0 * sigma,
            "edge count {count} outside {mean} +- {:.1}",
            3.0 * sigma
        );
    }

    #[test]
    fn sbm_is_deterministic() {
        let a = sbm_generate(7, &[30, 30], 0.2, 0.02).unwrap();
        let b = sbm_generate(7, &[30, 30], 0.2, 0.02).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sbm_rejects_empty_blocks() {
        assert!(sbm_generate(0, &[], 0.5, 0.1).is_err());
        assert!(sbm_generate(0, &[0, 0], 0.5, 0.1).is_err());
    }

    #[test]
    fn degree_centrality_triangle_and_star() {
        let triangle = preprocess(RawGraph {
            num_nodes: 3,
            features: vec![vec![1.0]; 3],
            edges: vec![(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)],
            ..Default::default()
        })
        .unwrap();
        assert!(degree_centrality(&triangle).iter().all(|&c| c == 2.0));

        let star = preprocess(RawGraph {
            num_nodes: 4,
            features: vec![vec![1.0]; 4],
            edges: vec![(0, 1, 1.0), (0, 2, 1.0), (0, 3, 1.0)],
            ..Default::default()
        })
        .unwrap();
        assert!(degree_centrality(&star).iter().all(|&c| c == 2.0));
    }

    #[test]
    fn degree_centrality_matches_recount() {
        let g = sbm_generate(7, &[25, 25], 0.2, 0.02).unwrap();
        let cent = degree_centrality(&g);
        for (id, e) in g.edges().iter().enumerate() {
            let du = g
                .edges()
                .iter()
                .filter(|o| o.u == e.u || o.v == e.u)
                .count();
            let dv = g
                .edges()
                .iter()
                .filter(|o| o.u == e.v || o.v == e.v)
                .count();
            assert_eq!(cent[id], (du + dv) as f64 / 2.0);
        }
    }
}
