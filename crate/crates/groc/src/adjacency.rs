//! Symmetrically normalized adjacency with differentiable edge weights.
//!
//! The operator materializes `D^{-1/2} (A + I) D^{-1/2}` over the union of a
//! graph's edges and an optional set of temporarily inserted candidate edges.
//! Each undirected entry is computed once and mirrored, so the operator is
//! exactly symmetric by construction, and each edge weight occupies one slot
//! of a tape leaf so the backward pass yields a per-edge gradient.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::matrix::DenseMatrix;
use crate::tape::{AdjStructure, Tape, TapeId};

#[derive(Clone)]
pub struct AdjacencyOperator {
    structure: Arc<AdjStructure>,
    base_count: usize,
    weights: TapeId,
    norm: TapeId,
}

/// Build the normalized operator for a graph plus optional extra edges.
///
/// Extra edges must be absent from the graph, self-loop free, and carry
/// weights in (0, 1]. They occupy the weight slots after the base edges.
pub fn normalized_adjacency(
    tape: &mut Tape,
    g: &Graph,
    extra: &[(u32, u32, f64)],
    detach_normalization: bool,
) -> Result<AdjacencyOperator> {
    let n = g.num_nodes();
    let mut endpoints: Vec<(u32, u32)> = Vec::with_capacity(g.edges().len() + extra.len());
    let mut weights: Vec<f64> = Vec::with_capacity(endpoints.capacity());
    for e in g.edges() {
        endpoints.push((e.u, e.v));
        weights.push(e.w);
    }

    let base: std::collections::HashSet<(u32, u32)> = endpoints.iter().copied().collect();
    let mut seen_extra = std::collections::HashSet::new();
    for &(a, b, w) in extra {
        if a == b {
            return Err(Error::InvalidGraph(format!("extra edge ({a},{a}) is a self-loop")));
        }
        let key = (a.min(b), a.max(b));
        if key.1 as usize >= n {
            return Err(Error::InvalidGraph(format!(
                "extra edge ({a},{b}) references a node >= {n}"
            )));
        }
        if base.contains(&key) {
            return Err(Error::InvalidGraph(format!(
                "extra edge ({},{}) duplicates a base edge",
                key.0, key.1
            )));
        }
        if !seen_extra.insert(key) {
            return Err(Error::InvalidGraph(format!(
                "extra edge ({},{}) listed twice",
                key.0, key.1
            )));
        }
        if !w.is_finite() || w <= 0.0 || w > 1.0 {
            return Err(Error::InvalidGraph(format!(
                "extra edge weight {w} outside (0,1]"
            )));
        }
        endpoints.push(key);
        weights.push(w);
    }

    let base_count = g.edges().len();
    let structure = Arc::new(AdjStructure { n, endpoints });
    let weight_leaf = tape.leaf(DenseMatrix::from_vec(structure.edge_count(), 1, weights)?);
    AdjacencyOperator::from_weights(tape, structure, base_count, weight_leaf, detach_normalization)
}

impl AdjacencyOperator {
    /// Low-level constructor from an existing weight leaf; used when the
    /// caller controls the slots (gradient checking, replays).
    pub fn from_weights(
        tape: &mut Tape,
        structure: Arc<AdjStructure>,
        base_count: usize,
        weights: TapeId,
        detach_normalization: bool,
    ) -> Result<Self> {
        let norm = tape.normalize_adjacency(weights, structure.clone(), detach_normalization)?;
        Ok(AdjacencyOperator {
            structure,
            base_count,
            weights,
            norm,
        })
    }

    /// Multiply the operator with a dense n x k matrix on the tape.
    pub fn spmm(&self, tape: &mut Tape, dense: TapeId) -> Result<TapeId> {
        tape.spmm(self.norm, dense, self.structure.clone())
    }

    /// The edge-weight leaf: gradient slots for g(e).
    pub fn weights(&self) -> TapeId {
        self.weights
    }

    pub fn structure(&self) -> &Arc<AdjStructure> {
        &self.structure
    }

    pub fn num_nodes(&self) -> usize {
        self.structure.n
    }

    pub fn edge_count(&self) -> usize {
        self.structure.edge_count()
    }

    /// Number of base-graph edges; slots `base_count..` belong to the
    /// temporarily inserted candidates.
    pub fn base_count(&self) -> usize {
        self.base_count
    }

    /// Materialize the operator densely (tests and small-scale oracles).
    pub fn to_dense(&self, tape: &Tape) -> DenseMatrix {
        let norm = tape.value(self.norm);
        let n = self.structure.n;
        let e_count = self.structure.edge_count();
        let mut out = DenseMatrix::zeros(n, n);
        for (e, &(u, v)) in self.structure.endpoints.iter().enumerate() {
            let a = norm.get(e, 0);
            out.set(u as usize, v as usize, a);
            out.set(v as usize, u as usize, a);
        }
        for i in 0..n {
            out.set(i, i, norm.get(e_count + i, 0));
        }
        out
    }
}
