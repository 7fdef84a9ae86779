//! View transformations.
//!
//! Stochastic transformations mask feature dimensions and (for the baseline
//! methods) remove edges at random, either uniformly or with probability
//! inversely proportional to degree centrality. Adversarial transformations
//! rank edges by the signed gradient of the contrastive loss at their weight
//! slot: existing candidate edges with the most negative gradient are
//! removed, absent candidate pairs with the most positive gradient are
//! inserted at weight 1.
//!
//! Candidate sets are built from the anchors' receptive fields: removals may
//! touch any edge influencing an anchor's embedding, insertions connect an
//! anchor to another anchor's receptive field. During the preliminary pass
//! the insertion candidates are temporarily present at weight `1/|S+|`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::BatchSpec;
use crate::error::{Error, Result};
use crate::graph::{degree_centrality, Edge, Graph, ReceptiveField};
use crate::matrix::DenseMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RemovalScheme {
    Uniform,
    DegreeWeighted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskAxis {
    /// Mask whole feature dimensions across all nodes (the default).
    Column,
    /// Mask individual (node, dimension) cells.
    Element,
}

/// Rates for the stochastic part of each view's transformation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StochasticConfig {
    pub p1: f64,
    pub p2: f64,
    pub q_minus_1: f64,
    pub q_minus_2: f64,
    pub removal_scheme: RemovalScheme,
    pub mask_axis: MaskAxis,
}

impl StochasticConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, rate) in [
            ("p1", self.p1),
            ("p2", self.p2),
            ("q_minus_1", self.q_minus_1),
            ("q_minus_2", self.q_minus_2),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must lie in [0,1), got {rate}"
                )));
            }
        }
        Ok(())
    }
}

/// Rates for the adversarial part plus the anchor batch size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarialConfig {
    pub q_plus_1: f64,
    pub q_plus_2: f64,
    pub batch_size: usize,
}

impl AdversarialConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, rate) in [("q_plus_1", self.q_plus_1), ("q_plus_2", self.q_plus_2)] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must lie in [0,1), got {rate}"
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Which feature coordinates a masking pass zeroed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskRecord {
    Columns(Vec<u32>),
    Cells(Vec<(u32, u32)>),
}

impl MaskRecord {
    pub fn masked_count(&self) -> usize {
        match self {
            MaskRecord::Columns(c) => c.len(),
            MaskRecord::Cells(c) => c.len(),
        }
    }
}

/// Provenance of one view: what was masked, removed, and inserted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewDelta {
    pub masked: MaskRecord,
    /// Base-graph edge ids removed from the view.
    pub removed_edges: Vec<u32>,
    /// Edges inserted into the view, with their final weights.
    pub inserted_edges: Vec<(u32, u32, f64)>,
}

impl ViewDelta {
    pub fn empty(axis: MaskAxis) -> Self {
        ViewDelta {
            masked: match axis {
                MaskAxis::Column => MaskRecord::Columns(Vec::new()),
                MaskAxis::Element => MaskRecord::Cells(Vec::new()),
            },
            removed_edges: Vec::new(),
            inserted_edges: Vec::new(),
        }
    }
}

/// Zero out feature coordinates independently with probability `p`.
pub fn mask_features(
    x: &DenseMatrix,
    p: f64,
    axis: MaskAxis,
    rng: &mut impl Rng,
) -> Result<(DenseMatrix, MaskRecord)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidConfig(format!("mask rate {p} outside [0,1)")));
    }
    let mut out = x.clone();
    match axis {
        MaskAxis::Column => {
            let mut cols = Vec::new();
            for j in 0..x.cols() {
                if rng.gen::<f64>() < p {
                    cols.push(j as u32);
                }
            }
            for r in 0..out.rows() {
                let row = out.row_mut(r);
                for &j in &cols {
                    row[j as usize] = 0.0;
                }
            }
            Ok((out, MaskRecord::Columns(cols)))
        }
        MaskAxis::Element => {
            let mut cells = Vec::new();
            for r in 0..x.rows() {
                for j in 0..x.cols() {
                    if rng.gen::<f64>() < p {
                        out.set(r, j, 0.0);
                        cells.push((r as u32, j as u32));
                    }
                }
            }
            Ok((out, MaskRecord::Cells(cells)))
        }
    }
}

/// Per-edge removal probabilities for the stochastic schemes.
///
/// Uniform removal uses `q` everywhere. The degree-weighted scheme assigns
/// probabilities proportional to inverse centrality, rescaled so the expected
/// number of removals is `q · |E|`, then clamps each to [0, 0.95].
pub fn removal_probabilities(g: &Graph, q: f64, scheme: RemovalScheme) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&q) {
        return Err(Error::InvalidConfig(format!("removal rate {q} outside [0,1)")));
    }
    let m = g.edges().len();
    match scheme {
        RemovalScheme::Uniform => Ok(vec![q; m]),
        RemovalScheme::DegreeWeighted => {
            if m == 0 {
                return Ok(Vec::new());
            }
            let inv: Vec<f64> = degree_centrality(g).iter().map(|&c| 1.0 / c).collect();
            let total: f64 = inv.iter().sum();
            let target = q * m as f64;
            Ok(inv
                .iter()
                .map(|&w| (target * w / total).clamp(0.0, 0.95))
                .collect())
        }
    }
}

/// Stochastic edge removal: the baseline transformation.
pub fn drop_edges_stochastic(
    g: &Graph,
    q: f64,
    scheme: RemovalScheme,
    rng: &mut impl Rng,
) -> Result<(Graph, Vec<u32>)> {
    let probs = removal_probabilities(g, q, scheme)?;
    let mut removed = Vec::new();
    let mut kept = Vec::with_capacity(g.edges().len());
    for (id, e) in g.edges().iter().enumerate() {
        if rng.gen::<f64>() < probs[id] {
            removed.push(id as u32);
        } else {
            kept.push(*e);
        }
    }
    Ok((g.with_edges(kept)?, removed))
}

/// Candidate edges for adversarial removal (existing) and insertion (absent).
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSets {
    /// Base-graph edge ids within the anchors' receptive fields, sorted.
    pub removal: Vec<u32>,
    /// Canonical absent pairs joining an anchor to another anchor's
    /// receptive field, sorted and deduplicated.
    pub insertion: Vec<(u32, u32)>,
}

impl CandidateSets {
    /// Weight at which insertion candidates are temporarily present during
    /// the preliminary pass.
    pub fn temporary_weight(&self) -> Option<f64> {
        if self.insertion.is_empty() {
            None
        } else {
            Some(1.0 / self.insertion.len() as f64)
        }
    }

    pub fn temporary_edges(&self) -> Vec<(u32, u32, f64)> {
        match self.temporary_weight() {
            None => Vec::new(),
            Some(w) => self.insertion.iter().map(|&(u, v)| (u, v, w)).collect(),
        }
    }
}

/// Build S- and S+ from the anchors' receptive fields.
///
/// S- is the union of the anchors' edge fields. S+ pairs each anchor v with
/// every node of the anchors' joint node field that lies outside v's own
/// field; existing edges are excluded and pairs are canonicalized.
pub fn build_candidate_sets(
    anchors: &BatchSpec,
    fields: &[ReceptiveField],
    g: &Graph,
) -> CandidateSets {
    let mut removal: Vec<u32> = anchors
        .anchors()
        .iter()
        .flat_map(|&v| fields[v as usize].edges.iter().copied())
        .collect();
    removal.sort_unstable();
    removal.dedup();

    let mut joint_nodes: Vec<u32> = anchors
        .anchors()
        .iter()
        .flat_map(|&v| fields[v as usize].nodes.iter().copied())
        .collect();
    joint_nodes.sort_unstable();
    joint_nodes.dedup();

    let existing: std::collections::HashSet<(u32, u32)> =
        g.edges().iter().map(|e| (e.u, e.v)).collect();

    let mut insertion: Vec<(u32, u32)> = Vec::new();
    for &v in anchors.anchors() {
        let own = &fields[v as usize].nodes;
        for &u in &joint_nodes {
            if own.binary_search(&u).is_ok() {
                continue;
            }
            let pair = (u.min(v), u.max(v));
            if !existing.contains(&pair) {
                insertion.push(pair);
            }
        }
    }
    insertion.sort_unstable();
    insertion.dedup();

    CandidateSets { removal, insertion }
}

/// Signed loss gradients at the edge-weight slots of one view's preliminary
/// pass: one value per base edge id and one per insertion candidate.
#[derive(Clone, Debug)]
pub struct EdgeGradients {
    pub base: Vec<f64>,
    pub inserted: Vec<f64>,
}

/// Apply the adversarial transformation: remove the
/// `floor(q_minus · |S-|)` candidates with minimal gradient and insert the
/// `floor(q_plus · |S+|)` candidates with maximal gradient at weight 1.
/// Ties break toward the smaller edge id / candidate pair.
pub fn apply_adversarial(
    view: &Graph,
    grads: &EdgeGradients,
    candidates: &CandidateSets,
    q_minus: f64,
    q_plus: f64,
) -> Result<(Graph, ViewDelta)> {
    for (name, rate) in [("q_minus", q_minus), ("q_plus", q_plus)] {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidConfig(format!("{name} outside [0,1)")));
        }
    }
    if grads.base.len() != view.edges().len() {
        return Err(Error::ShapeMismatch(
            "edge gradient table does not match the view's edges".into(),
        ));
    }
    if grads.inserted.len() != candidates.insertion.len() {
        return Err(Error::ShapeMismatch(
            "insertion gradient table does not match S+".into(),
        ));
    }

    let k_minus = ((q_minus * candidates.removal.len() as f64).floor() as usize)
        .min(candidates.removal.len());
    let mut by_min: Vec<u32> = candidates.removal.clone();
    by_min.sort_by(|&a, &b| {
        grads.base[a as usize]
            .total_cmp(&grads.base[b as usize])
            .then(a.cmp(&b))
    });
    let mut removed: Vec<u32> = by_min.into_iter().take(k_minus).collect();
    removed.sort_unstable();

    let k_plus = ((q_plus * candidates.insertion.len() as f64).floor() as usize)
        .min(candidates.insertion.len());
    let mut by_max: Vec<usize> = (0..candidates.insertion.len()).collect();
    by_max.sort_by(|&a, &b| {
        grads.inserted[b]
            .total_cmp(&grads.inserted[a])
            .then(candidates.insertion[a].cmp(&candidates.insertion[b]))
    });
    let mut inserted: Vec<(u32, u32, f64)> = by_max
        .into_iter()
        .take(k_plus)
        .map(|i| {
            let (u, v) = candidates.insertion[i];
            (u, v, 1.0)
        })
        .collect();
    inserted.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));

    let removed_set: std::collections::HashSet<u32> = removed.iter().copied().collect();
    let mut edges: Vec<Edge> = view
        .edges()
        .iter()
        .enumerate()
        .filter(|(id, _)| !removed_set.contains(&(*id as u32)))
        .map(|(_, e)| *e)
        .collect();
    edges.extend(inserted.iter().map(|&(u, v, w)| Edge { u, v, w }));

    let transformed = view.with_edges(edges)?;
    Ok((
        transformed,
        ViewDelta {
            masked: MaskRecord::Columns(Vec::new()),
            removed_edges: removed,
            inserted_edges: inserted,
        },
    ))
}
