//! Similarity, per-node contrastive loss, and the batched objective.
//!
//! The similarity between two nodes is the cosine of their projected
//! embeddings. For an anchor v in views 1 and 2, the per-node loss is
//!
//! ```text
//! l(v, 1->2) = -log  exp(s(z1,z2)/t) /
//!                    ( exp(s(z1,z2)/t) + sum_{u != v} exp(s(z1,h2_u)/t)
//!                                      + sum_{u != v} exp(s(z1,h1_u)/t) )
//! ```
//!
//! with negatives drawn from the other anchors in both views, and the
//! objective averages `l(v,1->2) + l(v,2->1)` over the anchor set with a
//! 1/(2b) normalization. With the anchor set equal to all of V this is the
//! full-graph objective; under batching the negatives shrink to the other
//! anchors of the current batch.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::tape::{Tape, TapeId};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SimilarityConfig {
    pub temperature: f64,
}

impl SimilarityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "temperature must be positive, got {}",
                self.temperature
            )))
        }
    }
}

/// One batch of anchor nodes. Batches of an epoch partition the node set.
#[derive(Clone, Debug)]
pub struct BatchSpec {
    anchors: Vec<u32>,
}

impl BatchSpec {
    pub fn new(anchors: Vec<u32>) -> Result<Self> {
        let mut sorted = anchors.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != anchors.len() {
            return Err(Error::InvalidConfig("anchors must be distinct".into()));
        }
        if anchors.is_empty() {
            return Err(Error::InvalidConfig("empty anchor set".into()));
        }
        Ok(BatchSpec { anchors })
    }

    pub fn anchors(&self) -> &[u32] {
        &self.anchors
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Cosine similarity with the zero-vector convention: a zero vector is
/// neutral (similarity 0 against anything).
pub fn cosine_sim(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Direct (taped-free) evaluation of the per-node loss l(v, 1->2).
///
/// `h_from` holds the projected embeddings of the view providing z1, `h_to`
/// the other view. Both are full n x k matrices; negatives are restricted to
/// the anchor set.
pub fn node_loss(
    v: u32,
    h_from: &DenseMatrix,
    h_to: &DenseMatrix,
    anchors: &BatchSpec,
    cfg: &SimilarityConfig,
) -> Result<f64> {
    cfg.validate()?;
    if !anchors.anchors().contains(&v) {
        return Err(Error::InvalidConfig(format!("node {v} is not an anchor")));
    }
    let z1 = h_from.row(v as usize);
    let z2 = h_to.row(v as usize);
    let positive = (cosine_sim(z1, z2) / cfg.temperature).exp();
    let mut denom = positive;
    for &u in anchors.anchors() {
        if u == v {
            continue;
        }
        denom += (cosine_sim(z1, h_to.row(u as usize)) / cfg.temperature).exp();
        denom += (cosine_sim(z1, h_from.row(u as usize)) / cfg.temperature).exp();
    }
    Ok(-(positive / denom).ln())
}

pub struct Objective {
    /// Scalar loss on the tape.
    pub loss: TapeId,
    /// Anchor rows with zero projected norm; their similarities were treated
    /// as neutral zeros.
    pub zero_norm_rows: usize,
}

/// Record the symmetric batched objective on the tape.
///
/// `h1` and `h2` are the full projected matrices of the two views; only the
/// anchor rows enter the loss. The construction is view-swap symmetric
/// bit-for-bit.
pub fn objective(
    tape: &mut Tape,
    h1: TapeId,
    h2: TapeId,
    anchors: &BatchSpec,
    cfg: &SimilarityConfig,
) -> Result<Objective> {
    cfg.validate()?;
    let b = anchors.len();
    let idx: Arc<Vec<usize>> = Arc::new(anchors.anchors().iter().map(|&a| a as usize).collect());

    let a1 = tape.gather_rows(h1, idx.clone())?;
    let a2 = tape.gather_rows(h2, idx)?;

    let zero_norm_rows = count_zero_rows(tape.value(a1)) + count_zero_rows(tape.value(a2));

    let n1 = tape.row_normalize(a1)?;
    let n2 = tape.row_normalize(a2)?;

    let inv_t = 1.0 / cfg.temperature;
    let s12 = tape.matmul_nt(n1, n2)?;
    let s11 = tape.matmul_nt(n1, n1)?;
    let s22 = tape.matmul_nt(n2, n2)?;
    let p12 = {
        let scaled = tape.scale(s12, inv_t)?;
        tape.exp(scaled)?
    };
    let p11 = {
        let scaled = tape.scale(s11, inv_t)?;
        tape.exp(scaled)?
    };
    let p22 = {
        let scaled = tape.scale(s22, inv_t)?;
        tape.exp(scaled)?
    };

    // Positive similarities sit on the diagonal of s12 in both directions.
    let pos = {
        let diag = tape.diag_vec(s12)?;
        tape.scale(diag, inv_t)?
    };

    // Direction 1 -> 2: denominators row-wise over p12 plus intra-view
    // negatives from p11 (minus the self term).
    let loss_12 = {
        let r12 = tape.row_sum(p12)?;
        let r11 = tape.row_sum(p11)?;
        let d11 = tape.diag_vec(p11)?;
        let denom = {
            let s = tape.add(r12, r11)?;
            tape.sub(s, d11)?
        };
        let logd = tape.log(denom)?;
        tape.sub(logd, pos)?
    };

    // Direction 2 -> 1: columns of p12 play the inter-view role.
    let loss_21 = {
        let c12 = tape.col_sum(p12)?;
        let r22 = tape.row_sum(p22)?;
        let d22 = tape.diag_vec(p22)?;
        let denom = {
            let s = tape.add(c12, r22)?;
            tape.sub(s, d22)?
        };
        let logd = tape.log(denom)?;
        tape.sub(logd, pos)?
    };

    let total = {
        let s1 = tape.sum(loss_12)?;
        let s2 = tape.sum(loss_21)?;
        tape.add(s1, s2)?
    };
    let loss = tape.scale(total, 1.0 / (2.0 * b as f64))?;
    Ok(Objective {
        loss,
        zero_norm_rows,
    })
}

fn count_zero_rows(m: &DenseMatrix) -> usize {
    (0..m.rows())
        .filter(|&r| m.row(r).iter().all(|&v| v == 0.0))
        .count()
}
