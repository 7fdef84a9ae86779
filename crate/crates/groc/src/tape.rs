//! Reverse-mode differentiation over recorded matrix programs.
//!
//! A [`Tape`] records primitive applications together with their forward
//! values. [`Tape::backward`] walks the records in strict reverse order and
//! accumulates adjoints into every leaf — parameter matrices and, crucially,
//! the edge-weight vector behind the normalized adjacency operator. The
//! gradient at an edge-weight slot is the signed quantity used to rank edges
//! for adversarial removal and insertion.
//!
//! Differentiating through the adjacency includes the chain rule through the
//! degree terms: perturbing one edge weight moves the normalization of every
//! incident edge. A `detach_normalization` switch provides the cheaper
//! stop-gradient variant for ablation.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

/// Absolute difference below which a finite-difference comparison is treated
/// as exact (both sides are round-off).
const FD_ABS_FLOOR: f64 = 1e-8;

/// Index of a recorded node on its tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TapeId(usize);

impl TapeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Undirected edge structure shared by the adjacency ops. Endpoints are
/// canonical `u < v`; the node set is `0..n`.
#[derive(Clone, Debug)]
pub struct AdjStructure {
    pub n: usize,
    pub endpoints: Vec<(u32, u32)>,
}

impl AdjStructure {
    pub fn edge_count(&self) -> usize {
        self.endpoints.len()
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul { a: TapeId, b: TapeId },
    /// a * b^T
    MatmulNT { a: TapeId, b: TapeId },
    AddBias { a: TapeId, bias: TapeId },
    Add { a: TapeId, b: TapeId },
    Sub { a: TapeId, b: TapeId },
    MulElem { a: TapeId, b: TapeId },
    Relu { a: TapeId },
    Prelu { a: TapeId, slope: f64 },
    Elu { a: TapeId },
    Exp { a: TapeId },
    Log { a: TapeId },
    Scale { a: TapeId, factor: f64 },
    Sum { a: TapeId },
    RowSum { a: TapeId },
    ColSum { a: TapeId },
    DiagVec { a: TapeId },
    RowNormalize { a: TapeId },
    GatherRows { a: TapeId, indices: Arc<Vec<usize>> },
    /// weights (E x 1) -> normalized entries ((E + n) x 1): one symmetric
    /// off-diagonal value per edge followed by the n diagonal values.
    NormalizeAdjacency {
        weights: TapeId,
        structure: Arc<AdjStructure>,
        detach: bool,
    },
    /// norm ((E + n) x 1), dense (n x k) -> A_hat * dense (n x k).
    Spmm {
        norm: TapeId,
        dense: TapeId,
        structure: Arc<AdjStructure>,
    },
}

struct Node {
    value: DenseMatrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TapeId) -> &DenseMatrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: DenseMatrix) -> TapeId {
        self.nodes.push(Node { value, op });
        TapeId(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<TapeId> {
        let value = eval_op(&op, &self.nodes)?;
        if !value.is_finite() {
            return Err(Error::Numerical("non-finite forward value".into()));
        }
        Ok(self.push(op, value))
    }

    /// Register an input slot (parameter matrix, feature matrix, edge
    /// weights). Leaves are the gradient targets of [`Tape::backward`].
    pub fn leaf(&mut self, value: DenseMatrix) -> TapeId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: TapeId, b: TapeId) -> Result<TapeId> {
        self.record(Op::Matmul { a, b })
    }

    /// a * b^T.
    pub fn matmul_nt(&mut self, a: TapeId, b: TapeId) -> Result<TapeId> {
        self.record(Op::MatmulNT { a, b })
    }

    /// Broadcast a 1 x k bias over the rows of a.
    pub fn add_bias(&mut self, a: TapeId, bias: TapeId) -> Result<TapeId> {
        self.record(Op::AddBias { a, bias })
    }

    pub fn add(&mut self, a: TapeId, b: TapeId) -> Result<TapeId> {
        self.record(Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TapeId, b: TapeId) -> Result<TapeId> {
        self.record(Op::Sub { a, b })
    }

    pub fn mul_elem(&mut self, a: TapeId, b: TapeId) -> Result<TapeId> {
        self.record(Op::MulElem { a, b })
    }

    pub fn relu(&mut self, a: TapeId) -> Result<TapeId> {
        self.record(Op::Relu { a })
    }

    pub fn prelu(&mut self, a: TapeId, slope: f64) -> Result<TapeId> {
        self.record(Op::Prelu { a, slope })
    }

    pub fn elu(&mut self, a: TapeId) -> Result<TapeId> {
        self.record(Op::Elu { a })
    }

    pub fn exp(&mut self, a: TapeId) -> Result<TapeId> {
        self.record(Op::Exp { a })
    }

    pub fn log(&mut self, a: TapeId) -> Result<TapeId> {
        self.record(Op::Log { a })
    }

    pub fn scale(&mut self, a: TapeId, factor: f64) -> Result<TapeId> {
        self.record(Op::Scale { a, factor })
    }

    /// Sum of all entries, as a 1 x 1 matrix.
    pub fn sum(&mut self, a: TapeId) -> Result<TapeId> {
        self.record(Op::Sum { a })
    }

    /// Row sums of an m x n matrix, as m x 1.
    pub fn row_sum(&mut self, a: TapeId) -> Result<TapeId> {
        self.record(Op::RowSum { a })
    }

    /// Column sums of an m x n matrix, as n x 1.
    pub fn col_sum(&mut self, a: TapeId) -> Result<TapeId> {
        self.record(Op::ColSum { a })
    }

    /// Diagonal of a square matrix, as m x 1.
    pub fn diag_vec(&mut self, a: TapeId) -> Result<TapeId> {
        self.record(Op::DiagVec { a })
    }

    /// L2-normalize each row; zero rows stay zero.
    pub fn row_normalize(&mut self, a: TapeId) -> Result<TapeId> {
        self.record(Op::RowNormalize { a })
    }

    pub fn gather_rows(&mut self, a: TapeId, indices: Arc<Vec<usize>>) -> Result<TapeId> {
        self.record(Op::GatherRows { a, indices })
    }

    pub(crate) fn normalize_adjacency(
        &mut self,
        weights: TapeId,
        structure: Arc<AdjStructure>,
        detach: bool,
    ) -> Result<TapeId> {
        self.record(Op::NormalizeAdjacency {
            weights,
            structure,
            detach,
        })
    }

    pub(crate) fn spmm(
        &mut self,
        norm: TapeId,
        dense: TapeId,
        structure: Arc<AdjStructure>,
    ) -> Result<TapeId> {
        self.record(Op::Spmm {
            norm,
            dense,
            structure,
        })
    }

    /// Recompute every node value from the leaves, in record order. Used to
    /// check that the recorded program is replayable bit-for-bit.
    pub fn replay(&self) -> Result<Vec<DenseMatrix>> {
        let mut replayed: Vec<Node> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match node.op {
                Op::Leaf => node.value.clone(),
                _ => eval_op(&node.op, &replayed)?,
            };
            replayed.push(Node {
                value,
                op: node.op.clone(),
            });
        }
        Ok(replayed.into_iter().map(|n| n.value).collect())
    }

    /// Reverse pass from a scalar loss. Returns the adjoint of every slot the
    /// loss depends on; untouched slots read as zero.
    pub fn backward(&self, loss: TapeId) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::InvalidConfig("loss is not on this tape".into()));
        }
        if self.nodes[loss.0].value.shape() != (1, 1) {
            return Err(Error::ShapeMismatch("backward requires a scalar loss".into()));
        }

        let mut grads: Vec<Option<DenseMatrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(DenseMatrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(out_grad) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &out_grad, &mut grads)?;
            grads[i] = Some(out_grad);
        }

        for g in grads.iter().flatten() {
            if !g.is_finite() {
                return Err(Error::Numerical("non-finite gradient".into()));
            }
        }

        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
            grads,
        })
    }

    fn backprop_node(
        &self,
        i: usize,
        out_grad: &DenseMatrix,
        grads: &mut [Option<DenseMatrix>],
    ) -> Result<()> {
        let value = |id: TapeId| &self.nodes[id.0].value;
        let out_value = &self.nodes[i].value;

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                accumulate(grads, *a, out_grad.matmul_nt(value(*b))?)?;
                accumulate(grads, *b, value(*a).matmul_tn(out_grad)?)?;
            }
            Op::MatmulNT { a, b } => {
                accumulate(grads, *a, out_grad.matmul(value(*b))?)?;
                accumulate(grads, *b, out_grad.matmul_tn(value(*a))?)?;
            }
            Op::AddBias { a, bias } => {
                accumulate(grads, *a, out_grad.clone())?;
                let mut bias_grad = DenseMatrix::zeros(1, out_grad.cols());
                for r in 0..out_grad.rows() {
                    for (acc, &g) in bias_grad.row_mut(0).iter_mut().zip(out_grad.row(r)) {
                        *acc += g;
                    }
                }
                accumulate(grads, *bias, bias_grad)?;
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, out_grad.clone())?;
                accumulate(grads, *b, out_grad.clone())?;
            }
            Op::Sub { a, b } => {
                accumulate(grads, *a, out_grad.clone())?;
                accumulate(grads, *b, out_grad.map(|g| -g))?;
            }
            Op::MulElem { a, b } => {
                accumulate(grads, *a, zip_map(out_grad, value(*b), |g, x| g * x))?;
                accumulate(grads, *b, zip_map(out_grad, value(*a), |g, x| g * x))?;
            }
            Op::Relu { a } => {
                // Subgradient 0 at exactly 0.
                accumulate(
                    grads,
                    *a,
                    zip_map(out_grad, value(*a), |g, x| if x > 0.0 { g } else { 0.0 }),
                )?;
            }
            Op::Prelu { a, slope } => {
                let s = *slope;
                accumulate(
                    grads,
                    *a,
                    zip_map(out_grad, value(*a), |g, x| if x > 0.0 { g } else { g * s }),
                )?;
            }
            Op::Elu { a } => {
                // For x <= 0 the output is exp(x) - 1, whose derivative is y + 1.
                let x = value(*a);
                let mut delta = zip_map(out_grad, x, |g, xv| if xv > 0.0 { g } else { g });
                for (d, (&xv, &yv)) in delta
                    .values_mut()
                    .iter_mut()
                    .zip(x.values().iter().zip(out_value.values()))
                {
                    if xv <= 0.0 {
                        *d *= yv + 1.0;
                    }
                }
                accumulate(grads, *a, delta)?;
            }
            Op::Exp { a } => {
                accumulate(grads, *a, zip_map(out_grad, out_value, |g, y| g * y))?;
            }
            Op::Log { a } => {
                accumulate(grads, *a, zip_map(out_grad, value(*a), |g, x| g / x))?;
            }
            Op::Scale { a, factor } => {
                let f = *factor;
                accumulate(grads, *a, out_grad.map(|g| g * f))?;
            }
            Op::Sum { a } => {
                let g = out_grad.scalar_value()?;
                let (r, c) = value(*a).shape();
                accumulate(grads, *a, DenseMatrix::zeros(r, c).map(|_| g))?;
            }
            Op::RowSum { a } => {
                let (r, c) = value(*a).shape();
                let mut delta = DenseMatrix::zeros(r, c);
                for i in 0..r {
                    let g = out_grad.get(i, 0);
                    for d in delta.row_mut(i) {
                        *d = g;
                    }
                }
                accumulate(grads, *a, delta)?;
            }
            Op::ColSum { a } => {
                let (r, c) = value(*a).shape();
                let mut delta = DenseMatrix::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        delta.set(i, j, out_grad.get(j, 0));
                    }
                }
                accumulate(grads, *a, delta)?;
            }
            Op::DiagVec { a } => {
                let (r, c) = value(*a).shape();
                let mut delta = DenseMatrix::zeros(r, c);
                for i in 0..r {
                    delta.set(i, i, out_grad.get(i, 0));
                }
                accumulate(grads, *a, delta)?;
            }
            Op::RowNormalize { a } => {
                let x = value(*a);
                let y = out_value;
                let mut delta = DenseMatrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let norm = l2_norm(x.row(r));
                    if norm == 0.0 {
                        continue;
                    }
                    let g_row = out_grad.row(r);
                    let y_row = y.row(r);
                    let dot: f64 = g_row.iter().zip(y_row).map(|(g, yv)| g * yv).sum();
                    for ((d, &g), &yv) in delta.row_mut(r).iter_mut().zip(g_row).zip(y_row) {
                        *d = (g - dot * yv) / norm;
                    }
                }
                accumulate(grads, *a, delta)?;
            }
            Op::GatherRows { a, indices } => {
                let (r, c) = value(*a).shape();
                let mut delta = DenseMatrix::zeros(r, c);
                for (i, &idx) in indices.iter().enumerate() {
                    for (d, &g) in delta.row_mut(idx).iter_mut().zip(out_grad.row(i)) {
                        *d += g;
                    }
                }
                accumulate(grads, *a, delta)?;
            }
            Op::NormalizeAdjacency {
                weights,
                structure,
                detach,
            } => {
                let delta =
                    normalize_adjacency_backward(value(*weights), structure, *detach, out_grad);
                accumulate(grads, *weights, delta)?;
            }
            Op::Spmm {
                norm,
                dense,
                structure,
            } => {
                let (norm_grad, dense_grad) =
                    spmm_backward(value(*norm), value(*dense), structure, out_grad);
                accumulate(grads, *norm, norm_grad)?;
                accumulate(grads, *dense, dense_grad)?;
            }
        }
        Ok(())
    }
}

/// Adjoints per tape slot, indexed by [`TapeId`].
pub struct Gradients {
    shapes: Vec<(usize, usize)>,
    grads: Vec<Option<DenseMatrix>>,
}

impl Gradients {
    /// Gradient of the loss with respect to the slot; zeros if the loss does
    /// not depend on it.
    pub fn get(&self, id: TapeId) -> DenseMatrix {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                DenseMatrix::zeros(r, c)
            }
        }
    }

    pub fn try_get(&self, id: TapeId) -> Option<&DenseMatrix> {
        self.grads[id.0].as_ref()
    }
}

fn accumulate(grads: &mut [Option<DenseMatrix>], id: TapeId, delta: DenseMatrix) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&delta),
        slot => {
            *slot = Some(delta);
            Ok(())
        }
    }
}

fn zip_map(a: &DenseMatrix, b: &DenseMatrix, f: impl Fn(f64, f64) -> f64) -> DenseMatrix {
    debug_assert_eq!(a.shape(), b.shape());
    let mut out = a.clone();
    for (o, &bv) in out.values_mut().iter_mut().zip(b.values()) {
        *o = f(*o, bv);
    }
    out
}

fn l2_norm(row: &[f64]) -> f64 {
    row.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn eval_op(op: &Op, nodes: &[Node]) -> Result<DenseMatrix> {
    let value = |id: &TapeId| &nodes[id.0].value;
    match op {
        Op::Leaf => unreachable!("leaf values are stored, not computed"),
        Op::Matmul { a, b } => value(a).matmul(value(b)),
        Op::MatmulNT { a, b } => value(a).matmul_nt(value(b)),
        Op::AddBias { a, bias } => {
            let (a, bias) = (value(a), value(bias));
            if bias.rows() != 1 || bias.cols() != a.cols() {
                return Err(Error::ShapeMismatch("add_bias".into()));
            }
            let mut out = a.clone();
            for r in 0..out.rows() {
                for (o, &bv) in out.row_mut(r).iter_mut().zip(bias.row(0)) {
                    *o += bv;
                }
            }
            Ok(out)
        }
        Op::Add { a, b } => {
            same_shape(value(a), value(b), "add")?;
            Ok(zip_map(value(a), value(b), |x, y| x + y))
        }
        Op::Sub { a, b } => {
            same_shape(value(a), value(b), "sub")?;
            Ok(zip_map(value(a), value(b), |x, y| x - y))
        }
        Op::MulElem { a, b } => {
            same_shape(value(a), value(b), "mul_elem")?;
            Ok(zip_map(value(a), value(b), |x, y| x * y))
        }
        Op::Relu { a } => Ok(value(a).map(|x| x.max(0.0))),
        Op::Prelu { a, slope } => {
            let s = *slope;
            Ok(value(a).map(|x| if x > 0.0 { x } else { s * x }))
        }
        Op::Elu { a } => Ok(value(a).map(|x| if x > 0.0 { x } else { x.exp() - 1.0 })),
        Op::Exp { a } => Ok(value(a).map(f64::exp)),
        Op::Log { a } => {
            let x = value(a);
            if x.values().iter().any(|&v| v <= 0.0) {
                return Err(Error::Numerical("log of non-positive value".into()));
            }
            Ok(x.map(f64::ln))
        }
        Op::Scale { a, factor } => {
            let f = *factor;
            Ok(value(a).map(|x| x * f))
        }
        Op::Sum { a } => Ok(DenseMatrix::scalar(value(a).values().iter().sum())),
        Op::RowSum { a } => {
            let x = value(a);
            let mut out = DenseMatrix::zeros(x.rows(), 1);
            for r in 0..x.rows() {
                out.set(r, 0, x.row(r).iter().sum());
            }
            Ok(out)
        }
        Op::ColSum { a } => {
            let x = value(a);
            let mut out = DenseMatrix::zeros(x.cols(), 1);
            for r in 0..x.rows() {
                for (c, &v) in x.row(r).iter().enumerate() {
                    out.set(c, 0, out.get(c, 0) + v);
                }
            }
            Ok(out)
        }
        Op::DiagVec { a } => {
            let x = value(a);
            if x.rows() != x.cols() {
                return Err(Error::ShapeMismatch("diag_vec requires a square matrix".into()));
            }
            let mut out = DenseMatrix::zeros(x.rows(), 1);
            for r in 0..x.rows() {
                out.set(r, 0, x.get(r, r));
            }
            Ok(out)
        }
        Op::RowNormalize { a } => {
            let x = value(a);
            let mut out = x.clone();
            for r in 0..x.rows() {
                let norm = l2_norm(x.row(r));
                if norm > 0.0 {
                    for v in out.row_mut(r) {
                        *v /= norm;
                    }
                }
            }
            Ok(out)
        }
        Op::GatherRows { a, indices } => {
            let x = value(a);
            let mut out = DenseMatrix::zeros(indices.len(), x.cols());
            for (i, &idx) in indices.iter().enumerate() {
                if idx >= x.rows() {
                    return Err(Error::ShapeMismatch(format!(
                        "gather_rows index {idx} >= {}",
                        x.rows()
                    )));
                }
                out.row_mut(i).copy_from_slice(x.row(idx));
            }
            Ok(out)
        }
        Op::NormalizeAdjacency {
            weights, structure, ..
        } => normalize_adjacency_forward(value(weights), structure),
        Op::Spmm {
            norm,
            dense,
            structure,
        } => spmm_forward(value(norm), value(dense), structure),
    }
}

fn same_shape(a: &DenseMatrix, b: &DenseMatrix, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Degrees with self-loop: d_i = 1 + sum of incident weights.
pub(crate) fn loop_degrees(weights: &DenseMatrix, structure: &AdjStructure) -> Vec<f64> {
    let mut deg = vec![1.0; structure.n];
    for (e, &(u, v)) in structure.endpoints.iter().enumerate() {
        let w = weights.get(e, 0);
        deg[u as usize] += w;
        deg[v as usize] += w;
    }
    deg
}

pub(crate) fn normalize_adjacency_forward(
    weights: &DenseMatrix,
    structure: &AdjStructure,
) -> Result<DenseMatrix> {
    let e_count = structure.edge_count();
    if weights.shape() != (e_count, 1) {
        return Err(Error::ShapeMismatch(format!(
            "adjacency weights must be {e_count}x1, got {:?}",
            weights.shape()
        )));
    }
    let deg = loop_degrees(weights, structure);
    if deg.iter().any(|&d| d <= 0.0) {
        return Err(Error::Numerical("non-positive loop degree".into()));
    }
    let inv_sqrt: Vec<f64> = deg.iter().map(|&d| 1.0 / d.sqrt()).collect();

    let mut out = DenseMatrix::zeros(e_count + structure.n, 1);
    for (e, &(u, v)) in structure.endpoints.iter().enumerate() {
        out.set(
            e,
            0,
            weights.get(e, 0) * inv_sqrt[u as usize] * inv_sqrt[v as usize],
        );
    }
    for i in 0..structure.n {
        out.set(e_count + i, 0, inv_sqrt[i] * inv_sqrt[i]);
    }
    Ok(out)
}

fn normalize_adjacency_backward(
    weights: &DenseMatrix,
    structure: &AdjStructure,
    detach: bool,
    out_grad: &DenseMatrix,
) -> DenseMatrix {
    let e_count = structure.edge_count();
    let deg = loop_degrees(weights, structure);
    let inv_sqrt: Vec<f64> = deg.iter().map(|&d| 1.0 / d.sqrt()).collect();

    let mut w_grad = DenseMatrix::zeros(e_count, 1);
    // Direct path: a_hat_e = w_e * s_u * s_v with s held fixed.
    for (e, &(u, v)) in structure.endpoints.iter().enumerate() {
        w_grad.set(
            e,
            0,
            out_grad.get(e, 0) * inv_sqrt[u as usize] * inv_sqrt[v as usize],
        );
    }
    if detach {
        return w_grad;
    }

    // Chain rule through the degrees: s_i = d_i^{-1/2}, diag_i = s_i^2.
    let mut s_grad = vec![0.0; structure.n];
    for (e, &(u, v)) in structure.endpoints.iter().enumerate() {
        let g = out_grad.get(e, 0);
        let w = weights.get(e, 0);
        s_grad[u as usize] += g * w * inv_sqrt[v as usize];
        s_grad[v as usize] += g * w * inv_sqrt[u as usize];
    }
    for i in 0..structure.n {
        s_grad[i] += out_grad.get(e_count + i, 0) * 2.0 * inv_sqrt[i];
    }
    // d s_i / d d_i = -1/2 * d_i^{-3/2}.
    let d_grad: Vec<f64> = (0..structure.n)
        .map(|i| s_grad[i] * (-0.5) * inv_sqrt[i] * inv_sqrt[i] * inv_sqrt[i])
        .collect();
    for (e, &(u, v)) in structure.endpoints.iter().enumerate() {
        let extra = d_grad[u as usize] + d_grad[v as usize];
        w_grad.set(e, 0, w_grad.get(e, 0) + extra);
    }
    w_grad
}

pub(crate) fn spmm_forward(
    norm: &DenseMatrix,
    dense: &DenseMatrix,
    structure: &AdjStructure,
) -> Result<DenseMatrix> {
    let e_count = structure.edge_count();
    if norm.shape() != (e_count + structure.n, 1) {
        return Err(Error::ShapeMismatch("spmm: operator entries".into()));
    }
    if dense.rows() != structure.n {
        return Err(Error::ShapeMismatch(format!(
            "spmm: operator is {0}x{0}, dense has {1} rows",
            structure.n,
            dense.rows()
        )));
    }
    let k = dense.cols();
    let mut out = DenseMatrix::zeros(structure.n, k);
    for i in 0..structure.n {
        let d = norm.get(e_count + i, 0);
        for (o, &x) in out.row_mut(i).iter_mut().zip(dense.row(i)) {
            *o = d * x;
        }
    }
    for (e, &(u, v)) in structure.endpoints.iter().enumerate() {
        let a = norm.get(e, 0);
        let (u, v) = (u as usize, v as usize);
        for c in 0..k {
            let xu = dense.get(u, c);
            let xv = dense.get(v, c);
            out.set(u, c, out.get(u, c) + a * xv);
            out.set(v, c, out.get(v, c) + a * xu);
        }
    }
    Ok(out)
}

fn spmm_backward(
    norm: &DenseMatrix,
    dense: &DenseMatrix,
    structure: &AdjStructure,
    out_grad: &DenseMatrix,
) -> (DenseMatrix, DenseMatrix) {
    let e_count = structure.edge_count();
    let k = dense.cols();

    // The operator is symmetric, so the dense adjoint is another spmm.
    let dense_grad =
        spmm_forward(norm, out_grad, structure).expect("shapes already validated in forward");

    let mut norm_grad = DenseMatrix::zeros(e_count + structure.n, 1);
    for (e, &(u, v)) in structure.endpoints.iter().enumerate() {
        let (u, v) = (u as usize, v as usize);
        let mut acc = 0.0;
        for c in 0..k {
            acc += out_grad.get(u, c) * dense.get(v, c) + out_grad.get(v, c) * dense.get(u, c);
        }
        norm_grad.set(e, 0, acc);
    }
    for i in 0..structure.n {
        let mut acc = 0.0;
        for c in 0..k {
            acc += out_grad.get(i, c) * dense.get(i, c);
        }
        norm_grad.set(e_count + i, 0, acc);
    }
    (norm_grad, dense_grad)
}

/// Report of a central finite-difference comparison.
#[derive(Debug, Clone)]
pub struct FdReport {
    /// Largest relative error across all checked slots; differences below the
    /// 1e-8 absolute floor count as zero.
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: Option<FdWorst>,
}

#[derive(Debug, Clone)]
pub struct FdWorst {
    pub slot: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Check the analytic gradient of a scalar tape program against central
/// finite differences, slot by slot.
///
/// `build` receives a fresh tape plus one leaf per entry of `slots` and must
/// return the scalar loss. Every element of every slot is perturbed by
/// `+-eps` and the program re-evaluated, so keep the slots small.
pub fn fd_check<F>(build: F, slots: &[DenseMatrix], eps: f64) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[TapeId]) -> Result<TapeId>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidConfig("fd_check requires eps > 0".into()));
    }

    let eval = |values: &[DenseMatrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TapeId> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        tape.value(loss).scalar_value()
    };

    let mut tape = Tape::new();
    let ids: Vec<TapeId> = slots.iter().map(|v| tape.leaf(v.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;

    let mut report = FdReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    let mut work: Vec<DenseMatrix> = slots.to_vec();
    for (s, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id);
        for k in 0..slots[s].len() {
            let original = work[s].values()[k];
            work[s].values_mut()[k] = original + eps;
            let up = eval(&work)?;
            work[s].values_mut()[k] = original - eps;
            let down = eval(&work)?;
            work[s].values_mut()[k] = original;

            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.values()[k];
            let diff = (a - numeric).abs();
            let err = if diff <= FD_ABS_FLOOR {
                0.0
            } else {
                diff / a.abs().max(numeric.abs())
            };
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some(FdWorst {
                    slot: s,
                    index: k,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = crate::rng::derive_rng(seed, &[0xfd]);
        let values = (0..rows * cols).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        DenseMatrix::from_vec(rows, cols, values).unwrap()
    }

    #[test]
    fn relu_and_prelu_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(DenseMatrix::from_vec(1, 3, vec![-1.0, 0.0, 2.0]).unwrap());
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).values(), &[0.0, 0.0, 2.0]);

        let y = tape.leaf(DenseMatrix::from_vec(1, 1, vec![-4.0]).unwrap());
        let p = tape.prelu(y, 0.25).unwrap();
        assert_eq!(tape.value(p).values(), &[-1.0]);
    }

    #[test]
    fn quadratic_edge_slot_gradient() {
        // loss = w^2 at w = 1 gives gradient 2.
        let mut tape = Tape::new();
        let w = tape.leaf(DenseMatrix::scalar(1.0));
        let sq = tape.mul_elem(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).values(), &[2.0]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::new();
        let x = tape.leaf(DenseMatrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap());
        assert!(tape.log(x).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(DenseMatrix::zeros(2, 2));
        assert!(tape.backward(x).is_err());
        assert!(tape.backward(TapeId(99)).is_err());
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut tape = Tape::new();
        let a = tape.leaf(random_matrix(4, 3, 1));
        let b = tape.leaf(random_matrix(3, 2, 2));
        let mm = tape.matmul(a, b).unwrap();
        let act = tape.relu(mm).unwrap();
        let loss = tape.sum(act).unwrap();
        let replayed = tape.replay().unwrap();
        for (i, value) in replayed.iter().enumerate() {
            assert_eq!(value, tape.value(TapeId(i)));
        }
        let _ = loss;
    }

    #[test]
    fn fd_linear_is_exact() {
        let report = fd_check(
            |tape, ids| {
                let s = tape.scale(ids[0], 3.0)?;
                tape.sum(s)
            },
            &[random_matrix(3, 3, 3)],
            1e-4,
        )
        .unwrap();
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn fd_quadratic_is_tight() {
        let report = fd_check(
            |tape, ids| {
                let sq = tape.mul_elem(ids[0], ids[0])?;
                tape.sum(sq)
            },
            &[random_matrix(3, 3, 4)],
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-7, "err {}", report.max_rel_err);
    }

    #[test]
    fn fd_relu_matmul_composite() {
        let report = fd_check(
            |tape, ids| {
                let mm = tape.matmul(ids[0], ids[1])?;
                let act = tape.relu(mm)?;
                tape.sum(act)
            },
            &[random_matrix(5, 5, 5), random_matrix(5, 5, 6)],
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-6, "err {}", report.max_rel_err);
    }

    #[test]
    fn fd_covers_every_primitive() {
        // One program touching every differentiable primitive.
        let report = fd_check(
            |tape, ids| {
                let [a, b, bias, w] = [ids[0], ids[1], ids[2], ids[3]];
                let mm = tape.matmul(a, b)?;
                let biased = tape.add_bias(mm, bias)?;
                let pr = tape.prelu(biased, 0.25)?;
                let el = tape.elu(pr)?;
                let nt = tape.matmul_nt(el, el)?;
                let normed = tape.row_normalize(nt)?;
                let gathered = tape.gather_rows(normed, Arc::new(vec![0, 2, 1]))?;
                let scaled = tape.scale(gathered, 0.5)?;
                let expd = tape.exp(scaled)?;
                let rs = tape.row_sum(expd)?;
                let cs = tape.col_sum(expd)?;
                let dg = tape.diag_vec(expd)?;
                let merged = tape.add(rs, cs)?;
                let merged = tape.sub(merged, dg)?;
                let logd = tape.log(merged)?;
                let prod = tape.mul_elem(logd, logd)?;
                let wsum = tape.matmul(w, prod)?;
                tape.sum(wsum)
            },
            &[
                random_matrix(3, 4, 7),
                random_matrix(4, 3, 8),
                random_matrix(1, 3, 9),
                random_matrix(1, 3, 10),
            ],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-6, "err {}", report.max_rel_err);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(random_matrix(3, 2, 11));
        let loss = tape.sum(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).values().iter().all(|&g| g == 1.0));
    }
}
