//! The two-layer GCN encoder and the projection head used inside the
//! similarity.
//!
//! The encoder maps a view to embeddings `Z = A_hat · act(A_hat · X · W1) · W2`
//! with layer widths `2·n_h` and `n_h` and no biases; the activation sits
//! between the layers only. The projection head is a two-layer MLP applied
//! row-wise, `H = W_p2 · elu(W_p1 · z + b_p1) + b_p2`. Downstream consumers
//! (linear probes, robustness evaluation) always use `Z`; `H` exists only
//! inside the contrastive similarity.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adjacency::AdjacencyOperator;
use crate::error::{Error, Result};
use crate::graph::Edge;
use crate::matrix::DenseMatrix;
use crate::rng::{derive_rng, stream};
use crate::tape::{self, AdjStructure, Tape, TapeId};

pub const PRELU_DEFAULT_SLOPE: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Prelu { slope: f64 },
}

impl Activation {
    pub fn prelu_default() -> Self {
        Activation::Prelu {
            slope: PRELU_DEFAULT_SLOPE,
        }
    }

    fn apply(&self, tape: &mut Tape, x: TapeId) -> Result<TapeId> {
        match *self {
            Activation::Relu => tape.relu(x),
            Activation::Prelu { slope } => tape.prelu(x, slope),
        }
    }

    fn apply_plain(&self, x: &DenseMatrix) -> DenseMatrix {
        match *self {
            Activation::Relu => x.map(|v| v.max(0.0)),
            Activation::Prelu { slope } => x.map(|v| if v > 0.0 { v } else { slope * v }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub w1: DenseMatrix,
    pub w2: DenseMatrix,
    pub act: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionParams {
    pub wp1: DenseMatrix,
    pub bp1: DenseMatrix,
    pub wp2: DenseMatrix,
    pub bp2: DenseMatrix,
}

/// Tape slots for the encoder weights.
#[derive(Clone, Copy)]
pub struct EncoderSlots {
    pub w1: TapeId,
    pub w2: TapeId,
    pub act: Activation,
}

/// Tape slots for the projection head.
#[derive(Clone, Copy)]
pub struct ProjectionSlots {
    pub wp1: TapeId,
    pub bp1: TapeId,
    pub wp2: TapeId,
    pub bp2: TapeId,
}

impl EncoderParams {
    pub fn embedding_dim(&self) -> usize {
        self.w2.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn register(&self, tape: &mut Tape) -> EncoderSlots {
        EncoderSlots {
            w1: tape.leaf(self.w1.clone()),
            w2: tape.leaf(self.w2.clone()),
            act: self.act,
        }
    }
}

impl ProjectionParams {
    pub fn register(&self, tape: &mut Tape) -> ProjectionSlots {
        ProjectionSlots {
            wp1: tape.leaf(self.wp1.clone()),
            bp1: tape.leaf(self.bp1.clone()),
            wp2: tape.leaf(self.wp2.clone()),
            bp2: tape.leaf(self.bp2.clone()),
        }
    }
}

fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> DenseMatrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let values = (0..rows * cols)
        .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * limit)
        .collect();
    DenseMatrix::from_vec(rows, cols, values).expect("glorot values are finite")
}

/// Glorot-uniform weights, zero biases, deterministic per seed.
pub fn init_params(
    seed: u64,
    d: usize,
    n_h: usize,
    act: Activation,
) -> Result<(EncoderParams, ProjectionParams)> {
    if d == 0 || n_h == 0 {
        return Err(Error::InvalidConfig("d and n_h must be >= 1".into()));
    }
    let mut rng = derive_rng(seed, &[stream::INIT]);
    let encoder = EncoderParams {
        w1: glorot(&mut rng, d, 2 * n_h),
        w2: glorot(&mut rng, 2 * n_h, n_h),
        act,
    };
    let projection = ProjectionParams {
        wp1: glorot(&mut rng, n_h, n_h),
        bp1: DenseMatrix::zeros(1, n_h),
        wp2: glorot(&mut rng, n_h, n_h),
        bp2: DenseMatrix::zeros(1, n_h),
    };
    Ok((encoder, projection))
}

/// Embeddings of a view on the tape: `A_hat · act(A_hat · X · W1) · W2`.
pub fn encode(
    tape: &mut Tape,
    op: &AdjacencyOperator,
    features: TapeId,
    slots: &EncoderSlots,
) -> Result<TapeId> {
    let xw = tape.matmul(features, slots.w1)?;
    let layer1 = op.spmm(tape, xw)?;
    let hidden = slots.act.apply(tape, layer1)?;
    let layer2 = op.spmm(tape, hidden)?;
    tape.matmul(layer2, slots.w2)
}

/// Projection head on the tape: `elu(Z · Wp1 + bp1) · Wp2 + bp2`, row-wise.
pub fn project(tape: &mut Tape, z: TapeId, slots: &ProjectionSlots) -> Result<TapeId> {
    let a = tape.matmul(z, slots.wp1)?;
    let a = tape.add_bias(a, slots.bp1)?;
    let h = tape.elu(a)?;
    let b = tape.matmul(h, slots.wp2)?;
    tape.add_bias(b, slots.bp2)
}

/// Tape-free encoder forward over an explicit edge set. Shares the exact
/// normalization and propagation kernels with the tape path, so results are
/// bit-identical; used for embedding export and attack-time re-encoding.
pub fn encode_plain(
    n: usize,
    edges: &[Edge],
    features: &DenseMatrix,
    params: &EncoderParams,
) -> Result<DenseMatrix> {
    let structure = AdjStructure {
        n,
        endpoints: edges.iter().map(|e| (e.u, e.v)).collect(),
    };
    let weights = DenseMatrix::from_vec(
        structure.edge_count(),
        1,
        edges.iter().map(|e| e.w).collect(),
    )?;
    let norm = tape::normalize_adjacency_forward(&weights, &structure)?;
    let xw = features.matmul(&params.w1)?;
    let layer1 = tape::spmm_forward(&norm, &xw, &structure)?;
    let hidden = params.act.apply_plain(&layer1);
    let layer2 = tape::spmm_forward(&norm, &hidden, &structure)?;
    layer2.matmul(&params.w2)
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    n_h: usize,
    input_dim: usize,
    act: Activation,
    seed: u64,
    method: String,
    matrices: Vec<(String, usize, usize)>,
}

/// Write encoder + projection parameters as CSV matrices plus a JSON
/// manifest recording shapes, activation, seed, and training method.
pub fn save_checkpoint(
    dir: &Path,
    encoder: &EncoderParams,
    projection: &ProjectionParams,
    seed: u64,
    method: &str,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let named: [(&str, &DenseMatrix); 6] = [
        ("w1", &encoder.w1),
        ("w2", &encoder.w2),
        ("wp1", &projection.wp1),
        ("bp1", &projection.bp1),
        ("wp2", &projection.wp2),
        ("bp2", &projection.bp2),
    ];
    let manifest = CheckpointManifest {
        n_h: encoder.embedding_dim(),
        input_dim: encoder.input_dim(),
        act: encoder.act,
        seed,
        method: method.to_string(),
        matrices: named
            .iter()
            .map(|(name, m)| (name.to_string(), m.rows(), m.cols()))
            .collect(),
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    for (name, m) in named {
        fs::write(dir.join(format!("{name}.csv")), matrix_to_csv(m))?;
    }
    Ok(())
}

/// Load a checkpoint written by [`save_checkpoint`]; returns the parameters
/// and the training method recorded in the manifest.
pub fn load_checkpoint(dir: &Path) -> Result<(EncoderParams, ProjectionParams, String)> {
    let text = fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| Error::Data(format!("checkpoint manifest: {e}")))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    let load = |name: &str| -> Result<DenseMatrix> {
        let (_, rows, cols) = manifest
            .matrices
            .iter()
            .find(|(n, _, _)| n == name)
            .ok_or_else(|| Error::Data(format!("checkpoint missing matrix {name}")))?;
        matrix_from_csv(&fs::read_to_string(dir.join(format!("{name}.csv")))?, *rows, *cols)
    };
    let encoder = EncoderParams {
        w1: load("w1")?,
        w2: load("w2")?,
        act: manifest.act,
    };
    let projection = ProjectionParams {
        wp1: load("wp1")?,
        bp1: load("bp1")?,
        wp2: load("wp2")?,
        bp2: load("bp2")?,
    };
    Ok((encoder, projection, manifest.method))
}

/// Shortest round-trip float formatting, one row per line.
pub fn matrix_to_csv(m: &DenseMatrix) -> String {
    let mut out = String::new();
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn matrix_from_csv(text: &str, rows: usize, cols: usize) -> Result<DenseMatrix> {
    let mut values = Vec::with_capacity(rows * cols);
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        for tok in line.split(',') {
            values.push(
                tok.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Data(format!("bad float {tok:?}")))?,
            );
        }
    }
    DenseMatrix::from_vec(rows, cols, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjacency::normalized_adjacency;
    use crate::graph::{preprocess, RawGraph};
    use crate::tape::fd_check;
    use std::sync::Arc;

    fn graph(n: usize, edges: &[(usize, usize)], features: Vec<Vec<f64>>) -> crate::graph::Graph {
        preprocess(RawGraph {
            num_nodes: n,
            features,
            edges: edges.iter().map(|&(a, b)| (a, b, 1.0)).collect(),
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn init_shapes_and_determinism() {
        let (enc, _) = init_params(0, 1, 1, Activation::Relu).unwrap();
        assert_eq!(enc.w1.shape(), (1, 2));
        assert_eq!(enc.w2.shape(), (2, 1));

        let a = init_params(42, 5, 3, Activation::Relu).unwrap();
        let b = init_params(42, 5, 3, Activation::Relu).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn init_respects_glorot_bound() {
        let (enc, proj) = init_params(0, 16, 8, Activation::Relu).unwrap();
        for (m, fan_in, fan_out) in [
            (&enc.w1, 16, 16),
            (&enc.w2, 16, 8),
            (&proj.wp1, 8, 8),
            (&proj.wp2, 8, 8),
        ] {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            assert!(m.values().iter().all(|w| w.abs() <= limit));
        }
        assert!(proj.bp1.values().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn edgeless_identity_features_reduce_to_mlp() {
        // With A_hat = I and X = I, row i of Z is act(W1)·W2 row i.
        let g = graph(2, &[], vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let (enc, _) = init_params(3, 2, 2, Activation::Relu).unwrap();
        let z = encode_plain(2, g.edges(), g.features(), &enc).unwrap();
        let want = enc.w1.map(|v| v.max(0.0)).matmul(&enc.w2).unwrap();
        assert_eq!(z, want);
    }

    #[test]
    fn zero_features_give_zero_embeddings() {
        let g = graph(3, &[(0, 1), (1, 2)], vec![vec![0.0; 4]; 3]);
        let (enc, _) = init_params(1, 4, 3, Activation::Relu).unwrap();
        let z = encode_plain(3, g.edges(), g.features(), &enc).unwrap();
        assert!(z.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_matches_hand_dense_oracle() {
        // 2-node single-edge graph, small fixed params, dense evaluation.
        let g = graph(2, &[(0, 1)], vec![vec![1.0, 0.0], vec![1.0, 1.0]]);
        let enc = EncoderParams {
            w1: DenseMatrix::from_rows(&[vec![0.3, -0.2], vec![0.5, 0.1]]).unwrap(),
            w2: DenseMatrix::from_rows(&[vec![0.7], vec![-0.4]]).unwrap(),
            act: Activation::Relu,
        };
        let z = encode_plain(2, g.edges(), g.features(), &enc).unwrap();

        let a_hat = DenseMatrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let xw = g.features().matmul(&enc.w1).unwrap();
        let h = a_hat.matmul(&xw).unwrap().map(|v| v.max(0.0));
        let want = a_hat.matmul(&h).unwrap().matmul(&enc.w2).unwrap();
        for (a, b) in z.values().iter().zip(want.values()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn tape_and_plain_forward_agree_bitwise() {
        let g = crate::graph::sbm_generate(9, &[8, 8], 0.4, 0.1).unwrap();
        let (enc, _) = init_params(5, g.feature_dim(), 4, Activation::prelu_default()).unwrap();

        let mut tape = Tape::new();
        let op = normalized_adjacency(&mut tape, &g, &[], false).unwrap();
        let x = tape.leaf(g.features().clone());
        let slots = enc.register(&mut tape);
        let z = encode(&mut tape, &op, x, &slots).unwrap();

        let plain = encode_plain(g.num_nodes(), g.edges(), g.features(), &enc).unwrap();
        assert_eq!(tape.value(z), &plain);
    }

    #[test]
    fn projection_zero_and_identity_cases() {
        let z = DenseMatrix::from_rows(&[vec![0.5, 1.0], vec![2.0, 0.25]]).unwrap();
        let zero = ProjectionParams {
            wp1: DenseMatrix::zeros(2, 2),
            bp1: DenseMatrix::zeros(1, 2),
            wp2: DenseMatrix::zeros(2, 2),
            bp2: DenseMatrix::zeros(1, 2),
        };
        let mut tape = Tape::new();
        let zid = tape.leaf(z.clone());
        let slots = zero.register(&mut tape);
        let h = project(&mut tape, zid, &slots).unwrap();
        assert!(tape.value(h).values().iter().all(|&v| v == 0.0));

        // Identity weights and nonnegative Z pass through elu unchanged.
        let ident = ProjectionParams {
            wp1: DenseMatrix::identity(2),
            bp1: DenseMatrix::zeros(1, 2),
            wp2: DenseMatrix::identity(2),
            bp2: DenseMatrix::zeros(1, 2),
        };
        let mut tape = Tape::new();
        let zid = tape.leaf(z.clone());
        let slots = ident.register(&mut tape);
        let h = project(&mut tape, zid, &slots).unwrap();
        assert_eq!(tape.value(h), &z);
    }

    #[test]
    fn projection_matches_dense_oracle() {
        let (_, proj) = init_params(8, 3, 3, Activation::Relu).unwrap();
        let z = DenseMatrix::from_rows(&[vec![0.2, -0.4, 1.0], vec![-1.5, 0.0, 0.3]]).unwrap();

        let mut tape = Tape::new();
        let zid = tape.leaf(z.clone());
        let slots = proj.register(&mut tape);
        let h = project(&mut tape, zid, &slots).unwrap();

        // Independent row-wise dense evaluation.
        let pre = z.matmul(&proj.wp1).unwrap();
        let mut act = pre.clone();
        for r in 0..act.rows() {
            for c in 0..act.cols() {
                let v = act.get(r, c) + proj.bp1.get(0, c);
                act.set(r, c, if v > 0.0 { v } else { v.exp() - 1.0 });
            }
        }
        let mut want = act.matmul(&proj.wp2).unwrap();
        for r in 0..want.rows() {
            for c in 0..want.cols() {
                want.set(r, c, want.get(r, c) + proj.bp2.get(0, c));
            }
        }
        for (a, b) in tape.value(h).values().iter().zip(want.values()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn node_permutation_permutes_embeddings() {
        let g = crate::graph::sbm_generate(21, &[6, 6], 0.5, 0.2).unwrap();
        let n = g.num_nodes();
        let (enc, _) = init_params(2, g.feature_dim(), 3, Activation::Relu).unwrap();
        let z = encode_plain(n, g.edges(), g.features(), &enc).unwrap();

        // Reverse permutation: node i -> n-1-i.
        let perm = |i: u32| (n as u32 - 1) - i;
        let mut feats = vec![vec![0.0; g.feature_dim()]; n];
        for i in 0..n {
            feats[perm(i as u32) as usize] = g.features().row(i).to_vec();
        }
        let edges: Vec<(usize, usize, f64)> = g
            .edges()
            .iter()
            .map(|e| (perm(e.u) as usize, perm(e.v) as usize, e.w))
            .collect();
        let gp = preprocess(RawGraph {
            num_nodes: n,
            features: feats,
            edges,
            ..Default::default()
        })
        .unwrap();
        let zp = encode_plain(n, gp.edges(), gp.features(), &enc).unwrap();
        for i in 0..n {
            for c in 0..3 {
                let a = z.get(i, c);
                let b = zp.get(perm(i as u32) as usize, c);
                assert!((a - b).abs() < 1e-12, "row {i} col {c}");
            }
        }
    }

    #[test]
    fn encode_project_composite_passes_gradient_check() {
        let g = graph(
            5,
            &[(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)],
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![0.0, 0.0], vec![1.0, 0.0]],
        );
        let (enc, proj) = init_params(17, 2, 3, Activation::prelu_default()).unwrap();
        let x = g.features().clone();
        let edges: Vec<(u32, u32)> = g.edges().iter().map(|e| (e.u, e.v)).collect();
        let structure = Arc::new(AdjStructure { n: 5, endpoints: edges });
        let e_count = structure.edge_count();

        let report = fd_check(
            move |tape, ids| {
                let op = AdjacencyOperator::from_weights(
                    tape,
                    structure.clone(),
                    e_count,
                    ids[0],
                    false,
                )?;
                let xid = tape.leaf(x.clone());
                let slots = EncoderSlots {
                    w1: ids[1],
                    w2: ids[2],
                    act: Activation::prelu_default(),
                };
                let pslots = ProjectionSlots {
                    wp1: ids[3],
                    bp1: ids[4],
                    wp2: ids[5],
                    bp2: ids[6],
                };
                let z = encode(tape, &op, xid, &slots)?;
                let h = project(tape, z, &pslots)?;
                tape.sum(h)
            },
            &[
                DenseMatrix::from_vec(e_count, 1, vec![1.0; e_count]).unwrap(),
                enc.w1.clone(),
                enc.w2.clone(),
                proj.wp1.clone(),
                proj.bp1.clone(),
                proj.wp2.clone(),
                proj.bp2.clone(),
            ],
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-5, "err {}", report.max_rel_err);
    }

    #[test]
    fn checkpoint_round_trip() {
        let (enc, proj) = init_params(4, 6, 4, Activation::prelu_default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &enc, &proj, 4, "grace").unwrap();
        let (enc2, proj2, method) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(enc, enc2);
        assert_eq!(proj, proj2);
        assert_eq!(method, "grace");
    }
}
