//! The optimization loop.
//!
//! All four methods share one skeleton: per epoch, partition the nodes into
//! anchor batches; per batch, build two views, compute the symmetric
//! contrastive objective over the anchors, and take an Adam step. The methods
//! differ only in how the views are built:
//!
//! - `grace` / `gca-de`: full-graph anchors, stochastic edge removal
//!   (uniform / degree-weighted) plus feature masking.
//! - `grace-adv`: full-graph anchors, feature masking, then gradient-ranked
//!   edge removal driven by a preliminary forward/backward pass.
//! - `groc`: batched anchors, feature masking, then gradient-ranked removal
//!   and insertion; insertion candidates participate in the preliminary pass
//!   at weight `1/|S+|` and the chosen ones enter the final view at weight 1.
//!
//! Every random decision draws from its own derived stream, so setting the
//! adversarial rates to zero reproduces the stochastic baselines bit for bit.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adjacency::AdjacencyOperator;
use crate::contrastive::{objective, BatchSpec, Objective, SimilarityConfig};
use crate::encoder::{
    encode, init_params, project, Activation, EncoderParams, EncoderSlots, ProjectionParams,
    ProjectionSlots,
};
use crate::error::{Error, Result};
use crate::graph::{receptive_fields, Graph, ReceptiveField};
use crate::matrix::DenseMatrix;
use crate::rng::{derive_rng, stream};
use crate::tape::{AdjStructure, Tape, TapeId};
use crate::transforms::{
    apply_adversarial, build_candidate_sets, drop_edges_stochastic, mask_features,
    AdversarialConfig, CandidateSets, EdgeGradients, MaskAxis, RemovalScheme, StochasticConfig,
    ViewDelta,
};

/// Encoder depth; receptive fields are computed at this horizon.
pub const ENCODER_DEPTH: usize = 2;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Grace,
    GcaDe,
    GraceAdv,
    Groc,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Grace => "grace",
            Method::GcaDe => "gca-de",
            Method::GraceAdv => "grace-adv",
            Method::Groc => "groc",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "grace" => Ok(Method::Grace),
            "gca-de" => Ok(Method::GcaDe),
            "grace-adv" => Ok(Method::GraceAdv),
            "groc" => Ok(Method::Groc),
            other => Err(Error::InvalidConfig(format!("unknown method {other:?}"))),
        }
    }

    /// Does this method run the preliminary pass and gradient-ranked edits?
    pub fn is_adversarial(&self) -> bool {
        matches!(self, Method::GraceAdv | Method::Groc)
    }

    /// Does this method remove edges stochastically when building views?
    pub fn uses_stochastic_removal(&self) -> bool {
        matches!(self, Method::Grace | Method::GcaDe)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub n_epochs: usize,
    pub seed: u64,
    pub n_h: usize,
    pub act: Activation,
    pub stochastic: StochasticConfig,
    pub adversarial: AdversarialConfig,
    pub similarity: SimilarityConfig,
    /// Stop-gradient through the degree terms of the normalization (ablation).
    pub detach_normalization: bool,
}

impl TrainConfig {
    /// Desk-scale defaults for the synthetic block-model fixtures. The
    /// adversarial methods use the reduced removal rate 0.01 and ten anchors
    /// per batch; the plain methods train longer since each epoch is one
    /// full-graph step.
    pub fn desk_preset(method: Method, seed: u64) -> TrainConfig {
        let adversarial = method.is_adversarial();
        TrainConfig {
            method,
            learning_rate: 0.01,
            weight_decay: 1e-5,
            // The plain methods take one full-graph step per epoch; groc takes
            // n/b batched steps per epoch and needs far fewer of them.
            n_epochs: match method {
                Method::Groc => 30,
                _ => 300,
            },
            seed,
            n_h: 32,
            act: Activation::Relu,
            stochastic: StochasticConfig {
                p1: 0.3,
                p2: 0.3,
                q_minus_1: if adversarial { 0.01 } else { 0.2 },
                q_minus_2: if adversarial { 0.01 } else { 0.2 },
                removal_scheme: if method == Method::GcaDe {
                    RemovalScheme::DegreeWeighted
                } else {
                    RemovalScheme::Uniform
                },
                mask_axis: MaskAxis::Column,
            },
            adversarial: AdversarialConfig {
                q_plus_1: if method == Method::Groc { 0.1 } else { 0.0 },
                q_plus_2: if method == Method::Groc { 0.1 } else { 0.0 },
                batch_size: 10,
            },
            similarity: SimilarityConfig { temperature: 0.5 },
            detach_normalization: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("weight_decay must be >= 0".into()));
        }
        if self.n_epochs == 0 {
            return Err(Error::InvalidConfig("n_epochs must be >= 1".into()));
        }
        if self.n_h == 0 {
            return Err(Error::InvalidConfig("n_h must be >= 1".into()));
        }
        self.stochastic.validate()?;
        self.adversarial.validate()?;
        self.similarity.validate()?;
        match (self.method, self.stochastic.removal_scheme) {
            (Method::Grace, RemovalScheme::DegreeWeighted) => Err(Error::InvalidConfig(
                "grace removes edges uniformly; degree-weighted removal is gca-de".into(),
            )),
            (Method::GcaDe, RemovalScheme::Uniform) => Err(Error::InvalidConfig(
                "gca-de removes edges by inverse degree centrality".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Per-epoch training statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub removed: usize,
    pub inserted: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Anchor rows whose projected embedding had zero norm (neutral cosine).
    pub zero_norm_rows: usize,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,removed,inserted,seconds\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:?},{},{},{:.3}\n",
                e.epoch, e.loss, e.removed, e.inserted, e.seconds
            ));
        }
        out
    }
}

pub struct TrainOutput {
    pub encoder: EncoderParams,
    pub projection: ProjectionParams,
    pub report: TrainReport,
}

/// Adam moments for the six parameter matrices, in registration order.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<DenseMatrix>,
    v: Vec<DenseMatrix>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[&DenseMatrix]) -> Self {
        AdamState {
            m: params.iter().map(|p| DenseMatrix::zeros(p.rows(), p.cols())).collect(),
            v: params.iter().map(|p| DenseMatrix::zeros(p.rows(), p.cols())).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Bias-corrected Adam update with the L2 penalty added to the gradient
/// (`g + lambda * theta`).
pub fn adam_step(
    params: &mut [&mut DenseMatrix],
    grads: &[&DenseMatrix],
    state: &mut AdamState,
    learning_rate: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch("adam_step slot count".into()));
    }
    for g in grads {
        if !g.is_finite() {
            return Err(Error::Numerical("non-finite gradient in adam_step".into()));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - ADAM_BETA1.powf(t);
    let bc2 = 1.0 - ADAM_BETA2.powf(t);

    for (slot, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
        if param.shape() != grad.shape() {
            return Err(Error::ShapeMismatch(format!("adam_step slot {slot}")));
        }
        let m = &mut state.m[slot];
        let v = &mut state.v[slot];
        for i in 0..param.len() {
            let theta = param.values()[i];
            let g = grad.values()[i] + weight_decay * theta;
            let mi = ADAM_BETA1 * m.values()[i] + (1.0 - ADAM_BETA1) * g;
            let vi = ADAM_BETA2 * v.values()[i] + (1.0 - ADAM_BETA2) * g * g;
            m.values_mut()[i] = mi;
            v.values_mut()[i] = vi;
            let update = learning_rate * (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPSILON);
            param.values_mut()[i] = theta - update;
        }
    }
    Ok(())
}

/// Random partition of `0..n` into batches of size `b`; the last batch may be
/// short. Every node is an anchor exactly once per epoch.
pub fn partition_anchors(n: usize, b: usize, rng: &mut impl rand::Rng) -> Result<Vec<BatchSpec>> {
    if b == 0 {
        return Err(Error::InvalidConfig("batch size must be >= 1".into()));
    }
    let mut ids: Vec<u32> = (0..n as u32).collect();
    ids.shuffle(rng);
    ids.chunks(b).map(|chunk| BatchSpec::new(chunk.to_vec())).collect()
}

/// Everything needed to run one view through the encoder on a tape: the edge
/// structure (base view edges followed by temporarily inserted candidates),
/// the initial weight values for that structure, and the masked features.
#[derive(Clone)]
pub struct ViewProgram {
    pub structure: Arc<AdjStructure>,
    pub base_count: usize,
    pub initial_weights: DenseMatrix,
    pub features: DenseMatrix,
}

impl ViewProgram {
    pub fn new(view: &Graph, temporary: &[(u32, u32, f64)], features: DenseMatrix) -> Result<Self> {
        let mut endpoints: Vec<(u32, u32)> = view.edges().iter().map(|e| (e.u, e.v)).collect();
        let mut weights: Vec<f64> = view.edges().iter().map(|e| e.w).collect();
        for &(u, v, w) in temporary {
            endpoints.push((u.min(v), u.max(v)));
            weights.push(w);
        }
        let base_count = view.edges().len();
        let structure = Arc::new(AdjStructure {
            n: view.num_nodes(),
            endpoints,
        });
        Ok(ViewProgram {
            base_count,
            initial_weights: DenseMatrix::from_vec(structure.edge_count(), 1, weights)?,
            structure,
            features,
        })
    }

    /// Split a gradient at this view's weight leaf into per-base-edge and
    /// per-temporary-candidate tables.
    pub fn split_gradients(&self, weight_grad: &DenseMatrix) -> EdgeGradients {
        let values = weight_grad.values();
        EdgeGradients {
            base: values[..self.base_count].to_vec(),
            inserted: values[self.base_count..].to_vec(),
        }
    }
}

/// Record both views' encoder + projection + symmetric objective on one tape.
///
/// This single function is the loss program of every pass in the trainer:
/// the caller supplies the weight leaves (so gradient checks can perturb
/// them) and receives the scalar objective.
#[allow(clippy::too_many_arguments)]
pub fn contrastive_pass(
    tape: &mut Tape,
    view1: &ViewProgram,
    view2: &ViewProgram,
    weights1: TapeId,
    weights2: TapeId,
    enc: &EncoderSlots,
    proj: &ProjectionSlots,
    anchors: &BatchSpec,
    similarity: &SimilarityConfig,
    detach_normalization: bool,
) -> Result<Objective> {
    let op1 = AdjacencyOperator::from_weights(
        tape,
        view1.structure.clone(),
        view1.base_count,
        weights1,
        detach_normalization,
    )?;
    let op2 = AdjacencyOperator::from_weights(
        tape,
        view2.structure.clone(),
        view2.base_count,
        weights2,
        detach_normalization,
    )?;
    let x1 = tape.leaf(view1.features.clone());
    let x2 = tape.leaf(view2.features.clone());
    let z1 = encode(tape, &op1, x1, enc)?;
    let z2 = encode(tape, &op2, x2, enc)?;
    let h1 = project(tape, z1, proj)?;
    let h2 = project(tape, z2, proj)?;
    objective(tape, h1, h2, anchors, similarity)
}

struct BatchOutcome {
    loss: f64,
    removed: usize,
    inserted: usize,
    zero_norm_rows: usize,
}

/// Train with the configured method. Deterministic for a fixed
/// (graph, config) pair; see the crate docs for the method degeneracies.
pub fn train(g: &Graph, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let n = g.num_nodes();
    let (mut enc_params, mut proj_params) = init_params(cfg.seed, g.feature_dim(), cfg.n_h, cfg.act)?;
    let mut adam = AdamState::new(&[
        &enc_params.w1,
        &enc_params.w2,
        &proj_params.wp1,
        &proj_params.bp1,
        &proj_params.wp2,
        &proj_params.bp2,
    ]);

    let fields: Option<Vec<ReceptiveField>> = if cfg.method.is_adversarial() {
        Some(receptive_fields(g, ENCODER_DEPTH)?)
    } else {
        None
    };

    let mut report = TrainReport::default();
    for epoch in 0..cfg.n_epochs {
        let started = Instant::now();
        let batch_size = if cfg.method == Method::Groc {
            cfg.adversarial.batch_size.min(n)
        } else {
            n
        };
        let mut partition_rng = derive_rng(cfg.seed, &[stream::PARTITION, epoch as u64]);
        let batches = partition_anchors(n, batch_size, &mut partition_rng)?;

        let mut loss_sum = 0.0;
        let mut removed = 0;
        let mut inserted = 0;
        let mut zero_norm = 0;
        for (batch_index, anchors) in batches.iter().enumerate() {
            let outcome = run_batch(
                g,
                cfg,
                fields.as_deref(),
                anchors,
                epoch,
                batch_index,
                &mut enc_params,
                &mut proj_params,
                &mut adam,
            )?;
            loss_sum += outcome.loss;
            removed += outcome.removed;
            inserted += outcome.inserted;
            zero_norm += outcome.zero_norm_rows;
        }

        let loss = loss_sum / batches.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("epoch {epoch} loss is not finite")));
        }
        report.epochs.push(EpochStats {
            epoch: epoch + 1,
            loss,
            removed,
            inserted,
            seconds: started.elapsed().as_secs_f64(),
        });
        report.zero_norm_rows += zero_norm;
    }

    Ok(TrainOutput {
        encoder: enc_params,
        projection: proj_params,
        report,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_batch(
    g: &Graph,
    cfg: &TrainConfig,
    fields: Option<&[ReceptiveField]>,
    anchors: &BatchSpec,
    epoch: usize,
    batch_index: usize,
    enc_params: &mut EncoderParams,
    proj_params: &mut ProjectionParams,
    adam: &mut AdamState,
) -> Result<BatchOutcome> {
    let (e, bi) = (epoch as u64, batch_index as u64);

    // Stochastic part: feature masks always, edge removal for the baselines.
    let mask = |p: f64, view: u64| -> Result<DenseMatrix> {
        let mut rng = derive_rng(cfg.seed, &[stream::MASK, e, bi, view]);
        let (masked, _) = mask_features(g.features(), p, cfg.stochastic.mask_axis, &mut rng)?;
        Ok(masked)
    };
    let x1 = mask(cfg.stochastic.p1, 1)?;
    let x2 = mask(cfg.stochastic.p2, 2)?;

    let structural = |q: f64, view: u64| -> Result<(Graph, usize)> {
        if cfg.method.uses_stochastic_removal() {
            let mut rng = derive_rng(cfg.seed, &[stream::DROP, e, bi, view]);
            let (dropped, removed) =
                drop_edges_stochastic(g, q, cfg.stochastic.removal_scheme, &mut rng)?;
            Ok((dropped, removed.len()))
        } else {
            Ok((g.clone(), 0))
        }
    };
    let (base1, stoch_removed1) = structural(cfg.stochastic.q_minus_1, 1)?;
    let (base2, stoch_removed2) = structural(cfg.stochastic.q_minus_2, 2)?;

    let mut removed = stoch_removed1 + stoch_removed2;
    let mut inserted = 0;
    let mut zero_norm_rows = 0;

    // Adversarial part: preliminary pass, then gradient-ranked edits.
    let (final1, final2) = if cfg.method.is_adversarial() {
        let fields = fields.expect("receptive fields precomputed for adversarial methods");
        let want_insertion = cfg.adversarial.q_plus_1 > 0.0 || cfg.adversarial.q_plus_2 > 0.0;
        let mut sets = build_candidate_sets(anchors, fields, g);
        if !want_insertion {
            sets.insertion.clear();
        }
        let temporary = sets.temporary_edges();

        let (grads1, grads2) = preliminary_gradients(
            cfg,
            enc_params,
            proj_params,
            &base1,
            &base2,
            &x1,
            &x2,
            &temporary,
            anchors,
            &mut zero_norm_rows,
        )?;

        let (view1, delta1) =
            apply_adversarial(&base1, &grads1, &sets, cfg.stochastic.q_minus_1, cfg.adversarial.q_plus_1)?;
        let (view2, delta2) =
            apply_adversarial(&base2, &grads2, &sets, cfg.stochastic.q_minus_2, cfg.adversarial.q_plus_2)?;
        removed += delta1.removed_edges.len() + delta2.removed_edges.len();
        inserted += count_inserted(&delta1) + count_inserted(&delta2);
        (view1, view2)
    } else {
        (base1, base2)
    };

    // Final pass and parameter update.
    let mut tape = Tape::new();
    let v1 = ViewProgram::new(&final1, &[], x1)?;
    let v2 = ViewProgram::new(&final2, &[], x2)?;
    let w1 = tape.leaf(v1.initial_weights.clone());
    let w2 = tape.leaf(v2.initial_weights.clone());
    let enc_slots = enc_params.register(&mut tape);
    let proj_slots = proj_params.register(&mut tape);
    let obj = contrastive_pass(
        &mut tape,
        &v1,
        &v2,
        w1,
        w2,
        &enc_slots,
        &proj_slots,
        anchors,
        &cfg.similarity,
        cfg.detach_normalization,
    )?;
    zero_norm_rows += obj.zero_norm_rows;
    let loss = tape.value(obj.loss).scalar_value()?;
    let grads = tape.backward(obj.loss)?;

    let grad_values = [
        grads.get(enc_slots.w1),
        grads.get(enc_slots.w2),
        grads.get(proj_slots.wp1),
        grads.get(proj_slots.bp1),
        grads.get(proj_slots.wp2),
        grads.get(proj_slots.bp2),
    ];
    adam_step(
        &mut [
            &mut enc_params.w1,
            &mut enc_params.w2,
            &mut proj_params.wp1,
            &mut proj_params.bp1,
            &mut proj_params.wp2,
            &mut proj_params.bp2,
        ],
        &grad_values.iter().collect::<Vec<_>>(),
        adam,
        cfg.learning_rate,
        cfg.weight_decay,
    )?;

    Ok(BatchOutcome {
        loss,
        removed,
        inserted,
        zero_norm_rows,
    })
}

fn count_inserted(delta: &ViewDelta) -> usize {
    delta.inserted_edges.len()
}

/// One shared preliminary pass: both views (with S+ temporarily present)
/// feed a single objective, one backward yields the signed gradient tables
/// for both views' edges.
#[allow(clippy::too_many_arguments)]
fn preliminary_gradients(
    cfg: &TrainConfig,
    enc_params: &EncoderParams,
    proj_params: &ProjectionParams,
    base1: &Graph,
    base2: &Graph,
    x1: &DenseMatrix,
    x2: &DenseMatrix,
    temporary: &[(u32, u32, f64)],
    anchors: &BatchSpec,
    zero_norm_rows: &mut usize,
) -> Result<(EdgeGradients, EdgeGradients)> {
    let mut tape = Tape::new();
    let v1 = ViewProgram::new(base1, temporary, x1.clone())?;
    let v2 = ViewProgram::new(base2, temporary, x2.clone())?;
    let w1 = tape.leaf(v1.initial_weights.clone());
    let w2 = tape.leaf(v2.initial_weights.clone());
    let enc_slots = enc_params.register(&mut tape);
    let proj_slots = proj_params.register(&mut tape);
    let obj = contrastive_pass(
        &mut tape,
        &v1,
        &v2,
        w1,
        w2,
        &enc_slots,
        &proj_slots,
        anchors,
        &cfg.similarity,
        cfg.detach_normalization,
    )?;
    *zero_norm_rows += obj.zero_norm_rows;
    let grads = tape.backward(obj.loss)?;
    Ok((
        v1.split_gradients(&grads.get(w1)),
        v2.split_gradients(&grads.get(w2)),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::sbm_generate;

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = DenseMatrix::from_vec(2, 2, vec![0.5, -0.5, 1.0, 2.0]).unwrap();
        let g = DenseMatrix::zeros(2, 2);
        let mut state = AdamState::new(&[&p]);
        let before = p.clone();
        adam_step(&mut [&mut p], &[&g], &mut state, 0.1, 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_magnitude_is_learning_rate() {
        let mut p = DenseMatrix::scalar(0.0);
        let g = DenseMatrix::scalar(1.0);
        let mut state = AdamState::new(&[&p]);
        adam_step(&mut [&mut p], &[&g], &mut state, 0.05, 0.0).unwrap();
        assert!((p.values()[0].abs() - 0.05).abs() < 1e-9);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // Minimize theta^2 from theta = 1; gradient is 2 theta.
        let mut p = DenseMatrix::scalar(1.0);
        let mut state = AdamState::new(&[&p]);
        for _ in 0..200 {
            let g = DenseMatrix::scalar(2.0 * p.values()[0]);
            adam_step(&mut [&mut p], &[&g], &mut state, 0.1, 0.0).unwrap();
        }
        assert!(p.values()[0].abs() < 1e-3, "theta = {}", p.values()[0]);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut p = DenseMatrix::scalar(1.0);
        let mut g = DenseMatrix::scalar(0.0);
        g.values_mut()[0] = f64::NAN;
        let mut state = AdamState::new(&[&p]);
        let res = adam_step(&mut [&mut p], &[&g], &mut state, 0.1, 0.0);
        assert!(matches!(res, Err(Error::Numerical(_))));
    }

    #[test]
    fn partition_covers_every_node_once() {
        let mut rng = derive_rng(3, &[stream::PARTITION, 0]);
        let batches = partition_anchors(200, 10, &mut rng).unwrap();
        assert_eq!(batches.len(), 20);
        let mut seen: Vec<u32> = batches.iter().flat_map(|b| b.anchors().to_vec()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..200).collect::<Vec<u32>>());

        let mut rng = derive_rng(3, &[stream::PARTITION, 1]);
        let short = partition_anchors(23, 10, &mut rng).unwrap();
        assert_eq!(short.iter().map(|b| b.len()).collect::<Vec<_>>(), vec![10, 10, 3]);
    }

    #[test]
    fn groc_with_zero_rates_degenerates_to_grace() {
        let g = sbm_generate(7, &[20, 20], 0.2, 0.05).unwrap();
        let mut grace = TrainConfig::desk_preset(Method::Grace, 11);
        grace.n_epochs = 8;
        grace.stochastic.q_minus_1 = 0.0;
        grace.stochastic.q_minus_2 = 0.0;

        let mut groc = TrainConfig::desk_preset(Method::Groc, 11);
        groc.n_epochs = 8;
        groc.stochastic.q_minus_1 = 0.0;
        groc.stochastic.q_minus_2 = 0.0;
        groc.adversarial.q_plus_1 = 0.0;
        groc.adversarial.q_plus_2 = 0.0;
        groc.adversarial.batch_size = g.num_nodes();

        let a = train(&g, &grace).unwrap();
        let b = train(&g, &groc).unwrap();
        for (ea, eb) in a.report.epochs.iter().zip(&b.report.epochs) {
            assert_eq!(ea.loss.to_bits(), eb.loss.to_bits(), "epoch {}", ea.epoch);
        }
        assert_eq!(a.encoder, b.encoder);
        assert_eq!(a.projection, b.projection);
    }

    #[test]
    fn grace_adv_with_zero_removal_matches_grace() {
        let g = sbm_generate(5, &[15, 15], 0.25, 0.05).unwrap();
        let mut grace = TrainConfig::desk_preset(Method::Grace, 2);
        grace.n_epochs = 6;
        grace.stochastic.q_minus_1 = 0.0;
        grace.stochastic.q_minus_2 = 0.0;

        let mut adv = TrainConfig::desk_preset(Method::GraceAdv, 2);
        adv.n_epochs = 6;
        adv.stochastic.q_minus_1 = 0.0;
        adv.stochastic.q_minus_2 = 0.0;

        let a = train(&g, &grace).unwrap();
        let b = train(&g, &adv).unwrap();
        for (ea, eb) in a.report.epochs.iter().zip(&b.report.epochs) {
            assert_eq!(ea.loss.to_bits(), eb.loss.to_bits());
        }
        assert_eq!(a.encoder, b.encoder);
    }

    #[test]
    fn training_is_deterministic() {
        let g = sbm_generate(9, &[12, 12], 0.3, 0.05).unwrap();
        let mut cfg = TrainConfig::desk_preset(Method::Groc, 4);
        cfg.n_epochs = 4;
        let a = train(&g, &cfg).unwrap();
        let b = train(&g, &cfg).unwrap();
        assert_eq!(a.encoder, b.encoder);
        assert_eq!(a.projection, b.projection);
        for (ea, eb) in a.report.epochs.iter().zip(&b.report.epochs) {
            assert_eq!(ea.loss.to_bits(), eb.loss.to_bits());
        }
    }

    #[test]
    fn groc_counts_adversarial_edits() {
        let g = sbm_generate(13, &[15, 15], 0.3, 0.05).unwrap();
        let mut cfg = TrainConfig::desk_preset(Method::Groc, 1);
        cfg.n_epochs = 2;
        cfg.stochastic.q_minus_1 = 0.2;
        cfg.stochastic.q_minus_2 = 0.2;
        cfg.adversarial.q_plus_1 = 0.2;
        cfg.adversarial.q_plus_2 = 0.2;
        let out = train(&g, &cfg).unwrap();
        let stats = &out.report.epochs[0];
        assert!(stats.removed > 0, "expected gradient-ranked removals");
        assert!(stats.inserted > 0, "expected gradient-ranked insertions");
    }

    #[test]
    fn grace_loss_decreases_on_small_fixture() {
        let g = sbm_generate(7, &[20, 20], 0.3, 0.02).unwrap();
        let mut cfg = TrainConfig::desk_preset(Method::Grace, 3);
        cfg.n_epochs = 200;
        let out = train(&g, &cfg).unwrap();
        let losses: Vec<f64> = out.report.epochs.iter().map(|e| e.loss).collect();
        assert!(losses.iter().all(|l| l.is_finite()));
        let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = losses[losses.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(tail < head - 0.1, "loss did not improve: head {head}, tail {tail}");
    }

    #[test]
    fn method_scheme_coherence_is_validated() {
        let mut cfg = TrainConfig::desk_preset(Method::Grace, 0);
        cfg.stochastic.removal_scheme = RemovalScheme::DegreeWeighted;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::desk_preset(Method::GcaDe, 0);
        assert_eq!(cfg.stochastic.removal_scheme, RemovalScheme::DegreeWeighted);
        cfg.stochastic.removal_scheme = RemovalScheme::Uniform;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn report_csv_has_expected_layout() {
        let report = TrainReport {
            epochs: vec![EpochStats {
                epoch: 1,
                loss: 3.25,
                removed: 4,
                inserted: 2,
                seconds: 0.125,
            }],
            zero_norm_rows: 0,
        };
        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("epoch,loss,removed,inserted,seconds"));
        assert_eq!(lines.next(), Some("1,3.25,4,2,0.125"));
    }
}
