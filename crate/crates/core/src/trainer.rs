//! Losses and the iterative collaborative training loop: per-layer entropy
//! selection, targeted teacher reasoning with trace caching, InfoNCE
//! distillation against teacher vectors, task supervision, AdamW updates,
//! and early stopping on validation AUC.

use crate::autodiff::{Tape, Tensor, VarId};
use crate::chain::{build_chain, hop_link_edges, ChainConfig, ChainVariant, EvidenceChain};
use crate::encoder::{cosine_sim_slices, FeatureTables};
use crate::error::{Error, Result};
use crate::eval::auc;
use crate::graph::{CitationGraph, DatasetSplit};
use crate::reasoner::{reason_edge, LlmBackend, TeacherTrace, TemplateSet};
use crate::student::{
    bind_params, edge_features_tensor, edge_reps_taped, forward_nodes_taped, linear_taped,
    BoundParams, StudentDims, StudentModel, NEUTRAL_JUDGMENT,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    /// Direct statement-citation reasoning only (chains forced to K = 1).
    NoEc,
    /// Replace distillation with teacher-judgment feature concatenation.
    NoKd,
    /// Distill at the final layer only.
    NoLd,
    /// Distill uniformly over all train edges instead of the uncertain set.
    NoTd,
}

/// Every scalar the training loop consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub k: usize,
    pub m: usize,
    pub chain_variant: ChainVariant,
    pub w_percent: f64,
    pub tau_conf: f64,
    pub delta: f64,
    /// Per-hop distillation weights; empty means uniform 1/K.
    pub lambda: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    /// Weight of the auxiliary per-layer classifier term inside the
    /// supervised loss component.
    pub aux_weight: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub d_hidden: usize,
    pub d_edge: usize,
    pub d_teacher: usize,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 2,
            m: 10,
            chain_variant: ChainVariant::Full,
            w_percent: 0.2,
            tau_conf: 0.7,
            delta: 1.0,
            lambda: Vec::new(),
            beta1: 1.0,
            beta2: 1.0,
            aux_weight: 1.0,
            lr: 1e-3,
            weight_decay: 0.01,
            batch_size: 32,
            epochs: 200,
            patience: 20,
            seed: 0,
            d_hidden: 64,
            d_edge: 64,
            d_teacher: 32,
            ablation: Ablation::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.m < 1 {
            return Err(Error::Config("K and m must be at least 1".to_string()));
        }
        if !(self.w_percent > 0.0 && self.w_percent <= 1.0) {
            return Err(Error::Config(format!(
                "w_percent must be in (0, 1], got {}",
                self.w_percent
            )));
        }
        if !(0.0..=1.0).contains(&self.tau_conf) {
            return Err(Error::Config(format!(
                "tau_conf must be in [0, 1], got {}",
                self.tau_conf
            )));
        }
        if self.delta <= 0.0 {
            return Err(Error::Config(format!(
                "delta must be positive, got {}",
                self.delta
            )));
        }
        if !self.lambda.is_empty() && self.lambda.len() != self.k {
            return Err(Error::Config(format!(
                "lambda has {} entries for K = {}",
                self.lambda.len(),
                self.k
            )));
        }
        if self.lambda.iter().any(|l| *l < 0.0) {
            return Err(Error::Config("lambda entries must be >= 0".to_string()));
        }
        if self.beta1 < 0.0 || self.beta2 < 0.0 {
            return Err(Error::Config("beta1 and beta2 must be >= 0".to_string()));
        }
        if self.batch_size < 1 || self.epochs < 1 {
            return Err(Error::Config(
                "batch_size and epochs must be at least 1".to_string(),
            ));
        }
        Ok(())
    }

    /// Per-hop weights, defaulting to uniform 1/K.
    pub fn effective_lambda(&self) -> Vec<f64> {
        if self.lambda.is_empty() {
            vec![1.0 / self.k as f64; self.k]
        } else {
            self.lambda.clone()
        }
    }

    /// Chain settings after applying the ablation.
    pub fn effective_chain_config(&self) -> ChainConfig {
        let variant = if self.ablation == Ablation::NoEc {
            ChainVariant::Directed
        } else {
            self.chain_variant
        };
        variant.to_config(self.k, self.m)
    }

    pub fn student_dims(&self, features_d_enc: usize) -> StudentDims {
        StudentDims {
            k_layers: self.k,
            d_node_in: features_d_enc,
            d_edge_in: features_d_enc,
            d_hidden: self.d_hidden,
            d_edge: self.d_edge,
            d_teacher: self.d_teacher,
            final_extra: if self.ablation == Ablation::NoKd { 1 } else { 0 },
        }
    }
}

// ---------------------------------------------------------------------------
// Pure loss functions
// ---------------------------------------------------------------------------

/// Shannon entropy of a two-class distribution, natural log, 0·ln 0 = 0.
pub fn entropy(probs: (f64, f64)) -> Result<f64> {
    let (a, b) = probs;
    if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) || (a + b - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidDistribution(format!("({a}, {b})")));
    }
    let term = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    Ok(term(a) + term(b))
}

/// Mean binary cross-entropy over labeled edges; probabilities are clamped
/// to [1e-12, 1 - 1e-12] before the log.
pub fn task_loss(p_miscite: &[f64], labels: &[u8]) -> Result<f64> {
    if p_miscite.is_empty() {
        return Err(Error::EmptyEdgeSet);
    }
    if p_miscite.len() != labels.len() {
        return Err(Error::DimensionMismatch(p_miscite.len(), labels.len()));
    }
    let mut total = 0.0;
    for (&p, &y) in p_miscite.iter().zip(labels) {
        let p = p.clamp(1e-12, 1.0 - 1e-12);
        total -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(total / p_miscite.len() as f64)
}

/// Contrastive alignment of one teacher vector against a batch of projected
/// student vectors; the denominator includes the matching pair.
pub fn infonce_loss(
    teacher: &[f64],
    student_batch: &[Vec<f64>],
    match_index: usize,
    delta: f64,
) -> Result<f64> {
    let n = student_batch.len();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    if match_index >= n {
        return Err(Error::Config(format!(
            "match_index {match_index} out of range for batch of {n}"
        )));
    }
    if delta <= 0.0 {
        return Err(Error::Config(format!("delta must be positive, got {delta}")));
    }
    let sims: Vec<f64> = student_batch
        .iter()
        .map(|s| cosine_sim_slices(teacher, s).map(|c| c / delta))
        .collect::<Result<_>>()?;
    let mx = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + sims.iter().map(|s| (s - mx).exp()).sum::<f64>().ln();
    Ok(lse - sims[match_index])
}

// ---------------------------------------------------------------------------
// Selection and filtering
// ---------------------------------------------------------------------------

/// Per-layer lists of the most uncertain train edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertainSelection {
    pub per_layer: Vec<Vec<String>>,
}

impl UncertainSelection {
    /// Union of all layers' selections, deduplicated and sorted.
    pub fn union(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.per_layer.iter().flatten().collect();
        set.into_iter().cloned().collect()
    }
}

/// Rank train edges by output entropy per layer and keep the top
/// ceil(w_percent * N), ties broken toward the ascending edge-id.
pub fn select_uncertain(
    per_layer_probs: &[Vec<(String, (f64, f64))>],
    w_percent: f64,
) -> Result<UncertainSelection> {
    let mut per_layer = Vec::with_capacity(per_layer_probs.len());
    for layer in per_layer_probs {
        let mut scored: Vec<(String, f64)> = layer
            .iter()
            .map(|(id, p)| entropy(*p).map(|u| (id.clone(), u)))
            .collect::<Result<_>>()?;
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        let keep = ((w_percent * scored.len() as f64).ceil() as usize).min(scored.len());
        scored.truncate(keep);
        per_layer.push(scored.into_iter().map(|(id, _)| id).collect());
    }
    Ok(UncertainSelection { per_layer })
}

/// Teacher traces that passed the confidence and label-agreement gates.
#[derive(Debug, Clone)]
pub struct DistillSet {
    pub entries: Vec<(String, TeacherTrace)>,
}

impl DistillSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn edge_ids(&self) -> Vec<String> {
        self.entries.iter().map(|(id, _)| id.clone()).collect()
    }
}

/// Keep a trace iff confidence strictly exceeds the threshold and the
/// teacher's verdict agrees with the ground-truth label.
pub fn filter_distill_set(
    traces: &[TeacherTrace],
    labels: &BTreeMap<String, u8>,
    tau_conf: f64,
) -> Result<DistillSet> {
    let mut entries = Vec::new();
    let mut seen = BTreeSet::new();
    for trace in traces {
        let label = *labels
            .get(&trace.edge)
            .ok_or_else(|| Error::UnlabeledTrace(trace.edge.clone()))?;
        let agree = (trace.judgment.level >= 0.5) == (label == 1);
        if trace.judgment.confidence > tau_conf && agree && seen.insert(trace.edge.clone()) {
            entries.push((trace.edge.clone(), trace.clone()));
        }
    }
    Ok(DistillSet { entries })
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// AdamW with decoupled weight decay.
pub struct AdamW {
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    weight_decay: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(model: &StudentModel, lr: f64, weight_decay: f64) -> Self {
        let shapes: Vec<Tensor> = model
            .named_params()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.rows, t.cols))
            .collect();
        Self {
            lr,
            b1: 0.9,
            b2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: shapes.clone(),
            v: shapes,
        }
    }

    /// Apply one update. `grads` is ordered like `named_params`; `None`
    /// entries mean zero gradient.
    pub fn step(&mut self, model: &mut StudentModel, grads: &[Option<Tensor>]) {
        self.t += 1;
        let bc1 = 1.0 - self.b1.powi(self.t as i32);
        let bc2 = 1.0 - self.b2.powi(self.t as i32);
        for (i, (_, param)) in model.named_params_mut().into_iter().enumerate() {
            let zero;
            let g = match &grads[i] {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(param.rows, param.cols);
                    &zero
                }
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..param.data.len() {
                let gj = g.data[j];
                m.data[j] = self.b1 * m.data[j] + (1.0 - self.b1) * gj;
                v.data[j] = self.b2 * v.data[j] + (1.0 - self.b2) * gj * gj;
                let mhat = m.data[j] / bc1;
                let vhat = v.data[j] / bc2;
                param.data[j] -= self.lr * (mhat / (vhat.sqrt() + self.eps))
                    + self.lr * self.weight_decay * param.data[j];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Taped batch losses
// ---------------------------------------------------------------------------

struct BatchGeometry {
    pairs: Arc<Vec<(usize, usize)>>,
    edge_feats: Arc<Tensor>,
    labels: Arc<Vec<u8>>,
}

fn batch_geometry(
    graph: &CitationGraph,
    features: &FeatureTables,
    edge_idxs: &[usize],
) -> BatchGeometry {
    let pairs: Vec<(usize, usize)> = edge_idxs
        .iter()
        .map(|&ei| {
            let e = graph.edge_at(ei);
            (
                graph.node_idx(&e.source).expect("validated edge"),
                graph.node_idx(&e.target).expect("validated edge"),
            )
        })
        .collect();
    let labels: Vec<u8> = edge_idxs
        .iter()
        .map(|&ei| graph.edge_at(ei).label.unwrap_or(0))
        .collect();
    BatchGeometry {
        pairs: Arc::new(pairs),
        edge_feats: Arc::new(edge_features_tensor(features, edge_idxs)),
        labels: Arc::new(labels),
    }
}

/// Supervised component: final-head cross entropy plus the mean auxiliary
/// per-layer cross entropy (weighted), with per-layer edge reps reused.
struct SupervisedOut {
    loss: VarId,
    final_bce: f64,
    aux_bce: f64,
}

#[allow(clippy::too_many_arguments)]
fn supervised_taped(
    tape: &mut Tape,
    bound: &BoundParams,
    model: &StudentModel,
    z: &[VarId],
    geom: &BatchGeometry,
    extra_final: Option<Arc<Tensor>>,
    aux_weight: f64,
) -> Result<SupervisedOut> {
    let k_layers = model.dims.k_layers;
    let mut edge_reps = Vec::with_capacity(k_layers);
    let mut aux_terms = Vec::with_capacity(k_layers);
    for k in 1..=k_layers {
        let reps = edge_reps_taped(
            tape,
            bound,
            k,
            z[k],
            geom.pairs.clone(),
            geom.edge_feats.clone(),
        )?;
        let logits = linear_taped(tape, bound, &format!("aux_head{}", k - 1), reps)?;
        let ce = tape.cross_entropy_logits(logits, geom.labels.clone(), 1e-12)?;
        aux_terms.push(ce);
        edge_reps.push(reps);
    }
    let mut aux_sum = aux_terms[0];
    for t in &aux_terms[1..] {
        aux_sum = tape.add(aux_sum, *t)?;
    }
    let aux_mean = tape.scale(aux_sum, 1.0 / k_layers as f64)?;

    let mut final_in = edge_reps[k_layers - 1];
    if let Some(extra) = extra_final {
        final_in = tape.append_cols(final_in, extra)?;
    }
    let logits = linear_taped(tape, bound, "final_head", final_in)?;
    let final_ce = tape.cross_entropy_logits(logits, geom.labels.clone(), 1e-12)?;

    let weighted_aux = tape.scale(aux_mean, aux_weight)?;
    let loss = tape.add(final_ce, weighted_aux)?;
    Ok(SupervisedOut {
        loss,
        final_bce: tape.value(final_ce).scalar_value(),
        aux_bce: tape.value(aux_mean).scalar_value(),
    })
}

/// Distillation component over the distill entries present in the batch.
/// Per hop h: pool layer-h edge reps over the chain's linking edges, project
/// into teacher space, and run in-batch InfoNCE against the teacher vectors.
/// Returns None when no hop has at least two participating entries.
#[allow(clippy::too_many_arguments)]
fn distill_taped(
    tape: &mut Tape,
    bound: &BoundParams,
    model: &StudentModel,
    graph: &CitationGraph,
    features: &FeatureTables,
    z: &[VarId],
    entries: &[(String, &TeacherTrace, &EvidenceChain)],
    lambda: &[f64],
    delta: f64,
    final_hop_only: bool,
) -> Result<Option<VarId>> {
    if entries.len() < 2 {
        return Ok(None);
    }
    let k_layers = model.dims.k_layers;
    let mut total: Option<VarId> = None;
    for h in 1..=k_layers {
        if final_hop_only && h != k_layers {
            continue;
        }
        if lambda[h - 1] == 0.0 {
            continue;
        }
        // Entries participating at this hop: trace and chain both reach it.
        let mut link_edge_idxs: Vec<usize> = Vec::new();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut teacher_rows: Vec<&[f64]> = Vec::new();
        for (_, trace, chain) in entries {
            if trace.k_eff() < h || chain.k_eff() < h {
                continue;
            }
            let links = hop_link_edges(graph, chain, h)?;
            if links.is_empty() {
                continue;
            }
            let start = link_edge_idxs.len();
            link_edge_idxs.extend(&links);
            groups.push((start..start + links.len()).collect());
            teacher_rows.push(&trace.teacher_vectors[h - 1]);
        }
        if teacher_rows.len() < 2 {
            continue;
        }
        let geom_pairs: Vec<(usize, usize)> = link_edge_idxs
            .iter()
            .map(|&ei| {
                let e = graph.edge_at(ei);
                (
                    graph.node_idx(&e.source).expect("validated edge"),
                    graph.node_idx(&e.target).expect("validated edge"),
                )
            })
            .collect();
        let link_feats = Arc::new(edge_features_tensor(features, &link_edge_idxs));
        let reps = edge_reps_taped(tape, bound, h, z[h], Arc::new(geom_pairs), link_feats)?;
        let pooled = tape.row_group_mean(reps, Arc::new(groups))?;
        let projected = linear_taped(tape, bound, &format!("proj_head{}", h - 1), pooled)?;
        let student_norm = tape.row_l2_normalize(projected)?;

        let d_t = model.dims.d_teacher;
        let mut tmat = Tensor::zeros(teacher_rows.len(), d_t);
        for (r, row) in teacher_rows.iter().enumerate() {
            if row.len() != d_t {
                return Err(Error::DimensionMismatch(row.len(), d_t));
            }
            tmat.row_mut(r).copy_from_slice(row);
        }
        let teacher = tape.constant(tmat)?;
        let teacher_norm = tape.row_l2_normalize(teacher)?;
        let sims = tape.matmul_tb(teacher_norm, student_norm)?;
        let sims = tape.scale(sims, 1.0 / delta)?;
        let lse = tape.row_log_sum_exp(sims)?;
        let diag = tape.diag(sims)?;
        let per_row = tape.sub(lse, diag)?;
        let hop_loss = tape.mean_all(per_row)?;
        let weighted = tape.scale(hop_loss, lambda[h - 1])?;
        total = Some(match total {
            Some(t) => tape.add(t, weighted)?,
            None => weighted,
        });
    }
    Ok(total)
}

/// Standalone distillation loss over a batch of filtered traces (chains are
/// rebuilt with the given config). Mirrors the value used inside training.
pub fn distill_loss(
    model: &StudentModel,
    graph: &CitationGraph,
    features: &FeatureTables,
    batch: &[(String, TeacherTrace)],
    chain_config: &ChainConfig,
    lambda: &[f64],
    delta: f64,
) -> Result<f64> {
    if batch.len() < 2 {
        return Err(Error::BatchTooSmall(batch.len()));
    }
    let chains: Vec<EvidenceChain> = batch
        .iter()
        .map(|(id, _)| build_chain(graph, id, chain_config, features))
        .collect::<Result<_>>()?;
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, model)?;
    let z = forward_nodes_taped(&mut tape, &bound, model, graph, features)?;
    let entries: Vec<(String, &TeacherTrace, &EvidenceChain)> = batch
        .iter()
        .zip(&chains)
        .map(|((id, trace), chain)| (id.clone(), trace, chain))
        .collect();
    let loss = distill_taped(
        &mut tape, &bound, model, graph, features, &z, &entries, lambda, delta, false,
    )?;
    Ok(loss.map(|v| tape.value(v).scalar_value()).unwrap_or(0.0))
}

// ---------------------------------------------------------------------------
// Batched inference
// ---------------------------------------------------------------------------

/// Final and per-layer probabilities for a set of edges, computed in one
/// batched pass. Extra final features default to the neutral judgment.
pub struct BatchScores {
    pub final_probs: Vec<(f64, f64)>,
    pub per_layer: Vec<Vec<(f64, f64)>>,
}

pub fn batch_scores(
    model: &StudentModel,
    graph: &CitationGraph,
    features: &FeatureTables,
    edge_idxs: &[usize],
    judgments: Option<&BTreeMap<String, f64>>,
) -> Result<BatchScores> {
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, model)?;
    let z = forward_nodes_taped(&mut tape, &bound, model, graph, features)?;
    let geom = batch_geometry(graph, features, edge_idxs);
    let mut per_layer = Vec::with_capacity(model.dims.k_layers);
    let mut final_probs = Vec::new();
    for k in 1..=model.dims.k_layers {
        let reps = edge_reps_taped(
            &mut tape,
            &bound,
            k,
            z[k],
            geom.pairs.clone(),
            geom.edge_feats.clone(),
        )?;
        let logits = linear_taped(&mut tape, &bound, &format!("aux_head{}", k - 1), reps)?;
        let lv = tape.value(logits);
        let mut probs = Vec::with_capacity(edge_idxs.len());
        for r in 0..lv.rows {
            let p = crate::autodiff::softmax_row(lv.row(r));
            probs.push((p[0], p[1]));
        }
        per_layer.push(probs);
        if k == model.dims.k_layers {
            let mut final_in = reps;
            if model.dims.final_extra > 0 {
                let mut extra = Tensor::zeros(edge_idxs.len(), model.dims.final_extra);
                for (r, &ei) in edge_idxs.iter().enumerate() {
                    let id = &graph.edge_at(ei).id;
                    let val = judgments
                        .and_then(|j| j.get(id).copied())
                        .unwrap_or(NEUTRAL_JUDGMENT);
                    for c in 0..model.dims.final_extra {
                        extra.set(r, c, val);
                    }
                }
                final_in = tape.append_cols(final_in, Arc::new(extra))?;
            }
            let logits = linear_taped(&mut tape, &bound, "final_head", final_in)?;
            let lv = tape.value(logits);
            for r in 0..lv.rows {
                let p = crate::autodiff::softmax_row(lv.row(r));
                final_probs.push((p[0], p[1]));
            }
        }
    }
    Ok(BatchScores {
        final_probs,
        per_layer,
    })
}

/// Miscitation scores (p_miscite) for the given edge ids; inference only,
/// no backend calls.
pub fn score_edges(
    model: &StudentModel,
    graph: &CitationGraph,
    features: &FeatureTables,
    edge_ids: &[String],
) -> Result<Vec<f64>> {
    let idxs: Vec<usize> = edge_ids
        .iter()
        .map(|id| graph.edge_idx(id))
        .collect::<Result<_>>()?;
    let scores = batch_scores(model, graph, features, &idxs, None)?;
    Ok(scores.final_probs.iter().map(|p| p.1).collect())
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Per-epoch log record. `task_loss` is the supervised component (final +
/// weighted auxiliary heads); `total_loss = beta1 * distill_loss + beta2 *
/// task_loss` holds exactly on the logged values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub task_loss: f64,
    pub final_bce: f64,
    pub aux_bce: f64,
    pub distill_loss: f64,
    pub total_loss: f64,
    pub val_auc: f64,
    pub n_selected: usize,
    pub n_distill: usize,
    pub backend_calls: usize,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: StudentModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_auc: f64,
    /// Edge ids of the final epoch's distillation set.
    pub distill_edges: Vec<String>,
    /// Total reason_edge invocations (trace-cache misses) over the run.
    pub total_backend_calls: usize,
}

struct TraceCache {
    chain_config: ChainConfig,
    fingerprint: String,
    entries: BTreeMap<String, (TeacherTrace, EvidenceChain)>,
}

impl TraceCache {
    fn new(chain_config: ChainConfig, fingerprint: String) -> Self {
        Self {
            chain_config,
            fingerprint,
            entries: BTreeMap::new(),
        }
    }

    /// Reason every edge not yet cached; returns the number of cache misses.
    fn ensure(
        &mut self,
        edges: &[String],
        backend: &dyn LlmBackend,
        graph: &CitationGraph,
        templates: &TemplateSet,
        features: &FeatureTables,
    ) -> Result<usize> {
        debug_assert_eq!(self.fingerprint, backend.fingerprint());
        let missing: Vec<&String> = edges
            .iter()
            .filter(|id| !self.entries.contains_key(*id))
            .collect();
        let cfg = self.chain_config;
        let computed: Vec<(String, Result<(TeacherTrace, EvidenceChain)>)> = missing
            .par_iter()
            .map(|id| {
                let out = reason_edge(backend, graph, id, &cfg, templates, features).and_then(
                    |trace| {
                        let chain = build_chain(graph, id, &cfg, features)?;
                        Ok((trace, chain))
                    },
                );
                ((*id).clone(), out)
            })
            .collect();
        let n = computed.len();
        for (id, result) in computed {
            let (trace, chain) = result?;
            self.entries.insert(id, (trace, chain));
        }
        Ok(n)
    }
}

pub fn train(
    graph: &CitationGraph,
    features: &FeatureTables,
    split: &DatasetSplit,
    backend: &dyn LlmBackend,
    templates: &TemplateSet,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if split.train.is_empty() || split.valid.is_empty() {
        return Err(Error::Config(
            "train and valid splits must be non-empty".to_string(),
        ));
    }
    let train_idxs: Vec<usize> = split
        .train
        .iter()
        .map(|id| graph.edge_idx(id))
        .collect::<Result<_>>()?;
    let labels: BTreeMap<String, u8> = train_idxs
        .iter()
        .map(|&ei| {
            let e = graph.edge_at(ei);
            e.label
                .map(|l| (e.id.clone(), l))
                .ok_or_else(|| Error::UnlabeledTrace(e.id.clone()))
        })
        .collect::<Result<_>>()?;
    let valid_labels: Vec<u8> = split
        .valid
        .iter()
        .map(|id| graph.edge(id)?.label.ok_or_else(|| Error::UnlabeledTrace(id.clone())))
        .collect::<Result<_>>()?;

    let chain_cfg = config.effective_chain_config();
    let lambda = config.effective_lambda();
    let mut model = StudentModel::new(config.student_dims(features.d_enc), config.seed)?;
    let mut optimizer = AdamW::new(&model, config.lr, config.weight_decay);
    let mut cache = TraceCache::new(chain_cfg, backend.fingerprint());

    // The feature-concatenation ablation reasons over every train edge once
    // up front; its judgment levels become an input feature.
    let mut judgment_features: BTreeMap<String, f64> = BTreeMap::new();
    let mut total_backend_calls = 0usize;
    if config.ablation == Ablation::NoKd {
        total_backend_calls +=
            cache.ensure(&split.train, backend, graph, templates, features)?;
        for (id, (trace, _)) in &cache.entries {
            judgment_features.insert(id.clone(), trace.judgment.level);
        }
    }

    let mut history = Vec::with_capacity(config.epochs);
    let mut best_val_auc = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_snapshot = model.clone();
    let mut stale_epochs = 0usize;
    let mut last_distill_edges: Vec<String> = Vec::new();

    for epoch in 1..=config.epochs {
        // (1)-(2) score all train edges per layer with the current model.
        let scores = batch_scores(&model, graph, features, &train_idxs, None)?;

        // (3) uncertainty selection.
        let (selected, n_selected) = match config.ablation {
            Ablation::NoTd => (split.train.clone(), split.train.len()),
            Ablation::NoKd => (Vec::new(), 0),
            _ => {
                let per_layer_probs: Vec<Vec<(String, (f64, f64))>> = scores
                    .per_layer
                    .iter()
                    .map(|layer| {
                        train_idxs
                            .iter()
                            .zip(layer)
                            .map(|(&ei, p)| (graph.edge_at(ei).id.clone(), *p))
                            .collect()
                    })
                    .collect();
                let selection = select_uncertain(&per_layer_probs, config.w_percent)?;
                let union = selection.union();
                let n = union.len();
                (union, n)
            }
        };

        // (4) teacher reasoning for selected edges lacking cached traces.
        let backend_calls = if selected.is_empty() {
            0
        } else {
            cache.ensure(&selected, backend, graph, templates, features)?
        };
        total_backend_calls += backend_calls;

        // (5) confidence and agreement filtering of this epoch's candidates.
        let distill_set = if config.ablation == Ablation::NoKd {
            DistillSet { entries: Vec::new() }
        } else {
            let traces: Vec<TeacherTrace> = selected
                .iter()
                .map(|id| cache.entries[id].0.clone())
                .collect();
            filter_distill_set(&traces, &labels, config.tau_conf)?
        };
        let distill_ids: BTreeSet<&String> =
            distill_set.entries.iter().map(|(id, _)| id).collect();

        // (6)-(7) minibatch updates.
        let mut order = train_idxs.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9));
        order.shuffle(&mut rng);
        let mut epoch_task = 0.0;
        let mut epoch_final = 0.0;
        let mut epoch_aux = 0.0;
        let mut epoch_distill = 0.0;
        let mut n_batches = 0usize;
        for (batch_no, batch) in order.chunks(config.batch_size).enumerate() {
            let mut tape = Tape::new();
            let bound = bind_params(&mut tape, &model)?;
            let z = forward_nodes_taped(&mut tape, &bound, &model, graph, features)?;
            let geom = batch_geometry(graph, features, batch);

            let extra = if config.ablation == Ablation::NoKd {
                let mut t = Tensor::zeros(batch.len(), 1);
                for (r, &ei) in batch.iter().enumerate() {
                    let id = &graph.edge_at(ei).id;
                    t.set(
                        r,
                        0,
                        judgment_features
                            .get(id)
                            .copied()
                            .unwrap_or(NEUTRAL_JUDGMENT),
                    );
                }
                Some(Arc::new(t))
            } else {
                None
            };

            let supervised = supervised_taped(
                &mut tape,
                &bound,
                &model,
                &z,
                &geom,
                extra,
                config.aux_weight,
            )?;

            let batch_entries: Vec<(String, &TeacherTrace, &EvidenceChain)> = batch
                .iter()
                .filter_map(|&ei| {
                    let id = &graph.edge_at(ei).id;
                    if distill_ids.contains(id) {
                        let (trace, chain) = &cache.entries[id];
                        Some((id.clone(), trace, chain))
                    } else {
                        None
                    }
                })
                .collect();
            let distill_var = if config.ablation == Ablation::NoKd {
                None
            } else {
                distill_taped(
                    &mut tape,
                    &bound,
                    &model,
                    graph,
                    features,
                    &z,
                    &batch_entries,
                    &lambda,
                    config.delta,
                    config.ablation == Ablation::NoLd,
                )?
            };

            let task_var = tape.scale(supervised.loss, config.beta2)?;
            let total_var = match distill_var {
                Some(d) => {
                    let dw = tape.scale(d, config.beta1)?;
                    tape.add(task_var, dw)?
                }
                None => task_var,
            };

            let total_value = tape.value(total_var).scalar_value();
            if !total_value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                });
            }
            let grads = tape.backward(total_var).map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                },
                other => other,
            })?;
            let ordered: Vec<Option<Tensor>> = bound
                .vars
                .iter()
                .map(|(_, var)| grads[*var].clone())
                .collect();
            optimizer.step(&mut model, &ordered);

            epoch_task += tape.value(supervised.loss).scalar_value();
            epoch_final += supervised.final_bce;
            epoch_aux += supervised.aux_bce;
            epoch_distill += distill_var
                .map(|d| tape.value(d).scalar_value())
                .unwrap_or(0.0);
            n_batches += 1;
        }
        let nb = n_batches.max(1) as f64;
        let task_mean = epoch_task / nb;
        let distill_mean = epoch_distill / nb;
        let total_mean = config.beta1 * distill_mean + config.beta2 * task_mean;

        // (8) validation and early stopping.
        let val_scores = score_edges(&model, graph, features, &split.valid)?;
        let val_auc = auc(&val_scores, &valid_labels).unwrap_or(0.5);

        history.push(EpochRecord {
            epoch,
            task_loss: task_mean,
            final_bce: epoch_final / nb,
            aux_bce: epoch_aux / nb,
            distill_loss: distill_mean,
            total_loss: total_mean,
            val_auc,
            n_selected,
            n_distill: distill_set.len(),
            backend_calls,
        });
        last_distill_edges = distill_set.edge_ids();

        if val_auc > best_val_auc {
            best_val_auc = val_auc;
            best_epoch = epoch;
            best_snapshot = model.clone();
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= config.patience {
                break;
            }
        }
    }

    Ok(TrainOutcome {
        model: best_snapshot,
        history,
        best_epoch,
        best_val_auc,
        distill_edges: last_distill_edges,
        total_backend_calls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{encode_graph, Encoder};
    use crate::eval::{generate_synthetic, SyntheticConfig};
    use crate::graph::split_edges;
    use crate::reasoner::{Judgment, MockBackend, ReasoningState, Verdict, Verification};
    use rand::Rng;

    #[test]
    fn entropy_reference_values() {
        assert!((entropy((0.5, 0.5)).unwrap() - 0.693147).abs() < 1e-6);
        assert_eq!(entropy((1.0, 0.0)).unwrap(), 0.0);
        assert!((entropy((0.9, 0.1)).unwrap() - 0.325083).abs() < 1e-6);
    }

    #[test]
    fn entropy_rejects_invalid() {
        assert!(entropy((0.6, 0.6)).is_err());
        assert!(entropy((-0.1, 1.1)).is_err());
    }

    #[test]
    fn task_loss_reference_values() {
        assert!(task_loss(&[1.0, 0.0], &[1, 0]).unwrap() <= 1e-10);
        assert!((task_loss(&[0.5], &[1]).unwrap() - std::f64::consts::LN_2).abs() < 1e-6);
        let l1 = task_loss(&[0.7], &[1]).unwrap();
        let l2 = task_loss(&[0.3], &[0]).unwrap();
        let combined = task_loss(&[0.7, 0.3], &[1, 0]).unwrap();
        assert!((combined - (l1 + l2) / 2.0).abs() < 1e-12);
        assert!(matches!(task_loss(&[], &[]), Err(Error::EmptyEdgeSet)));
    }

    #[test]
    fn infonce_reference_values() {
        let teacher = vec![1.0, 0.0];
        let batch = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let v = infonce_loss(&teacher, &batch, 0, 1.0).unwrap();
        assert!((v - 0.313262).abs() < 1e-6, "{v}");

        let same = vec![vec![1.0, 0.0]; 4];
        let v = infonce_loss(&teacher, &same, 2, 1.0).unwrap();
        assert!((v - 4.0_f64.ln()).abs() < 1e-6, "{v}");

        let v = infonce_loss(&teacher, &batch, 0, 0.5).unwrap();
        assert!((v - 0.126928).abs() < 1e-6, "{v}");
    }

    #[test]
    fn infonce_errors() {
        let teacher = vec![1.0, 0.0];
        assert!(matches!(
            infonce_loss(&teacher, &[vec![1.0, 0.0]], 0, 1.0),
            Err(Error::BatchTooSmall(1))
        ));
        let with_zero = vec![vec![1.0, 0.0], vec![0.0, 0.0]];
        assert!(matches!(
            infonce_loss(&teacher, &with_zero, 0, 1.0),
            Err(Error::ZeroNorm)
        ));
    }

    #[test]
    fn infonce_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..500 {
            let d = rng.gen_range(2..6);
            let n = rng.gen_range(2..8);
            let teacher: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0f64)).collect();
            if teacher.iter().all(|v| v.abs() < 1e-9) {
                continue;
            }
            let batch: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    (0..d)
                        .map(|_| rng.gen_range(-1.0..1.0f64) + 0.2)
                        .collect()
                })
                .collect();
            let idx = rng.gen_range(0..n);
            let delta = rng.gen_range(0.3..2.0);
            if let Ok(v) = infonce_loss(&teacher, &batch, idx, delta) {
                assert!(v >= 0.0, "InfoNCE must be non-negative, got {v}");
            }
        }
        // Improving the match similarity strictly decreases the loss.
        let teacher = vec![1.0, 0.0];
        let worse = vec![vec![0.2, 0.8], vec![0.5, 0.5]];
        let better = vec![vec![0.9, 0.1], vec![0.5, 0.5]];
        assert!(
            infonce_loss(&teacher, &better, 0, 1.0).unwrap()
                < infonce_loss(&teacher, &worse, 0, 1.0).unwrap()
        );
    }

    fn probs_for(id: &str, p: (f64, f64)) -> (String, (f64, f64)) {
        (id.to_string(), p)
    }

    #[test]
    fn select_uncertain_top_half() {
        let layer = vec![
            probs_for("e1", (0.5, 0.5)),    // H = 0.693
            probs_for("e2", (0.98, 0.02)),  // H = 0.098
            probs_for("e3", (0.8, 0.2)),    // H = 0.500
            probs_for("e4", (0.95, 0.05)),  // H = 0.199
        ];
        let sel = select_uncertain(&[layer], 0.5).unwrap();
        assert_eq!(sel.per_layer[0], vec!["e1".to_string(), "e3".to_string()]);
    }

    #[test]
    fn select_uncertain_full_and_ties() {
        let layer = vec![
            probs_for("b", (0.7, 0.3)),
            probs_for("a", (0.7, 0.3)),
            probs_for("c", (0.99, 0.01)),
            probs_for("d", (0.98, 0.02)),
        ];
        let all = select_uncertain(&[layer.clone()], 1.0).unwrap();
        assert_eq!(all.per_layer[0].len(), 4);
        let one = select_uncertain(&[layer.clone()], 0.25).unwrap();
        assert_eq!(one.per_layer[0], vec!["a".to_string()]);
        // Input order never matters.
        let mut rev = layer.clone();
        rev.reverse();
        let again = select_uncertain(&[rev], 0.25).unwrap();
        assert_eq!(one, again);
    }

    fn trace_with(edge: &str, level: f64, confidence: f64) -> TeacherTrace {
        TeacherTrace {
            edge: edge.to_string(),
            verifications: vec![Verification {
                hop: 1,
                verdict: Verdict::Consistent,
                rationale: "r".into(),
            }],
            states: vec![ReasoningState {
                hop: 1,
                text: "t".into(),
            }],
            teacher_vectors: vec![vec![1.0, 0.0]],
            judgment: Judgment {
                explanation: "e".into(),
                level,
                confidence,
            },
        }
    }

    #[test]
    fn filter_distill_examples() {
        let labels: BTreeMap<String, u8> = [
            ("a".to_string(), 1u8),
            ("b".to_string(), 1u8),
            ("c".to_string(), 0u8),
        ]
        .into();
        let traces = vec![
            trace_with("a", 0.8, 0.9),
            trace_with("b", 0.8, 0.6),
            trace_with("c", 0.8, 0.9),
        ];
        let set = filter_distill_set(&traces, &labels, 0.7).unwrap();
        assert_eq!(set.edge_ids(), vec!["a".to_string()]);
    }

    #[test]
    fn filter_rejects_unlabeled() {
        let labels = BTreeMap::new();
        let err = filter_distill_set(&[trace_with("x", 0.8, 0.9)], &labels, 0.7).unwrap_err();
        assert!(matches!(err, Error::UnlabeledTrace(_)));
    }

    #[test]
    fn filter_never_admits_low_confidence() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..500 {
            let tau = rng.gen_range(0.0..1.0);
            let level: f64 = rng.gen_range(0.0..1.0);
            let conf: f64 = rng.gen_range(0.0..1.0);
            let label = rng.gen_range(0..2u8);
            let labels: BTreeMap<String, u8> = [("e".to_string(), label)].into();
            let set =
                filter_distill_set(&[trace_with("e", level, conf)], &labels, tau).unwrap();
            for (_, t) in &set.entries {
                assert!(t.judgment.confidence > tau);
                assert_eq!(t.judgment.level >= 0.5, label == 1);
            }
            if conf <= tau {
                assert!(set.is_empty());
            }
        }
    }

    #[test]
    fn adamw_zero_lr_is_identity() {
        let dims = StudentDims {
            k_layers: 2,
            d_node_in: 4,
            d_edge_in: 4,
            d_hidden: 3,
            d_edge: 3,
            d_teacher: 2,
            final_extra: 0,
        };
        let mut model = StudentModel::new(dims, 1).unwrap();
        let before: Vec<Vec<f64>> = model
            .named_params()
            .iter()
            .map(|(_, t)| t.data.clone())
            .collect();
        let grads: Vec<Option<Tensor>> = model
            .named_params()
            .iter()
            .map(|(_, t)| Some(Tensor::from_vec(t.rows, t.cols, vec![0.5; t.data.len()])))
            .collect();
        let mut opt = AdamW::new(&model, 0.0, 0.01);
        opt.step(&mut model, &grads);
        for ((_, t), b) in model.named_params().iter().zip(&before) {
            assert_eq!(&t.data, b, "lr = 0 must leave parameters bit-identical");
        }
    }

    fn tiny_fixture() -> (CitationGraph, FeatureTables, DatasetSplit) {
        let synth = SyntheticConfig {
            n_papers: 40,
            refs_per_paper: 2,
            field_tags: vec!["alpha".into(), "beta".into()],
            sample_fraction: 0.5,
            injection_ratio: 1.0,
            type_mix: (0.3, 0.3, 0.4),
            seed: 5,
        };
        let graph = generate_synthetic(&synth).unwrap();
        let features = encode_graph(&Encoder::hashing(32).unwrap(), &graph).unwrap();
        let split = split_edges(&graph, (0.7, 0.1, 0.2), 5).unwrap();
        (graph, features, split)
    }

    fn tiny_config(ablation: Ablation) -> TrainConfig {
        TrainConfig {
            epochs: 12,
            patience: 12,
            batch_size: 16,
            d_hidden: 8,
            d_edge: 8,
            d_teacher: 8,
            seed: 3,
            ablation,
            ..TrainConfig::default()
        }
    }

    fn mock_for(graph: &CitationGraph, d_teacher: usize) -> MockBackend {
        let labels = graph
            .edges()
            .iter()
            .filter_map(|e| e.label.map(|l| (e.id.clone(), l)))
            .collect();
        MockBackend::new(7, d_teacher).with_labels(labels)
    }

    #[test]
    fn distill_loss_matches_plain_route_oracle() {
        let (graph, features, _split) = tiny_fixture();
        let config = tiny_config(Ablation::Full);
        let model = StudentModel::new(config.student_dims(features.d_enc), 11).unwrap();
        let backend = mock_for(&graph, config.d_teacher);
        let templates = TemplateSet::builtin();
        let chain_cfg = config.effective_chain_config();

        // Two labeled edges with two-hop chains.
        let ids: Vec<String> = graph
            .edges()
            .iter()
            .filter(|e| {
                let chain = build_chain(&graph, &e.id, &chain_cfg, &features).unwrap();
                chain.k_eff() == 2
            })
            .take(3)
            .map(|e| e.id.clone())
            .collect();
        assert!(ids.len() >= 2, "fixture must yield two-hop chains");
        let batch: Vec<(String, TeacherTrace)> = ids
            .iter()
            .map(|id| {
                (
                    id.clone(),
                    reason_edge(&backend, &graph, id, &chain_cfg, &templates, &features).unwrap(),
                )
            })
            .collect();

        let lambda = config.effective_lambda();
        let got = distill_loss(
            &model, &graph, &features, &batch, &chain_cfg, &lambda, config.delta,
        )
        .unwrap();

        // Independent route: plain per-edge forward math plus the scalar
        // InfoNCE already pinned against hand-computed values.
        let states = crate::student::forward_nodes(&model, &graph, &features).unwrap();
        let mut want = 0.0;
        for h in 1..=config.k {
            let mut student_vecs = Vec::new();
            let mut teachers = Vec::new();
            for (id, trace) in &batch {
                if trace.k_eff() < h {
                    continue;
                }
                let chain = build_chain(&graph, id, &chain_cfg, &features).unwrap();
                if chain.k_eff() < h {
                    continue;
                }
                let links = hop_link_edges(&graph, &chain, h).unwrap();
                if links.is_empty() {
                    continue;
                }
                let mut pooled = vec![0.0; model.dims.d_edge];
                for &ei in &links {
                    let rep = crate::student::edge_rep(
                        &model,
                        &states,
                        &graph,
                        &features,
                        &graph.edge_at(ei).id,
                        h,
                    )
                    .unwrap();
                    for (p, r) in pooled.iter_mut().zip(&rep) {
                        *p += r / links.len() as f64;
                    }
                }
                let head = &model.proj_heads[h - 1];
                let mut proj = head.b.data.clone();
                for (i, &x) in pooled.iter().enumerate() {
                    for (o, w) in proj.iter_mut().zip(head.w.row(i)) {
                        *o += x * w;
                    }
                }
                student_vecs.push(proj);
                teachers.push(trace.teacher_vectors[h - 1].clone());
            }
            if student_vecs.len() < 2 {
                continue;
            }
            let mut hop_sum = 0.0;
            for (i, t) in teachers.iter().enumerate() {
                hop_sum += infonce_loss(t, &student_vecs, i, config.delta).unwrap();
            }
            want += lambda[h - 1] * hop_sum / teachers.len() as f64;
        }
        assert!(
            (got - want).abs() < 1e-9,
            "taped {got} vs plain-route {want}"
        );
    }

    #[test]
    fn lambda_zero_hop_has_no_effect() {
        let (graph, features, _split) = tiny_fixture();
        let config = tiny_config(Ablation::Full);
        let model = StudentModel::new(config.student_dims(features.d_enc), 11).unwrap();
        let backend = mock_for(&graph, config.d_teacher);
        let templates = TemplateSet::builtin();
        let chain_cfg = config.effective_chain_config();
        let ids: Vec<String> = graph.edges().iter().take(3).map(|e| e.id.clone()).collect();
        let batch: Vec<(String, TeacherTrace)> = ids
            .iter()
            .map(|id| {
                (
                    id.clone(),
                    reason_edge(&backend, &graph, id, &chain_cfg, &templates, &features).unwrap(),
                )
            })
            .collect();
        let only_hop2 = distill_loss(
            &model, &graph, &features, &batch, &chain_cfg, &[0.0, 1.0], 1.0,
        )
        .unwrap();
        let both = distill_loss(
            &model, &graph, &features, &batch, &chain_cfg, &[1.0, 1.0], 1.0,
        )
        .unwrap();
        let only_hop1 = distill_loss(
            &model, &graph, &features, &batch, &chain_cfg, &[1.0, 0.0], 1.0,
        )
        .unwrap();
        assert!((both - only_hop1 - only_hop2).abs() < 1e-9);
    }

    #[test]
    fn training_reduces_loss_and_logs_identity() {
        let (graph, features, split) = tiny_fixture();
        let config = tiny_config(Ablation::Full);
        let backend = mock_for(&graph, config.d_teacher);
        let outcome = train(
            &graph,
            &features,
            &split,
            &backend,
            &TemplateSet::builtin(),
            &config,
        )
        .unwrap();
        assert!(!outcome.history.is_empty());
        for rec in &outcome.history {
            let recomputed = config.beta1 * rec.distill_loss + config.beta2 * rec.task_loss;
            assert!(
                (rec.total_loss - recomputed).abs() < 1e-9,
                "epoch {}: total {} vs recomputed {}",
                rec.epoch,
                rec.total_loss,
                recomputed
            );
        }
        let first = outcome.history.first().unwrap().task_loss;
        let last = outcome.history.last().unwrap().task_loss;
        assert!(
            last < first,
            "task loss should trend down: first {first}, last {last}"
        );
    }

    #[test]
    fn no_kd_history_has_zero_distill() {
        let (graph, features, split) = tiny_fixture();
        let config = tiny_config(Ablation::NoKd);
        let backend = mock_for(&graph, config.d_teacher);
        let outcome = train(
            &graph,
            &features,
            &split,
            &backend,
            &TemplateSet::builtin(),
            &config,
        )
        .unwrap();
        assert!(outcome.history.iter().all(|r| r.distill_loss == 0.0));
        assert!(outcome.history.iter().all(|r| r.n_distill == 0));
        // Traces were still produced once for the concatenated feature.
        assert!(outcome.total_backend_calls > 0);
        assert_eq!(outcome.model.dims.final_extra, 1);
    }

    #[test]
    fn training_is_deterministic() {
        let (graph, features, split) = tiny_fixture();
        let mut config = tiny_config(Ablation::Full);
        config.epochs = 6;
        let backend = mock_for(&graph, config.d_teacher);
        let templates = TemplateSet::builtin();
        let a = train(&graph, &features, &split, &backend, &templates, &config).unwrap();
        let b = train(&graph, &features, &split, &backend, &templates, &config).unwrap();
        assert_eq!(
            serde_json::to_vec(&a.history).unwrap(),
            serde_json::to_vec(&b.history).unwrap()
        );
        for ((_, t1), (_, t2)) in a.model.named_params().iter().zip(b.model.named_params()) {
            assert_eq!(t1.data, t2.data);
        }
    }

    #[test]
    fn no_td_selects_everything() {
        let (graph, features, split) = tiny_fixture();
        let mut config = tiny_config(Ablation::NoTd);
        config.epochs = 2;
        let backend = mock_for(&graph, config.d_teacher);
        let outcome = train(
            &graph,
            &features,
            &split,
            &backend,
            &TemplateSet::builtin(),
            &config,
        )
        .unwrap();
        assert_eq!(outcome.history[0].n_selected, split.train.len());
        // Second epoch re-selects everything but the cache absorbs the calls.
        assert_eq!(outcome.history[1].backend_calls, 0);
    }

    #[test]
    fn no_ec_uses_single_hop_chains() {
        let config = TrainConfig {
            ablation: Ablation::NoEc,
            ..TrainConfig::default()
        };
        assert_eq!(config.effective_chain_config().k, 1);
    }
}
