//! Metrics, the synthetic anomaly-injection benchmark generator, the runtime
//! comparison harness, hyperparameter sweeps, and embedding export.

use crate::chain::{build_chain, ChainVariant};
use crate::encoder::FeatureTables;
use crate::error::{Error, Result};
use crate::graph::{CitationEdge, CitationGraph, DatasetSplit, Publication};
use crate::reasoner::{verify_hop, CountingBackend, LlmBackend, TemplateSet};
use crate::student::StudentModel;
use crate::trainer::{score_edges, train, TrainConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Probability that a random positive outranks a random negative, ties 0.5,
/// computed by rank statistics.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch(scores.len(), labels.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidDistribution("non-finite score".to_string()));
    }
    let p = labels.iter().filter(|&&l| l == 1).count();
    let n = labels.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::SingleClass);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            rank[k] = avg;
        }
        i = j + 1;
    }
    let r_pos: f64 = labels
        .iter()
        .zip(&rank)
        .filter(|(l, _)| **l == 1)
        .map(|(_, r)| *r)
        .sum();
    Ok((r_pos - (p * (p + 1)) as f64 / 2.0) / (p as f64 * n as f64))
}

/// Threshold classification metrics; undefined ratios fall back to 0.
pub fn f1_precision(scores: &[f64], labels: &[u8], threshold: f64) -> Result<(f64, f64, f64)> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!(
            "threshold must be in (0, 1), got {threshold}"
        )));
    }
    let p = labels.iter().filter(|&&l| l == 1).count();
    if p == 0 || p == labels.len() {
        return Err(Error::SingleClass);
    }
    let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
    for (&s, &y) in scores.iter().zip(labels) {
        let pred = s >= threshold;
        match (pred, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fnn == 0 {
        0.0
    } else {
        tp as f64 / (tp + fnn) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok((f1, precision, recall))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub threshold: f64,
    pub n: usize,
}

pub fn compute_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<MetricsReport> {
    let auc_value = auc(scores, labels)?;
    let (f1, precision, recall) = f1_precision(scores, labels, threshold)?;
    Ok(MetricsReport {
        auc: auc_value,
        f1,
        precision,
        recall,
        threshold,
        n: scores.len(),
    })
}

// ---------------------------------------------------------------------------
// Synthetic benchmark generator
// ---------------------------------------------------------------------------

/// Recipe for the synthetic citation benchmark: field-tagged papers with
/// within-field legitimate references, plus injected anomalous citations on
/// a sampled subset of papers.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_papers: usize,
    pub refs_per_paper: usize,
    pub field_tags: Vec<String>,
    pub sample_fraction: f64,
    pub injection_ratio: f64,
    /// Weights over (collaborator, self_journal, cross_domain).
    pub type_mix: (f64, f64, f64),
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_papers: 400,
            refs_per_paper: 3,
            field_tags: vec![
                "graphs".to_string(),
                "genomics".to_string(),
                "optics".to_string(),
                "economics".to_string(),
            ],
            sample_fraction: 0.5,
            injection_ratio: 1.0,
            type_mix: (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0),
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_papers < 2 || self.refs_per_paper < 1 {
            return Err(Error::InfeasibleConfig(
                "need at least 2 papers and 1 reference per paper".to_string(),
            ));
        }
        if !(0.0..=1.0).contains(&self.sample_fraction) {
            return Err(Error::InfeasibleConfig(format!(
                "sample_fraction must be in [0, 1], got {}",
                self.sample_fraction
            )));
        }
        if self.injection_ratio <= 0.0 {
            return Err(Error::InfeasibleConfig(
                "injection_ratio must be positive".to_string(),
            ));
        }
        let (a, b, c) = self.type_mix;
        if a < 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::InfeasibleConfig(format!(
                "type_mix weights must be non-negative and sum to 1, got {:?}",
                self.type_mix
            )));
        }
        if self.field_tags.is_empty() {
            return Err(Error::InfeasibleConfig("no field tags".to_string()));
        }
        let fields = self.field_tags.len();
        if self.sample_fraction > 0.0 && fields < 2 {
            return Err(Error::InfeasibleConfig(
                "injections need at least 2 field tags".to_string(),
            ));
        }
        if self.n_papers / fields <= self.refs_per_paper {
            return Err(Error::InfeasibleConfig(format!(
                "{} papers across {} fields cannot support {} within-field references",
                self.n_papers, fields, self.refs_per_paper
            )));
        }
        Ok(())
    }
}

const TOKENS_PER_FIELD: usize = 48;
const GENERIC_TOKENS: usize = 64;
const NODE_TEXT_TOKENS: usize = 24;
const STATEMENT_GENERIC: usize = 6;
const STATEMENT_FIELD: usize = 6;
/// Injected statements keep this many target-field tokens as camouflage.
const CAMOUFLAGE_TOKENS: usize = 3;

/// Venues are blocks of consecutive papers so every venue spans all fields;
/// the venue count scales down for small corpora to keep same-venue
/// cross-field injection targets available.
fn venue_count(n_papers: usize, n_fields: usize) -> usize {
    (n_papers / (4 * n_fields)).clamp(2, 7)
}

fn venue_of(i: usize, n_fields: usize, n_venues: usize) -> usize {
    (i / n_fields) % n_venues
}

fn field_pool(tag: &str) -> Vec<String> {
    (0..TOKENS_PER_FIELD).map(|i| format!("{tag}{i:02}")).collect()
}

fn generic_pool() -> Vec<String> {
    (0..GENERIC_TOKENS).map(|i| format!("common{i:02}")).collect()
}

/// Citation-context text: shared boilerplate tokens plus field vocabulary.
/// Legitimate statements draw all field tokens from the target's pool;
/// injected ones keep a few target tokens but lean on the source's field.
fn statement_text(
    rng: &mut ChaCha8Rng,
    generic: &[String],
    target_pool: &[String],
    source_pool: Option<&[String]>,
) -> String {
    let mut parts = Vec::with_capacity(STATEMENT_GENERIC + STATEMENT_FIELD);
    for _ in 0..STATEMENT_GENERIC {
        parts.push(generic[rng.gen_range(0..generic.len())].clone());
    }
    match source_pool {
        None => {
            for _ in 0..STATEMENT_FIELD {
                parts.push(target_pool[rng.gen_range(0..target_pool.len())].clone());
            }
        }
        Some(source) => {
            for _ in 0..CAMOUFLAGE_TOKENS {
                parts.push(target_pool[rng.gen_range(0..target_pool.len())].clone());
            }
            for _ in 0..STATEMENT_FIELD - CAMOUFLAGE_TOKENS {
                parts.push(source[rng.gen_range(0..source.len())].clone());
            }
        }
    }
    parts.join(" ")
}

fn sample_text(rng: &mut ChaCha8Rng, pool: &[String], n: usize) -> String {
    (0..n)
        .map(|_| pool[rng.gen_range(0..pool.len())].as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Build the labeled synthetic citation graph. Label-0 statements are drawn
/// from the target's field vocabulary, label-1 statements from the source's,
/// so injected edges are semantically mismatched with their targets under
/// the hashing encoder.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<CitationGraph> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let fields = &config.field_tags;
    let pools: Vec<Vec<String>> = fields.iter().map(|f| field_pool(f)).collect();
    let generic = generic_pool();

    // Papers round-robin over fields; venues come in blocks spanning fields.
    let n_venues = venue_count(config.n_papers, fields.len());
    let mut field_of = Vec::with_capacity(config.n_papers);
    let mut publications = Vec::with_capacity(config.n_papers);
    let authors_per_field = (config.n_papers / fields.len() / 3).max(2);
    let mut author_lists: Vec<Vec<String>> = Vec::with_capacity(config.n_papers);
    for i in 0..config.n_papers {
        let fi = i % fields.len();
        field_of.push(fi);
        let venue = format!("venue{:02}", venue_of(i, fields.len(), n_venues));
        let n_auth = rng.gen_range(1..=3);
        let mut authors: Vec<String> = (0..n_auth)
            .map(|_| format!("{}_author{:02}", fields[fi], rng.gen_range(0..authors_per_field)))
            .collect();
        authors.sort();
        authors.dedup();
        let text = format!(
            "{} {}",
            fields[fi],
            sample_text(&mut rng, &pools[fi], NODE_TEXT_TOKENS)
        );
        let mut meta = serde_json::Map::new();
        meta.insert("field".to_string(), fields[fi].clone().into());
        meta.insert("venue".to_string(), venue.into());
        meta.insert(
            "authors".to_string(),
            serde_json::Value::Array(authors.iter().cloned().map(Into::into).collect()),
        );
        author_lists.push(authors);
        publications.push(Publication {
            id: format!("p{i:04}"),
            text,
            meta: Some(meta),
        });
    }
    let by_field: Vec<Vec<usize>> = (0..fields.len())
        .map(|fi| (0..config.n_papers).filter(|&i| field_of[i] == fi).collect())
        .collect();

    // Legitimate within-field references.
    let mut edges = Vec::new();
    let mut triples: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut ref_count = vec![0usize; config.n_papers];
    for i in 0..config.n_papers {
        let fi = field_of[i];
        let mut candidates: Vec<usize> = by_field[fi].iter().copied().filter(|&j| j != i).collect();
        candidates.shuffle(&mut rng);
        for &j in candidates.iter().take(config.refs_per_paper) {
            triples.insert((i, j));
            let statement = statement_text(&mut rng, &generic, &pools[field_of[j]], None);
            edges.push(CitationEdge {
                id: format!("e{:05}", edges.len()),
                source: format!("p{i:04}"),
                target: format!("p{j:04}"),
                statement,
                label: Some(0),
            });
            ref_count[i] += 1;
        }
    }

    // Anomaly injection on a sampled subset of papers.
    let n_sampled = (config.sample_fraction * config.n_papers as f64).round() as usize;
    let mut paper_order: Vec<usize> = (0..config.n_papers).collect();
    paper_order.shuffle(&mut rng);
    let sampled: Vec<usize> = paper_order.into_iter().take(n_sampled).collect();

    let (w_collab, w_self, _w_cross) = config.type_mix;
    for &i in &sampled {
        let n_inject = (config.injection_ratio * ref_count[i] as f64).round() as usize;
        let fi = field_of[i];
        for _ in 0..n_inject {
            let r: f64 = rng.gen();
            let kind = if r < w_collab {
                "collaborator"
            } else if r < w_collab + w_self {
                "self_journal"
            } else {
                "cross_domain"
            };
            let other_fields: Vec<usize> = (0..fields.len()).filter(|&f| f != fi).collect();
            let target = match kind {
                "self_journal" => {
                    // Same venue, different field.
                    let venue = venue_of(i, fields.len(), n_venues);
                    let candidates: Vec<usize> = (0..config.n_papers)
                        .filter(|&j| {
                            j != i
                                && venue_of(j, fields.len(), n_venues) == venue
                                && field_of[j] != fi
                                && !triples.contains(&(i, j))
                        })
                        .collect();
                    if candidates.is_empty() {
                        return Err(Error::InfeasibleConfig(format!(
                            "no same-venue cross-field target available for paper p{i:04}"
                        )));
                    }
                    candidates[rng.gen_range(0..candidates.len())]
                }
                _ => {
                    let tf = other_fields[rng.gen_range(0..other_fields.len())];
                    let candidates: Vec<usize> = by_field[tf]
                        .iter()
                        .copied()
                        .filter(|&j| !triples.contains(&(i, j)))
                        .collect();
                    if candidates.is_empty() {
                        return Err(Error::InfeasibleConfig(format!(
                            "no cross-field target available for paper p{i:04}"
                        )));
                    }
                    candidates[rng.gen_range(0..candidates.len())]
                }
            };
            if kind == "collaborator" {
                // Shared authorship is established by adding one of the
                // source's authors to the target's author list.
                let shared = author_lists[i][rng.gen_range(0..author_lists[i].len())].clone();
                if !author_lists[target].contains(&shared) {
                    author_lists[target].push(shared.clone());
                    let meta = publications[target].meta.as_mut().expect("meta present");
                    meta.get_mut("authors")
                        .and_then(|a| a.as_array_mut())
                        .expect("authors array")
                        .push(shared.into());
                }
            }
            triples.insert((i, target));
            let statement =
                statement_text(&mut rng, &generic, &pools[field_of[target]], Some(&pools[fi]));
            edges.push(CitationEdge {
                id: format!("e{:05}", edges.len()),
                source: format!("p{i:04}"),
                target: format!("p{target:04}"),
                statement,
                label: Some(1),
            });
        }
    }

    CitationGraph::new(publications, edges)
}

// ---------------------------------------------------------------------------
// Runtime benchmark
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    Gnn,
    LlmDirected,
    LlmEc,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchEntry {
    pub mode: BenchMode,
    pub edges: usize,
    pub backend_calls: u64,
    pub total_ms: f64,
    pub per_edge_ms: f64,
}

/// Time inference over the given edges per mode. LLM modes run with a
/// bounded worker pool; the GNN mode makes no backend calls at all.
#[allow(clippy::too_many_arguments)]
pub fn bench_runtime(
    graph: &CitationGraph,
    features: &FeatureTables,
    edge_ids: &[String],
    model: &StudentModel,
    backend: &dyn LlmBackend,
    templates: &TemplateSet,
    config: &TrainConfig,
    modes: &[BenchMode],
    in_flight: usize,
) -> Result<Vec<BenchEntry>> {
    let mut report = Vec::with_capacity(modes.len());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(in_flight.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    for &mode in modes {
        let counting = CountingBackend::new(backend);
        let start = Instant::now();
        match mode {
            BenchMode::Gnn => {
                score_edges(model, graph, features, edge_ids)?;
            }
            BenchMode::LlmDirected => {
                let cfg = ChainVariant::Directed.to_config(config.k, config.m);
                pool.install(|| {
                    edge_ids
                        .par_iter()
                        .map(|id| {
                            let chain = build_chain(graph, id, &cfg, features)?;
                            verify_hop(&counting, graph, &chain, 1, templates)?;
                            Ok(())
                        })
                        .collect::<Result<Vec<()>>>()
                })?;
            }
            BenchMode::LlmEc => {
                let cfg = config.effective_chain_config();
                pool.install(|| {
                    edge_ids
                        .par_iter()
                        .map(|id| {
                            crate::reasoner::reason_edge(
                                &counting, graph, id, &cfg, templates, features,
                            )?;
                            Ok(())
                        })
                        .collect::<Result<Vec<()>>>()
                })?;
            }
        }
        let total_ms = start.elapsed().as_secs_f64() * 1e3;
        report.push(BenchEntry {
            mode,
            edges: edge_ids.len(),
            backend_calls: counting.calls(),
            total_ms,
            per_edge_ms: total_ms / edge_ids.len().max(1) as f64,
        });
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Embedding export
// ---------------------------------------------------------------------------

/// Write one CSV row per labeled edge: id, label, layer-k edge representation.
pub fn export_embeddings(
    model: &StudentModel,
    graph: &CitationGraph,
    features: &FeatureTables,
    layer: usize,
    path: &Path,
) -> Result<()> {
    if layer < 1 || layer > model.dims.k_layers {
        return Err(Error::LayerOutOfRange {
            layer,
            max: model.dims.k_layers,
        });
    }
    let states = crate::student::forward_nodes(model, graph, features)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "edge_id,label")?;
    for c in 0..model.dims.d_edge {
        write!(out, ",c{c}")?;
    }
    writeln!(out)?;
    for e in graph.edges() {
        let Some(label) = e.label else { continue };
        let rep = crate::student::edge_rep(model, &states, graph, features, &e.id, layer)?;
        write!(out, "{},{}", e.id, label)?;
        for v in rep {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Hyperparameter sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    K,
    M,
    WPercent,
    Delta,
}

impl SweepParameter {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "k" | "K" => Ok(Self::K),
            "m" => Ok(Self::M),
            "w_percent" | "w" => Ok(Self::WPercent),
            "delta" => Ok(Self::Delta),
            other => Err(Error::Config(format!(
                "unknown sweep parameter {other}; expected one of k, m, w_percent, delta"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub parameter: SweepParameter,
    pub value: f64,
    pub runs: usize,
    pub mean_auc: f64,
    pub mean_f1: f64,
    pub mean_precision: f64,
    pub mean_recall: f64,
}

fn apply_sweep_value(config: &mut TrainConfig, parameter: SweepParameter, value: f64) {
    match parameter {
        SweepParameter::K => {
            config.k = value.round() as usize;
            config.lambda = Vec::new();
        }
        SweepParameter::M => config.m = value.round() as usize,
        SweepParameter::WPercent => config.w_percent = value,
        SweepParameter::Delta => config.delta = value,
    }
}

/// Train per (value, seed) and tabulate mean test metrics per value.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    graph: &CitationGraph,
    features: &FeatureTables,
    split: &DatasetSplit,
    backend: &dyn LlmBackend,
    templates: &TemplateSet,
    base_config: &TrainConfig,
    parameter: SweepParameter,
    values: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep values must be non-empty".to_string()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("sweep seeds must be non-empty".to_string()));
    }
    let test_labels: Vec<u8> = split
        .test
        .iter()
        .map(|id| graph.edge(id)?.label.ok_or_else(|| Error::UnlabeledTrace(id.clone())))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        for &seed in seeds {
            let mut config = base_config.clone();
            apply_sweep_value(&mut config, parameter, value);
            config.seed = seed;
            config.validate()?;
            let outcome = train(graph, features, split, backend, templates, &config)?;
            let scores = score_edges(&outcome.model, graph, features, &split.test)?;
            let m = compute_metrics(&scores, &test_labels, 0.5)?;
            sums.0 += m.auc;
            sums.1 += m.f1;
            sums.2 += m.precision;
            sums.3 += m.recall;
        }
        let n = seeds.len() as f64;
        rows.push(SweepRow {
            parameter,
            value,
            runs: seeds.len(),
            mean_auc: sums.0 / n,
            mean_f1: sums.1 / n,
            mean_precision: sums.2 / n,
            mean_recall: sums.3 / n,
        });
    }
    Ok(rows)
}
