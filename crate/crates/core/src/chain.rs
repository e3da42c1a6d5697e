//! Evidence-chain extraction: source-oriented hop expansion from a cited
//! paper, with per-hop top-m semantic filtering against the claim text.

use crate::encoder::{cosine_sim, Embedding, FeatureTables};
use crate::error::{Error, Result};
use crate::graph::CitationGraph;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// One hop of the chain: the reachable set, the kept subset, and the
/// claim-similarity score of every candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopSet {
    pub hop: usize,
    pub raw: Vec<String>,
    pub filtered: Vec<String>,
    pub scores: BTreeMap<String, f64>,
}

/// The hop-indexed trail of source documents behind one citation edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceChain {
    pub root_edge: String,
    pub source: String,
    pub target: String,
    pub claim: String,
    pub hops: Vec<HopSet>,
}

impl EvidenceChain {
    /// Number of realized hops (may stop short of the configured K).
    pub fn k_eff(&self) -> usize {
        self.hops.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub k: usize,
    pub m: usize,
    pub filtering: bool,
}

impl ChainConfig {
    pub fn new(k: usize, m: usize) -> Self {
        Self {
            k,
            m,
            filtering: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.m < 1 {
            return Err(Error::Config(format!(
                "chain config requires K >= 1 and m >= 1, got K={} m={}",
                self.k, self.m
            )));
        }
        Ok(())
    }
}

/// The reasoning variants exposed by the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainVariant {
    /// Direct statement-citation analysis only (K = 1).
    Directed,
    /// Multi-hop expansion without semantic filtering.
    Unfiltered,
    /// Multi-hop expansion with top-m semantic filtering.
    Full,
}

impl ChainVariant {
    pub fn to_config(self, k: usize, m: usize) -> ChainConfig {
        match self {
            ChainVariant::Directed => ChainConfig {
                k: 1,
                m,
                filtering: true,
            },
            ChainVariant::Unfiltered => ChainConfig {
                k,
                m,
                filtering: false,
            },
            ChainVariant::Full => ChainConfig {
                k,
                m,
                filtering: true,
            },
        }
    }
}

fn one_hop(graph: &CitationGraph, frontier: &[String]) -> Result<Vec<String>> {
    let mut next = BTreeSet::new();
    for id in frontier {
        let idx = graph.node_idx(id)?;
        for &t in graph.out_adjacency(idx) {
            next.insert(graph.publication_at(t).id.clone());
        }
    }
    Ok(next.into_iter().collect())
}

/// Raw hop sets S_1..S_K: S_1 is the cited paper, each later set is the union
/// of out-neighbors of the previous set. Stops at the first empty set.
pub fn expand_sources(graph: &CitationGraph, edge: &str, k: usize) -> Result<Vec<Vec<String>>> {
    let e = graph.edge(edge)?;
    let mut sets = vec![vec![e.target.clone()]];
    for _ in 2..=k {
        let next = one_hop(graph, sets.last().expect("nonempty"))?;
        if next.is_empty() {
            break;
        }
        sets.push(next);
    }
    Ok(sets)
}

/// Score `raw` candidates against the claim and keep the top `m`.
/// Ties break toward the ascending node-id.
pub fn filter_hop(
    graph: &CitationGraph,
    features: &FeatureTables,
    raw: &[String],
    claim_vec: &Embedding,
    m: usize,
) -> Result<(Vec<String>, BTreeMap<String, f64>)> {
    let mut scored: Vec<(String, f64)> = Vec::with_capacity(raw.len());
    let mut scores = BTreeMap::new();
    for id in raw {
        let idx = graph
            .node_idx(id)
            .map_err(|_| Error::MissingEmbedding(id.clone()))?;
        let s = cosine_sim(claim_vec, &features.node[idx])?;
        scored.push((id.clone(), s));
        scores.insert(id.clone(), s);
    }
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    scored.truncate(m);
    Ok((scored.into_iter().map(|(id, _)| id).collect(), scores))
}

/// Assemble the evidence chain for `edge`: hop 1 is the cited paper, each
/// later hop expands from the previous hop's *filtered* set.
pub fn build_chain(
    graph: &CitationGraph,
    edge: &str,
    config: &ChainConfig,
    features: &FeatureTables,
) -> Result<EvidenceChain> {
    config.validate()?;
    let e = graph.edge(edge)?;
    let claim_vec = &features.edge[graph.edge_idx(edge)?];

    let mut hops: Vec<HopSet> = Vec::new();
    for h in 1..=config.k {
        let raw = if h == 1 {
            vec![e.target.clone()]
        } else {
            let frontier = &hops[h - 2].filtered;
            let next = one_hop(graph, frontier)?;
            if next.is_empty() {
                break;
            }
            next
        };
        let (filtered, scores) = if h == 1 {
            let (_, scores) = filter_hop(graph, features, &raw, claim_vec, 1)?;
            (raw.clone(), scores)
        } else if config.filtering {
            filter_hop(graph, features, &raw, claim_vec, config.m)?
        } else {
            // Unfiltered variant: keep the first m by node-id.
            let (_, scores) = filter_hop(graph, features, &raw, claim_vec, raw.len())?;
            let mut kept = raw.clone();
            kept.truncate(config.m);
            (kept, scores)
        };
        hops.push(HopSet {
            hop: h,
            raw,
            filtered,
            scores,
        });
    }
    Ok(EvidenceChain {
        root_edge: e.id.clone(),
        source: e.source.clone(),
        target: e.target.clone(),
        claim: e.statement.clone(),
        hops,
    })
}

/// Indices of graph edges linking hop h-1's filtered set to hop h's filtered
/// set. Hop 1 links the citing paper to the cited paper: the root edge.
pub fn hop_link_edges(
    graph: &CitationGraph,
    chain: &EvidenceChain,
    h: usize,
) -> Result<Vec<usize>> {
    if h < 1 || h > chain.k_eff() {
        return Err(Error::HopOutOfRange {
            hop: h,
            max: chain.k_eff(),
        });
    }
    if h == 1 {
        return Ok(vec![graph.edge_idx(&chain.root_edge)?]);
    }
    let cur: BTreeSet<&str> = chain.hops[h - 1].filtered.iter().map(String::as_str).collect();
    let mut out = Vec::new();
    for id in &chain.hops[h - 2].filtered {
        let u = graph.node_idx(id)?;
        for &ei in graph.out_edge_indices(u) {
            if cur.contains(graph.edge_at(ei).target.as_str()) {
                out.push(ei);
            }
        }
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}
