//! Text-rich citation graph: publications with text, directed citation edges
//! carrying statement text and optional miscitation labels.

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// A publication node with its raw text (title/abstract concatenation).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Publication {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Map<String, serde_json::Value>>,
}

/// A directed citation edge: `source` cites `target` for `statement`.
/// `label = Some(1)` marks a miscitation, `Some(0)` a valid citation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CitationEdge {
    pub id: String,
    pub source: String,
    pub target: String,
    pub statement: String,
    pub label: Option<u8>,
}

impl CitationEdge {
    pub fn is_labeled(&self) -> bool {
        self.label.is_some()
    }
}

/// Immutable citation graph. Edge order equals construction (file) order;
/// adjacency lists mirror the edge list exactly.
#[derive(Debug, Clone)]
pub struct CitationGraph {
    publications: Vec<Publication>,
    node_index: BTreeMap<String, usize>,
    edges: Vec<CitationEdge>,
    edge_index: BTreeMap<String, usize>,
    out_adj: Vec<Vec<usize>>,
    out_edges: Vec<Vec<usize>>,
    in_degree: Vec<usize>,
}

impl CitationGraph {
    /// Build a validated graph from node and edge lists.
    pub fn new(publications: Vec<Publication>, edges: Vec<CitationEdge>) -> Result<Self> {
        let mut node_index = BTreeMap::new();
        for (i, p) in publications.iter().enumerate() {
            if p.text.trim().is_empty() {
                return Err(Error::EmptyNodeText(p.id.clone()));
            }
            if node_index.insert(p.id.clone(), i).is_some() {
                return Err(Error::DuplicateNode(p.id.clone()));
            }
        }
        let mut edge_index = BTreeMap::new();
        let mut triples = BTreeSet::new();
        let mut out_adj = vec![Vec::new(); publications.len()];
        let mut out_edges = vec![Vec::new(); publications.len()];
        let mut in_degree = vec![0usize; publications.len()];
        for (i, e) in edges.iter().enumerate() {
            if edge_index.insert(e.id.clone(), i).is_some() {
                return Err(Error::DuplicateEdge(e.id.clone()));
            }
            if e.source == e.target {
                return Err(Error::SelfCitation(e.id.clone()));
            }
            if let Some(l) = e.label {
                if l > 1 {
                    return Err(Error::BadLabel {
                        edge: e.id.clone(),
                        label: l as i64,
                    });
                }
            }
            let si = *node_index
                .get(&e.source)
                .ok_or_else(|| Error::DanglingEndpoint(e.source.clone()))?;
            let ti = *node_index
                .get(&e.target)
                .ok_or_else(|| Error::DanglingEndpoint(e.target.clone()))?;
            if !triples.insert((e.source.clone(), e.target.clone(), e.statement.clone())) {
                return Err(Error::DuplicateTriple {
                    citing: e.source.clone(),
                    cited: e.target.clone(),
                });
            }
            out_adj[si].push(ti);
            out_edges[si].push(i);
            in_degree[ti] += 1;
        }
        Ok(Self {
            publications,
            node_index,
            edges,
            edge_index,
            out_adj,
            out_edges,
            in_degree,
        })
    }

    pub fn node_count(&self) -> usize {
        self.publications.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn publications(&self) -> &[Publication] {
        &self.publications
    }

    pub fn edges(&self) -> &[CitationEdge] {
        &self.edges
    }

    pub fn node_idx(&self, id: &str) -> Result<usize> {
        self.node_index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    pub fn edge_idx(&self, id: &str) -> Result<usize> {
        self.edge_index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownEdge(id.to_string()))
    }

    pub fn publication(&self, id: &str) -> Result<&Publication> {
        Ok(&self.publications[self.node_idx(id)?])
    }

    pub fn edge(&self, id: &str) -> Result<&CitationEdge> {
        Ok(&self.edges[self.edge_idx(id)?])
    }

    pub fn publication_at(&self, idx: usize) -> &Publication {
        &self.publications[idx]
    }

    pub fn edge_at(&self, idx: usize) -> &CitationEdge {
        &self.edges[idx]
    }

    /// Out-neighbor node indices in edge order, duplicates included.
    pub fn out_adjacency(&self, node_idx: usize) -> &[usize] {
        &self.out_adj[node_idx]
    }

    /// Indices of the edges leaving a node, in edge order.
    pub fn out_edge_indices(&self, node_idx: usize) -> &[usize] {
        &self.out_edges[node_idx]
    }

    /// Edge ids of all labeled edges, in edge order.
    pub fn labeled_edge_ids(&self) -> Vec<String> {
        self.edges
            .iter()
            .filter(|e| e.is_labeled())
            .map(|e| e.id.clone())
            .collect()
    }

    /// Serialize the graph back to node/edge JSONL files.
    pub fn save(&self, nodes_path: &Path, edges_path: &Path) -> Result<()> {
        let mut nw = BufWriter::new(std::fs::File::create(nodes_path)?);
        for p in &self.publications {
            serde_json::to_writer(&mut nw, p)?;
            nw.write_all(b"\n")?;
        }
        nw.flush()?;
        let mut ew = BufWriter::new(std::fs::File::create(edges_path)?);
        for e in &self.edges {
            serde_json::to_writer(&mut ew, e)?;
            ew.write_all(b"\n")?;
        }
        ew.flush()?;
        Ok(())
    }
}

/// Load a graph from line-delimited JSON node and edge files.
pub fn load_graph(nodes_path: &Path, edges_path: &Path) -> Result<CitationGraph> {
    let publications = read_jsonl::<Publication>(nodes_path)?;
    let edges = read_jsonl::<CitationEdge>(edges_path)?;
    CitationGraph::new(publications, edges)
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            path: path.display().to_string(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Cited papers of `node`, deduplicated and sorted ascending by node-id.
pub fn out_neighbors(graph: &CitationGraph, node: &str) -> Result<Vec<String>> {
    let idx = graph.node_idx(node)?;
    let set: BTreeSet<&str> = graph.out_adj[idx]
        .iter()
        .map(|&t| graph.publications[t].id.as_str())
        .collect();
    Ok(set.into_iter().map(str::to_string).collect())
}

/// Train/valid/test partition of the labeled edge ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Shuffle labeled edges with a seeded permutation and partition them.
/// Train and valid sizes are rounded, the remainder goes to test.
pub fn split_edges(
    graph: &CitationGraph,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit> {
    let (rt, rv, rs) = ratios;
    if rt < 0.0 || rv < 0.0 || rs < 0.0 {
        return Err(Error::RatiosDoNotSumToOne(rt + rv + rs));
    }
    let sum = rt + rv + rs;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::RatiosDoNotSumToOne(sum));
    }
    let mut ids = graph.labeled_edge_ids();
    if ids.is_empty() {
        return Err(Error::NoLabeledEdges);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n = ids.len();
    let n_train = ((n as f64) * rt).round() as usize;
    let n_valid = (((n as f64) * rv).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let mut iter = ids.into_iter();
    let train: Vec<String> = iter.by_ref().take(n_train).collect();
    let valid: Vec<String> = iter.by_ref().take(n_valid).collect();
    let test: Vec<String> = iter.collect();
    Ok(DatasetSplit { train, valid, test })
}

/// Summary counts over a graph, plus non-fatal warnings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationReport {
    pub nodes: usize,
    pub edges: usize,
    pub labeled: usize,
    pub miscite_frac: f64,
    pub sink_nodes: usize,
    pub source_nodes: usize,
    pub warnings: Vec<String>,
}

/// Count-only inspection of a graph; never mutates it.
pub fn validate(graph: &CitationGraph) -> ValidationReport {
    let labeled = graph.edges.iter().filter(|e| e.is_labeled()).count();
    let miscites = graph
        .edges
        .iter()
        .filter(|e| e.label == Some(1))
        .count();
    let miscite_frac = if labeled == 0 {
        0.0
    } else {
        miscites as f64 / labeled as f64
    };
    let sink_nodes = graph.out_adj.iter().filter(|a| a.is_empty()).count();
    let source_nodes = graph.in_degree.iter().filter(|&&d| d == 0).count();
    let mut warnings = Vec::new();
    if graph.edges.is_empty() {
        warnings.push("no edges".to_string());
    } else if labeled == 0 {
        warnings.push("no labeled edges".to_string());
    }
    ValidationReport {
        nodes: graph.publications.len(),
        edges: graph.edges.len(),
        labeled,
        miscite_frac,
        sink_nodes,
        source_nodes,
        warnings,
    }
}
