//! Text encoders: a deterministic feature-hashing bag-of-words encoder and an
//! external HTTP embedding endpoint behind one interface, plus the cosine
//! similarity used for chain filtering and distillation.

use crate::error::{Error, Result};
use crate::graph::CitationGraph;
use serde::{Deserialize, Serialize};

/// Fixed 64-bit hash seed so hashed embeddings are stable across machines.
pub const HASH_SEED: u64 = 0x6d69_7363_6974_6531;

/// Default hashed-embedding dimension.
pub const DEFAULT_D_ENC: usize = 256;

/// A dense text embedding with its cached Euclidean norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    values: Vec<f64>,
    norm: f64,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "embedding",
                node: 0,
            });
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(Self { values, norm })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Hashing,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    L2,
    None,
}

/// Selects how raw text becomes vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub d_enc: usize,
    pub normalization: Normalization,
}

impl EncoderSpec {
    pub fn hashing(d_enc: usize) -> Self {
        Self {
            kind: EncoderKind::Hashing,
            d_enc,
            normalization: Normalization::L2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_enc < 2 {
            return Err(Error::Config(format!(
                "d_enc must be at least 2, got {}",
                self.d_enc
            )));
        }
        Ok(())
    }
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self::hashing(DEFAULT_D_ENC)
    }
}

/// Connection settings for the external embedding endpoint.
#[derive(Debug, Clone)]
pub struct ExternalEncoderConfig {
    pub url: String,
    pub auth_token: Option<String>,
    pub max_retries: usize,
}

impl ExternalEncoderConfig {
    /// Read endpoint settings from `MISCITE_ENCODER_URL` / `MISCITE_ENCODER_TOKEN`.
    pub fn from_env() -> Result<Self> {
        let url = std::env::var("MISCITE_ENCODER_URL")
            .map_err(|_| Error::Config("MISCITE_ENCODER_URL is not set".to_string()))?;
        Ok(Self {
            url,
            auth_token: std::env::var("MISCITE_ENCODER_TOKEN").ok(),
            max_retries: 3,
        })
    }
}

/// A stateless text encoder; safe to call concurrently.
#[derive(Debug)]
pub struct Encoder {
    spec: EncoderSpec,
    external: Option<ExternalClient>,
}

impl Encoder {
    pub fn hashing(d_enc: usize) -> Result<Self> {
        Self::from_spec(EncoderSpec::hashing(d_enc))
    }

    /// Build an encoder from a spec. External specs read their endpoint from
    /// the environment; prefer [`Encoder::external`] to pass one explicitly.
    pub fn from_spec(spec: EncoderSpec) -> Result<Self> {
        spec.validate()?;
        let external = match spec.kind {
            EncoderKind::Hashing => None,
            EncoderKind::External => Some(ExternalClient::new(ExternalEncoderConfig::from_env()?)),
        };
        Ok(Self { spec, external })
    }

    pub fn external(spec: EncoderSpec, config: ExternalEncoderConfig) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            external: Some(ExternalClient::new(config)),
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn d_enc(&self) -> usize {
        self.spec.d_enc
    }

    /// Encode one text into a `d_enc`-dimensional embedding.
    pub fn encode_text(&self, text: &str) -> Result<Embedding> {
        Ok(self.encode_batch(&[text])?.pop().expect("one output"))
    }

    /// Encode several texts at once; external encoders send one request.
    pub fn encode_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        for t in texts {
            if t.trim().is_empty() {
                return Err(Error::EmptyText("text".to_string()));
            }
        }
        match self.spec.kind {
            EncoderKind::Hashing => texts.iter().map(|t| self.hash_one(t)).collect(),
            EncoderKind::External => {
                let client = self.external.as_ref().expect("external client configured");
                let raw = client.embed(texts)?;
                if raw.len() != texts.len() {
                    return Err(Error::EncoderEndpoint {
                        retries: 0,
                        message: format!(
                            "endpoint returned {} embeddings for {} inputs",
                            raw.len(),
                            texts.len()
                        ),
                    });
                }
                raw.into_iter().map(|v| self.finish(v)).collect()
            }
        }
    }

    fn hash_one(&self, text: &str) -> Result<Embedding> {
        let mut counts = vec![0.0f64; self.spec.d_enc];
        let mut any = false;
        for token in tokenize(text) {
            let bucket = (fnv1a64(token.as_bytes(), HASH_SEED) % self.spec.d_enc as u64) as usize;
            counts[bucket] += 1.0;
            any = true;
        }
        if !any {
            return Err(Error::EmptyText(format!("no tokens in {text:?}")));
        }
        self.finish(counts)
    }

    fn finish(&self, mut values: Vec<f64>) -> Result<Embedding> {
        if values.len() != self.spec.d_enc {
            return Err(Error::DimensionMismatch(values.len(), self.spec.d_enc));
        }
        if let Normalization::L2 = self.spec.normalization {
            let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in &mut values {
                    *v /= norm;
                }
            }
        }
        Embedding::new(values)
    }
}

/// Lowercase and split on non-alphanumeric characters.
fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
}

/// FNV-1a 64-bit, folded with a seed so bucket layout is ours, not libstd's.
fn fnv1a64(bytes: &[u8], seed: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Cosine similarity in [-1, 1].
pub fn cosine_sim(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(a.dim(), b.dim()));
    }
    if a.norm == 0.0 || b.norm == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (a.norm * b.norm)).clamp(-1.0, 1.0))
}

/// Cosine similarity on raw slices; same contract as [`cosine_sim`].
pub fn cosine_sim_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(a.len(), b.len()));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Per-node and per-edge embeddings, indexed like the graph. Immutable once built.
#[derive(Debug, Clone)]
pub struct FeatureTables {
    pub node: Vec<Embedding>,
    pub edge: Vec<Embedding>,
    pub d_enc: usize,
}

impl FeatureTables {
    pub fn node_by_id(&self, graph: &CitationGraph, id: &str) -> Result<&Embedding> {
        Ok(&self.node[graph.node_idx(id)?])
    }

    pub fn edge_by_id(&self, graph: &CitationGraph, id: &str) -> Result<&Embedding> {
        Ok(&self.edge[graph.edge_idx(id)?])
    }
}

/// Encode every node and edge text with the same encoder.
pub fn encode_graph(encoder: &Encoder, graph: &CitationGraph) -> Result<FeatureTables> {
    encode_graph_with(encoder, encoder, graph)
}

/// Encode node texts and edge statements with separate encoders (same `d_enc`).
pub fn encode_graph_with(
    node_encoder: &Encoder,
    edge_encoder: &Encoder,
    graph: &CitationGraph,
) -> Result<FeatureTables> {
    if node_encoder.d_enc() != edge_encoder.d_enc() {
        return Err(Error::DimensionMismatch(
            node_encoder.d_enc(),
            edge_encoder.d_enc(),
        ));
    }
    let mut node = Vec::with_capacity(graph.node_count());
    for p in graph.publications() {
        let e = node_encoder
            .encode_text(&p.text)
            .map_err(|err| tag_id(err, &p.id))?;
        node.push(e);
    }
    let mut edge = Vec::with_capacity(graph.edge_count());
    for ce in graph.edges() {
        let e = edge_encoder
            .encode_text(&ce.statement)
            .map_err(|err| tag_id(err, &ce.id))?;
        edge.push(e);
    }
    Ok(FeatureTables {
        node,
        edge,
        d_enc: node_encoder.d_enc(),
    })
}

fn tag_id(err: Error, id: &str) -> Error {
    match err {
        Error::EmptyText(_) => Error::EmptyText(id.to_string()),
        other => other,
    }
}

#[derive(Debug)]
struct ExternalClient {
    config: ExternalEncoderConfig,
    http: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    input: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f64>>,
}

impl ExternalClient {
    fn new(config: ExternalEncoderConfig) -> Self {
        Self {
            config,
            http: reqwest::blocking::Client::new(),
        }
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        let mut last_err = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                std::thread::sleep(std::time::Duration::from_millis(100 * attempt as u64));
            }
            let mut req = self
                .http
                .post(&self.config.url)
                .json(&EmbedRequest { input: texts });
            if let Some(token) = &self.config.auth_token {
                req = req.bearer_auth(token);
            }
            match req.send() {
                Ok(resp) if resp.status().is_success() => {
                    let body: EmbedResponse = resp.json().map_err(|e| Error::EncoderEndpoint {
                        retries: attempt,
                        message: e.to_string(),
                    })?;
                    return Ok(body.embeddings);
                }
                Ok(resp) => last_err = format!("http status {}", resp.status()),
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(Error::EncoderEndpoint {
            retries: self.config.max_retries,
            message: last_err,
        })
    }
}
