//! LLM backends: a deterministic mock rule engine for tests and benchmarks,
//! a scripted backend for unit fixtures, and an HTTP chat-completion client.

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CallPurpose {
    Verify,
    Cot,
    Judge,
    EmbedTokens,
}

/// Which edge and hop a backend call belongs to. The mock backend keys its
/// deterministic outputs on this; remote backends only see the prompt.
#[derive(Debug, Clone)]
pub struct CallContext<'a> {
    pub edge_id: &'a str,
    pub hop: usize,
    pub purpose: CallPurpose,
}

pub trait LlmBackend: Send + Sync {
    fn generate(&self, ctx: &CallContext<'_>, prompt: &str) -> Result<String>;
    fn embed_tokens(&self, ctx: &CallContext<'_>, text: &str) -> Result<Vec<Vec<f64>>>;
    /// Identifies the backend configuration for trace-cache keying.
    fn fingerprint(&self) -> String;
}

fn mix(seed: u64, parts: &[&str], nums: &[u64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    let mut eat = |b: u8| {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    };
    for p in parts {
        for b in p.as_bytes() {
            eat(*b);
        }
        eat(0xff);
    }
    for n in nums {
        for b in n.to_le_bytes() {
            eat(b);
        }
    }
    h
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Deterministic rule-engine backend. Replies are pure functions of
/// (edge-id, hop, seed); with a label map it produces label-informed
/// verdicts, judgments and token vectors, with an optional per-edge error
/// rate and injected latency for runtime benchmarks.
pub struct MockBackend {
    seed: u64,
    d_teacher: usize,
    labels: BTreeMap<String, u8>,
    claims: BTreeMap<String, String>,
    cited_texts: BTreeMap<String, String>,
    /// (claim topic, cited-paper topic) per edge, when node metadata
    /// carries field tags.
    topic_pairs: BTreeMap<String, (String, String)>,
    /// Edges where the teacher reasons in depth; obvious cases get generic
    /// low-information reasoning instead (see `with_graph`).
    engaged: BTreeMap<String, bool>,
    flip_rate: f64,
    latency: Option<Duration>,
}

impl MockBackend {
    pub fn new(seed: u64, d_teacher: usize) -> Self {
        Self {
            seed,
            d_teacher,
            labels: BTreeMap::new(),
            claims: BTreeMap::new(),
            cited_texts: BTreeMap::new(),
            topic_pairs: BTreeMap::new(),
            engaged: BTreeMap::new(),
            flip_rate: 0.0,
            latency: None,
        }
    }

    /// Leak ground-truth labels to the mock teacher.
    pub fn with_labels(mut self, labels: BTreeMap<String, u8>) -> Self {
        self.labels = labels;
        self
    }

    /// Give the teacher each edge's claim text; token vectors then carry a
    /// hashed claim component the way transformer states carry the prompt.
    pub fn with_claims(mut self, claims: BTreeMap<String, String>) -> Self {
        self.claims = claims;
        self
    }

    /// Convenience: leak labels and claims straight from a graph, and mark
    /// which edges get engaged reasoning. An edge counts as obvious when its
    /// claim-to-target similarity falls on the easy side of its class's
    /// median; the teacher's reasoning on obvious edges is generic
    /// boilerplate whose token vectors carry little per-edge information.
    pub fn with_graph(self, graph: &crate::graph::CitationGraph) -> Self {
        let labels: BTreeMap<String, u8> = graph
            .edges()
            .iter()
            .filter_map(|e| e.label.map(|l| (e.id.clone(), l)))
            .collect();
        let claims: BTreeMap<String, String> = graph
            .edges()
            .iter()
            .map(|e| (e.id.clone(), e.statement.clone()))
            .collect();

        let enc = Encoder::hashing(64).expect("valid dimension");
        let mut sims: BTreeMap<String, f64> = BTreeMap::new();
        let mut per_class: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        for e in graph.edges() {
            let Some(label) = e.label else { continue };
            let target = graph.publication(&e.target).expect("validated edge");
            let sim = enc
                .encode_text(&e.statement)
                .and_then(|c| enc.encode_text(&target.text).map(|t| (c, t)))
                .and_then(|(c, t)| crate::encoder::cosine_sim(&c, &t))
                .unwrap_or(0.0);
            sims.insert(e.id.clone(), sim);
            per_class[label as usize].push(sim);
        }
        // The half of each class closest to the boundary gets engaged
        // reasoning; everything clearer is treated as routine.
        let quantile = |v: &mut Vec<f64>, q: f64| -> f64 {
            if v.is_empty() {
                return 0.0;
            }
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let idx = ((v.len() - 1) as f64 * q).round() as usize;
            v[idx]
        };
        let cut0 = quantile(&mut per_class[0], 0.5);
        let cut1 = quantile(&mut per_class[1], 0.5);
        let mut engaged = BTreeMap::new();
        for (id, label) in &labels {
            let sim = sims[id];
            // Valid citations clearly matching their targets and
            // miscitations clearly mismatched are the obvious cases.
            let obvious = if *label == 0 { sim >= cut0 } else { sim <= cut1 };
            engaged.insert(id.clone(), !obvious);
        }
        let cited_texts = graph
            .edges()
            .iter()
            .map(|e| {
                let t = graph.publication(&e.target).expect("validated edge");
                (e.id.clone(), t.text.clone())
            })
            .collect();
        // Topic recognition: the teacher reads the claim's field off the
        // citing paper and the cited paper's field off its metadata.
        let field_of = |id: &str| -> Option<String> {
            graph
                .publication(id)
                .ok()?
                .meta
                .as_ref()?
                .get("field")?
                .as_str()
                .map(str::to_string)
        };
        let mut topic_pairs = BTreeMap::new();
        for e in graph.edges() {
            let (Some(sf), Some(tf)) = (field_of(&e.source), field_of(&e.target)) else {
                continue;
            };
            let Some(label) = e.label else { continue };
            // A sound citation's claim is about the cited paper's topic; a
            // believed miscitation pairs the citing paper's topic with it.
            let (class, _) = (label, ());
            let claim_topic = if class == 1 { sf } else { tf.clone() };
            topic_pairs.insert(e.id.clone(), (claim_topic, tf));
        }
        let mut out = self.with_labels(labels).with_claims(claims);
        out.cited_texts = cited_texts;
        out.topic_pairs = topic_pairs;
        out.engaged = engaged;
        out
    }

    /// Fraction of edges the teacher gets wrong (deterministic per edge).
    pub fn with_flip_rate(mut self, rate: f64) -> Self {
        self.flip_rate = rate;
        self
    }

    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = Some(latency);
        self
    }

    pub fn d_teacher(&self) -> usize {
        self.d_teacher
    }

    fn unit(&self, parts: &[&str], nums: &[u64]) -> f64 {
        (mix(self.seed, parts, nums) >> 11) as f64 / (1u64 << 53) as f64
    }

    fn rng(&self, parts: &[&str], nums: &[u64]) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix(self.seed, parts, nums))
    }

    /// The class the teacher believes the edge belongs to, wrong for a
    /// deterministic `flip_rate` fraction. None when no label was leaked.
    fn believed_class(&self, edge_id: &str) -> Option<(u8, bool)> {
        let label = *self.labels.get(edge_id)?;
        let flipped = self.unit(&["flip", edge_id], &[]) < self.flip_rate;
        let class = if flipped { 1 - label } else { label };
        Some((class, flipped))
    }

    /// Hop-specific anchor axis; the two classes sit at opposite poles.
    fn anchor(&self, hop: usize, class: u8) -> Vec<f64> {
        let mut rng = self.rng(&["anchor"], &[hop as u64]);
        let axis = unit_vector(&mut rng, self.d_teacher);
        let sign = if class == 1 { 1.0 } else { -1.0 };
        axis.into_iter().map(|v| sign * v).collect()
    }

    fn sleep(&self) {
        if let Some(d) = self.latency {
            std::thread::sleep(d);
        }
    }
}

impl LlmBackend for MockBackend {
    fn generate(&self, ctx: &CallContext<'_>, _prompt: &str) -> Result<String> {
        self.sleep();
        let edge = ctx.edge_id;
        match ctx.purpose {
            CallPurpose::Verify => {
                let verdict = match self.believed_class(edge) {
                    Some((1, _)) => "inconsistent",
                    Some((0, _)) => "consistent",
                    _ => {
                        let u = self.unit(&["verdict", edge], &[ctx.hop as u64]);
                        if u < 0.45 {
                            "consistent"
                        } else if u < 0.9 {
                            "inconsistent"
                        } else {
                            "uncertain"
                        }
                    }
                };
                Ok(format!(
                    "VERDICT: {verdict}\nRATIONALE: hop {} sources {} the citation context of {}.",
                    ctx.hop,
                    if verdict == "consistent" { "support" } else { "do not support" },
                    edge
                ))
            }
            CallPurpose::Cot => {
                let lean = match self.believed_class(edge) {
                    Some((1, _)) => "weakening",
                    Some((0, _)) => "supporting",
                    _ => "mixed",
                };
                Ok(format!(
                    "Through hop {} the traced sources are {} for the claim of {}; \
                     earlier findings remain unchanged.",
                    ctx.hop, lean, edge
                ))
            }
            CallPurpose::Judge => {
                let (level, confidence) = match self.believed_class(edge) {
                    Some((class, flipped)) => {
                        let base = self.unit(&["judge", edge], &[]);
                        let level = if class == 1 {
                            0.85 + 0.1 * base
                        } else {
                            0.05 + 0.1 * base
                        };
                        // Half of the wrong judgments come with low confidence
                        // (caught by the confidence gate), half with high
                        // confidence (caught by the label-agreement gate).
                        let confidence = if flipped && self.unit(&["conf", edge], &[]) < 0.5 {
                            0.3 + 0.3 * base
                        } else {
                            0.85 + 0.12 * base
                        };
                        (level, confidence)
                    }
                    None => {
                        let base = self.unit(&["judge", edge], &[]);
                        (0.2 + 0.6 * base, 0.4 + 0.4 * base)
                    }
                };
                Ok(format!(
                    "{{\"explanation\": \"traced sources for {} were examined hop by hop\", \
                     \"miscitation_level\": {level:.4}, \"confidence\": {confidence:.4}}}",
                    edge
                ))
            }
            CallPurpose::EmbedTokens => Ok(String::new()),
        }
    }

    fn embed_tokens(&self, ctx: &CallContext<'_>, _text: &str) -> Result<Vec<Vec<f64>>> {
        self.sleep();
        let edge = ctx.edge_id;
        let mut rng = self.rng(&["tokens", edge], &[ctx.hop as u64]);
        let noise_a = unit_vector(&mut rng, self.d_teacher);
        let noise_b = unit_vector(&mut rng, self.d_teacher);
        if !self.engaged.get(edge).copied().unwrap_or(true) {
            // Routine confirmation: boilerplate reasoning embeds near one
            // generic hop direction regardless of class or content.
            let mut grng = self.rng(&["generic"], &[ctx.hop as u64]);
            let generic = unit_vector(&mut grng, self.d_teacher);
            let tok = |noise: &[f64]| -> Vec<f64> {
                generic
                    .iter()
                    .zip(noise)
                    .map(|(g, n)| g + 0.25 * n)
                    .collect()
            };
            return Ok(vec![tok(&noise_a), tok(&noise_b)]);
        }
        let class = match self.believed_class(edge) {
            Some((c, _)) => c,
            None => (self.unit(&["class", edge], &[]) < 0.5) as u8,
        };
        // Engaged reasoning embeds what the teacher concluded about the
        // topic pairing (or the bare verdict when no metadata exists) plus
        // the texts it actually read: the claim and the cited document.
        // Students seeing the same texts can reproduce those components.
        let anchor = match (self.topic_pairs.get(edge), self.believed_class(edge)) {
            // A flipped teacher misreads the pairing as its own class says.
            (Some((claim_topic, cited_topic)), Some((c, _))) => {
                let claimed = if c == 1 && claim_topic == cited_topic {
                    "elsewhere".to_string()
                } else if c == 0 {
                    cited_topic.clone()
                } else {
                    claim_topic.clone()
                };
                let mut rng = self.rng(
                    &["pair", claimed.as_str(), cited_topic.as_str()],
                    &[ctx.hop as u64],
                );
                unit_vector(&mut rng, self.d_teacher)
            }
            _ => self.anchor(ctx.hop, class),
        };
        let first: Vec<f64> = anchor
            .iter()
            .zip(&noise_a)
            .map(|(a, n)| a + 0.1 * n)
            .collect();
        let enc = Encoder::hashing(self.d_teacher)?;
        let mut tokens = vec![first];
        match self.claims.get(edge) {
            Some(claim) => {
                let emb = enc.encode_text(claim)?;
                tokens.push(
                    emb.values()
                        .iter()
                        .zip(&noise_b)
                        .map(|(c, n)| 0.8 * c + 0.1 * n)
                        .collect(),
                );
            }
            None => tokens.push(noise_b.iter().map(|n| 0.35 * n).collect()),
        }
        if let Some(cited) = self.cited_texts.get(edge) {
            let noise_c = unit_vector(&mut rng, self.d_teacher);
            let emb = enc.encode_text(cited)?;
            tokens.push(
                emb.values()
                    .iter()
                    .zip(&noise_c)
                    .map(|(c, n)| 0.8 * c + 0.1 * n)
                    .collect(),
            );
        }
        Ok(tokens)
    }

    fn fingerprint(&self) -> String {
        let mut label_hash: u64 = 0;
        for (k, v) in &self.labels {
            label_hash ^= mix(self.seed, &[k], &[*v as u64]);
        }
        let mut claim_hash: u64 = 0;
        for (k, v) in &self.claims {
            claim_hash ^= mix(self.seed, &[k, v], &[]);
        }
        for (k, v) in &self.engaged {
            claim_hash ^= mix(self.seed, &[k, "engaged"], &[*v as u64]);
        }
        format!(
            "mock:{}:{}:{:x}:{:x}:{}",
            self.seed, self.d_teacher, label_hash, claim_hash, self.flip_rate
        )
    }
}

/// Replays queued replies; token vectors are fixed. Test fixture only.
pub struct ScriptedBackend {
    replies: Mutex<std::collections::VecDeque<String>>,
    tokens: Vec<Vec<f64>>,
}

impl ScriptedBackend {
    pub fn new(replies: Vec<&str>, tokens: Vec<Vec<f64>>) -> Self {
        Self {
            replies: Mutex::new(replies.into_iter().map(str::to_string).collect()),
            tokens,
        }
    }
}

impl LlmBackend for ScriptedBackend {
    fn generate(&self, _ctx: &CallContext<'_>, _prompt: &str) -> Result<String> {
        self.replies
            .lock()
            .expect("scripted backend lock")
            .pop_front()
            .ok_or_else(|| Error::Backend {
                retries: 0,
                message: "script exhausted".to_string(),
            })
    }

    fn embed_tokens(&self, _ctx: &CallContext<'_>, _text: &str) -> Result<Vec<Vec<f64>>> {
        Ok(self.tokens.clone())
    }

    fn fingerprint(&self) -> String {
        "scripted".to_string()
    }
}

/// Counts calls made through it; used by the runtime benchmark.
pub struct CountingBackend<'a> {
    inner: &'a dyn LlmBackend,
    calls: AtomicU64,
}

impl<'a> CountingBackend<'a> {
    pub fn new(inner: &'a dyn LlmBackend) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl LlmBackend for CountingBackend<'_> {
    fn generate(&self, ctx: &CallContext<'_>, prompt: &str) -> Result<String> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.generate(ctx, prompt)
    }

    fn embed_tokens(&self, ctx: &CallContext<'_>, text: &str) -> Result<Vec<Vec<f64>>> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.embed_tokens(ctx, text)
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }
}

/// Settings for the chat-completion HTTP backend.
#[derive(Debug, Clone)]
pub struct HttpBackendConfig {
    pub base_url: String,
    pub model: String,
    pub temperature: f64,
    pub max_retries: usize,
    pub auth_token: Option<String>,
}

impl HttpBackendConfig {
    /// Base URL from `MISCITE_LLM_URL`, model from `MISCITE_LLM_MODEL`,
    /// auth token from `MISCITE_LLM_TOKEN`.
    pub fn from_env() -> Result<Self> {
        let base_url = std::env::var("MISCITE_LLM_URL")
            .map_err(|_| Error::Config("MISCITE_LLM_URL is not set".to_string()))?;
        Ok(Self {
            base_url,
            model: std::env::var("MISCITE_LLM_MODEL").unwrap_or_else(|_| "default".to_string()),
            temperature: 0.1,
            max_retries: 3,
            auth_token: std::env::var("MISCITE_LLM_TOKEN").ok(),
        })
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReplyMessage,
}

#[derive(Deserialize)]
struct ChatReplyMessage {
    content: String,
}

/// Chat-completion client. Hosted models do not expose hidden states, so
/// `embed_tokens` proxies through the text encoder instead.
pub struct HttpBackend {
    config: HttpBackendConfig,
    encoder: Encoder,
    http: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig, encoder: Encoder) -> Self {
        Self {
            config,
            encoder,
            http: reqwest::blocking::Client::new(),
        }
    }

    fn endpoint(&self) -> String {
        let base = self.config.base_url.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }
}

impl LlmBackend for HttpBackend {
    fn generate(&self, _ctx: &CallContext<'_>, prompt: &str) -> Result<String> {
        let body = ChatRequest {
            model: &self.config.model,
            messages: vec![ChatMessage {
                role: "user",
                content: prompt,
            }],
            temperature: self.config.temperature,
        };
        let mut last_err = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(200 * attempt as u64));
            }
            let mut req = self.http.post(self.endpoint()).json(&body);
            if let Some(token) = &self.config.auth_token {
                req = req.bearer_auth(token);
            }
            match req.send() {
                Ok(resp) if resp.status().is_success() => {
                    let parsed: ChatResponse = resp.json().map_err(|e| Error::Backend {
                        retries: attempt,
                        message: e.to_string(),
                    })?;
                    return parsed
                        .choices
                        .into_iter()
                        .next()
                        .map(|c| c.message.content)
                        .ok_or_else(|| Error::Backend {
                            retries: attempt,
                            message: "response had no choices".to_string(),
                        });
                }
                Ok(resp) => last_err = format!("http status {}", resp.status()),
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(Error::Backend {
            retries: self.config.max_retries,
            message: last_err,
        })
    }

    fn embed_tokens(&self, _ctx: &CallContext<'_>, text: &str) -> Result<Vec<Vec<f64>>> {
        let emb = self.encoder.encode_text(text)?;
        Ok(vec![emb.values().to_vec()])
    }

    fn fingerprint(&self) -> String {
        format!("http:{}@{}", self.config.model, self.config.base_url)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(edge: &str, hop: usize, purpose: CallPurpose) -> CallContext<'_> {
        CallContext {
            edge_id: edge,
            hop,
            purpose,
        }
    }

    #[test]
    fn mock_is_deterministic() {
        let b = MockBackend::new(7, 8);
        let c = ctx("e1", 1, CallPurpose::Verify);
        assert_eq!(b.generate(&c, "p").unwrap(), b.generate(&c, "p").unwrap());
        let ce = ctx("e1", 2, CallPurpose::EmbedTokens);
        assert_eq!(
            b.embed_tokens(&ce, "t").unwrap(),
            b.embed_tokens(&ce, "t").unwrap()
        );
    }

    #[test]
    fn label_leakage_drives_verdicts() {
        let labels: BTreeMap<String, u8> =
            [("good".to_string(), 0u8), ("bad".to_string(), 1u8)].into();
        let b = MockBackend::new(7, 8).with_labels(labels);
        let good = b
            .generate(&ctx("good", 1, CallPurpose::Verify), "p")
            .unwrap();
        let bad = b.generate(&ctx("bad", 1, CallPurpose::Verify), "p").unwrap();
        assert!(good.contains("VERDICT: consistent"), "{good}");
        assert!(bad.contains("VERDICT: inconsistent"), "{bad}");
    }

    #[test]
    fn label_informed_judgments_separate_classes() {
        let labels: BTreeMap<String, u8> =
            [("good".to_string(), 0u8), ("bad".to_string(), 1u8)].into();
        let b = MockBackend::new(7, 8).with_labels(labels);
        let good = b.generate(&ctx("good", 1, CallPurpose::Judge), "p").unwrap();
        let bad = b.generate(&ctx("bad", 1, CallPurpose::Judge), "p").unwrap();
        let gv: serde_json::Value = serde_json::from_str(&good).unwrap();
        let bv: serde_json::Value = serde_json::from_str(&bad).unwrap();
        assert!(gv["miscitation_level"].as_f64().unwrap() < 0.2);
        assert!(bv["miscitation_level"].as_f64().unwrap() > 0.8);
    }

    #[test]
    fn token_anchors_differ_across_classes_and_hops() {
        let labels: BTreeMap<String, u8> =
            [("good".to_string(), 0u8), ("bad".to_string(), 1u8)].into();
        let b = MockBackend::new(3, 16).with_labels(labels);
        let mean = |edge: &str, hop: usize| -> Vec<f64> {
            let toks = b
                .embed_tokens(&ctx(edge, hop, CallPurpose::EmbedTokens), "t")
                .unwrap();
            let mut m = vec![0.0; 16];
            for t in &toks {
                for (a, v) in m.iter_mut().zip(t) {
                    *a += v / toks.len() as f64;
                }
            }
            m
        };
        let cos = |a: &[f64], b: &[f64]| {
            crate::encoder::cosine_sim_slices(a, b).unwrap()
        };
        let (g1, b1) = (mean("good", 1), mean("bad", 1));
        let g2 = mean("good", 2);
        assert!(cos(&g1, &b1) < 0.6, "classes should separate");
        assert!(cos(&g1, &g2) < 0.9, "hops should have distinct anchors");
    }

    #[test]
    fn counting_backend_counts() {
        let b = MockBackend::new(1, 4);
        let counting = CountingBackend::new(&b);
        let c = ctx("e", 1, CallPurpose::Verify);
        counting.generate(&c, "p").unwrap();
        counting
            .embed_tokens(&ctx("e", 1, CallPurpose::EmbedTokens), "t")
            .unwrap();
        assert_eq!(counting.calls(), 2);
    }

    #[test]
    fn scripted_backend_replays_in_order() {
        let b = ScriptedBackend::new(vec!["one", "two"], vec![vec![1.0]]);
        let c = ctx("e", 1, CallPurpose::Verify);
        assert_eq!(b.generate(&c, "p").unwrap(), "one");
        assert_eq!(b.generate(&c, "p").unwrap(), "two");
        assert!(b.generate(&c, "p").is_err());
    }
}
