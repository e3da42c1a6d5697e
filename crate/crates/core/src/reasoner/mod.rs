//! Teacher-side reasoning: hop-wise verification, chain-of-thought state
//! evolution, structured final judgment, and pooled teacher vectors.

pub mod backend;
pub mod prompts;

pub use backend::{
    CallContext, CallPurpose, CountingBackend, HttpBackend, HttpBackendConfig, LlmBackend,
    MockBackend, ScriptedBackend,
};
pub use prompts::{PromptTemplate, TemplateName, TemplateSet};

use crate::chain::{build_chain, hop_link_edges, ChainConfig, EvidenceChain};
use crate::encoder::FeatureTables;
use crate::error::{Error, Result};
use crate::graph::CitationGraph;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Consistent,
    Inconsistent,
    Uncertain,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Verdict::Consistent => "consistent",
            Verdict::Inconsistent => "inconsistent",
            Verdict::Uncertain => "uncertain",
        };
        f.write_str(s)
    }
}

/// Outcome of one hop's verification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub hop: usize,
    pub verdict: Verdict,
    pub rationale: String,
}

/// Cumulative reasoning text after a hop. `hop = 0` is the empty start state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningState {
    pub hop: usize,
    pub text: String,
}

impl ReasoningState {
    pub fn initial() -> Self {
        Self {
            hop: 0,
            text: String::new(),
        }
    }
}

/// Structured final assessment: explanation, miscitation level, confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Judgment {
    pub explanation: String,
    pub level: f64,
    pub confidence: f64,
}

/// Everything the teacher produced for one edge. All hop-indexed lists have
/// the same length K_eff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherTrace {
    pub edge: String,
    pub verifications: Vec<Verification>,
    pub states: Vec<ReasoningState>,
    pub teacher_vectors: Vec<Vec<f64>>,
    pub judgment: Judgment,
}

impl TeacherTrace {
    pub fn k_eff(&self) -> usize {
        self.verifications.len()
    }
}

fn joined_node_texts(graph: &CitationGraph, ids: &[String]) -> Result<String> {
    let mut parts = Vec::with_capacity(ids.len());
    for id in ids {
        let p = graph.publication(id)?;
        parts.push(format!("[{}] {}", p.id, p.text));
    }
    Ok(parts.join("\n"))
}

/// The citation context carried into hop h: the root statement for hop 1,
/// otherwise the statements of all edges linking the consecutive kept sets.
fn hop_claim_context(graph: &CitationGraph, chain: &EvidenceChain, h: usize) -> Result<String> {
    let links = hop_link_edges(graph, chain, h)?;
    let parts: Vec<&str> = links
        .iter()
        .map(|&ei| graph.edge_at(ei).statement.as_str())
        .collect();
    Ok(parts.join("\n"))
}

fn cited_text(graph: &CitationGraph, chain: &EvidenceChain, h: usize) -> Result<String> {
    joined_node_texts(graph, &chain.hops[h - 1].filtered)
}

fn citing_text(graph: &CitationGraph, chain: &EvidenceChain, h: usize) -> Result<String> {
    if h == 1 {
        joined_node_texts(graph, std::slice::from_ref(&chain.source))
    } else {
        joined_node_texts(graph, &chain.hops[h - 2].filtered)
    }
}

fn parse_verdict(reply: &str) -> Option<(Verdict, String)> {
    let mut verdict = None;
    let mut rationale = None;
    for line in reply.lines() {
        let trimmed = line.trim();
        let upper = trimmed.to_ascii_uppercase();
        if let Some(rest) = upper.strip_prefix("VERDICT:") {
            let token: String = rest
                .trim()
                .chars()
                .take_while(|c| c.is_ascii_alphabetic())
                .collect::<String>()
                .to_ascii_lowercase();
            verdict = match token.as_str() {
                "consistent" => Some(Verdict::Consistent),
                "inconsistent" => Some(Verdict::Inconsistent),
                "uncertain" => Some(Verdict::Uncertain),
                _ => None,
            };
        } else if upper.starts_with("RATIONALE:") {
            rationale = Some(trimmed[10..].trim().to_string());
        }
    }
    verdict.map(|v| (v, rationale.unwrap_or_else(|| reply.trim().to_string())))
}

/// Verify hop `h` of the chain: does the citation context entering the hop
/// faithfully represent the cited documents?
pub fn verify_hop(
    backend: &dyn LlmBackend,
    graph: &CitationGraph,
    chain: &EvidenceChain,
    h: usize,
    templates: &TemplateSet,
) -> Result<Verification> {
    if h < 1 || h > chain.k_eff() {
        return Err(Error::HopOutOfRange {
            hop: h,
            max: chain.k_eff(),
        });
    }
    let fills: BTreeMap<&str, String> = [
        ("claim", hop_claim_context(graph, chain, h)?),
        ("cited_text", cited_text(graph, chain, h)?),
        ("citing_text", citing_text(graph, chain, h)?),
    ]
    .into_iter()
    .collect();
    let prompt = templates.verify.render(&fills)?;
    let ctx = CallContext {
        edge_id: &chain.root_edge,
        hop: h,
        purpose: CallPurpose::Verify,
    };
    let reply = backend.generate(&ctx, &prompt)?;
    if let Some((verdict, rationale)) = parse_verdict(&reply) {
        return Ok(Verification {
            hop: h,
            verdict,
            rationale,
        });
    }
    let reask = format!(
        "{prompt}\n\nYour previous reply could not be parsed. Reply with exactly one line \
         `VERDICT: consistent|inconsistent|uncertain` and one line `RATIONALE: <why>`."
    );
    let reply = backend.generate(&ctx, &reask)?;
    match parse_verdict(&reply) {
        Some((verdict, rationale)) => Ok(Verification {
            hop: h,
            verdict,
            rationale,
        }),
        None => Err(Error::UnparseableVerdict(truncate(&reply, 200))),
    }
}

/// Fold a new verification into the accumulated reasoning.
pub fn advance_reasoning(
    backend: &dyn LlmBackend,
    graph: &CitationGraph,
    chain: &EvidenceChain,
    prior: &ReasoningState,
    verification: &Verification,
    templates: &TemplateSet,
) -> Result<ReasoningState> {
    if prior.hop + 1 != verification.hop {
        return Err(Error::HopSequence {
            prior: prior.hop,
            hop: verification.hop,
        });
    }
    let h = verification.hop;
    let fills: BTreeMap<&str, String> = [
        ("claim", chain.claim.clone()),
        (
            "prior_state",
            if prior.text.is_empty() {
                "(start of reasoning)".to_string()
            } else {
                prior.text.clone()
            },
        ),
        (
            "verification",
            format!("{}: {}", verification.verdict, verification.rationale),
        ),
        ("cited_text", cited_text(graph, chain, h)?),
    ]
    .into_iter()
    .collect();
    let prompt = templates.cot.render(&fills)?;
    let ctx = CallContext {
        edge_id: &chain.root_edge,
        hop: h,
        purpose: CallPurpose::Cot,
    };
    let text = backend.generate(&ctx, &prompt)?.trim().to_string();
    if text.is_empty() {
        return Err(Error::Backend {
            retries: 0,
            message: "backend returned an empty reasoning state".to_string(),
        });
    }
    Ok(ReasoningState { hop: h, text })
}

#[derive(Deserialize)]
struct JudgeReply {
    explanation: String,
    miscitation_level: f64,
    confidence: f64,
}

fn strip_code_fence(reply: &str) -> &str {
    let t = reply.trim();
    if let Some(body) = t.strip_prefix("```json").or_else(|| t.strip_prefix("```")) {
        if let Some(end) = body.rfind("```") {
            return body[..end].trim();
        }
    }
    t
}

fn chain_summary(chain: &EvidenceChain) -> String {
    let mut lines = vec![format!(
        "citation {} -> {} (edge {})",
        chain.source, chain.target, chain.root_edge
    )];
    for hop in &chain.hops {
        lines.push(format!("hop {}: kept [{}]", hop.hop, hop.filtered.join(", ")));
    }
    lines.join("\n")
}

/// Synthesize the trajectory into a structured judgment. Malformed JSON is
/// re-asked once; out-of-range scores are an error, never clamped.
pub fn judge(
    backend: &dyn LlmBackend,
    trajectory: &[ReasoningState],
    chain: &EvidenceChain,
    templates: &TemplateSet,
) -> Result<Judgment> {
    if trajectory.is_empty() {
        return Err(Error::Config("empty reasoning trajectory".to_string()));
    }
    let fills: BTreeMap<&str, String> = [
        ("claim", chain.claim.clone()),
        ("chain_summary", chain_summary(chain)),
        (
            "prior_state",
            trajectory
                .iter()
                .map(|s| format!("hop {}: {}", s.hop, s.text))
                .collect::<Vec<_>>()
                .join("\n"),
        ),
    ]
    .into_iter()
    .collect();
    let prompt = templates.judge.render(&fills)?;
    let ctx = CallContext {
        edge_id: &chain.root_edge,
        hop: chain.k_eff(),
        purpose: CallPurpose::Judge,
    };
    let reply = backend.generate(&ctx, &prompt)?;
    let parsed = serde_json::from_str::<JudgeReply>(strip_code_fence(&reply));
    let parsed = match parsed {
        Ok(p) => p,
        Err(_) => {
            let reask = format!("{prompt}\n\nReply with valid JSON only.");
            let reply = backend.generate(&ctx, &reask)?;
            serde_json::from_str::<JudgeReply>(strip_code_fence(&reply))
                .map_err(|_| Error::MalformedJudgment(truncate(&reply, 200)))?
        }
    };
    if !(0.0..=1.0).contains(&parsed.miscitation_level) || !parsed.miscitation_level.is_finite() {
        return Err(Error::JudgmentOutOfRange {
            field: "level",
            value: parsed.miscitation_level,
        });
    }
    if !(0.0..=1.0).contains(&parsed.confidence) || !parsed.confidence.is_finite() {
        return Err(Error::JudgmentOutOfRange {
            field: "confidence",
            value: parsed.confidence,
        });
    }
    Ok(Judgment {
        explanation: parsed.explanation,
        level: parsed.miscitation_level,
        confidence: parsed.confidence,
    })
}

/// Arithmetic mean of token vectors.
pub fn mean_pool(tokens: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = tokens.first().ok_or(Error::ZeroTokens)?;
    let d = first.len();
    let mut out = vec![0.0; d];
    for t in tokens {
        if t.len() != d {
            return Err(Error::DimensionMismatch(t.len(), d));
        }
        for (o, v) in out.iter_mut().zip(t) {
            *o += v;
        }
    }
    let n = tokens.len() as f64;
    for o in &mut out {
        *o /= n;
    }
    Ok(out)
}

/// Pooled teacher vector for a reasoning state.
pub fn teacher_vector(
    backend: &dyn LlmBackend,
    edge_id: &str,
    state: &ReasoningState,
) -> Result<Vec<f64>> {
    if state.text.is_empty() {
        return Err(Error::Config("empty reasoning state".to_string()));
    }
    let ctx = CallContext {
        edge_id,
        hop: state.hop,
        purpose: CallPurpose::EmbedTokens,
    };
    let tokens = backend.embed_tokens(&ctx, &state.text)?;
    mean_pool(&tokens)
}

/// Run the full teacher pipeline for one edge: build the chain, then per hop
/// verify -> advance -> pool, then judge. All-or-nothing.
pub fn reason_edge(
    backend: &dyn LlmBackend,
    graph: &CitationGraph,
    edge: &str,
    chain_config: &ChainConfig,
    templates: &TemplateSet,
    features: &FeatureTables,
) -> Result<TeacherTrace> {
    let chain = build_chain(graph, edge, chain_config, features)?;
    let mut verifications = Vec::with_capacity(chain.k_eff());
    let mut states: Vec<ReasoningState> = Vec::with_capacity(chain.k_eff());
    let mut teacher_vectors = Vec::with_capacity(chain.k_eff());
    let mut prior = ReasoningState::initial();
    for h in 1..=chain.k_eff() {
        let v = verify_hop(backend, graph, &chain, h, templates)?;
        let state = advance_reasoning(backend, graph, &chain, &prior, &v, templates)?;
        teacher_vectors.push(teacher_vector(backend, edge, &state)?);
        verifications.push(v);
        prior = state.clone();
        states.push(state);
    }
    let judgment = judge(backend, &states, &chain, templates)?;
    Ok(TeacherTrace {
        edge: edge.to_string(),
        verifications,
        states,
        teacher_vectors,
        judgment,
    })
}

fn truncate(s: &str, n: usize) -> String {
    if s.len() <= n {
        s.to_string()
    } else {
        let mut end = n;
        while !s.is_char_boundary(end) {
            end -= 1;
        }
        format!("{}...", &s[..end])
    }
}
