use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}:{line}: malformed record: {message}")]
    MalformedLine {
        path: String,
        line: usize,
        message: String,
    },
    #[error("duplicate node-id {0}")]
    DuplicateNode(String),
    #[error("duplicate edge-id {0}")]
    DuplicateEdge(String),
    #[error("duplicate edge triple ({citing}, {cited}, statement)")]
    DuplicateTriple { citing: String, cited: String },
    #[error("dangling endpoint {0}")]
    DanglingEndpoint(String),
    #[error("self-citation on edge {0}")]
    SelfCitation(String),
    #[error("empty node text for node {0}")]
    EmptyNodeText(String),
    #[error("edge {edge}: label {label} is not 0 or 1")]
    BadLabel { edge: String, label: i64 },
    #[error("unknown node-id {0}")]
    UnknownNode(String),
    #[error("unknown edge-id {0}")]
    UnknownEdge(String),
    #[error("ratios must sum to 1 (got {0})")]
    RatiosDoNotSumToOne(f64),
    #[error("no labeled edges in graph")]
    NoLabeledEdges,

    #[error("cannot encode empty text for {0}")]
    EmptyText(String),
    #[error("embedding dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero-norm embedding")]
    ZeroNorm,
    #[error("missing embedding for {0}")]
    MissingEmbedding(String),
    #[error("external encoder failed after {retries} retries: {message}")]
    EncoderEndpoint { retries: usize, message: String },

    #[error("template {name}: placeholder {{{placeholder}}} has no fill value")]
    MissingPlaceholder { name: String, placeholder: String },
    #[error("backend failed after {retries} retries: {message}")]
    Backend { retries: usize, message: String },
    #[error("unparseable verification reply: {0}")]
    UnparseableVerdict(String),
    #[error("judgment reply is not valid JSON after re-ask: {0}")]
    MalformedJudgment(String),
    #[error("judgment {field} out of range: {value}")]
    JudgmentOutOfRange { field: &'static str, value: f64 },
    #[error("hop {hop} out of range 1..={max}")]
    HopOutOfRange { hop: usize, max: usize },
    #[error("reasoning state for hop {prior} cannot precede verification at hop {hop}")]
    HopSequence { prior: usize, hop: usize },
    #[error("backend returned zero tokens")]
    ZeroTokens,

    #[error("layer {layer} out of range 1..={max}")]
    LayerOutOfRange { layer: usize, max: usize },
    #[error("non-finite value produced by op {op} (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("backward requires a scalar loss, got {rows}x{cols}")]
    LossNotScalar { rows: usize, cols: usize },
    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("in-batch InfoNCE needs at least 2 vectors, got {0}")]
    BatchTooSmall(usize),
    #[error("trace for unlabeled edge {0}")]
    UnlabeledTrace(String),
    #[error("empty edge set")]
    EmptyEdgeSet,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("metrics need both classes present")]
    SingleClass,
    #[error("infeasible synthetic config: {0}")]
    InfeasibleConfig(String),

    #[error("config error: {0}")]
    Config(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
