//! Command-line front end: the full pipeline behind one binary with a TOML
//! config file plus `--set` overrides. Machine-readable records go to
//! stdout, human summaries to stderr.

use clap::{Args, Parser, Subcommand};
use miscite::chain::build_chain;
use miscite::encoder::{encode_graph, Encoder, EncoderSpec};
use miscite::error::Error;
use miscite::eval::{
    bench_runtime, compute_metrics, export_embeddings, generate_synthetic, sweep, BenchMode,
    SweepParameter, SyntheticConfig,
};
use miscite::graph::{load_graph, split_edges, validate, CitationGraph, DatasetSplit};
use miscite::reasoner::{
    reason_edge, HttpBackend, HttpBackendConfig, LlmBackend, MockBackend, TemplateSet,
};
use miscite::student::StudentModel;
use miscite::trainer::{score_edges, train, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "miscite", version, about = "Miscitation detection pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// TOML configuration file; flags and --set override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set ablation=no_kd (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file for the command's primary artifact.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct GraphOpts {
    /// Node records, one JSON object per line.
    #[arg(long)]
    nodes: PathBuf,
    /// Edge records, one JSON object per line.
    #[arg(long)]
    edges: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Load a graph and report counts.
    Validate {
        #[command(flatten)]
        graph: GraphOpts,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Build and print the evidence chain for one edge.
    Chain {
        #[command(flatten)]
        graph: GraphOpts,
        #[command(flatten)]
        common: CommonOpts,
        /// Root edge id.
        #[arg(long)]
        edge: String,
    },
    /// Run teacher reasoning for one edge and print the trace.
    Reason {
        #[command(flatten)]
        graph: GraphOpts,
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        edge: String,
    },
    /// Train the student on the graph's labeled edges.
    Train {
        #[command(flatten)]
        graph: GraphOpts,
        #[command(flatten)]
        common: CommonOpts,
        /// Where to write the model checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Where to write per-epoch history (JSON lines).
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Score edges with a trained checkpoint.
    Infer {
        #[command(flatten)]
        graph: GraphOpts,
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate a checkpoint on the test split.
    Evaluate {
        #[command(flatten)]
        graph: GraphOpts,
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compare GNN and LLM inference runtimes on the test split.
    Bench {
        #[command(flatten)]
        graph: GraphOpts,
        #[command(flatten)]
        common: CommonOpts,
        /// Checkpoint to benchmark; a fresh seeded model when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated subset of gnn,llm_directed,llm_ec.
        #[arg(long, default_value = "gnn,llm_directed,llm_ec")]
        modes: String,
    },
    /// Train across a parameter grid and tabulate test metrics.
    Sweep {
        #[command(flatten)]
        graph: GraphOpts,
        #[command(flatten)]
        common: CommonOpts,
        /// One of k, m, w_percent, delta.
        #[arg(long)]
        parameter: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        /// Comma-separated seeds.
        #[arg(long, default_value = "0")]
        seeds: String,
    },
    /// Generate the synthetic anomaly-injection benchmark graph.
    GenSynth {
        #[command(flatten)]
        common: CommonOpts,
        /// Where to write node records.
        #[arg(long)]
        out_nodes: PathBuf,
        /// Where to write edge records.
        #[arg(long)]
        out_edges: PathBuf,
    },
    /// Export layer-k edge representations for labeled edges as CSV.
    ExportEmb {
        #[command(flatten)]
        graph: GraphOpts,
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        layer: usize,
    },
}

/// Everything configurable from the file: training scalars plus artifact
/// settings. Unknown keys in `--set` are rejected against this schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct FileConfig {
    #[serde(flatten)]
    train: TrainConfig,
    d_enc: usize,
    ratios: (f64, f64, f64),
    threshold: f64,
    backend: String,
    mock_leak_labels: bool,
    mock_flip_rate: f64,
    mock_latency_ms: u64,
    bench_in_flight: usize,
    prompt_dir: Option<String>,
    synth: SyntheticConfig,
}

impl Default for FileConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            d_enc: miscite::encoder::DEFAULT_D_ENC,
            ratios: (0.7, 0.1, 0.2),
            threshold: 0.5,
            backend: "mock".to_string(),
            mock_leak_labels: true,
            mock_flip_rate: 0.0,
            mock_latency_ms: 0,
            bench_in_flight: 8,
            prompt_dir: None,
            synth: SyntheticConfig::default(),
        }
    }
}

/// Interpret an override value as a TOML literal, falling back to a string
/// (so `--set ablation=no_kd` and `--set epochs=40` both work).
fn parse_override_value(value: &str) -> toml::Value {
    format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

fn toml_path_exists(table: &toml::Value, path: &[&str]) -> bool {
    match path.split_first() {
        None => true,
        Some((head, rest)) => match table.get(head) {
            Some(next) => toml_path_exists(next, rest),
            None => false,
        },
    }
}

fn load_config(common: &CommonOpts) -> Result<FileConfig, Error> {
    let mut table: toml::Table = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    let schema = toml::Value::try_from(FileConfig::default())
        .map_err(|e| Error::Config(e.to_string()))?;
    for ov in &common.overrides {
        let (key, value) = ov
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {ov:?}")))?;
        let path: Vec<&str> = key.split('.').collect();
        if !toml_path_exists(&schema, &path) {
            return Err(Error::Config(format!("--set references unknown key {key}")));
        }
        let parsed = parse_override_value(value);
        let mut slot = &mut table;
        for head in &path[..path.len() - 1] {
            slot = slot
                .entry(head.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("{head} is not a table")))?;
        }
        slot.insert(path[path.len() - 1].to_string(), parsed);
    }
    let mut config: FileConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::Config(e.to_string()))?;
    if let Some(seed) = common.seed {
        config.train.seed = seed;
        config.synth.seed = seed;
    }
    config.train.validate()?;
    Ok(config)
}

fn templates(config: &FileConfig) -> Result<TemplateSet, Error> {
    match &config.prompt_dir {
        Some(dir) => TemplateSet::from_dir(Path::new(dir)),
        None => Ok(TemplateSet::builtin()),
    }
}

fn build_backend(
    config: &FileConfig,
    graph: &CitationGraph,
) -> Result<Box<dyn LlmBackend>, Error> {
    match config.backend.as_str() {
        "mock" => {
            let mut mock = MockBackend::new(config.train.seed, config.train.d_teacher)
                .with_flip_rate(config.mock_flip_rate);
            if config.mock_leak_labels {
                mock = mock.with_graph(graph);
            }
            if config.mock_latency_ms > 0 {
                mock = mock.with_latency(std::time::Duration::from_millis(config.mock_latency_ms));
            }
            Ok(Box::new(mock))
        }
        "http" => {
            let encoder = Encoder::hashing(config.train.d_teacher)?;
            Ok(Box::new(HttpBackend::new(
                HttpBackendConfig::from_env()?,
                encoder,
            )))
        }
        other => Err(Error::Config(format!(
            "unknown backend {other:?}; expected mock or http"
        ))),
    }
}

struct Loaded {
    graph: CitationGraph,
    features: miscite::encoder::FeatureTables,
}

fn load(graph_opts: &GraphOpts, config: &FileConfig) -> Result<Loaded, Error> {
    let graph = load_graph(&graph_opts.nodes, &graph_opts.edges)?;
    let encoder = Encoder::from_spec(EncoderSpec::hashing(config.d_enc))?;
    let features = encode_graph(&encoder, &graph)?;
    Ok(Loaded { graph, features })
}

fn split_for(config: &FileConfig, graph: &CitationGraph) -> Result<DatasetSplit, Error> {
    split_edges(graph, config.ratios, config.train.seed)
}

fn emit(record: &serde_json::Value) {
    println!("{record}");
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Validate { graph, common } => {
            let config = load_config(&common)?;
            let g = load_graph(&graph.nodes, &graph.edges)?;
            let report = validate(&g);
            emit(&json!({"verb": "validate", "ok": true, "report": report, "config": config}));
            eprintln!(
                "validate: {} nodes, {} edges ({} labeled, {:.1}% miscitations), {} warnings",
                report.nodes,
                report.edges,
                report.labeled,
                100.0 * report.miscite_frac,
                report.warnings.len()
            );
        }
        Command::Chain {
            graph,
            common,
            edge,
        } => {
            let config = load_config(&common)?;
            let loaded = load(&graph, &config)?;
            let chain_cfg = config.train.effective_chain_config();
            let chain = build_chain(&loaded.graph, &edge, &chain_cfg, &loaded.features)?;
            emit(&json!({"verb": "chain", "ok": true, "chain": chain, "config": config}));
            eprintln!(
                "chain for {edge}: {} hop(s), frontier sizes {:?}",
                chain.k_eff(),
                chain.hops.iter().map(|h| h.filtered.len()).collect::<Vec<_>>()
            );
        }
        Command::Reason {
            graph,
            common,
            edge,
        } => {
            let config = load_config(&common)?;
            let loaded = load(&graph, &config)?;
            let backend = build_backend(&config, &loaded.graph)?;
            let tset = templates(&config)?;
            let chain_cfg = config.train.effective_chain_config();
            let trace = reason_edge(
                backend.as_ref(),
                &loaded.graph,
                &edge,
                &chain_cfg,
                &tset,
                &loaded.features,
            )?;
            if let Some(out) = &common.out {
                let mut f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(out)?;
                serde_json::to_writer(&mut f, &trace)?;
                f.write_all(b"\n")?;
            }
            emit(&json!({"verb": "reason", "ok": true, "trace": trace, "config": config}));
            eprintln!(
                "reason {edge}: {} hop(s), level {:.3}, confidence {:.3}",
                trace.k_eff(),
                trace.judgment.level,
                trace.judgment.confidence
            );
        }
        Command::Train {
            graph,
            common,
            checkpoint,
            history,
        } => {
            let config = load_config(&common)?;
            let loaded = load(&graph, &config)?;
            let split = split_for(&config, &loaded.graph)?;
            let backend = build_backend(&config, &loaded.graph)?;
            let tset = templates(&config)?;
            let outcome = train(
                &loaded.graph,
                &loaded.features,
                &split,
                backend.as_ref(),
                &tset,
                &config.train,
            )?;
            if let Some(path) = &history {
                let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
                for rec in &outcome.history {
                    serde_json::to_writer(&mut f, rec)?;
                    f.write_all(b"\n")?;
                }
                f.flush()?;
            }
            if let Some(path) = &checkpoint {
                outcome.model.save(path)?;
            }
            let test_labels: Vec<u8> = split
                .test
                .iter()
                .map(|id| loaded.graph.edge(id).map(|e| e.label.unwrap_or(0)))
                .collect::<Result<_, _>>()?;
            let scores = score_edges(&outcome.model, &loaded.graph, &loaded.features, &split.test)?;
            let metrics = compute_metrics(&scores, &test_labels, config.threshold)?;
            emit(&json!({
                "verb": "train",
                "ok": true,
                "ablation": config.train.ablation,
                "epochs_run": outcome.history.len(),
                "best_epoch": outcome.best_epoch,
                "best_val_auc": outcome.best_val_auc,
                "test_metrics": metrics,
                "backend_calls": outcome.total_backend_calls,
                "config": config,
            }));
            eprintln!(
                "train: {} epochs, best val AUC {:.4} @ epoch {}, test AUC {:.4}",
                outcome.history.len(),
                outcome.best_val_auc,
                outcome.best_epoch,
                metrics.auc
            );
        }
        Command::Infer {
            graph,
            common,
            checkpoint,
        } => {
            let config = load_config(&common)?;
            let loaded = load(&graph, &config)?;
            let model = StudentModel::load(&checkpoint)?;
            let ids: Vec<String> = loaded.graph.edges().iter().map(|e| e.id.clone()).collect();
            let scores = score_edges(&model, &loaded.graph, &loaded.features, &ids)?;
            if let Some(out) = &common.out {
                let mut f = std::io::BufWriter::new(std::fs::File::create(out)?);
                for (id, s) in ids.iter().zip(&scores) {
                    writeln!(f, "{}", json!({"edge": id, "score": s}))?;
                }
                f.flush()?;
            } else {
                for (id, s) in ids.iter().zip(&scores) {
                    emit(&json!({"verb": "infer", "edge": id, "score": s}));
                }
            }
            emit(&json!({"verb": "infer", "ok": true, "scored": ids.len(), "config": config}));
            eprintln!("infer: scored {} edges", ids.len());
        }
        Command::Evaluate {
            graph,
            common,
            checkpoint,
        } => {
            let config = load_config(&common)?;
            let loaded = load(&graph, &config)?;
            let split = split_for(&config, &loaded.graph)?;
            let model = StudentModel::load(&checkpoint)?;
            let labels: Vec<u8> = split
                .test
                .iter()
                .map(|id| loaded.graph.edge(id).map(|e| e.label.unwrap_or(0)))
                .collect::<Result<_, _>>()?;
            let scores = score_edges(&model, &loaded.graph, &loaded.features, &split.test)?;
            let metrics = compute_metrics(&scores, &labels, config.threshold)?;
            emit(&json!({"verb": "evaluate", "ok": true, "metrics": metrics, "config": config}));
            eprintln!(
                "evaluate: AUC {:.4}, F1 {:.4}, precision {:.4} on {} test edges",
                metrics.auc, metrics.f1, metrics.precision, metrics.n
            );
        }
        Command::Bench {
            graph,
            common,
            checkpoint,
            modes,
        } => {
            let config = load_config(&common)?;
            let loaded = load(&graph, &config)?;
            let split = split_for(&config, &loaded.graph)?;
            let model = match &checkpoint {
                Some(p) => StudentModel::load(p)?,
                None => StudentModel::new(
                    config.train.student_dims(loaded.features.d_enc),
                    config.train.seed,
                )?,
            };
            let mode_list: Vec<BenchMode> = modes
                .split(',')
                .map(|m| match m.trim() {
                    "gnn" => Ok(BenchMode::Gnn),
                    "llm_directed" => Ok(BenchMode::LlmDirected),
                    "llm_ec" => Ok(BenchMode::LlmEc),
                    other => Err(Error::Config(format!("unknown bench mode {other:?}"))),
                })
                .collect::<Result<_, _>>()?;
            let backend = build_backend(&config, &loaded.graph)?;
            let tset = templates(&config)?;
            let report = bench_runtime(
                &loaded.graph,
                &loaded.features,
                &split.test,
                &model,
                backend.as_ref(),
                &tset,
                &config.train,
                &mode_list,
                config.bench_in_flight,
            )?;
            emit(&json!({"verb": "bench", "ok": true, "report": report, "config": config}));
            for entry in &report {
                eprintln!(
                    "bench {:>12?}: {:>10.1} ms total, {:>8.2} ms/edge, {} backend calls",
                    entry.mode, entry.total_ms, entry.per_edge_ms, entry.backend_calls
                );
            }
        }
        Command::Sweep {
            graph,
            common,
            parameter,
            values,
            seeds,
        } => {
            let config = load_config(&common)?;
            let loaded = load(&graph, &config)?;
            let split = split_for(&config, &loaded.graph)?;
            let backend = build_backend(&config, &loaded.graph)?;
            let tset = templates(&config)?;
            let param = SweepParameter::parse(&parameter)?;
            let values: Vec<f64> = values
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Config(format!("bad sweep value {v:?}: {e}")))
                })
                .collect::<Result<_, _>>()?;
            let seeds: Vec<u64> = seeds
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<u64>()
                        .map_err(|e| Error::Config(format!("bad seed {v:?}: {e}")))
                })
                .collect::<Result<_, _>>()?;
            let rows = sweep(
                &loaded.graph,
                &loaded.features,
                &split,
                backend.as_ref(),
                &tset,
                &config.train,
                param,
                &values,
                &seeds,
            )?;
            if let Some(out) = &common.out {
                let mut f = std::io::BufWriter::new(std::fs::File::create(out)?);
                for row in &rows {
                    writeln!(f, "{}", serde_json::to_string(row)?)?;
                }
                f.flush()?;
            }
            emit(&json!({"verb": "sweep", "ok": true, "rows": rows, "config": config}));
            eprintln!("{:>10} {:>8} {:>8} {:>8} {:>8}", "value", "runs", "auc", "f1", "prec");
            for row in &rows {
                eprintln!(
                    "{:>10.3} {:>8} {:>8.4} {:>8.4} {:>8.4}",
                    row.value, row.runs, row.mean_auc, row.mean_f1, row.mean_precision
                );
            }
        }
        Command::GenSynth {
            common,
            out_nodes,
            out_edges,
        } => {
            let config = load_config(&common)?;
            let g = generate_synthetic(&config.synth)?;
            g.save(&out_nodes, &out_edges)?;
            let report = validate(&g);
            emit(&json!({"verb": "gen-synth", "ok": true, "report": report, "config": config}));
            eprintln!(
                "gen-synth: {} papers, {} edges ({:.1}% miscitations) -> {}, {}",
                report.nodes,
                report.edges,
                100.0 * report.miscite_frac,
                out_nodes.display(),
                out_edges.display()
            );
        }
        Command::ExportEmb {
            graph,
            common,
            checkpoint,
            layer,
        } => {
            let config = load_config(&common)?;
            let loaded = load(&graph, &config)?;
            let model = StudentModel::load(&checkpoint)?;
            let out = common
                .out
                .clone()
                .ok_or_else(|| Error::Config("export-emb requires --out".to_string()))?;
            export_embeddings(&model, &loaded.graph, &loaded.features, layer, &out)?;
            emit(&json!({"verb": "export-emb", "ok": true, "layer": layer, "path": out, "config": config}));
            eprintln!("export-emb: layer {layer} representations -> {}", out.display());
        }
    }
    Ok(())
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::InfeasibleConfig(_)
        | Error::RatiosDoNotSumToOne(_)
        | Error::MalformedLine { .. } => 3,
        _ => 1,
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        let record = json!({"ok": false, "error": err.to_string()});
        println!("{record}");
        std::process::exit(exit_code(&err));
    }
}
