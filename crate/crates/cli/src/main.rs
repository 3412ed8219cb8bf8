use std::collections::BTreeSet;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Parser, Subcommand};
use serde::Deserialize;
use vsem_core::corpus::{
    compute_stats, make_splits, read_graph, write_graph, write_splits, CorpusError, SplitSpec,
};
use vsem_core::embed::{
    provider_from_spec, read_vectors, EmbeddingProvider, ProviderError, DEFAULT_REQUEST_TIMEOUT,
};
use vsem_core::kg::{ContentHash, Lang, NodeId};
use vsem_core::pipeline::{
    expand, ConstantScorer, FileSource, PipelineConfig, PipelineError, QualityScorer, TableScorer,
};
use vsem_core::retrieval::{
    evaluate, retrieve_by_image, retrieve_by_sentence, EvalQuery, GlossIndex, IndexMeta,
    QueryInput, RetrievalError, DEFAULT_KS,
};
use vsem_service::{ServiceConfig, ServiceError};

const DEFAULT_MOCK_DIM: usize = 64;
const REPORT_FILE: &str = "filter_report.json";

#[derive(Parser)]
#[command(name = "vsem", version, about = "Build, index and query multimodal knowledge graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Expand seed nodes into a filtered graph.
    Build {
        #[arg(long)]
        seeds: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print graph statistics.
    Stats {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Write train/valid/test splits.
    Split {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed glosses into a retrieval index.
    #[command(group(ArgGroup::new("vectors_from").required(true).multiple(true).args(["provider", "vectors"])))]
    Index {
        #[arg(long)]
        graph: PathBuf,
        /// `mock[:DIM]` or a command speaking the JSON-lines protocol.
        /// With --vectors, only recorded as the query encoder.
        #[arg(long)]
        provider: Option<String>,
        /// Precomputed gloss vectors keyed by gloss id.
        #[arg(long)]
        vectors: Option<PathBuf>,
        /// Comma-separated language codes; defaults to every language present.
        #[arg(long, value_delimiter = ',')]
        languages: Option<Vec<Lang>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank nodes for one sentence or image.
    #[command(group(ArgGroup::new("input").required(true).args(["text", "image"])))]
    Query {
        #[arg(long)]
        index: PathBuf,
        #[arg(long, requires = "lang")]
        text: Option<String>,
        #[arg(long)]
        lang: Option<Lang>,
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(short, long, default_value_t = 10)]
        k: usize,
        /// Overrides the provider recorded in the index.
        #[arg(long)]
        provider: Option<String>,
    },
    /// Compute Hits@k and mean rank for a query file.
    Eval {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KS)]
        ks: Vec<usize>,
        #[arg(long)]
        provider: Option<String>,
    },
    /// Serve retrieval over HTTP.
    Serve {
        #[arg(long)]
        index: PathBuf,
        #[arg(long, env = "VSEM_ADDR", default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Graph for node lookup; defaults to the one recorded in the index.
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        provider: Option<String>,
        #[arg(long, default_value_t = vsem_service::DEFAULT_MAX_BODY_BYTES)]
        max_body_bytes: usize,
        #[arg(long, default_value_t = 30)]
        timeout_secs: u64,
        #[arg(long, default_value_t = vsem_service::DEFAULT_MAX_CONCURRENT)]
        max_concurrent: usize,
    },
}

/// Misuse that clap cannot detect, such as a wrong query file shape.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BuildConfig {
    #[serde(default)]
    pipeline: PipelineConfig,
    provider: String,
    scorer: ScorerSpec,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
enum ScorerSpec {
    /// Same score for every image.
    Constant(f64),
    /// JSON-lines file of `{"hash":…,"score":…}` rows.
    Table {
        path: PathBuf,
        #[serde(default)]
        default: Option<f64>,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoreRow {
    hash: ContentHash,
    score: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryRow {
    gold: NodeId,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    lang: Option<Lang>,
    /// Image path, relative to the query file.
    #[serde(default)]
    image: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 usage, 3 provider failure, 2 anything else (data or format).
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if cause.is::<ProviderError>()
            || matches!(cause.downcast_ref(), Some(PipelineError::Provider(_)))
            || matches!(cause.downcast_ref(), Some(RetrievalError::Provider { .. }))
            || matches!(cause.downcast_ref(), Some(CorpusError::Provider(_)))
            || matches!(cause.downcast_ref(), Some(ServiceError::Provider(_)))
        {
            return 3;
        }
    }
    2
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Build {
            seeds,
            source,
            config,
            out,
        } => build(&seeds, &source, &config, &out),
        Command::Stats { graph, json } => {
            let g = read_graph(&graph)?;
            let stats = compute_stats(&g);
            if json {
                println!("{}", serde_json::to_string_pretty(&stats)?);
            } else {
                print!("{stats}");
            }
            Ok(())
        }
        Command::Split { graph, spec, out } => {
            let g = read_graph(&graph)?;
            let spec: SplitSpec = read_json(&spec)?;
            let splits = make_splits(&g, &spec)?;
            write_splits(&splits, &out)?;
            println!("{}", serde_json::to_string_pretty(&splits.manifest)?);
            Ok(())
        }
        Command::Index {
            graph,
            provider,
            vectors,
            languages,
            out,
        } => index(&graph, provider.as_deref(), vectors.as_deref(), languages, &out),
        Command::Query {
            index,
            text,
            lang,
            image,
            k,
            provider,
        } => {
            let idx = GlossIndex::load(&index)?;
            let p = query_provider(&idx, provider.as_deref())?;
            let result = match (text, lang, image) {
                (Some(t), Some(l), None) => retrieve_by_sentence(&idx, p.as_ref(), &t, l, k)?,
                (None, _, Some(path)) => {
                    let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
                    let english = english_view(&idx)?;
                    retrieve_by_image(&english, p.as_ref(), &bytes, k)?
                }
                _ => return Err(usage("give either --text with --lang, or --image")),
            };
            println!("{}", serde_json::to_string_pretty(&result)?);
            Ok(())
        }
        Command::Eval {
            index,
            queries,
            out,
            ks,
            provider,
        } => eval(&index, &queries, &out, &ks, provider.as_deref()),
        Command::Serve {
            index,
            addr,
            graph,
            provider,
            max_body_bytes,
            timeout_secs,
            max_concurrent,
        } => {
            let mut cfg = ServiceConfig::new(addr, index);
            cfg.graph = graph;
            cfg.provider = provider;
            cfg.max_body_bytes = max_body_bytes;
            cfg.request_timeout = Duration::from_secs(timeout_secs);
            cfg.max_concurrent = max_concurrent;
            if let Err(e) = cfg.validate() {
                return Err(usage(e.to_string()));
            }
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(vsem_service::serve(cfg, async {
                let _ = tokio::signal::ctrl_c().await;
            }))?;
            Ok(())
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn read_seeds(path: &Path) -> Result<Vec<NodeId>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| NodeId::new(l).map_err(Into::into))
        .collect()
}

fn scorer(spec: &ScorerSpec, base: &Path) -> Result<Box<dyn QualityScorer>> {
    match spec {
        ScorerSpec::Constant(s) => Ok(Box::new(ConstantScorer(*s))),
        ScorerSpec::Table { path, default } => {
            let path = base.join(path);
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let mut table = TableScorer::new(*default);
            for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let row: ScoreRow = serde_json::from_str(line)
                    .with_context(|| format!("{}:{}", path.display(), i + 1))?;
                table.insert(row.hash, row.score);
            }
            Ok(Box::new(table))
        }
    }
}

fn build(seeds: &Path, source: &Path, config: &Path, out: &Path) -> Result<()> {
    let cfg: BuildConfig = read_json(config)?;
    let seeds = read_seeds(seeds)?;
    let source = FileSource::open(source)?;
    let base = config.parent().unwrap_or(Path::new("."));
    let scorer = scorer(&cfg.scorer, base)?;
    let embedder = provider_from_spec(&cfg.provider, DEFAULT_MOCK_DIM, DEFAULT_REQUEST_TIMEOUT)?;
    let (graph, report) = expand(&seeds, &source, scorer.as_ref(), embedder.as_ref(), &cfg.pipeline)?;
    write_graph(&graph, out)?;
    let report_path = out.join(REPORT_FILE);
    fs::write(&report_path, serde_json::to_vec_pretty(&report)?)
        .with_context(|| format!("writing {}", report_path.display()))?;
    println!(
        "{} nodes, {} facts, {} images after {} iterations ({:?})",
        graph.node_count(),
        graph.fact_count(),
        graph.image_count(),
        report.iterations,
        report.termination
    );
    Ok(())
}

fn index(
    graph: &Path,
    provider: Option<&str>,
    vectors: Option<&Path>,
    languages: Option<Vec<Lang>>,
    out: &Path,
) -> Result<()> {
    let g = read_graph(graph)?;
    let langs: BTreeSet<Lang> = match languages {
        Some(ls) => ls.into_iter().collect(),
        None => g.gloss_entries().map(|e| e.gloss.lang).collect(),
    };
    let idx = match (vectors, provider) {
        (Some(v), _) => GlossIndex::from_vectors(&g, read_vectors(v)?, &langs)?,
        (None, Some(spec)) => {
            let p = provider_from_spec(spec, DEFAULT_MOCK_DIM, DEFAULT_REQUEST_TIMEOUT)?;
            GlossIndex::from_graph(&g, p.as_ref(), &langs)?
        }
        (None, None) => return Err(usage("give --provider or --vectors")),
    };
    let graph_abs = fs::canonicalize(graph).with_context(|| format!("resolving {}", graph.display()))?;
    let idx = idx.with_meta(IndexMeta {
        provider: provider.map(str::to_string),
        graph: Some(graph_abs),
    });
    idx.save(out)?;
    println!("indexed {} glosses over {} nodes (dim {})", idx.len(), idx.node_count(), idx.dim());
    Ok(())
}

fn query_provider(idx: &GlossIndex, flag: Option<&str>) -> Result<Box<dyn EmbeddingProvider>> {
    let spec = flag
        .map(str::to_string)
        .or_else(|| idx.meta().provider.clone())
        .ok_or_else(|| usage("the index records no provider; pass --provider"))?;
    let p = provider_from_spec(&spec, idx.dim(), DEFAULT_REQUEST_TIMEOUT)?;
    if p.dim() != idx.dim() {
        bail!("provider dimension {} does not match index dimension {}", p.dim(), idx.dim());
    }
    Ok(p)
}

fn english_view(idx: &GlossIndex) -> Result<GlossIndex> {
    Ok(idx.restrict_to(&BTreeSet::from([Lang::En]))?)
}

fn eval(index: &Path, queries: &Path, out: &Path, ks: &[usize], provider: Option<&str>) -> Result<()> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(usage("--ks must list positive integers"));
    }
    let idx = GlossIndex::load(index)?;
    let p = query_provider(&idx, provider)?;
    let base = queries.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(queries).with_context(|| format!("reading {}", queries.display()))?;
    let mut qs = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row: QueryRow = serde_json::from_str(line)
            .with_context(|| format!("{}:{}", queries.display(), i + 1))?;
        let input = match (row.text, row.lang, row.image) {
            (Some(text), Some(lang), None) => QueryInput::Text { text, lang },
            (None, None, Some(path)) => {
                let path = base.join(path);
                let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
                QueryInput::Image { bytes }
            }
            _ => bail!("{}:{}: a query needs text and lang, or image", queries.display(), i + 1),
        };
        qs.push(EvalQuery { input, gold: row.gold });
    }
    // image-only query sets rank against the English glosses
    let all_images = !qs.is_empty() && qs.iter().all(|q| matches!(q.input, QueryInput::Image { .. }));
    let idx = if all_images { english_view(&idx)? } else { idx };
    let report = evaluate(&idx, p.as_ref(), &qs, ks)?;
    fs::write(out, serde_json::to_vec_pretty(&report)?).with_context(|| format!("writing {}", out.display()))?;
    let hits: Vec<String> = report.hits.iter().map(|(k, h)| format!("hits@{k}={h:.1}")).collect();
    println!("{} queries: {} mean_rank={:.2}", qs.len(), hits.join(" "), report.mean_rank);
    Ok(())
}
