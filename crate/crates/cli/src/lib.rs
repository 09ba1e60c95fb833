//! Command line, HTTP redaction service and chat connector for piimask.

pub mod backend;
pub mod chat;
pub mod service;

use std::ffi::OsString;
use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use piimask::client::{bench_latency, EndpointClient};
use piimask::dataset::{self, VariantKind, VariantSpec};
use piimask::detectors::LeakReport;
use piimask::metrics::{evaluate, load_predictions};
use piimask::{apply_detector_as_masker, find_leaks};

use backend::{BackendArgs, BackendKind};
use chat::{BotConfig, FailurePolicy, HttpGateway, ModerationPolicy};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "piimask", version, about = "PII masking: dataset curation, detection, evaluation and serving")]
pub struct Cli {
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Count mask tags and scan targets for unmasked PII.
    Audit(AuditArgs),
    /// Build the normalized, replaced and removed dataset variants.
    BuildVariants(BuildArgs),
    /// Score a prediction file.
    Evaluate(EvaluateArgs),
    /// Mask text with the selected backend.
    Mask(MaskArgs),
    /// List PII left unmasked in dataset targets.
    Leaks(LeaksArgs),
    /// Measure endpoint latency per document.
    Bench(BenchArgs),
    /// Run the HTTP redaction service.
    Serve(ServeArgs),
    /// Run the chat moderation connector.
    ChatBot(ChatArgs),
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    /// Corpus file, one JSON record per line.
    #[arg(long)]
    pub input: PathBuf,
    /// Audit a seeded random sample of this many records.
    #[arg(long)]
    pub sample: Option<usize>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Normalized,
    Replaced,
    Removed,
    All,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory; each variant is written to `<out>/<variant>/`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub kind: KindArg,
    /// Split shuffle seed.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Canonical labels kept by the removed variant.
    #[arg(long, default_value_t = 24)]
    pub taxonomy_size: usize,
    /// Train, validation and test weights; normalized by their sum.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [29_718.0, 3_943.0, 3_943.0])]
    pub ratios: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Prediction file: JSON lines with id, source_text, gold_text, predicted_text.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Also write every metric as `key = value` lines to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct MaskInput {
    /// Text to mask.
    #[arg(long)]
    pub text: Option<String>,
    /// File with one document per line.
    #[arg(long)]
    pub input: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    #[command(flatten)]
    pub source: MaskInput,
    /// Print the masked text with entity spans as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct LeaksArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Offending record ids to list.
    #[arg(long, default_value_t = 20)]
    pub show: usize,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// File with one document per line.
    #[arg(long)]
    pub input: PathBuf,
    /// Benchmark at most this many documents.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub listen: SocketAddr,
}

#[derive(Debug, Args)]
pub struct ChatArgs {
    /// Base URL of the chat gateway bridge.
    #[arg(long)]
    pub gateway_url: String,
    /// Environment variable holding the gateway token.
    #[arg(long, default_value = "PIIMASK_GATEWAY_TOKEN")]
    pub gateway_token_env: String,
    /// What to do with messages that contain PII.
    #[arg(long, value_enum, default_value = "repost")]
    pub policy: ModerationPolicy,
    /// What to do when the masking backend fails.
    #[arg(long, value_enum, default_value = "skip")]
    pub on_backend_failure: FailurePolicy,
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn run<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_DOMAIN
        }
    }
}

fn read_lines(path: &PathBuf) -> anyhow::Result<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect())
}

pub fn dispatch(cli: Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    let b = &cli.backend;
    match cli.command {
        Command::Audit(a) => {
            let ingested = dataset::ingest(&a.input)?;
            let records = match a.sample {
                Some(n) => dataset::sample(&ingested.records, n, a.seed),
                None => ingested.records.clone(),
            };
            let detector = b.build()?;
            let mut report = dataset::audit(&records, &detector)?;
            report.quarantined = ingested.quarantined.len();
            writeln!(out, "non-English skipped {}", ingested.non_english)?;
            writeln!(out, "malformed lines     {}", ingested.malformed.len())?;
            write!(out, "{report}")?;
            writeln!(out, "checksum            {}", dataset::records_checksum(&records))?;
        }
        Command::BuildVariants(a) => {
            let weights: [f64; 3] = a.ratios.as_slice().try_into().context("--ratios takes three values")?;
            let total: f64 = weights.iter().sum();
            if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || total <= 0.0 {
                anyhow::bail!("--ratios must be non-negative with a positive sum");
            }
            let ratios = weights.map(|w| w / total);
            let ingested = dataset::ingest(&a.input)?;
            let mapping = b.mapping_table()?;
            let suite = b.regex_suite()?;
            let mut report = dataset::audit(&ingested.records, &suite)?;
            report.quarantined = ingested.quarantined.len();
            std::fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
            std::fs::write(a.out.join("audit.txt"), report.to_string()).context("cannot write audit.txt")?;
            let kinds: Vec<VariantKind> = match a.kind {
                KindArg::Normalized => vec![VariantKind::Normalized],
                KindArg::Replaced => vec![VariantKind::Replaced],
                KindArg::Removed => vec![VariantKind::Removed],
                KindArg::All => VariantKind::ALL.to_vec(),
            };
            for kind in kinds {
                let mut spec = VariantSpec::new(kind, &mapping, &suite);
                spec.taxonomy_size = a.taxonomy_size;
                let built = dataset::build_variant(&ingested.records, &spec)?;
                let splits = dataset::split(&built.records, ratios, a.seed)?;
                let mut aside = ingested.quarantined.clone();
                aside.extend(built.quarantine.iter().cloned());
                aside.extend(built.dropped.iter().cloned());
                let dir = dataset::write_variant(&a.out, kind, &splits, &aside)?;
                write!(out, "{}", dataset::variant_summary(kind, &built, &splits))?;
                writeln!(out, "            -> {}", dir.display())?;
            }
        }
        Command::Evaluate(a) => {
            let triples = load_predictions(&a.predictions)?;
            let report = evaluate(&triples)?;
            write!(out, "{report}")?;
            if let Some(path) = a.out {
                std::fs::write(&path, report.to_key_values()).with_context(|| format!("cannot write {}", path.display()))?;
            }
        }
        Command::Mask(a) => {
            let detector = b.build()?;
            let docs = match (a.source.text, a.source.input) {
                (Some(t), _) => vec![t],
                (None, Some(p)) => read_lines(&p)?,
                (None, None) => unreachable!("clap requires one input"),
            };
            for doc in docs {
                let outcome = apply_detector_as_masker(&doc, &detector)?;
                if a.json {
                    let entities: Vec<service::EntityOut> = outcome
                        .entities
                        .iter()
                        .map(|e| service::EntityOut {
                            label: e.label.as_str().to_string(),
                            start: e.span.start(),
                            end: e.span.end(),
                        })
                        .collect();
                    let v = serde_json::json!({ "masked_text": outcome.masked.as_str(), "entities": entities });
                    writeln!(out, "{v}")?;
                } else {
                    writeln!(out, "{}", outcome.masked.as_str())?;
                }
            }
        }
        Command::Leaks(a) => {
            let ingested = dataset::ingest(&a.input)?;
            let detector = b.build()?;
            let mut report = LeakReport::default();
            for r in &ingested.records {
                report.record(&r.id, &find_leaks(&r.target, &detector)?);
            }
            writeln!(out, "records  {}", ingested.records.len())?;
            writeln!(out, "leaks    {}", report.total)?;
            let mut by_count: Vec<_> = report.per_label.iter().collect();
            by_count.sort_by(|x, y| y.1.cmp(x.1).then(x.0.cmp(y.0)));
            for (label, n) in by_count {
                writeln!(out, "  {label:<22}{n}")?;
            }
            for id in report.offenders.iter().take(a.show) {
                writeln!(out, "offender {id}")?;
            }
        }
        Command::Bench(a) => {
            if b.backend != BackendKind::Endpoint {
                anyhow::bail!("bench measures an inference endpoint; pass --backend endpoint");
            }
            let mut docs = read_lines(&a.input)?;
            if let Some(n) = a.limit {
                docs.truncate(n);
            }
            let client = EndpointClient::new(b.endpoint_config()?)?;
            let stats = bench_latency(&client, &b.prompt_template(), &docs)?;
            writeln!(out, "{stats}")?;
        }
        Command::Serve(a) => {
            let backend = Arc::new(b.build()?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(service::serve(a.listen, backend, async {
                let _ = tokio::signal::ctrl_c().await;
            }))?;
        }
        Command::ChatBot(a) => {
            let backend = b.build()?;
            if !backend.healthy() {
                anyhow::bail!("{} backend failed its health check", backend.name());
            }
            let mut gateway = HttpGateway::new(&a.gateway_url, &a.gateway_token_env, Duration::from_secs(30))?;
            let config = BotConfig {
                policy: a.policy,
                on_backend_failure: a.on_backend_failure,
                ..Default::default()
            };
            let stats = chat::run_bot(&mut gateway, &backend, &config)?;
            writeln!(out, "{}", serde_json::to_string(&stats)?)?;
        }
    }
    Ok(())
}
