mod backends;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use novelty_core::analysis::NoveltyReport;
use novelty_core::llm::{LlmClient, MockLlm};
use novelty_core::pipeline::{run_pipeline, PaperInput, PipelineConfig};
use novelty_core::render::{write_report, RenderConfig};
use novelty_core::retrieval::{MockSearch, RecordingSleeper, SearchClient, Sleeper, ThreadSleeper};
use novelty_core::taxonomy::{validate_taxonomy, TaxonomyNode};
use novelty_core::text::tokenize;
use novelty_core::verification::{verify_quote_tokens, VerifyConfig};
use serde_json::{json, Value};
use tracing_subscriber::EnvFilter;

use backends::{ChatCompletions, HttpSearch};

#[derive(Parser)]
#[command(name = "novelty", version, about = "Evidence-grounded novelty reports for research papers")]
struct Cli {
    /// Log filter, e.g. `info` or `novelty_core=debug`.
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run all four phases for one paper.
    Run(RunArgs),
    /// Check whether a quote occurs in a document.
    VerifyQuote(VerifyQuoteArgs),
    /// Validate a taxonomy against its allowed paper ids.
    ValidateTaxonomy(ValidateTaxonomyArgs),
    /// Render a saved Phase III report to Markdown.
    Render(RenderArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Paper as JSON (`title`, `abstract`, `text`, ...) or plain text / Markdown.
    #[arg(long)]
    paper: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Base pipeline configuration as JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Serve model and search calls from fixture files.
    #[arg(long, requires_all = ["llm_fixture", "search_fixture"])]
    mock: bool,
    #[arg(long, requires = "mock")]
    llm_fixture: Option<PathBuf>,
    #[arg(long, requires = "mock")]
    search_fixture: Option<PathBuf>,

    /// OpenAI-compatible API base URL.
    #[arg(long, required_unless_present = "mock")]
    llm_url: Option<String>,
    #[arg(long, default_value = "gpt-4o-mini")]
    llm_model: String,
    #[arg(long, default_value = "OPENAI_API_KEY")]
    llm_api_key_env: String,
    /// Search endpoint accepting `POST {"query": ...}`.
    #[arg(long, required_unless_present = "mock")]
    search_url: Option<String>,
    #[arg(long, default_value = "SEARCH_API_KEY")]
    search_api_key_env: String,
    /// Per-request HTTP timeout in seconds.
    #[arg(long, default_value_t = 300)]
    timeout_secs: u64,

    #[arg(long)]
    top_k_core: Option<usize>,
    #[arg(long)]
    top_k_contribution: Option<usize>,
    #[arg(long)]
    max_query_attempts: Option<usize>,
    #[arg(long)]
    initial_delay_ms: Option<u64>,
    #[arg(long)]
    global_max_retries: Option<usize>,
    #[arg(long)]
    concurrency: Option<usize>,
    /// Reuse phase artifacts already present in the output directory.
    #[arg(long)]
    resume: bool,
    /// Skip the model-assisted taxonomy repair round.
    #[arg(long)]
    no_llm_repair: bool,
    /// Fixed report timestamp (RFC 3339).
    #[arg(long)]
    generated_at: Option<String>,
    #[arg(long)]
    quote_limit: Option<usize>,
    /// Also convert the Markdown report to PDF.
    #[arg(long)]
    pdf: bool,
}

#[derive(Args)]
struct VerifyQuoteArgs {
    #[arg(long, conflicts_with = "quote_file", required_unless_present = "quote_file")]
    quote: Option<String>,
    #[arg(long)]
    quote_file: Option<PathBuf>,
    #[arg(long)]
    doc: PathBuf,
}

#[derive(Args)]
struct ValidateTaxonomyArgs {
    /// A taxonomy JSON or a Phase III report containing one.
    #[arg(long)]
    input: PathBuf,
    /// Allowed ids: a JSON array or one id per line. Taken from the report when omitted.
    #[arg(long)]
    allowed: Option<PathBuf>,
    /// Id of the original paper.
    #[arg(long)]
    original: Option<String>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    quote_limit: Option<usize>,
    #[arg(long)]
    pdf: bool,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_new(&cli.log).unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::VerifyQuote(args) => verify_quote(args),
        Command::ValidateTaxonomy(args) => validate(args),
        Command::Render(args) => render(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn build_config(args: &RunArgs) -> Result<PipelineConfig> {
    let mut cfg = match &args.config {
        Some(path) => serde_json::from_str(&read(path)?).context("parsing --config")?,
        None => PipelineConfig::default(),
    };
    cfg.output_dir = args.out.clone();
    if let Some(k) = args.top_k_core {
        cfg.top_k.core_task = k;
    }
    if let Some(k) = args.top_k_contribution {
        cfg.top_k.contribution = k;
    }
    if let Some(n) = args.max_query_attempts {
        cfg.retry.max_query_attempts = n;
    }
    if let Some(ms) = args.initial_delay_ms {
        cfg.retry.initial_delay = Duration::from_millis(ms);
    }
    if let Some(n) = args.global_max_retries {
        cfg.retry.global_max_retries = n;
    }
    if let Some(n) = args.concurrency {
        cfg.concurrency = n;
    }
    if let Some(n) = args.quote_limit {
        cfg.render.quote_truncation_limit = n;
    }
    cfg.resume |= args.resume;
    cfg.allow_llm_repair &= !args.no_llm_repair;
    cfg.render.emit_pdf |= args.pdf;
    if args.generated_at.is_some() {
        cfg.generated_at = args.generated_at.clone();
    }
    cfg.retry.validate()?;
    cfg.render.validate()?;
    Ok(cfg)
}

fn api_key(var: &str) -> Option<String> {
    std::env::var(var).ok().filter(|v| !v.is_empty())
}

fn run(args: RunArgs) -> Result<ExitCode> {
    let cfg = build_config(&args)?;
    let paper = PaperInput::load(&args.paper).with_context(|| format!("loading {}", args.paper.display()))?;
    let (llm, search, sleeper): (Box<dyn LlmClient>, Box<dyn SearchClient>, Box<dyn Sleeper>) = if args.mock {
        let llm_path = args.llm_fixture.as_deref().expect("clap enforces fixture paths");
        let search_path = args.search_fixture.as_deref().expect("clap enforces fixture paths");
        (
            Box::new(MockLlm::from_json(&read(llm_path)?).context("parsing LLM fixture")?),
            Box::new(MockSearch::from_json(&read(search_path)?).context("parsing search fixture")?),
            Box::new(RecordingSleeper::default()),
        )
    } else {
        let timeout = Duration::from_secs(args.timeout_secs);
        let llm_url = args.llm_url.as_deref().expect("clap enforces --llm-url");
        let search_url = args.search_url.as_deref().expect("clap enforces --search-url");
        (
            Box::new(ChatCompletions::new(llm_url, &args.llm_model, api_key(&args.llm_api_key_env), timeout)),
            Box::new(HttpSearch::new(search_url, api_key(&args.search_api_key_env), timeout)),
            Box::new(ThreadSleeper),
        )
    };
    let manifest = run_pipeline(&paper, &cfg, llm.as_ref(), search.as_ref(), sleeper.as_ref())?;
    for w in &manifest.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(failed) = manifest.failed_phase() {
        eprintln!("error: {}", failed.error.as_deref().unwrap_or("phase failed"));
        return Ok(ExitCode::FAILURE);
    }
    if let Some(md) = manifest.markdown_path() {
        println!("{}", md.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn verify_quote(args: VerifyQuoteArgs) -> Result<ExitCode> {
    let quote = match (&args.quote, &args.quote_file) {
        (Some(q), _) => q.clone(),
        (None, Some(path)) => read(path)?,
        (None, None) => bail!("one of --quote or --quote-file is required"),
    };
    let doc = read(&args.doc)?;
    let v = verify_quote_tokens(quote.trim(), &tokenize(&doc), &VerifyConfig::default());
    let out = json!({
        "found": v.location.found,
        "match_score": v.location.match_score,
        "anchors": v.anchors.len(),
        "hit_ratio": v.parts.hit_ratio,
        "mean_coverage": v.parts.mean_coverage,
        "compact": v.parts.compact,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(if v.location.found { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn parse_allowed(text: &str) -> BTreeSet<String> {
    match serde_json::from_str::<Vec<String>>(text) {
        Ok(ids) => ids.into_iter().collect(),
        Err(_) => text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect(),
    }
}

fn validate(args: ValidateTaxonomyArgs) -> Result<ExitCode> {
    let value: Value = serde_json::from_str(&read(&args.input)?).context("input is not JSON")?;
    let (tax, report_ids, report_original) = match value.get("core_task_survey") {
        Some(survey) => {
            let tax: TaxonomyNode = serde_json::from_value(survey["taxonomy"].clone()).context("report taxonomy")?;
            let index = survey["papers_index"].as_array().cloned().unwrap_or_default();
            let ids: BTreeSet<String> = index
                .iter()
                .filter_map(|p| p["canonical_id"].as_str().map(str::to_string))
                .collect();
            let original = index
                .iter()
                .find(|p| p["is_original"].as_bool() == Some(true))
                .and_then(|p| p["canonical_id"].as_str().map(str::to_string));
            (tax, Some(ids), original)
        }
        None => (serde_json::from_value(value).context("input is not a taxonomy")?, None, None),
    };
    let allowed = match (&args.allowed, report_ids) {
        (Some(path), _) => parse_allowed(&read(path)?),
        (None, Some(ids)) => ids,
        (None, None) => bail!("--allowed is required when the input is a bare taxonomy"),
    };
    let original = args.original.or(report_original);
    let report = validate_taxonomy(&tax, &allowed, original.as_deref());
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(if report.is_valid { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn render(args: RenderArgs) -> Result<ExitCode> {
    let report = NoveltyReport::from_json(&read(&args.input)?).context("loading report")?;
    let mut cfg = RenderConfig {
        output_dir: args.out,
        emit_pdf: args.pdf,
        ..RenderConfig::default()
    };
    if let Some(n) = args.quote_limit {
        cfg.quote_truncation_limit = n;
    }
    let out = write_report(&report, &cfg)?;
    println!("{}", out.markdown.display());
    if let Some(pdf) = out.pdf {
        println!("{}", pdf.display());
    }
    Ok(ExitCode::SUCCESS)
}
