mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde_json::json;

use stackrag::domain::{AnswerWarning, GeneratedAnswer, LinkRef, UserQuery};
use stackrag::fixtures::FixtureSet;
use stackrag::llm_gateway::{Gateway, LlmBackend, MockBackend, OpenAiBackend, OpenAiConfig, RecordingBackend};
use stackrag::orchestrator::{AskError, AskReport, Pipeline};
use stackrag::stackexchange::{load_quota_usage, utc_day_now, ClientConfig, StackExchangeClient};
use stackrag::transport::{FixtureTransport, HttpTransport, RecordingTransport, ReqwestTransport};
use stackrag::vector_store::{self, VectorStore, STORE_FILE};

use config::{default_data_dir, FileConfig, FlagOverrides, Settings};

const QUOTA_FILE: &str = "quota.json";
const HTTP_TIMEOUT: Duration = Duration::from_secs(60);

const EXIT_ERROR: u8 = 1;
const EXIT_NO_RESULTS: u8 = 2;

/// Answer programming questions from Stack Overflow evidence.
#[derive(Debug, Parser)]
#[command(name = "stackrag", version)]
struct Cli {
    /// Directory holding the vector store, id cache, quota counter and config.toml.
    #[arg(long, global = true, env = "STACKRAG_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// Never touch the network; requires --fixtures.
    #[arg(long, global = true)]
    offline: bool,
    /// Fixture directory: replayed by `ask`, written by `record`.
    #[arg(long, global = true, value_name = "DIR")]
    fixtures: Option<PathBuf>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    json: bool,
    #[arg(long, global = true, value_name = "N")]
    max_iterations: Option<usize>,
    #[arg(long, global = true, value_name = "LAMBDA")]
    mmr_lambda: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Answer a question.
    Ask { question: String },
    /// Inspect or reset the local store and id cache.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
    /// Answer a question live and save every exchange to --fixtures.
    Record { question: String },
}

#[derive(Debug, Subcommand)]
enum CacheAction {
    List,
    Clear,
    Stats,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return ExitCode::from(EXIT_ERROR);
        }
    };
    match runtime.block_on(run(cli)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}

async fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let data_dir = cli.data_dir.clone().unwrap_or_else(default_data_dir);
    let flags = FlagOverrides { max_iterations: cli.max_iterations, mmr_lambda: cli.mmr_lambda };
    let settings = Settings::resolve(data_dir.clone(), &flags, |k| std::env::var(k).ok(), FileConfig::load(&data_dir)?)?;

    match &cli.command {
        Command::Ask { question } => {
            let query = UserQuery::new(question.as_str())?;
            let pipeline = match (&cli.fixtures, cli.offline) {
                (Some(dir), _) => replay_pipeline(&settings, dir)?,
                (None, true) => bail!("--offline needs --fixtures <DIR> to replay from"),
                (None, false) => live_pipeline(&settings)?,
            };
            let report = pipeline.ask_traced(&query).await;
            print_report(&report, cli.json)
        }
        Command::Record { question } => {
            if cli.offline {
                bail!("record talks to live services and cannot run with --offline");
            }
            let Some(dir) = &cli.fixtures else {
                bail!("record needs --fixtures <DIR> to write into");
            };
            let query = UserQuery::new(question.as_str())?;
            record(&settings, dir, &query, cli.json).await
        }
        Command::Cache { action } => cache(&settings, action, cli.json),
    }
}

fn open_store(settings: &Settings, dimension: usize) -> anyhow::Result<VectorStore> {
    VectorStore::open_dir(&settings.data_dir, dimension)
        .with_context(|| format!("cannot open store in {}", settings.data_dir.display()))
}

fn client_config(settings: &Settings) -> ClientConfig {
    ClientConfig {
        base_url: settings.stackexchange_base_url.clone(),
        api_key: settings.stackexchange_key.clone(),
        ..ClientConfig::default()
    }
}

fn openai_backend(settings: &Settings, transport: Arc<dyn HttpTransport>) -> anyhow::Result<OpenAiBackend> {
    let mut config = OpenAiConfig::new(settings.require_llm_key()?);
    config.base_url = settings.llm_base_url.clone();
    config.chat_model = settings.chat_model.clone();
    config.embedding_model = settings.embedding_model.clone();
    Ok(OpenAiBackend::new(transport, config))
}

fn replay_pipeline(settings: &Settings, dir: &Path) -> anyhow::Result<Pipeline> {
    let fixtures = FixtureSet::load(dir)?;
    let dimension = fixtures.llm.dimension;
    let gateway = Arc::new(Gateway::mock(Arc::new(MockBackend::new(fixtures.llm))));
    let transport: Arc<dyn HttpTransport> = Arc::new(FixtureTransport::new(fixtures.http));
    let client = Arc::new(StackExchangeClient::new(transport, client_config(settings)));
    let store = Arc::new(RwLock::new(open_store(settings, dimension)?));
    Ok(Pipeline::new(gateway, client, store, settings.session.clone())?)
}

fn live_pipeline(settings: &Settings) -> anyhow::Result<Pipeline> {
    let transport: Arc<dyn HttpTransport> = Arc::new(ReqwestTransport::new(HTTP_TIMEOUT)?);
    let backend = openai_backend(settings, transport.clone())?;
    let gateway = Arc::new(Gateway::new(Arc::new(backend), settings.embedding_dimension));
    let client = StackExchangeClient::new(transport, client_config(settings))
        .with_quota_file(settings.data_dir.join(QUOTA_FILE));
    let store = Arc::new(RwLock::new(open_store(settings, settings.embedding_dimension)?));
    Ok(Pipeline::new(gateway, Arc::new(client), store, settings.session.clone())?)
}

/// Runs against a fresh in-memory store so the recording holds every call a
/// replay from an empty data directory will make.
async fn record(settings: &Settings, dir: &Path, query: &UserQuery, json: bool) -> anyhow::Result<ExitCode> {
    let http = Arc::new(RecordingTransport::new(ReqwestTransport::new(HTTP_TIMEOUT)?));
    let llm_transport: Arc<dyn HttpTransport> = Arc::new(ReqwestTransport::new(HTTP_TIMEOUT)?);
    let live: Arc<dyn LlmBackend> = Arc::new(openai_backend(settings, llm_transport)?);
    let recorder = Arc::new(RecordingBackend::new(live, settings.embedding_dimension, settings.embedding_model.clone()));
    let gateway = Arc::new(Gateway::new(recorder.clone(), settings.embedding_dimension));
    let client = StackExchangeClient::new(http.clone(), client_config(settings))
        .with_quota_file(settings.data_dir.join(QUOTA_FILE));
    let store = Arc::new(RwLock::new(VectorStore::in_memory(settings.embedding_dimension)));
    let pipeline = Pipeline::new(gateway, Arc::new(client), store, settings.session.clone())?;

    let report = pipeline.ask_traced(query).await;
    let fixtures = FixtureSet { llm: recorder.script(), http: http.log() };
    fixtures.save(dir).with_context(|| format!("cannot write fixtures to {}", dir.display()))?;
    eprintln!("recorded {} StackExchange exchanges and {} chat turns to {}",
        fixtures.http.exchanges.len(), fixtures.llm.chat.len(), dir.display());
    print_report(&report, json)
}

fn write_links(out: &mut impl Write, header: &str, links: &[LinkRef]) -> std::io::Result<()> {
    writeln!(out, "{header}")?;
    if links.is_empty() {
        writeln!(out, "(none)")?;
    }
    for link in links {
        writeln!(out, "{link}")?;
    }
    Ok(())
}

fn print_answer(answer: &GeneratedAnswer) -> std::io::Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", answer.text.trim_end())?;
    writeln!(out)?;
    write_links(&mut out, "Links used:", &answer.used_links)?;
    writeln!(out)?;
    write_links(&mut out, "Unanswered questions:", &answer.unanswered_links)?;
    for warning in &answer.warnings {
        match warning {
            AnswerWarning::HallucinatedLink { url } => eprintln!("warning: cited link was not in the evidence: {url}"),
        }
    }
    Ok(())
}

fn print_report(report: &AskReport, json: bool) -> anyhow::Result<ExitCode> {
    match &report.result {
        Ok(answer) => {
            if json {
                println!("{}", serde_json::to_string_pretty(answer)?);
            } else {
                print_answer(answer)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Err(err @ AskError::NoResults { iterations }) => {
            if json {
                println!("{}", json!({"status": "no_results", "message": err.to_string(), "iterations": iterations}));
            } else {
                println!("{err}");
            }
            Ok(ExitCode::from(EXIT_NO_RESULTS))
        }
        Err(AskError::Failed(cause)) => Err(anyhow::Error::new(cause.clone())),
    }
}

fn cache(settings: &Settings, action: &CacheAction, json: bool) -> anyhow::Result<ExitCode> {
    let dir = &settings.data_dir;
    let dimension = vector_store::detect_dimension(dir)?.unwrap_or(settings.embedding_dimension);
    match action {
        CacheAction::List => {
            let ids = if dir.exists() { open_store(settings, dimension)?.cached_ids() } else { Vec::new() };
            if json {
                println!("{}", json!({ "ids": ids }));
            } else {
                for id in ids {
                    println!("{id}");
                }
            }
        }
        CacheAction::Clear => {
            let removed = if dir.exists() {
                let mut store = open_store(settings, dimension)?;
                let n = store.len();
                store.clear()?;
                n
            } else {
                0
            };
            if json {
                println!("{}", json!({ "removed": removed }));
            } else {
                println!("removed {removed} documents");
            }
        }
        CacheAction::Stats => {
            let documents = if dir.exists() { open_store(settings, dimension)?.len() } else { 0 };
            let store_bytes = std::fs::metadata(dir.join(STORE_FILE)).map(|m| m.len()).unwrap_or(0);
            let used = load_quota_usage(&dir.join(QUOTA_FILE))
                .filter(|(day, _)| *day == utc_day_now())
                .map_or(0, |(_, used)| used);
            let quota = ClientConfig::default().daily_quota;
            if json {
                println!(
                    "{}",
                    json!({"documents": documents, "store_bytes": store_bytes,
                           "quota_used_today": used, "daily_quota": quota})
                );
            } else {
                println!("documents: {documents}");
                println!("store size: {store_bytes} bytes");
                println!("quota used today: {used}/{quota}");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
