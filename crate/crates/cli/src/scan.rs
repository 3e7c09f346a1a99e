use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicI64, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use vulnbench::corpus::{load_cases, CorpusManifest, TestCase};
use vulnbench::llm::{
    providers::backend_for, ChatBackend, Completion, CompletionRequest, Gateway, LlmError, PricingTable, ReplayMode, ReplayStore,
};
use vulnbench::money::Money;
use vulnbench::strategy::{bundled_tot_steps, Engine, Registry, ScanResult, StrategyError, StrategyId, TemplateSet};

use crate::archive::{ArchiveWriter, CaseEntry, Header, Tool, ARCHIVE_SCHEMA_VERSION};
use crate::ScanArgs;

pub const ERRORS_FILE: &str = "errors.ndjson";

/// A validated scan configuration.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub manifest: PathBuf,
    pub strategy: StrategyId,
    pub model: String,
    pub out: PathBuf,
    pub mode: ReplayMode,
    pub store: PathBuf,
    pub concurrency: usize,
    pub rate_limit: Option<u32>,
    pub max_spend: Option<Money>,
    pub limit: Option<usize>,
    pub pricing: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub registry: Option<PathBuf>,
    pub package_override: Option<String>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.concurrency == 0 {
            bail!("concurrency must be at least 1");
        }
        if self.rate_limit == Some(0) {
            bail!("rate limit must be at least 1 call per second");
        }
        if self.mode == ReplayMode::Replay {
            let populated = ReplayStore::open(&self.store).map(|s| !s.is_empty()).unwrap_or(false);
            if !self.store.is_dir() || !populated {
                bail!("replay mode needs a populated store, and {} has no recordings", self.store.display());
            }
        }
        Ok(())
    }
}

impl TryFrom<ScanArgs> for RunConfig {
    type Error = anyhow::Error;

    fn try_from(a: ScanArgs) -> Result<Self> {
        let config = RunConfig {
            manifest: a.manifest.unwrap_or_else(|| a.corpus.join("manifest.json")),
            store: a.store.unwrap_or_else(|| a.out.join("replay")),
            corpus: a.corpus,
            strategy: a.strategy,
            model: a.model,
            out: a.out,
            mode: a.mode,
            concurrency: a.concurrency,
            rate_limit: a.rate_limit,
            max_spend: a.max_spend,
            limit: a.limit,
            pricing: a.pricing,
            templates: a.templates,
            registry: a.registry,
            package_override: a.package_override,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    case_id: &'a str,
    error: String,
}

#[derive(Default)]
struct Tally {
    committed: usize,
    skipped: usize,
    errors: usize,
    llm_calls: usize,
    cost: Money,
}

fn no_backend() -> Arc<dyn ChatBackend> {
    Arc::new(|_: &CompletionRequest<'_>| -> Result<Completion, LlmError> {
        Err(LlmError::InvalidRequest("no provider is used in replay mode".into()))
    })
}

fn engine(config: &RunConfig) -> Result<Engine> {
    let templates = match &config.templates {
        Some(dir) => TemplateSet::with_overrides(dir)?,
        None => TemplateSet::bundled(),
    };
    let registry = match &config.registry {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Registry::from_toml(&text)?
        }
        None => Registry::bundled(),
    };
    let engine = Engine::new(templates, registry, bundled_tot_steps())?;
    Ok(match &config.package_override {
        Some(p) => engine.with_package_override(p),
        None => engine,
    })
}

pub(crate) fn run(config: RunConfig, out: &mut dyn Write) -> Result<u8> {
    let pricing = match &config.pricing {
        Some(path) => PricingTable::load(path)?,
        None => PricingTable::bundled(),
    };
    let profile = pricing.get(&config.model)?.clone();
    let engine = engine(&config)?;
    engine.spec(config.strategy)?;

    let manifest = CorpusManifest::load(&config.manifest)?;
    manifest.validate()?;
    let mut cases = load_cases(&config.corpus, &manifest)?;
    if let Some(n) = config.limit {
        cases.truncate(n);
    }

    let header = Header {
        schema_version: ARCHIVE_SCHEMA_VERSION,
        source: config.strategy.label(),
        tool: Tool::Llm,
        strategy: Some(config.strategy),
        model: Some(profile.model_name.clone()),
        manifest_digest: manifest.digest(),
        manifest_cases: manifest.cases.len(),
    };
    let mut writer = ArchiveWriter::open(&config.out, &header)?;
    let pending: Vec<&TestCase> = cases
        .iter()
        .filter(|c| !writer.completed().contains_key(&c.case_id))
        .collect();
    let resumed = cases.len() - pending.len();
    if resumed > 0 {
        tracing::info!(resumed, "skipping cases already in the archive");
    }

    let backend: Arc<dyn ChatBackend> = match config.mode {
        ReplayMode::Replay => no_backend(),
        _ => Arc::from(backend_for(profile.provider)?),
    };
    let mut gateway = Gateway::new(backend);
    if config.mode != ReplayMode::Live {
        std::fs::create_dir_all(&config.store).with_context(|| format!("creating {}", config.store.display()))?;
        gateway = gateway.with_store(config.mode, ReplayStore::open(&config.store)?);
    }
    if let Some(n) = config.rate_limit {
        gateway = gateway.with_rate_limit(n);
    }

    let errors_path = config.out.join(ERRORS_FILE);
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let budget_hit = AtomicBool::new(false);
    let spent = AtomicI64::new(0);
    // Replayed responses cost nothing now, so they do not count against the ceiling.
    let counts_spend = config.mode != ReplayMode::Replay;
    let mut tally = Tally::default();
    let mut commit_error: Option<anyhow::Error> = None;

    std::thread::scope(|s| {
        let (tx, rx) = mpsc::channel::<(usize, Result<ScanResult, StrategyError>)>();
        for _ in 0..config.concurrency {
            let tx = tx.clone();
            let (next, stop, budget_hit, spent) = (&next, &stop, &budget_hit, &spent);
            let (pending, engine, gateway, profile, config) = (&pending, &engine, &gateway, &profile, &config);
            s.spawn(move || loop {
                if stop.load(Ordering::SeqCst) || next.load(Ordering::SeqCst) >= pending.len() {
                    break;
                }
                if let Some(max) = config.max_spend {
                    if spent.load(Ordering::SeqCst) >= max.micros() {
                        budget_hit.store(true, Ordering::SeqCst);
                        break;
                    }
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(case) = pending.get(i) else { break };
                let result = engine.run(case, config.strategy, gateway, profile);
                match &result {
                    Ok(r) if counts_spend => {
                        spent.fetch_add(r.transcript.total_cost().micros(), Ordering::SeqCst);
                    }
                    Err(e) if e.llm_error().is_some_and(LlmError::is_terminal) => {
                        stop.store(true, Ordering::SeqCst);
                    }
                    _ => {}
                }
                if tx.send((i, result)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        // Commit strictly in manifest order so resumed archives match
        // uninterrupted ones byte for byte.
        let mut buffer = BTreeMap::new();
        let mut next_commit = 0usize;
        for (i, result) in rx {
            buffer.insert(i, result);
            while let Some(result) = buffer.remove(&next_commit) {
                let case = pending[next_commit];
                next_commit += 1;
                if commit_error.is_some() {
                    continue;
                }
                if let Err(e) = commit(case, result, &mut writer, &errors_path, &mut tally) {
                    stop.store(true, Ordering::SeqCst);
                    commit_error = Some(e);
                }
            }
        }
    });
    if let Some(e) = commit_error {
        return Err(e);
    }

    writeln!(
        out,
        "{} {} on {}: {} scanned, {} resumed, {} skipped (context overflow), {} errors",
        config.strategy.label(),
        profile.model_name,
        manifest.cases.len(),
        tally.committed,
        resumed,
        tally.skipped,
        tally.errors
    )?;
    writeln!(
        out,
        "llm calls {}, provider calls {}, cost {}$",
        tally.llm_calls,
        gateway.backend_calls(),
        tally.cost
    )?;
    let unfinished = pending.len() - tally.committed - tally.errors;
    if budget_hit.load(Ordering::SeqCst) {
        writeln!(out, "stopped at the spending ceiling; {unfinished} cases not scanned (rerun to resume)")?;
    } else if stop.load(Ordering::SeqCst) {
        writeln!(out, "stopped after a provider error; {unfinished} cases not scanned (rerun to resume)")?;
    }
    if tally.errors > 0 {
        writeln!(out, "errors written to {}", errors_path.display())?;
    }
    Ok(if tally.errors > 0 || unfinished > 0 { 1 } else { 0 })
}

fn commit(
    case: &TestCase,
    result: Result<ScanResult, StrategyError>,
    writer: &mut ArchiveWriter,
    errors_path: &std::path::Path,
    tally: &mut Tally,
) -> Result<()> {
    match result {
        Ok(r) => {
            tally.committed += 1;
            tally.llm_calls += r.transcript.len();
            tally.cost = tally.cost.checked_add(r.transcript.total_cost()).context("cost overflow")?;
            let entry = CaseEntry::from_scan(r, &case.record().digest);
            tally.skipped += usize::from(entry.skipped);
            tracing::debug!(case = %case.case_id, cwes = ?entry.reported_cwes, "scanned");
            writer.append(entry)
        }
        Err(e) => {
            tally.errors += 1;
            tracing::error!(case = %case.case_id, "{e}");
            let line = ErrorLine {
                case_id: &case.case_id,
                error: e.to_string(),
            };
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(errors_path)
                .with_context(|| format!("opening {}", errors_path.display()))?;
            writeln!(file, "{}", serde_json::to_string(&line)?)?;
            Ok(())
        }
    }
}
