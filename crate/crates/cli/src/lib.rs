//! The `vulnbench` command line: corpus preparation, LLM scans, SAST
//! ingestion, scoring and comparison reports.
//!
//! Every subcommand writes its human-readable output to the writer passed
//! to [`run`] and logs through `tracing`. [`run`] returns the process exit
//! status for runs that finished (0, or 1 when a scan had errors or stopped
//! early); any `Err` maps to status 2.

pub mod archive;
mod ingest;
mod prep;
mod report;
mod scan;

use std::io::Write;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use vulnbench::cwe::{CweGraph, MatchPolicy};
use vulnbench::llm::ReplayMode;
use vulnbench::money::Money;
use vulnbench::strategy::StrategyId;

pub use scan::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "vulnbench", version, about = "Benchmark LLM prompting strategies and SAST tools on labeled Java test cases")]
pub struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Only errors on stderr.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalize a raw Juliet tree into a hint-free corpus with a manifest.
    Prep(PrepArgs),
    /// Run one prompting strategy over a prepared corpus.
    Scan(ScanArgs),
    /// Import a CodeQL CSV report as a result archive.
    IngestCodeql(IngestArgs),
    /// Import a SpotBugs text report as a result archive.
    IngestSpotbugs(IngestArgs),
    /// Score one result archive.
    Eval(EvalArgs),
    /// Compare several result archives side by side.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct PrepArgs {
    /// Root of the raw test-case tree.
    #[arg(long)]
    pub raw: PathBuf,
    /// Output directory for the normalized corpus and `manifest.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Keep this many vulnerable and this many clean cases per CWE.
    #[arg(long)]
    pub per_cwe: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Hint lexicon (TOML) replacing the bundled one.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    /// Prepared corpus directory.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Defaults to `<corpus>/manifest.json`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Strategy id, e.g. `cot_8s` or `p_cot-8s`.
    #[arg(long)]
    pub strategy: StrategyId,
    /// Model name from the pricing table.
    #[arg(long)]
    pub model: String,
    /// Archive directory.
    #[arg(long)]
    pub out: PathBuf,
    /// live, record or replay.
    #[arg(long, default_value = "live")]
    pub mode: ReplayMode,
    /// Replay store; defaults to `<out>/replay`.
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub concurrency: usize,
    /// Provider calls per second.
    #[arg(long)]
    pub rate_limit: Option<u32>,
    /// Stop fetching new cases once this run has spent this many dollars.
    #[arg(long, value_parser = parse_money)]
    pub max_spend: Option<Money>,
    /// Scan only the first N cases of the manifest.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Pricing table (TOML) replacing the bundled one.
    #[arg(long)]
    pub pricing: Option<PathBuf>,
    /// Directory of template overrides.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    /// Strategy registry (TOML) replacing the bundled one.
    #[arg(long)]
    pub registry: Option<PathBuf>,
    /// Package name written into prompts instead of `testcases`.
    #[arg(long)]
    pub package_override: Option<String>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// The tool's report file.
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Archive directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Rule-to-CWE map (CSV) replacing the bundled one.
    #[arg(long)]
    pub rules: Option<PathBuf>,
    /// Row label; defaults to the tool name.
    #[arg(long)]
    pub source: Option<String>,
    /// Replace an existing archive.
    #[arg(long)]
    pub force: bool,
    #[command(flatten)]
    pub graph: GraphArgs,
    #[command(flatten)]
    pub policy: PolicyArgs,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum Format {
    #[default]
    Text,
    Csv,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Archive directory.
    #[arg(long)]
    pub archive: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    #[command(flatten)]
    pub graph: GraphArgs,
    #[command(flatten)]
    pub policy: PolicyArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Archive directories; rows follow this order.
    #[arg(required = true)]
    pub archives: Vec<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    /// Leave out the per-CWE breakdowns.
    #[arg(long)]
    pub no_per_cwe: bool,
    #[command(flatten)]
    pub graph: GraphArgs,
    #[command(flatten)]
    pub policy: PolicyArgs,
}

#[derive(Debug, Default, Args)]
pub struct GraphArgs {
    /// CWE hierarchy snapshot (id,name,abstraction,parents CSV).
    #[arg(long, conflicts_with = "cwe_mitre")]
    pub cwe_graph: Option<PathBuf>,
    /// CWE hierarchy as MITRE's research-view CSV export.
    #[arg(long)]
    pub cwe_mitre: Option<PathBuf>,
}

impl GraphArgs {
    pub fn load(&self) -> Result<CweGraph> {
        if let Some(path) = &self.cwe_graph {
            let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
            return CweGraph::from_snapshot_csv(file).with_context(|| format!("reading {}", path.display()));
        }
        if let Some(path) = &self.cwe_mitre {
            let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
            return CweGraph::from_mitre_csv(file).with_context(|| format!("reading {}", path.display()));
        }
        Ok(CweGraph::bundled())
    }
}

#[derive(Debug, Default, Args)]
pub struct PolicyArgs {
    /// Accept only the exact CWE; overrides the other policy flags.
    #[arg(long)]
    pub exact: bool,
    #[arg(long)]
    pub no_parent: bool,
    #[arg(long)]
    pub no_children: bool,
    /// Accept immediate children only.
    #[arg(long)]
    pub immediate_children: bool,
    /// Accept every ancestor, not only immediate parents.
    #[arg(long)]
    pub transitive_parents: bool,
    /// Accept a parent even when it is a pillar.
    #[arg(long)]
    pub allow_pillar_parent: bool,
}

impl PolicyArgs {
    pub fn policy(&self) -> MatchPolicy {
        if self.exact {
            return MatchPolicy::exact();
        }
        let mut p = MatchPolicy::default();
        p.accept_parent &= !self.no_parent;
        p.accept_children &= !self.no_children;
        p.transitive_children &= !self.immediate_children;
        p.transitive_parents |= self.transitive_parents;
        p.exclude_pillar_parent &= !self.allow_pillar_parent;
        p
    }
}

fn parse_money(s: &str) -> Result<Money, String> {
    s.trim_start_matches('$').parse().map_err(|e: vulnbench::money::MoneyParseError| e.to_string())
}

/// Runs one subcommand. `Ok` carries the exit status.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<u8> {
    match cli.command {
        Command::Prep(a) => prep::run(&a, out),
        Command::Scan(a) => scan::run(RunConfig::try_from(a)?, out),
        Command::IngestCodeql(a) => ingest::run(vulnbench::sast::SastTool::CodeQl, &a, out),
        Command::IngestSpotbugs(a) => ingest::run(vulnbench::sast::SastTool::SpotBugs, &a, out),
        Command::Eval(a) => report::eval(&a, out),
        Command::Report(a) => report::report(&a, out),
    }
}

/// Installs a stderr subscriber for `-v`/`-q`.
pub fn init_logging(verbose: u8, quiet: bool) {
    use tracing_subscriber::filter::LevelFilter;
    let level = match (quiet, verbose) {
        (true, _) => LevelFilter::ERROR,
        (false, 0) => LevelFilter::WARN,
        (false, 1) => LevelFilter::INFO,
        (false, 2) => LevelFilter::DEBUG,
        _ => LevelFilter::TRACE,
    };
    let _ = tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .with_target(false)
        .try_init();
}
