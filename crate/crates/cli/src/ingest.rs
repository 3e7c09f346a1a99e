use std::collections::BTreeSet;
use std::io::Write;

use anyhow::{Context, Result};
use vulnbench::corpus::CorpusManifest;
use vulnbench::cwe::CweId;
use vulnbench::money::Money;
use vulnbench::sast::{
    map_findings, parse_codeql_csv, parse_spotbugs_text, relativize_paths, undetectable_cwes, RuleCweMap, SastTool,
};

use crate::archive::{write_archive, CaseEntry, Header, Tool, ARCHIVE_SCHEMA_VERSION};
use crate::IngestArgs;

pub const FINDINGS_FILE: &str = "findings.json";

pub(crate) fn run(tool: SastTool, args: &IngestArgs, out: &mut dyn Write) -> Result<u8> {
    let text = std::fs::read_to_string(&args.report).with_context(|| format!("reading {}", args.report.display()))?;
    let manifest = CorpusManifest::load(&args.manifest)?;
    manifest.validate()?;
    let rules = match &args.rules {
        Some(path) => {
            let csv = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            RuleCweMap::from_csv(&csv)?
        }
        None => RuleCweMap::bundled(),
    };
    let graph = args.graph.load()?;
    let policy = args.policy.policy();

    let mut findings = match tool {
        SastTool::CodeQl => parse_codeql_csv(&text).with_context(|| format!("parsing {}", args.report.display()))?,
        SastTool::SpotBugs => {
            let report = parse_spotbugs_text(&text);
            for (line, content) in &report.skipped {
                tracing::warn!(line, content = %content, "unrecognized report line");
            }
            if !report.skipped.is_empty() {
                writeln!(out, "{} report lines not recognized (see log)", report.skipped.len())?;
            }
            report.findings
        }
    };
    rules.annotate(&mut findings);
    let mapped = map_findings(&findings, &rules, &manifest);
    relativize_paths(&mut findings, &manifest);

    let (tool_kind, default_source) = match tool {
        SastTool::CodeQl => (Tool::CodeQl, "CodeQL"),
        SastTool::SpotBugs => (Tool::SpotBugs, "SpotBugs"),
    };
    let header = Header {
        schema_version: ARCHIVE_SCHEMA_VERSION,
        source: args.source.clone().unwrap_or_else(|| default_source.to_string()),
        tool: tool_kind,
        strategy: None,
        model: None,
        manifest_digest: manifest.digest(),
        manifest_cases: manifest.cases.len(),
    };
    let entries: Vec<CaseEntry> = manifest
        .cases
        .iter()
        .map(|c| CaseEntry {
            case_id: c.case_id.clone(),
            case_digest: c.digest.clone(),
            skipped: false,
            reported_cwes: mapped.reported.get(&c.case_id).into_iter().flatten().copied().collect(),
            cost: Money::ZERO,
            wall_time_ms: 0,
            llm_calls: 0,
            transcript_digest: None,
            result: None,
        })
        .collect();
    let flagged = entries.iter().filter(|e| !e.reported_cwes.is_empty()).count();
    write_archive(&args.out, &header, entries, args.force)?;
    let findings_path = args.out.join(FINDINGS_FILE);
    std::fs::write(&findings_path, serde_json::to_string_pretty(&findings)?)
        .with_context(|| format!("writing {}", findings_path.display()))?;

    writeln!(
        out,
        "{}: {} findings, {} of {} cases with a mapped report",
        header.source,
        findings.len(),
        flagged,
        manifest.cases.len()
    )?;
    for ((t, rule), n) in &mapped.unmapped {
        writeln!(out, "unmapped rule {t}/{rule}: {n} findings")?;
    }
    if !mapped.orphans.is_empty() {
        writeln!(out, "{} findings outside the corpus", mapped.orphans.len())?;
    }
    let targets: BTreeSet<CweId> = manifest.selection.keys().copied().collect();
    let blind = undetectable_cwes(tool, &rules, &targets, &graph, &policy);
    if !blind.is_empty() {
        let list: Vec<String> = blind.iter().map(ToString::to_string).collect();
        writeln!(out, "no mapped rule can report: {}", list.join(", "))?;
    }
    Ok(0)
}
