use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use vulnbench::corpus::CorpusManifest;
use vulnbench::cwe::{CweGraph, MatchPolicy};
use vulnbench::eval::{aggregate, score, GroupBy, GroupKey, ResultTable, Scoring, TableRow};

use crate::archive::{Archive, Tool};
use crate::{EvalArgs, Format, ReportArgs};

pub const TIME_NOTE: &str =
    "Time is the wall-clock of the recorded run; it depends on provider load and is not reproducible.";

fn load_manifest(path: &Path) -> Result<CorpusManifest> {
    let manifest = CorpusManifest::load(path).with_context(|| format!("loading {}", path.display()))?;
    manifest.validate()?;
    Ok(manifest)
}

fn score_archive(archive: &Archive, manifest: &CorpusManifest, graph: &CweGraph, policy: &MatchPolicy) -> Result<Scoring> {
    score(&archive.detections(), manifest, graph, policy)
        .with_context(|| format!("scoring {}", archive.dir.display()))
}

fn emit(table: &ResultTable, format: Format, out: &mut dyn Write) -> Result<()> {
    match format {
        Format::Text => writeln!(out, "{}", table.to_text())?,
        Format::Csv => {
            writeln!(out, "# {}", table.title)?;
            write!(out, "{}", table.to_csv())?;
            writeln!(out)?;
        }
    }
    Ok(())
}

fn overview_row(archive: &Archive, scoring: &Scoring) -> Option<TableRow> {
    let groups = aggregate(&scoring.cases, GroupBy::Overall);
    let g = groups.get(&GroupKey::Overall)?;
    let llm = archive.header.tool == Tool::Llm;
    Some(TableRow {
        label: archive.header.source.clone(),
        matrix: g.matrix,
        metrics: g.metrics,
        cost: llm.then_some(g.cost),
        wall_time: llm.then_some(g.wall_time),
    })
}

fn notes(archives: &[(Archive, Scoring)], out: &mut dyn Write) -> Result<()> {
    for (archive, scoring) in archives {
        if !scoring.skipped.is_empty() {
            writeln!(
                out,
                "{}: {} cases left out for context overflow",
                archive.header.source,
                scoring.skipped.len()
            )?;
        }
    }
    if archives.iter().any(|(a, _)| a.header.tool == Tool::Llm) {
        writeln!(out, "{TIME_NOTE}")?;
    }
    Ok(())
}

fn check_manifest(archive: &Archive, manifest: &CorpusManifest) -> Result<()> {
    let digest = manifest.digest();
    if archive.header.manifest_digest != digest {
        bail!(
            "{} was produced against manifest {} ({} cases), not {} ({} cases)",
            archive.dir.display(),
            archive.header.manifest_digest,
            archive.header.manifest_cases,
            digest,
            manifest.cases.len()
        );
    }
    Ok(())
}

pub(crate) fn eval(args: &EvalArgs, out: &mut dyn Write) -> Result<u8> {
    let manifest = load_manifest(&args.manifest)?;
    let archive = Archive::load(&args.archive)?;
    check_manifest(&archive, &manifest)?;
    let graph = args.graph.load()?;
    let scoring = score_archive(&archive, &manifest, &graph, &args.policy.policy())?;
    if archive.entries.len() < manifest.cases.len() {
        writeln!(
            out,
            "{}: archive covers {} of {} cases",
            archive.header.source,
            archive.entries.len(),
            manifest.cases.len()
        )?;
    }
    let llm = archive.header.tool == Tool::Llm;
    let overview = ResultTable {
        title: "Overall".into(),
        rows: overview_row(&archive, &scoring).into_iter().collect(),
    };
    emit(&overview, args.format, out)?;
    let per_cwe = aggregate(&scoring.cases, GroupBy::PerCwe);
    emit(
        &ResultTable::from_groups(&format!("{} per CWE", archive.header.source), &per_cwe, llm),
        args.format,
        out,
    )?;
    notes(&[(archive, scoring)], out)?;
    Ok(0)
}

/// Archives grouped by the manifest they were produced against.
fn manifest_diff(archives: &[Archive]) -> String {
    let mut by_digest: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for a in archives {
        by_digest
            .entry(&a.header.manifest_digest)
            .or_default()
            .push(format!("{} ({} cases)", a.dir.display(), a.header.manifest_cases));
    }
    by_digest
        .iter()
        .map(|(d, dirs)| format!("  manifest {d}: {}", dirs.join(", ")))
        .collect::<Vec<_>>()
        .join("\n")
}

pub(crate) fn report(args: &ReportArgs, out: &mut dyn Write) -> Result<u8> {
    let manifest = load_manifest(&args.manifest)?;
    let archives = args.archives.iter().map(|d| Archive::load(d)).collect::<Result<Vec<_>>>()?;
    let digests: BTreeSet<&str> = archives.iter().map(|a| a.header.manifest_digest.as_str()).collect();
    if digests.len() > 1 {
        bail!("archives were produced against different manifests:\n{}", manifest_diff(&archives));
    }
    let mut sources = BTreeSet::new();
    for a in &archives {
        if !sources.insert(a.header.source.as_str()) {
            bail!("two archives share the row label {:?}", a.header.source);
        }
        check_manifest(a, &manifest)?;
    }
    let graph = args.graph.load()?;
    let policy = args.policy.policy();
    let scored = archives
        .into_iter()
        .map(|a| {
            let s = score_archive(&a, &manifest, &graph, &policy)?;
            Ok((a, s))
        })
        .collect::<Result<Vec<_>>>()?;

    let overview = ResultTable {
        title: "Results overview".into(),
        rows: scored.iter().filter_map(|(a, s)| overview_row(a, s)).collect(),
    };
    emit(&overview, args.format, out)?;
    if !args.no_per_cwe {
        for (a, s) in &scored {
            let per_cwe = aggregate(&s.cases, GroupBy::PerCwe);
            let table = ResultTable::from_groups(&format!("{} per CWE", a.header.source), &per_cwe, a.header.tool == Tool::Llm);
            emit(&table, args.format, out)?;
        }
    }
    notes(&scored, out)?;
    Ok(0)
}
