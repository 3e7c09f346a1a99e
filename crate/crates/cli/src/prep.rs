use std::io::Write;

use anyhow::{bail, Context, Result};
use vulnbench::corpus::{prepare_corpus, select_subset, write_corpus, HintLexicon};

use crate::PrepArgs;

pub(crate) fn run(args: &PrepArgs, out: &mut dyn Write) -> Result<u8> {
    if !args.raw.is_dir() {
        bail!("raw corpus directory {} does not exist", args.raw.display());
    }
    let lexicon = match &args.lexicon {
        Some(path) => HintLexicon::load(path)?,
        None => HintLexicon::default(),
    };
    let prepared = prepare_corpus(&args.raw, &lexicon).with_context(|| format!("preparing {}", args.raw.display()))?;
    for e in &prepared.excluded {
        tracing::info!(case = %e.case, reason = %e.reason, "excluded");
    }
    let (cases, manifest) = match args.per_cwe {
        Some(n) => {
            let manifest = select_subset(&prepared.manifest, n, args.seed)?;
            let cases = prepared
                .cases
                .into_iter()
                .filter(|c| manifest.get(&c.case_id).is_some())
                .collect::<Vec<_>>();
            (cases, manifest)
        }
        None => (prepared.cases, prepared.manifest),
    };
    write_corpus(&args.out, &cases, &manifest)?;

    writeln!(out, "{:<10} {:>10} {:>6}", "CWE", "vulnerable", "clean")?;
    for (cwe, counts) in &manifest.selection {
        writeln!(out, "{:<10} {:>10} {:>6}", cwe.to_string(), counts.vulnerable, counts.clean)?;
    }
    writeln!(out, "{} cases, {} excluded", manifest.cases.len(), prepared.excluded.len())?;
    writeln!(out, "manifest {} digest {}", args.out.join("manifest.json").display(), manifest.digest())?;
    Ok(0)
}
