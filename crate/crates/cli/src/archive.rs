//! Result archives: one directory holding `archive.ndjson`, an append-only
//! file of newline-delimited JSON records.
//!
//! The first line is a [`Header`]; every following line is one
//! [`CaseEntry`]. Entries are appended in manifest order, so a run that was
//! stopped and resumed writes the same bytes as one that was not.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use vulnbench::cwe::CweId;
use vulnbench::eval::Detection;
use vulnbench::money::Money;
use vulnbench::strategy::{ScanResult, ScanStatus, StrategyId};

pub const ARCHIVE_SCHEMA_VERSION: u32 = 1;
pub const ARCHIVE_FILE: &str = "archive.ndjson";
pub const LOCK_FILE: &str = "archive.lock";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tool {
    Llm,
    CodeQl,
    SpotBugs,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub schema_version: u32,
    /// Row label in reports, e.g. `p_cot-8s` or `CodeQL`.
    pub source: String,
    pub tool: Tool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<StrategyId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub manifest_digest: String,
    pub manifest_cases: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub case_id: String,
    /// Content digest of the scanned file.
    pub case_digest: String,
    pub skipped: bool,
    pub reported_cwes: Vec<CweId>,
    pub cost: Money,
    pub wall_time_ms: u64,
    pub llm_calls: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<ScanResult>,
}

impl CaseEntry {
    pub fn from_scan(result: ScanResult, case_digest: &str) -> Self {
        CaseEntry {
            case_id: result.case_id.clone(),
            case_digest: case_digest.to_string(),
            skipped: result.status == ScanStatus::SkippedOverflow,
            reported_cwes: result.reported_cwes.iter().copied().collect(),
            cost: result.transcript.total_cost(),
            wall_time_ms: u64::try_from(result.transcript.total_wall_time().as_millis()).unwrap_or(u64::MAX),
            llm_calls: result.transcript.len(),
            transcript_digest: Some(result.transcript.digest()),
            result: Some(result),
        }
    }

    pub fn detection(&self, source: &str) -> Detection {
        Detection {
            case_id: self.case_id.clone(),
            source: source.to_string(),
            reported: self.reported_cwes.iter().copied().collect(),
            cost: self.cost,
            wall_time: std::time::Duration::from_millis(self.wall_time_ms),
            skipped: self.skipped,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Line {
    Header(Header),
    Case(Box<CaseEntry>),
}

#[derive(Clone, Debug)]
pub struct Archive {
    pub dir: PathBuf,
    pub header: Header,
    pub entries: Vec<CaseEntry>,
}

impl Archive {
    pub fn path(dir: &Path) -> PathBuf {
        dir.join(ARCHIVE_FILE)
    }

    /// Reads an archive. A torn final line (no trailing newline) is ignored.
    pub fn load(dir: &Path) -> Result<Archive> {
        let path = Archive::path(dir);
        let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
        if dir.join(LOCK_FILE).exists() {
            tracing::warn!(archive = %dir.display(), "archive is locked; a scan may still be writing it");
        }
        let (header, entries, _) = read_lines(BufReader::new(file), &path)?;
        let header = header.with_context(|| format!("{} has no header", path.display()))?;
        Ok(Archive {
            dir: dir.to_path_buf(),
            header,
            entries,
        })
    }

    pub fn detections(&self) -> Vec<Detection> {
        self.entries.iter().map(|e| e.detection(&self.header.source)).collect()
    }
}

type Parsed = (Option<Header>, Vec<CaseEntry>, u64);

/// Returns the header, the entries and the byte length of the complete
/// lines.
fn read_lines(mut reader: impl BufRead, path: &Path) -> Result<Parsed> {
    let mut header = None;
    let mut entries = Vec::new();
    let mut good_len = 0u64;
    let mut buf = String::new();
    let mut index = 0usize;
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf)?;
        if n == 0 {
            break;
        }
        index += 1;
        if !buf.ends_with('\n') {
            tracing::warn!(path = %path.display(), line = index, "ignoring incomplete final record");
            break;
        }
        let line: Line = serde_json::from_str(buf.trim_end())
            .with_context(|| format!("{} line {index}: malformed record", path.display()))?;
        match line {
            Line::Header(h) if index == 1 => {
                if h.schema_version != ARCHIVE_SCHEMA_VERSION {
                    bail!("{}: unsupported schema version {}", path.display(), h.schema_version);
                }
                header = Some(h);
            }
            Line::Header(_) => bail!("{} line {index}: header after the first line", path.display()),
            Line::Case(_) if index == 1 => bail!("{}: first line is not a header", path.display()),
            Line::Case(e) => entries.push(*e),
        }
        good_len += n as u64;
    }
    Ok((header, entries, good_len))
}

/// Holds `archive.lock` for as long as it lives.
#[derive(Debug)]
pub struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    pub fn acquire(dir: &Path) -> Result<LockGuard> {
        let path = dir.join(LOCK_FILE);
        let mut file = OpenOptions::new().write(true).create_new(true).open(&path).with_context(|| {
            format!(
                "{} is locked by another run (remove {} if that run is gone)",
                dir.display(),
                path.display()
            )
        })?;
        writeln!(file, "{}", std::process::id())?;
        Ok(LockGuard { path })
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Appends entries to a locked archive.
pub struct ArchiveWriter {
    file: File,
    completed: BTreeMap<String, String>,
    _lock: LockGuard,
}

impl ArchiveWriter {
    /// Opens `dir` for appending, creating the archive when absent. An
    /// existing archive must carry the same header; its entries count as
    /// completed.
    pub fn open(dir: &Path, header: &Header) -> Result<ArchiveWriter> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let lock = LockGuard::acquire(dir)?;
        let path = Archive::path(dir);
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(&path)
            .with_context(|| format!("opening {}", path.display()))?;
        let (existing, entries, good_len) = read_lines(BufReader::new(&file), &path)?;
        file.set_len(good_len)?;
        file.seek(SeekFrom::End(0))?;
        let mut writer = ArchiveWriter {
            file,
            completed: BTreeMap::new(),
            _lock: lock,
        };
        match existing {
            Some(h) if &h != header => bail!(
                "{} belongs to a different run (source {}, manifest {}); use another output directory",
                path.display(),
                h.source,
                h.manifest_digest
            ),
            Some(_) => {
                writer.completed = entries.into_iter().map(|e| (e.case_id, e.case_digest)).collect();
            }
            None => writer.write_line(&Line::Header(header.clone()))?,
        }
        Ok(writer)
    }

    /// Case id → content digest of every entry already in the archive.
    pub fn completed(&self) -> &BTreeMap<String, String> {
        &self.completed
    }

    pub fn append(&mut self, entry: CaseEntry) -> Result<()> {
        self.completed.insert(entry.case_id.clone(), entry.case_digest.clone());
        self.write_line(&Line::Case(Box::new(entry)))
    }

    fn write_line(&mut self, line: &Line) -> Result<()> {
        let mut text = serde_json::to_string(line)?;
        text.push('\n');
        self.file.write_all(text.as_bytes())?;
        self.file.flush()?;
        Ok(())
    }
}

/// Writes a complete archive in one go (SAST ingestion).
pub fn write_archive(dir: &Path, header: &Header, entries: Vec<CaseEntry>, overwrite: bool) -> Result<()> {
    let path = Archive::path(dir);
    if path.exists() {
        if !overwrite {
            bail!("{} already exists (pass --force to replace it)", path.display());
        }
        let _lock = LockGuard::acquire(dir)?;
        std::fs::remove_file(&path)?;
        drop(_lock);
    }
    let mut writer = ArchiveWriter::open(dir, header)?;
    for e in entries {
        writer.append(e)?;
    }
    Ok(())
}
