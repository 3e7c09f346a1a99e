use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ChatMessage, CompletionParams, LlmError, ModelProfile};

pub(crate) const RECORD_SCHEMA_VERSION: u32 = 1;
const KEY_DOMAIN: &[u8] = b"vulnbench-replay-v1";

/// Content hash identifying a request.
///
/// SHA-256 over a length-prefixed encoding of the model name, the
/// temperature's IEEE-754 bits (big-endian, `-0.0` folded into `0.0`), the
/// run index and each message's role and content. Lengths and integers are
/// big-endian `u64`, so the key is identical on every platform.
pub fn replay_key(messages: &[ChatMessage], profile: &ModelProfile, params: CompletionParams) -> String {
    let mut h = Sha256::new();
    let mut field = |bytes: &[u8]| {
        h.update((bytes.len() as u64).to_be_bytes());
        h.update(bytes);
    };
    field(KEY_DOMAIN);
    field(profile.model_name.as_bytes());
    let temperature = if params.temperature == 0.0 { 0.0f64 } else { params.temperature };
    field(&temperature.to_bits().to_be_bytes());
    field(&u64::from(params.run_index).to_be_bytes());
    field(&(messages.len() as u64).to_be_bytes());
    for m in messages {
        field(&[m.role.tag()]);
        field(m.content.as_bytes());
    }
    hex::encode(h.finalize())
}

/// A stored request/response pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub schema_version: u32,
    pub key: String,
    pub model_name: String,
    pub temperature: f64,
    pub run_index: u32,
    pub messages: Vec<ChatMessage>,
    pub response: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub wall_time_ms: u64,
}

/// A content-addressed directory of records: `<root>/<key[..2]>/<key>.json`.
/// Reads may run concurrently; writes are serialized and atomic.
#[derive(Debug)]
pub struct ReplayStore {
    root: PathBuf,
    write_lock: Mutex<()>,
}

fn store_err(path: &Path, e: impl std::fmt::Display) -> LlmError {
    LlmError::Store(format!("{}: {e}", path.display()))
}

impl ReplayStore {
    pub fn open(root: &Path) -> Result<Self, LlmError> {
        std::fs::create_dir_all(root).map_err(|e| store_err(root, e))?;
        Ok(ReplayStore {
            root: root.to_path_buf(),
            write_lock: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_for(&self, key: &str) -> Result<PathBuf, LlmError> {
        if key.len() < 3 || !key.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(LlmError::Store(format!("malformed key {key:?}")));
        }
        Ok(self.root.join(&key[..2]).join(format!("{key}.json")))
    }

    pub fn contains(&self, key: &str) -> bool {
        self.path_for(key).is_ok_and(|p| p.is_file())
    }

    pub fn get(&self, key: &str) -> Result<Option<ReplayRecord>, LlmError> {
        let path = self.path_for(key)?;
        let text = match std::fs::read_to_string(&path) {
            Ok(text) => text,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(store_err(&path, e)),
        };
        let record: ReplayRecord = serde_json::from_str(&text).map_err(|e| store_err(&path, e))?;
        if record.key != key {
            return Err(store_err(&path, "record key does not match its file name"));
        }
        Ok(Some(record))
    }

    pub fn put(&self, record: &ReplayRecord) -> Result<(), LlmError> {
        let path = self.path_for(&record.key)?;
        let dir = path.parent().expect("keyed path has a parent");
        let _guard = self.write_lock.lock().unwrap_or_else(|p| p.into_inner());
        std::fs::create_dir_all(dir).map_err(|e| store_err(dir, e))?;
        let tmp = dir.join(format!(".{}.tmp", record.key));
        let mut file = std::fs::File::create(&tmp).map_err(|e| store_err(&tmp, e))?;
        let json = serde_json::to_vec_pretty(record).map_err(|e| store_err(&tmp, e))?;
        file.write_all(&json).map_err(|e| store_err(&tmp, e))?;
        file.sync_all().map_err(|e| store_err(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| store_err(&path, e))
    }

    /// Number of stored records.
    pub fn len(&self) -> usize {
        walk_json(&self.root).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn walk_json(root: &Path) -> Vec<PathBuf> {
    let Ok(dirs) = std::fs::read_dir(root) else { return Vec::new() };
    dirs.flatten()
        .filter(|d| d.path().is_dir())
        .flat_map(|d| std::fs::read_dir(d.path()).into_iter().flatten().flatten())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::PricingTable;

    fn profile() -> ModelProfile {
        PricingTable::bundled().get("gpt-4-0125-preview").unwrap().clone()
    }

    #[test]
    fn key_depends_on_every_input() {
        let msgs = vec![ChatMessage::human("a")];
        let p = profile();
        let base = replay_key(&msgs, &p, CompletionParams::deterministic());
        assert_eq!(base.len(), 64);
        assert_eq!(base, replay_key(&msgs, &p, CompletionParams::deterministic()));
        assert_ne!(base, replay_key(&msgs, &p, CompletionParams::new(0.0, 1).unwrap()));
        assert_ne!(base, replay_key(&msgs, &p, CompletionParams::new(0.7, 0).unwrap()));
        assert_ne!(base, replay_key(&[ChatMessage::ai("a")], &p, CompletionParams::deterministic()));
        let mut other = p.clone();
        other.model_name.push('x');
        assert_ne!(base, replay_key(&msgs, &other, CompletionParams::deterministic()));
        assert_eq!(
            base,
            replay_key(&msgs, &p, CompletionParams { temperature: -0.0, run_index: 0 })
        );
    }

    #[test]
    fn message_boundaries_matter() {
        let p = profile();
        let a = replay_key(&[ChatMessage::human("ab"), ChatMessage::human("c")], &p, CompletionParams::deterministic());
        let b = replay_key(&[ChatMessage::human("a"), ChatMessage::human("bc")], &p, CompletionParams::deterministic());
        assert_ne!(a, b);
    }

    #[test]
    fn store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = ReplayStore::open(dir.path()).unwrap();
        let key = replay_key(&[ChatMessage::human("a")], &profile(), CompletionParams::deterministic());
        assert!(store.get(&key).unwrap().is_none());
        let record = ReplayRecord {
            schema_version: RECORD_SCHEMA_VERSION,
            key: key.clone(),
            model_name: "m".into(),
            temperature: 0.0,
            run_index: 0,
            messages: vec![ChatMessage::human("a")],
            response: "r".into(),
            input_tokens: 3,
            output_tokens: 4,
            wall_time_ms: 5,
        };
        store.put(&record).unwrap();
        assert!(store.contains(&key));
        assert_eq!(store.get(&key).unwrap(), Some(record));
        assert!(dir.path().join(&key[..2]).join(format!("{key}.json")).is_file());
        assert_eq!(store.len(), 1);
        assert!(store.get("../etc").is_err());
    }
}
