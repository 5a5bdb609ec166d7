//! Record/replay of backend traffic.
//!
//! A cassette is a JSONL file of `{hash, kind, response}` records. In record
//! mode every request is forwarded to the wrapped backends and the response
//! stored under the request hash; in replay mode responses are served from
//! the file with no I/O and an unseen request is a [`BackendError::CassetteMiss`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    sha256_hex, BackendError, Backends, ChatBackend, ChatRequest, ChatResponse, ClaimExtractor,
    ClaimVerifier, EvidenceDoc, SearchBackend, SupportJudge,
};
use crate::io::{read_jsonl, write_jsonl};
use crate::trace::Verdict;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CassetteMode {
    Record,
    Replay,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    hash: String,
    kind: String,
    response: Value,
}

pub struct Cassette {
    mode: CassetteMode,
    path: PathBuf,
    inner: Option<Backends>,
    entries: Mutex<BTreeMap<String, Entry>>,
}

impl Cassette {
    /// Opens `path` for replay. The file must exist.
    pub fn replay(path: &Path) -> Result<Self, BackendError> {
        Ok(Cassette {
            mode: CassetteMode::Replay,
            entries: Mutex::new(load(path)?),
            path: path.to_path_buf(),
            inner: None,
        })
    }

    /// Records traffic through `inner` into `path`. Entries already in the
    /// file are kept, so several commands can share one cassette.
    pub fn record(inner: Backends, path: &Path) -> Result<Self, BackendError> {
        let entries = if path.exists() {
            load(path)?
        } else {
            BTreeMap::new()
        };
        Ok(Cassette {
            mode: CassetteMode::Record,
            entries: Mutex::new(entries),
            path: path.to_path_buf(),
            inner: Some(inner),
        })
    }

    pub fn mode(&self) -> CassetteMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes all entries sorted by hash. A no-op in replay mode.
    pub fn save(&self) -> Result<(), BackendError> {
        if self.mode == CassetteMode::Replay {
            return Ok(());
        }
        let entries: Vec<Entry> = self
            .entries
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .values()
            .cloned()
            .collect();
        write_jsonl(&self.path, &entries).map_err(|e| self.io_error(e))?;
        Ok(())
    }

    fn io_error(&self, err: impl std::fmt::Display) -> BackendError {
        BackendError::Cassette {
            path: self.path.display().to_string(),
            reason: err.to_string(),
        }
    }

    fn inner(&self) -> &Backends {
        self.inner
            .as_ref()
            .expect("record mode always wraps backends")
    }

    fn serve<T: Serialize + DeserializeOwned>(
        &self,
        kind: &str,
        hash: String,
        live: impl FnOnce(&Backends) -> Result<T, BackendError>,
    ) -> Result<T, BackendError> {
        match self.mode {
            CassetteMode::Replay => {
                let entries = self.entries.lock().unwrap_or_else(|e| e.into_inner());
                let entry = entries
                    .get(&hash)
                    .ok_or_else(|| BackendError::CassetteMiss(hash.clone()))?;
                serde_json::from_value(entry.response.clone())
                    .map_err(|e| self.io_error(format!("entry {hash}: {e}")))
            }
            CassetteMode::Record => {
                let value = live(self.inner())?;
                let response = serde_json::to_value(&value).map_err(|e| self.io_error(e))?;
                self.entries
                    .lock()
                    .unwrap_or_else(|e| e.into_inner())
                    .insert(
                        hash.clone(),
                        Entry {
                            hash,
                            kind: kind.to_string(),
                            response,
                        },
                    );
                Ok(value)
            }
        }
    }
}

fn load(path: &Path) -> Result<BTreeMap<String, Entry>, BackendError> {
    let entries: Vec<Entry> = read_jsonl(path).map_err(|e| BackendError::Cassette {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    Ok(entries.into_iter().map(|e| (e.hash.clone(), e)).collect())
}

fn keyed(kind: &str, request: &Value) -> String {
    sha256_hex(format!("{kind}:{request}").as_bytes())
}

impl ChatBackend for Cassette {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.serve("chat", request.hash(), |b| b.chat.complete(request))
    }
}

impl SearchBackend for Cassette {
    fn search(&self, query: &str, top_k: usize) -> Result<Vec<EvidenceDoc>, BackendError> {
        let hash = keyed("search", &json!({ "query": query, "top_k": top_k }));
        self.serve("search", hash, |b| b.search.search(query, top_k))
    }
}

impl ClaimExtractor for Cassette {
    fn extract(&self, text: &str) -> Result<Vec<String>, BackendError> {
        let hash = keyed("extract", &json!({ "text": text }));
        self.serve("extract", hash, |b| b.extractor.extract(text))
    }
}

impl ClaimVerifier for Cassette {
    fn verify(&self, claim: &str, evidence: &[EvidenceDoc]) -> Result<Verdict, BackendError> {
        let hash = keyed("verify", &json!({ "claim": claim, "evidence": evidence }));
        self.serve("verify", hash, |b| b.verifier.verify(claim, evidence))
    }
}

impl SupportJudge for Cassette {
    fn is_supported(&self, claim: &str, context: &str) -> Result<bool, BackendError> {
        let hash = keyed("judge", &json!({ "claim": claim, "context": context }));
        self.serve("judge", hash, |b| b.judge.is_supported(claim, context))
    }
}
