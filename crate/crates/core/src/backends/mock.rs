//! Deterministic in-process backends driven by fixture tables.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{
    sha256_hex, BackendError, ChatBackend, ChatRequest, ChatResponse, ClaimExtractor,
    ClaimVerifier, EvidenceDoc, SearchBackend, SupportJudge,
};
use crate::curation::projection::{parse_projection_prompt, reference_projection};
use crate::io::{read_json, JsonlError};
use crate::text::{content_words, whitespace_tokens};
use crate::trace::Verdict;
use crate::verification::mock_clause_claims;

/// Key under which a prompt is scripted: SHA-256 hex of the rendered prompt.
pub fn prompt_key(prompt: &str) -> String {
    sha256_hex(prompt.as_bytes())
}

/// One scripted reply: text, or a failure with the given HTTP status.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptStep {
    Text(String),
    Fail { fail: u16 },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ScriptEntry {
    One(ScriptStep),
    Many(Vec<ScriptStep>),
}

/// Chat backend answering from a script keyed by [`prompt_key`] of the first
/// user message. Repeated calls with the same prompt walk through the
/// scripted list, repeating its last element.
///
/// With reference projection enabled, unscripted answer-projection prompts
/// are answered by the content-word reference projection.
pub struct MockChat {
    script: HashMap<String, Vec<ScriptStep>>,
    cursor: Mutex<HashMap<String, usize>>,
    calls: AtomicUsize,
    reference_projection: bool,
}

impl MockChat {
    pub fn new(script: HashMap<String, Vec<ScriptStep>>) -> Self {
        MockChat {
            script,
            cursor: Mutex::new(HashMap::new()),
            calls: AtomicUsize::new(0),
            reference_projection: false,
        }
    }

    pub fn with_reference_projection(mut self) -> Self {
        self.reference_projection = true;
        self
    }

    /// Total number of `complete` calls served, including failures.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn reply(content: String, request: &ChatRequest) -> ChatResponse {
        ChatResponse {
            prompt_tokens: request
                .messages
                .iter()
                .map(|m| whitespace_tokens(&m.content))
                .sum(),
            completion_tokens: whitespace_tokens(&content),
            content,
        }
    }
}

impl ChatBackend for MockChat {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        request.validate()?;
        let prompt = request.prompt();
        let key = prompt_key(prompt);
        if let Some(steps) = self.script.get(&key).filter(|s| !s.is_empty()) {
            let position = {
                let mut cursor = self.cursor.lock().unwrap_or_else(|e| e.into_inner());
                let slot = cursor.entry(key).or_insert(0);
                let position = (*slot).min(steps.len() - 1);
                *slot += 1;
                position
            };
            return match &steps[position] {
                ScriptStep::Text(text) => Ok(Self::reply(text.clone(), request)),
                ScriptStep::Fail { fail } => Err(match *fail {
                    401 | 403 => BackendError::AuthFailure { status: *fail },
                    500..=599 => BackendError::Transient(format!("scripted HTTP {fail}")),
                    status => BackendError::Rejected {
                        status,
                        body: "scripted failure".into(),
                    },
                }),
            };
        }
        if self.reference_projection {
            if let Some((steps, answer)) = parse_projection_prompt(prompt) {
                let projected = reference_projection(&steps, &answer);
                return Ok(Self::reply(
                    format!("<revised_answer>{projected}</revised_answer>"),
                    request,
                ));
            }
        }
        Err(BackendError::Rejected {
            status: 404,
            body: format!("no scripted response for prompt {key}"),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub key: String,
    pub documents: Vec<EvidenceDoc>,
}

/// Search over a local corpus. An entry matches when its key occurs in the
/// query (case-insensitive); hits keep corpus order.
pub struct MockSearch {
    corpus: Vec<CorpusEntry>,
}

impl MockSearch {
    pub fn new(corpus: Vec<CorpusEntry>) -> Self {
        MockSearch { corpus }
    }
}

impl SearchBackend for MockSearch {
    fn search(&self, query: &str, top_k: usize) -> Result<Vec<EvidenceDoc>, BackendError> {
        if query.trim().is_empty() || top_k == 0 {
            return Err(BackendError::InvalidRequest(
                "search needs a non-empty query and top_k >= 1".into(),
            ));
        }
        let query = query.to_lowercase();
        let mut seen = BTreeSet::new();
        Ok(self
            .corpus
            .iter()
            .filter(|e| query.contains(&e.key.to_lowercase()))
            .flat_map(|e| e.documents.iter())
            .filter(|d| seen.insert(d.id.clone()))
            .take(top_k)
            .cloned()
            .collect())
    }
}

/// One claim per clause, split on sentence boundaries and `;`.
pub struct MockClaimExtractor;

impl ClaimExtractor for MockClaimExtractor {
    fn extract(&self, text: &str) -> Result<Vec<String>, BackendError> {
        Ok(mock_clause_claims(text))
    }
}

/// Verdicts from a table keyed by exact claim text; unknown claims are
/// unverified.
pub struct FixtureVerifier {
    table: HashMap<String, Verdict>,
}

impl FixtureVerifier {
    pub fn new(table: HashMap<String, Verdict>) -> Self {
        FixtureVerifier { table }
    }
}

impl ClaimVerifier for FixtureVerifier {
    fn verify(&self, claim: &str, _evidence: &[EvidenceDoc]) -> Result<Verdict, BackendError> {
        Ok(self
            .table
            .get(claim)
            .copied()
            .unwrap_or(Verdict::Unverified))
    }
}

/// Supported iff every content word of the claim occurs in the context.
pub struct ContainmentJudge;

impl SupportJudge for ContainmentJudge {
    fn is_supported(&self, claim: &str, context: &str) -> Result<bool, BackendError> {
        let context = content_words(context);
        Ok(content_words(claim).is_subset(&context))
    }
}

/// Fixture tables for [`super::Backends::mock`].
#[derive(Debug, Clone, Default)]
pub struct MockFixtures {
    pub chat_script: HashMap<String, Vec<ScriptStep>>,
    pub verdicts: HashMap<String, Verdict>,
    pub corpus: Vec<CorpusEntry>,
}

impl MockFixtures {
    pub const CHAT_SCRIPT: &'static str = "chat_script.json";
    pub const VERDICTS: &'static str = "verdicts.json";
    pub const CORPUS: &'static str = "corpus.json";

    /// Loads whichever of the three fixture files exist in `dir`.
    pub fn load(dir: &Path) -> Result<Self, JsonlError> {
        let mut fixtures = MockFixtures::default();
        let script_path = dir.join(Self::CHAT_SCRIPT);
        if script_path.exists() {
            let raw: HashMap<String, ScriptEntry> = read_json(&script_path)?;
            fixtures.chat_script = raw
                .into_iter()
                .map(|(k, v)| match v {
                    ScriptEntry::One(step) => (k, vec![step]),
                    ScriptEntry::Many(steps) => (k, steps),
                })
                .collect();
        }
        let verdicts_path = dir.join(Self::VERDICTS);
        if verdicts_path.exists() {
            fixtures.verdicts = read_json(&verdicts_path)?;
        }
        let corpus_path = dir.join(Self::CORPUS);
        if corpus_path.exists() {
            fixtures.corpus = read_json(&corpus_path)?;
        }
        Ok(fixtures)
    }
}
