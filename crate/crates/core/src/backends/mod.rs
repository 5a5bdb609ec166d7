//! External-service boundary.
//!
//! Five capabilities are modelled as traits: chat completion, evidence
//! search, claim extraction, claim verification, and support judging. Each
//! has an HTTP/LLM-backed implementation and a deterministic mock, and all of
//! them can be wrapped by a [`Cassette`] for record/replay.

mod cassette;
mod http;
mod llm;
mod mock;
mod resilient;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::trace::Verdict;

pub use cassette::{Cassette, CassetteMode};
pub use http::{HttpChatClient, HttpSearchClient};
pub use llm::{ChatClaimExtractor, ChatClaimVerifier, ChatSupportJudge};
pub use mock::{
    prompt_key, ContainmentJudge, CorpusEntry, FixtureVerifier, MockChat, MockClaimExtractor,
    MockFixtures, MockSearch, ScriptStep,
};
pub use resilient::{backoff_delay, chat_complete, retry, Resilient, Semaphore, Sleeper};

/// Environment variable holding the chat endpoint base URL.
pub const API_BASE_ENV: &str = "CAG_API_BASE";
/// Environment variable holding the bearer credential.
pub const API_KEY_ENV: &str = "CAG_API_KEY";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend unavailable after {attempts} attempt(s): {reason}")]
    Unavailable { attempts: u32, reason: String },
    #[error("authentication failed (HTTP {status})")]
    AuthFailure { status: u16 },
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    /// A single attempt hit a retryable transport or server failure.
    #[error("transient failure: {0}")]
    Transient(String),
    /// A single attempt exceeded the per-request timeout.
    #[error("attempt timed out")]
    TimedOut,
    #[error("request rejected with HTTP {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    Protocol(String),
    #[error("no recorded response for request {0}")]
    CassetteMiss(String),
    #[error("cassette {path}: {reason}")]
    Cassette { path: String, reason: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transient(_) | BackendError::TimedOut)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

impl ChatRequest {
    /// A single-turn request at temperature 0, the setting used for judges
    /// and projection.
    pub fn deterministic(model: impl Into<String>, prompt: impl Into<String>) -> Self {
        ChatRequest {
            model: model.into(),
            messages: vec![ChatMessage::user(prompt)],
            temperature: 0.0,
            max_tokens: None,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() {
            return Err(BackendError::InvalidRequest("no messages".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {} is negative",
                self.temperature
            )));
        }
        Ok(())
    }

    /// The first user message: the rendered prompt that mocks are keyed by.
    pub fn prompt(&self) -> &str {
        self.messages
            .iter()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }

    /// SHA-256 over model, messages and temperature. `max_tokens` is left out
    /// so tuning token limits keeps recordings valid.
    pub fn hash(&self) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            model: &'a str,
            messages: &'a [ChatMessage],
            temperature: f64,
        }
        let key = Key {
            model: &self.model,
            messages: &self.messages,
            temperature: self.temperature,
        };
        sha256_hex(&serde_json::to_vec(&key).expect("request serializes"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceDoc {
    pub id: String,
    #[serde(default)]
    pub url: Option<String>,
    pub snippet: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendPolicy {
    pub max_concurrency: usize,
    pub retries: u32,
    pub backoff_base_ms: u64,
    pub timeout_ms: u64,
}

impl Default for BackendPolicy {
    fn default() -> Self {
        BackendPolicy {
            max_concurrency: 8,
            retries: 3,
            backoff_base_ms: 500,
            timeout_ms: 120_000,
        }
    }
}

impl BackendPolicy {
    pub const MAX_RETRIES: u32 = 5;

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_concurrency == 0
            || self.retries == 0
            || self.backoff_base_ms == 0
            || self.timeout_ms == 0
        {
            return Err(BackendError::InvalidRequest(
                "backend policy fields must all be positive".into(),
            ));
        }
        if self.retries > Self::MAX_RETRIES {
            return Err(BackendError::InvalidRequest(format!(
                "retries {} exceeds {}",
                self.retries,
                Self::MAX_RETRIES
            )));
        }
        Ok(())
    }
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

pub trait SearchBackend: Send + Sync {
    fn search(&self, query: &str, top_k: usize) -> Result<Vec<EvidenceDoc>, BackendError>;
}

pub trait ClaimExtractor: Send + Sync {
    /// Atomic claim texts found in `text`, possibly none.
    fn extract(&self, text: &str) -> Result<Vec<String>, BackendError>;
}

pub trait ClaimVerifier: Send + Sync {
    fn verify(&self, claim: &str, evidence: &[EvidenceDoc]) -> Result<Verdict, BackendError>;
}

pub trait SupportJudge: Send + Sync {
    /// Whether `claim` is entailed by `context` without outside knowledge.
    fn is_supported(&self, claim: &str, context: &str) -> Result<bool, BackendError>;
}

macro_rules! forward_arc {
    ($trait:ident, $method:ident ( $($arg:ident : $ty:ty),* ) -> $ret:ty) => {
        impl<T: $trait + ?Sized> $trait for Arc<T> {
            fn $method(&self, $($arg: $ty),*) -> $ret {
                (**self).$method($($arg),*)
            }
        }
    };
}

forward_arc!(ChatBackend, complete(request: &ChatRequest) -> Result<ChatResponse, BackendError>);
forward_arc!(SearchBackend, search(query: &str, top_k: usize) -> Result<Vec<EvidenceDoc>, BackendError>);
forward_arc!(ClaimExtractor, extract(text: &str) -> Result<Vec<String>, BackendError>);
forward_arc!(ClaimVerifier, verify(claim: &str, evidence: &[EvidenceDoc]) -> Result<Verdict, BackendError>);
forward_arc!(SupportJudge, is_supported(claim: &str, context: &str) -> Result<bool, BackendError>);

/// Model names used for each role in the pipeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoleModels {
    pub generator: String,
    pub judge: String,
    pub verifier: String,
    pub projector: String,
}

impl Default for RoleModels {
    fn default() -> Self {
        RoleModels {
            generator: "generator".into(),
            judge: "judge".into(),
            verifier: "verifier".into(),
            projector: "projector".into(),
        }
    }
}

/// The full capability set a pipeline run needs.
#[derive(Clone)]
pub struct Backends {
    pub chat: Arc<dyn ChatBackend>,
    pub search: Arc<dyn SearchBackend>,
    pub extractor: Arc<dyn ClaimExtractor>,
    pub verifier: Arc<dyn ClaimVerifier>,
    pub judge: Arc<dyn SupportJudge>,
    pub models: RoleModels,
}

impl Backends {
    /// Deterministic in-process backends driven by fixture tables.
    pub fn mock(fixtures: MockFixtures) -> Self {
        let MockFixtures {
            chat_script,
            verdicts,
            corpus,
        } = fixtures;
        Backends {
            chat: Arc::new(MockChat::new(chat_script).with_reference_projection()),
            search: Arc::new(MockSearch::new(corpus)),
            extractor: Arc::new(MockClaimExtractor),
            verifier: Arc::new(FixtureVerifier::new(verdicts)),
            judge: Arc::new(ContainmentJudge),
            models: RoleModels::default(),
        }
    }

    /// Live backends: an OpenAI-compatible chat endpoint plus a JSON search
    /// endpoint, with extraction, verification and judging done by prompting
    /// the chat model. Both clients are wrapped with retry and a shared
    /// concurrency limit.
    pub fn http(
        chat: HttpChatClient,
        search: HttpSearchClient,
        models: RoleModels,
        policy: BackendPolicy,
    ) -> Self {
        let chat: Arc<dyn ChatBackend> = Arc::new(Resilient::new(chat, policy));
        let search: Arc<dyn SearchBackend> = Arc::new(Resilient::new(search, policy));
        Backends {
            extractor: Arc::new(ChatClaimExtractor::new(
                chat.clone(),
                models.verifier.clone(),
            )),
            verifier: Arc::new(ChatClaimVerifier::new(
                chat.clone(),
                models.verifier.clone(),
            )),
            judge: Arc::new(ChatSupportJudge::new(chat.clone(), models.judge.clone())),
            chat,
            search,
            models,
        }
    }

    /// Routes every capability through `cassette`.
    pub fn via_cassette(cassette: Arc<Cassette>, models: RoleModels) -> Self {
        Backends {
            chat: cassette.clone(),
            search: cassette.clone(),
            extractor: cassette.clone(),
            verifier: cassette.clone(),
            judge: cassette,
            models,
        }
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
