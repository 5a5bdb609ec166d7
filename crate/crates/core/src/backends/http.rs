use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse, EvidenceDoc, SearchBackend};
use crate::text::whitespace_tokens;

fn agent(timeout_ms: u64) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_millis(timeout_ms)))
        .http_status_as_error(false)
        .build()
        .into()
}

fn transport_error(err: ureq::Error) -> BackendError {
    match err {
        ureq::Error::Timeout(_) => BackendError::TimedOut,
        other => BackendError::Transient(other.to_string()),
    }
}

/// Maps a non-2xx status to an error. 5xx is retryable; 4xx is not.
fn status_error(status: u16, body: String) -> BackendError {
    match status {
        401 | 403 => BackendError::AuthFailure { status },
        500..=599 => BackendError::Transient(format!("HTTP {status}: {body}")),
        _ => BackendError::Rejected { status, body },
    }
}

fn post_json(
    agent: &ureq::Agent,
    url: &str,
    bearer: Option<&str>,
    body: &serde_json::Value,
) -> Result<String, BackendError> {
    let mut request = agent.post(url).header("Content-Type", "application/json");
    if let Some(key) = bearer {
        request = request.header("Authorization", &format!("Bearer {key}"));
    }
    let mut response = request.send_json(body).map_err(transport_error)?;
    let status = response.status().as_u16();
    let text = response
        .body_mut()
        .read_to_string()
        .map_err(transport_error)?;
    if !(200..300).contains(&status) {
        return Err(status_error(status, text));
    }
    Ok(text)
}

/// OpenAI-compatible `POST {api_base}/chat/completions` client. One call is
/// one attempt; wrap it in [`super::Resilient`] for retries.
#[derive(Debug, Clone)]
pub struct HttpChatClient {
    endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpChatClient {
    pub fn new(api_base: &str, api_key: Option<String>, timeout_ms: u64) -> Self {
        HttpChatClient {
            endpoint: format!("{}/chat/completions", api_base.trim_end_matches('/')),
            api_key,
            agent: agent(timeout_ms),
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

#[derive(Deserialize)]
struct Completion {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

impl ChatBackend for HttpChatClient {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        let mut body = json!({
            "model": request.model,
            "messages": request.messages,
            "temperature": request.temperature,
        });
        if let Some(max_tokens) = request.max_tokens {
            body["max_tokens"] = json!(max_tokens);
        }
        let text = post_json(&self.agent, &self.endpoint, self.api_key.as_deref(), &body)?;
        let completion: Completion =
            serde_json::from_str(&text).map_err(|e| BackendError::Protocol(e.to_string()))?;
        let content = completion
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::Protocol("response has no message content".into()))?;
        let (prompt_tokens, completion_tokens) = match completion.usage {
            Some(u) => (u.prompt_tokens, u.completion_tokens),
            None => (
                request
                    .messages
                    .iter()
                    .map(|m| whitespace_tokens(&m.content))
                    .sum(),
                whitespace_tokens(&content),
            ),
        };
        Ok(ChatResponse {
            content,
            prompt_tokens,
            completion_tokens,
        })
    }
}

/// JSON search endpoint: `POST {url}` with `{query, top_k}` answering
/// `{documents: [{id, url, snippet}]}`.
#[derive(Debug, Clone)]
pub struct HttpSearchClient {
    url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

#[derive(Serialize, Deserialize)]
struct SearchReply {
    documents: Vec<EvidenceDoc>,
}

impl HttpSearchClient {
    pub fn new(url: &str, api_key: Option<String>, timeout_ms: u64) -> Self {
        HttpSearchClient {
            url: url.to_string(),
            api_key,
            agent: agent(timeout_ms),
        }
    }
}

impl SearchBackend for HttpSearchClient {
    fn search(&self, query: &str, top_k: usize) -> Result<Vec<EvidenceDoc>, BackendError> {
        if query.trim().is_empty() || top_k == 0 {
            return Err(BackendError::InvalidRequest(
                "search needs a non-empty query and top_k >= 1".into(),
            ));
        }
        let body = json!({ "query": query, "top_k": top_k });
        let text = post_json(&self.agent, &self.url, self.api_key.as_deref(), &body)?;
        let reply: SearchReply =
            serde_json::from_str(&text).map_err(|e| BackendError::Protocol(e.to_string()))?;
        Ok(reply
            .documents
            .into_iter()
            .filter(|d| !d.snippet.trim().is_empty())
            .take(top_k)
            .collect())
    }
}
