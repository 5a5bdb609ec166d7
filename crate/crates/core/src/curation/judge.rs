//! Prompt filtering with the fact-check and knowledge-requirement judges.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::templates::{render_fact_check, render_knowledge_requirement};
use super::CurationError;
use crate::backends::{ChatBackend, ChatMessage, ChatRequest};
use crate::exec::Exec;
use crate::trace::Query;

pub const DEFAULT_KEEP_THRESHOLD: u8 = 4;
const MAX_FACTUAL_SCORE: i64 = 5;

/// Sent after an unparseable judgment, with the original prompt and the bad
/// reply kept in the conversation.
pub const REPROMPT: &str =
    "Your previous reply could not be parsed. Return ONLY the JSON object in the requested format.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptFilterResult {
    pub query: Query,
    pub factual_score: u8,
    pub requires_knowledge: bool,
    pub keep: bool,
    /// Fact-check explanation, then knowledge-requirement explanation.
    pub explanations: [String; 2],
}

/// Sends `prompt`; if `parse` rejects the reply, asks once more in the same
/// conversation before giving up.
fn judge<T>(
    chat: &dyn ChatBackend,
    model: &str,
    prompt: String,
    what: &'static str,
    parse: impl Fn(&str) -> Option<T>,
) -> Result<T, CurationError> {
    let mut request = ChatRequest::deterministic(model, prompt);
    let first = chat.complete(&request)?.content;
    if let Some(parsed) = parse(&first) {
        return Ok(parsed);
    }
    log::warn!("unparseable {what} judgment; asking again");
    request.messages.push(ChatMessage::assistant(first));
    request.messages.push(ChatMessage::user(REPROMPT));
    let second = chat.complete(&request)?.content;
    parse(&second).ok_or(CurationError::UnparseableJudgment {
        what,
        reply: second,
    })
}

/// The first `{…}` object in `reply` that parses as JSON.
fn json_object(reply: &str) -> Option<serde_json::Map<String, Value>> {
    let start = reply.find('{')?;
    let end = reply.rfind('}')?;
    if end < start {
        return None;
    }
    match serde_json::from_str(&reply[start..=end]) {
        Ok(Value::Object(map)) => Some(map),
        _ => None,
    }
}

fn integer(value: &Value) -> Option<i64> {
    match value {
        Value::Number(n) => n
            .as_i64()
            .or_else(|| n.as_f64().filter(|f| f.fract() == 0.0).map(|f| f as i64)),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

fn explanation(map: &serde_json::Map<String, Value>) -> String {
    map.get("explanation")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string()
}

/// Falls back to a `key: value` pattern for replies that are not valid JSON.
fn loose_integer(reply: &str, key: &str) -> Option<i64> {
    static PATTERNS: OnceLock<Vec<(String, Regex)>> = OnceLock::new();
    let patterns = PATTERNS.get_or_init(|| {
        ["factual_score", "requires_factual_knowledge"]
            .into_iter()
            .map(|k| {
                let re =
                    Regex::new(&format!(r#""?{k}"?\s*[:=]\s*"?(-?\d+)"#)).expect("valid regex");
                (k.to_string(), re)
            })
            .collect()
    });
    let (_, re) = patterns.iter().find(|(k, _)| k == key)?;
    re.captures(reply)?.get(1)?.as_str().parse().ok()
}

fn parse_factual(reply: &str) -> Option<(u8, String)> {
    let (raw, why) = match json_object(reply) {
        Some(map) => (integer(map.get("factual_score")?)?, explanation(&map)),
        None => (loose_integer(reply, "factual_score")?, String::new()),
    };
    let clamped = raw.clamp(0, MAX_FACTUAL_SCORE);
    if clamped != raw {
        log::warn!("factual_score {raw} outside 0..=5; clamped to {clamped}");
    }
    Some((clamped as u8, why))
}

fn parse_requires_knowledge(reply: &str) -> Option<(bool, String)> {
    let (raw, why) = match json_object(reply) {
        Some(map) => (
            match map.get("requires_factual_knowledge")? {
                Value::Bool(b) => i64::from(*b),
                other => integer(other)?,
            },
            explanation(&map),
        ),
        None => (
            loose_integer(reply, "requires_factual_knowledge")?,
            String::new(),
        ),
    };
    match raw {
        0 => Some((false, why)),
        1 => Some((true, why)),
        _ => None,
    }
}

pub fn filter_prompt_factual(
    query: &Query,
    chat: &dyn ChatBackend,
    model: &str,
) -> Result<(u8, String), CurationError> {
    judge(
        chat,
        model,
        render_fact_check(&query.text),
        "factual_score",
        parse_factual,
    )
}

pub fn filter_prompt_requires_knowledge(
    query: &Query,
    chat: &dyn ChatBackend,
    model: &str,
) -> Result<(bool, String), CurationError> {
    judge(
        chat,
        model,
        render_knowledge_requirement(&query.text),
        "requires_factual_knowledge",
        parse_requires_knowledge,
    )
}

pub fn filter_prompt(
    query: &Query,
    chat: &dyn ChatBackend,
    model: &str,
    keep_threshold: u8,
) -> Result<PromptFilterResult, CurationError> {
    let (factual_score, factual_why) = filter_prompt_factual(query, chat, model)?;
    let (requires_knowledge, knowledge_why) = filter_prompt_requires_knowledge(query, chat, model)?;
    Ok(PromptFilterResult {
        query: query.clone(),
        factual_score,
        requires_knowledge,
        keep: factual_score >= keep_threshold && requires_knowledge,
        explanations: [factual_why, knowledge_why],
    })
}

pub fn curate_prompts(
    queries: &[Query],
    chat: &dyn ChatBackend,
    model: &str,
    keep_threshold: u8,
    exec: Exec,
) -> Result<Vec<PromptFilterResult>, CurationError> {
    exec.try_map(queries, |q| filter_prompt(q, chat, model, keep_threshold))
}
