//! Claim extraction, verification and support judging done by prompting a
//! chat model.

use std::sync::Arc;

use super::{
    BackendError, ChatBackend, ChatRequest, ClaimExtractor, ClaimVerifier, EvidenceDoc,
    SupportJudge,
};
use crate::trace::Verdict;

const NO_CLAIMS: &str = "No verifiable claim.";

fn extraction_prompt(text: &str) -> String {
    format!(
        "Extract every verifiable factual claim from the text below. Write each claim on its own \
         line as a short, self-contained sentence that can be checked against a search engine. \
         Skip opinions, hedges, and statements about the reasoning process itself. If the text \
         contains no verifiable claim, write exactly: {NO_CLAIMS}\n\nText:\n{text}\n\nClaims:"
    )
}

fn verification_prompt(claim: &str, evidence: &[EvidenceDoc]) -> String {
    let mut snippets = String::new();
    for (i, doc) in evidence.iter().enumerate() {
        snippets.push_str(&format!("[{}] {}\n", i + 1, doc.snippet.trim()));
    }
    format!(
        "Decide whether the claim is supported by the evidence snippets. Answer with exactly one \
         word: Supported or Unsupported.\n\nClaim: {claim}\n\nEvidence:\n{snippets}\nAnswer:"
    )
}

fn support_prompt(claim: &str, context: &str) -> String {
    format!(
        "Is the statement fully supported by the context, without adding outside knowledge? \
         Answer with exactly one word: Yes or No.\n\nContext:\n{context}\n\nStatement: {claim}\n\nAnswer:"
    )
}

fn strip_list_marker(line: &str) -> &str {
    let line = line.trim();
    let line = line.trim_start_matches(['-', '*', '•']).trim_start();
    match line.split_once(['.', ')']) {
        Some((n, rest)) if !n.is_empty() && n.chars().all(|c| c.is_ascii_digit()) => rest.trim(),
        _ => line,
    }
}

fn first_word(text: &str) -> String {
    text.split(|c: char| !c.is_alphabetic())
        .find(|w| !w.is_empty())
        .unwrap_or("")
        .to_lowercase()
}

pub struct ChatClaimExtractor {
    chat: Arc<dyn ChatBackend>,
    model: String,
}

impl ChatClaimExtractor {
    pub fn new(chat: Arc<dyn ChatBackend>, model: String) -> Self {
        ChatClaimExtractor { chat, model }
    }
}

impl ClaimExtractor for ChatClaimExtractor {
    fn extract(&self, text: &str) -> Result<Vec<String>, BackendError> {
        let reply = self.chat.complete(&ChatRequest::deterministic(
            &self.model,
            extraction_prompt(text),
        ))?;
        Ok(reply
            .content
            .lines()
            .map(strip_list_marker)
            .filter(|l| !l.is_empty() && !l.eq_ignore_ascii_case(NO_CLAIMS))
            .map(str::to_string)
            .collect())
    }
}

pub struct ChatClaimVerifier {
    chat: Arc<dyn ChatBackend>,
    model: String,
}

impl ChatClaimVerifier {
    pub fn new(chat: Arc<dyn ChatBackend>, model: String) -> Self {
        ChatClaimVerifier { chat, model }
    }
}

impl ClaimVerifier for ChatClaimVerifier {
    fn verify(&self, claim: &str, evidence: &[EvidenceDoc]) -> Result<Verdict, BackendError> {
        if evidence.is_empty() {
            return Ok(Verdict::Unverified);
        }
        let reply = self.chat.complete(&ChatRequest::deterministic(
            &self.model,
            verification_prompt(claim, evidence),
        ))?;
        Ok(match first_word(&reply.content).as_str() {
            "supported" => Verdict::Supported,
            "unsupported" | "not" => Verdict::Unsupported,
            other => {
                log::warn!("unrecognised verification reply `{other}`; treating as unverified");
                Verdict::Unverified
            }
        })
    }
}

pub struct ChatSupportJudge {
    chat: Arc<dyn ChatBackend>,
    model: String,
}

impl ChatSupportJudge {
    pub fn new(chat: Arc<dyn ChatBackend>, model: String) -> Self {
        ChatSupportJudge { chat, model }
    }
}

impl SupportJudge for ChatSupportJudge {
    fn is_supported(&self, claim: &str, context: &str) -> Result<bool, BackendError> {
        let reply = self.chat.complete(&ChatRequest::deterministic(
            &self.model,
            support_prompt(claim, context),
        ))?;
        Ok(first_word(&reply.content) == "yes")
    }
}
