//! Claim extraction, evidence-backed verification and per-step factuality.
//!
//! A step's factuality score is the fraction of its atomic claims that the
//! verifier marks as supported. Unverified claims (no evidence, unknown to
//! the verifier) stay in the denominator. A step with no claims has no
//! score and is later labeled nonverifiable.

use serde::{Deserialize, Serialize};

use crate::backends::{BackendError, Backends, ClaimExtractor, ClaimVerifier, EvidenceDoc};
use crate::exec::Exec;
use crate::text::{collapse_whitespace, is_filler, words};
use crate::trace::{split_steps, AnnotatedTrace, AtomicClaim, Verdict};

/// Snippets retrieved per claim.
pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepScore {
    pub supported: usize,
    pub total: usize,
    pub value: Option<f64>,
}

impl StepScore {
    /// Supported fraction, or 1 when there is nothing to get wrong.
    pub fn factuality_or_vacuous(&self) -> f64 {
        self.value.unwrap_or(1.0)
    }
}

/// The mock extraction rule: split into sentences, then on `;`, and keep each
/// clause that has at least one alphabetic word other than a filler such as
/// "hmm" or "okay".
pub fn mock_clause_claims(text: &str) -> Vec<String> {
    split_steps(text)
        .iter()
        .flat_map(|sentence| sentence.split(';'))
        .map(collapse_whitespace)
        .filter(|clause| {
            words(clause).any(|w| w.chars().any(char::is_alphabetic) && !is_filler(&w))
        })
        .collect()
}

pub fn extract_claims(
    step_text: &str,
    extractor: &dyn ClaimExtractor,
) -> Result<Vec<AtomicClaim>, BackendError> {
    if step_text.trim().is_empty() {
        return Ok(Vec::new());
    }
    Ok(extractor
        .extract(step_text)?
        .into_iter()
        .filter(|c| !c.trim().is_empty())
        .map(AtomicClaim::new)
        .collect())
}

pub fn verify_claim(
    claim: &AtomicClaim,
    evidence: &[EvidenceDoc],
    verifier: &dyn ClaimVerifier,
) -> Result<Verdict, BackendError> {
    verifier.verify(&claim.text, evidence)
}

pub fn score_step(claims: &[AtomicClaim]) -> StepScore {
    let total = claims.len();
    let supported = claims
        .iter()
        .filter(|c| c.verdict == Verdict::Supported)
        .count();
    StepScore {
        supported,
        total,
        value: (total > 0).then(|| supported as f64 / total as f64),
    }
}

/// Extracts the claims in `text`, retrieves evidence for each (claim text as
/// the query) and records the verdict and evidence ids.
pub fn verify_text(
    text: &str,
    backends: &Backends,
    top_k: usize,
) -> Result<Vec<AtomicClaim>, BackendError> {
    let mut claims = extract_claims(text, backends.extractor.as_ref())?;
    for claim in &mut claims {
        let evidence = backends.search.search(&claim.text, top_k)?;
        claim.verdict = verify_claim(claim, &evidence, backends.verifier.as_ref())?;
        claim.evidence_ids = evidence.into_iter().map(|d| d.id).collect();
    }
    Ok(claims)
}

/// Claims and factuality of a free-text response.
pub fn score_text(
    text: &str,
    backends: &Backends,
    top_k: usize,
) -> Result<StepScore, BackendError> {
    Ok(score_step(&verify_text(text, backends, top_k)?))
}

/// Returns `trace` with claims and a factuality score on every step.
/// Existing labels are left as they are.
pub fn score_trace(
    trace: &AnnotatedTrace,
    backends: &Backends,
    top_k: usize,
) -> Result<AnnotatedTrace, BackendError> {
    let mut scored = trace.clone();
    for step in &mut scored.steps {
        step.claims = verify_text(&step.text, backends, top_k)?;
        step.score = score_step(&step.claims).value;
    }
    Ok(scored)
}

pub fn score_traces(
    traces: &[AnnotatedTrace],
    backends: &Backends,
    top_k: usize,
    exec: Exec,
) -> Result<Vec<AnnotatedTrace>, BackendError> {
    exec.try_map(traces, |t| score_trace(t, backends, top_k))
}
