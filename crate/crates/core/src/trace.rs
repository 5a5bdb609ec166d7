//! Reliability-annotated reasoning traces and the tagged text format.
//!
//! A trace in text form looks like
//!
//! ```text
//! <think>Paris is in France. <reliable> It has 90 million people. <unreliable></think><answer>...</answer>
//! ```
//!
//! Each reliability token follows the step it annotates. Unannotated traces
//! omit the tokens and are segmented into sentence steps with [`split_steps`].
//! Step texts are whitespace-collapsed, so round trips hold modulo whitespace.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::text::{collapse_whitespace, whitespace_tokens};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TraceError {
    #[error("malformed trace: {0}")]
    MalformedTrace(String),
    #[error("unknown label token `{0}`")]
    UnknownLabelToken(String),
    #[error("invalid trace: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Query {
    pub id: String,
    pub text: String,
}

impl Query {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self, TraceError> {
        let query = Query {
            id: id.into(),
            text: text.into(),
        };
        query.validate()?;
        Ok(query)
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        if self.text.trim().is_empty() {
            return Err(TraceError::Invalid(format!(
                "query `{}` has empty text",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Supported,
    Unsupported,
    #[default]
    Unverified,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomicClaim {
    pub text: String,
    #[serde(default)]
    pub verdict: Verdict,
    #[serde(default)]
    pub evidence_ids: Vec<String>,
}

impl AtomicClaim {
    /// A freshly extracted claim, not yet verified.
    pub fn new(text: impl Into<String>) -> Self {
        AtomicClaim {
            text: text.into(),
            verdict: Verdict::Unverified,
            evidence_ids: Vec::new(),
        }
    }

    pub fn with_verdict(mut self, verdict: Verdict) -> Self {
        self.verdict = verdict;
        self
    }
}

/// Verbalized reliability of one reasoning step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ReliabilityLabel {
    Unreliable,
    Reliable,
    Nonverifiable,
}

impl ReliabilityLabel {
    pub const ALL: [ReliabilityLabel; 3] = [
        ReliabilityLabel::Reliable,
        ReliabilityLabel::Unreliable,
        ReliabilityLabel::Nonverifiable,
    ];

    pub fn token(self) -> &'static str {
        match self {
            ReliabilityLabel::Reliable => "<reliable>",
            ReliabilityLabel::Unreliable => "<unreliable>",
            ReliabilityLabel::Nonverifiable => "<nonverifiable>",
        }
    }

    pub fn from_token(token: &str) -> Result<Self, TraceError> {
        match token {
            "<reliable>" => Ok(ReliabilityLabel::Reliable),
            "<unreliable>" => Ok(ReliabilityLabel::Unreliable),
            "<nonverifiable>" => Ok(ReliabilityLabel::Nonverifiable),
            other => Err(TraceError::UnknownLabelToken(other.to_string())),
        }
    }
}

impl fmt::Display for ReliabilityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for ReliabilityLabel {
    type Err = TraceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.starts_with('<') {
            ReliabilityLabel::from_token(s)
        } else {
            ReliabilityLabel::from_token(&format!("<{s}>"))
        }
    }
}

impl Serialize for ReliabilityLabel {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.token())
    }
}

impl<'de> Deserialize<'de> for ReliabilityLabel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningStep {
    /// 1-based position in the trace. Not persisted; reassigned on load.
    #[serde(skip)]
    pub index: usize,
    pub text: String,
    #[serde(default)]
    pub claims: Vec<AtomicClaim>,
    #[serde(default)]
    pub score: Option<f64>,
    #[serde(default)]
    pub label: Option<ReliabilityLabel>,
}

impl ReasoningStep {
    pub fn new(index: usize, text: impl Into<String>) -> Self {
        ReasoningStep {
            index,
            text: text.into(),
            claims: Vec::new(),
            score: None,
            label: None,
        }
    }

    pub fn labeled(index: usize, text: impl Into<String>, label: ReliabilityLabel) -> Self {
        ReasoningStep {
            label: Some(label),
            ..ReasoningStep::new(index, text)
        }
    }

    fn validate(&self) -> Result<(), TraceError> {
        if let Some(score) = self.score {
            if !(0.0..=1.0).contains(&score) {
                return Err(TraceError::Invalid(format!(
                    "step {} score {score} outside [0, 1]",
                    self.index
                )));
            }
            if self.claims.is_empty() {
                return Err(TraceError::Invalid(format!(
                    "step {} has a score but no claims",
                    self.index
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DecodeStats {
    pub think_tokens: u64,
    pub answer_tokens: u64,
    pub wall_seconds: f64,
    /// Set when token counts are whitespace approximations rather than
    /// counts reported by the model backend.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub approximate_tokens: bool,
}

impl DecodeStats {
    /// Whitespace-token approximation from the trace texts.
    pub fn approximate(trace: &AnnotatedTrace, wall_seconds: f64) -> Self {
        DecodeStats {
            think_tokens: trace.steps.iter().map(|s| whitespace_tokens(&s.text)).sum(),
            answer_tokens: whitespace_tokens(trace.final_answer()),
            wall_seconds,
            approximate_tokens: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "TraceRecord")]
pub struct AnnotatedTrace {
    pub query: Query,
    pub steps: Vec<ReasoningStep>,
    pub original_answer: String,
    #[serde(default)]
    pub projected_answer: Option<String>,
    #[serde(default)]
    pub decode_stats: Option<DecodeStats>,
}

#[derive(Deserialize)]
struct TraceRecord {
    query: Query,
    #[serde(default)]
    steps: Vec<ReasoningStep>,
    #[serde(default)]
    original_answer: String,
    #[serde(default)]
    projected_answer: Option<String>,
    #[serde(default)]
    decode_stats: Option<DecodeStats>,
}

impl From<TraceRecord> for AnnotatedTrace {
    fn from(record: TraceRecord) -> Self {
        let mut trace = AnnotatedTrace {
            query: record.query,
            steps: record.steps,
            original_answer: record.original_answer,
            projected_answer: record.projected_answer,
            decode_stats: record.decode_stats,
        };
        trace.renumber();
        trace
    }
}

impl AnnotatedTrace {
    pub fn new(
        query: Query,
        steps: Vec<ReasoningStep>,
        original_answer: impl Into<String>,
    ) -> Self {
        let mut trace = AnnotatedTrace {
            query,
            steps,
            original_answer: original_answer.into(),
            projected_answer: None,
            decode_stats: None,
        };
        trace.renumber();
        trace
    }

    /// Builds a trace from its tagged text form.
    pub fn from_tagged(query: Query, text: &str) -> Result<Self, TraceError> {
        let body = parse_trace(text)?;
        Ok(AnnotatedTrace::new(query, body.steps, body.answer))
    }

    pub fn body(&self) -> TraceBody {
        TraceBody {
            steps: self.steps.clone(),
            answer: self.original_answer.clone(),
        }
    }

    /// The answer a reader would see: projected if present, else original.
    pub fn final_answer(&self) -> &str {
        self.projected_answer
            .as_deref()
            .unwrap_or(&self.original_answer)
    }

    pub fn renumber(&mut self) {
        for (i, step) in self.steps.iter_mut().enumerate() {
            step.index = i + 1;
        }
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.steps.iter().all(|s| s.label.is_some())
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        self.query.validate()?;
        for (i, step) in self.steps.iter().enumerate() {
            if step.index != i + 1 {
                return Err(TraceError::Invalid(format!(
                    "step ordinal {} at position {}",
                    step.index,
                    i + 1
                )));
            }
            step.validate()?;
        }
        Ok(())
    }
}

/// Steps and answer of a trace, as recovered from the tagged text format.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceBody {
    pub steps: Vec<ReasoningStep>,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledStep {
    pub text: String,
    pub label: ReliabilityLabel,
}

/// One supervision example: query, labeled reasoning, projected answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingTuple {
    pub query: Query,
    pub steps: Vec<LabeledStep>,
    pub projected_answer: String,
}

impl TrainingTuple {
    pub fn from_trace(trace: &AnnotatedTrace) -> Result<Self, TraceError> {
        let steps = trace
            .steps
            .iter()
            .map(|s| {
                s.label
                    .map(|label| LabeledStep {
                        text: s.text.clone(),
                        label,
                    })
                    .ok_or_else(|| TraceError::Invalid(format!("step {} is unlabeled", s.index)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let tuple = TrainingTuple {
            query: trace.query.clone(),
            steps,
            projected_answer: trace.projected_answer.clone().unwrap_or_default(),
        };
        tuple.validate()?;
        Ok(tuple)
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        self.query.validate()?;
        if self.projected_answer.trim().is_empty() {
            return Err(TraceError::Invalid(format!(
                "tuple for query `{}` has an empty projected answer",
                self.query.id
            )));
        }
        if let Some(step) = self.steps.iter().find(|s| s.text.trim().is_empty()) {
            return Err(TraceError::Invalid(format!(
                "tuple for query `{}` has an empty step labeled {}",
                self.query.id, step.label
            )));
        }
        Ok(())
    }
}

fn ends_sentence(c: char) -> bool {
    matches!(c, '.' | '?' | '!')
}

/// Segments raw reasoning text into sentence steps.
///
/// A step ends at `.`, `?` or `!` when followed by whitespace or end of input,
/// and at every newline. There is no abbreviation handling: `Dr. Smith` is
/// two steps.
pub fn split_steps(think_text: &str) -> Vec<String> {
    let mut steps = Vec::new();
    let mut current = String::new();
    let mut chars = think_text.chars().peekable();
    let mut flush = |current: &mut String| {
        let step = collapse_whitespace(current);
        if !step.is_empty() {
            steps.push(step);
        }
        current.clear();
    };
    while let Some(c) = chars.next() {
        if c == '\n' {
            flush(&mut current);
            continue;
        }
        current.push(c);
        if ends_sentence(c) && chars.peek().is_none_or(|n| n.is_whitespace()) {
            flush(&mut current);
        }
    }
    flush(&mut current);
    steps
}

/// Inverse of [`split_steps`]: steps ending in sentence punctuation are joined
/// with a space, other steps with a newline so the boundary survives.
pub fn join_steps<S: AsRef<str>>(steps: &[S]) -> String {
    let mut out = String::new();
    for (i, step) in steps.iter().enumerate() {
        let step = step.as_ref();
        out.push_str(step);
        if i + 1 < steps.len() {
            out.push(step_separator(step));
        }
    }
    out
}

fn step_separator(step: &str) -> char {
    if step.chars().last().is_some_and(ends_sentence) {
        ' '
    } else {
        '\n'
    }
}

fn tag_pattern() -> &'static Regex {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    PATTERN.get_or_init(|| Regex::new(r"<[A-Za-z_]+>").expect("valid tag regex"))
}

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";
const ANSWER_OPEN: &str = "<answer>";
const ANSWER_CLOSE: &str = "</answer>";

fn expect_once(text: &str, delimiter: &str) -> Result<usize, TraceError> {
    match text.matches(delimiter).count() {
        1 => Ok(text.find(delimiter).expect("counted once")),
        0 => Err(TraceError::MalformedTrace(format!("missing {delimiter}"))),
        n => Err(TraceError::MalformedTrace(format!(
            "{delimiter} appears {n} times"
        ))),
    }
}

/// Parses the tagged text form into steps and answer.
///
/// Text before a label token is one labeled step. Text after the last token
/// (or the whole block, for unannotated traces) is split into unlabeled
/// sentence steps.
pub fn parse_trace(text: &str) -> Result<TraceBody, TraceError> {
    let think_open = expect_once(text, THINK_OPEN)?;
    let think_close = expect_once(text, THINK_CLOSE)?;
    let answer_open = expect_once(text, ANSWER_OPEN)?;
    let answer_close = expect_once(text, ANSWER_CLOSE)?;
    if !(think_open < think_close && think_close < answer_open && answer_open < answer_close) {
        return Err(TraceError::MalformedTrace(
            "expected <think>…</think> followed by <answer>…</answer>".into(),
        ));
    }
    let outside = [
        &text[..think_open],
        &text[think_close + THINK_CLOSE.len()..answer_open],
        &text[answer_close + ANSWER_CLOSE.len()..],
    ];
    if outside.iter().any(|s| !s.trim().is_empty()) {
        return Err(TraceError::MalformedTrace(
            "text outside the think and answer blocks".into(),
        ));
    }
    let think = &text[think_open + THINK_OPEN.len()..think_close];
    let answer = text[answer_open + ANSWER_OPEN.len()..answer_close].trim();

    let mut steps = Vec::new();
    let mut cursor = 0;
    for token in tag_pattern().find_iter(think) {
        let label = ReliabilityLabel::from_token(token.as_str())?;
        let step_text = collapse_whitespace(&think[cursor..token.start()]);
        if step_text.is_empty() {
            return Err(TraceError::MalformedTrace(format!(
                "label {} does not follow any step text",
                token.as_str()
            )));
        }
        steps.push(ReasoningStep::labeled(steps.len() + 1, step_text, label));
        cursor = token.end();
    }
    for step_text in split_steps(&think[cursor..]) {
        steps.push(ReasoningStep::new(steps.len() + 1, step_text));
    }
    Ok(TraceBody {
        steps,
        answer: answer.to_string(),
    })
}

/// Renders the reasoning block content: each step followed by its token.
pub fn render_reasoning(steps: &[ReasoningStep]) -> String {
    let mut out = String::new();
    for (i, step) in steps.iter().enumerate() {
        out.push_str(&step.text);
        match step.label {
            Some(label) => {
                out.push(' ');
                out.push_str(label.token());
                if i + 1 < steps.len() {
                    out.push(' ');
                }
            }
            None if i + 1 < steps.len() => out.push(step_separator(&step.text)),
            None => {}
        }
    }
    out
}

/// Emits the canonical tagged text form of a trace's reasoning and answer.
pub fn serialize_trace(trace: &AnnotatedTrace) -> String {
    serialize_parts(&trace.steps, &trace.original_answer)
}

pub fn serialize_parts(steps: &[ReasoningStep], answer: &str) -> String {
    format!(
        "{THINK_OPEN}{}{THINK_CLOSE}{ANSWER_OPEN}{answer}{ANSWER_CLOSE}",
        render_reasoning(steps)
    )
}
