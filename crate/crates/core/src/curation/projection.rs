//! Answer projection onto reliable reasoning and its quality checks.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::templates::{projection_frame, render_answer_projection};
use super::CurationError;
use crate::backends::{Backends, ChatBackend, ChatRequest};
use crate::exec::Exec;
use crate::text::content_words;
use crate::trace::{
    parse_trace, render_reasoning, split_steps, AnnotatedTrace, ReasoningStep, ReliabilityLabel,
};
use crate::verification::{score_step, verify_text};

const REVISED_OPEN: &str = "<revised_answer>";
const REVISED_CLOSE: &str = "</revised_answer>";
const REASONING_LEAD: &str = "\nReasoning Process: ";
const ANSWER_LEAD: &str = "\nFinal Answer: ";

fn check_projectable(trace: &AnnotatedTrace) -> Result<(), CurationError> {
    if let Some(step) = trace.steps.iter().find(|s| s.label.is_none()) {
        return Err(CurationError::UnlabeledStep {
            query: trace.query.id.clone(),
            step: step.index,
        });
    }
    if trace.original_answer.trim().is_empty() {
        return Err(CurationError::EmptyAnswer(trace.query.id.clone()));
    }
    Ok(())
}

pub fn render_projection_prompt(trace: &AnnotatedTrace) -> Result<String, CurationError> {
    check_projectable(trace)?;
    Ok(render_answer_projection(
        &trace.query.text,
        &format!("<think>{}</think>", render_reasoning(&trace.steps)),
        &format!("<answer>{}</answer>", trace.original_answer),
    ))
}

/// Recovers the labeled steps and original answer from a rendered projection
/// prompt. `None` if `prompt` is not one, or has unlabeled steps.
pub fn parse_projection_prompt(prompt: &str) -> Option<(Vec<ReasoningStep>, String)> {
    let (head, tail) = projection_frame();
    let body = prompt.strip_prefix(head)?.strip_suffix(tail)?;
    let reasoning_at = body.find(&format!("{REASONING_LEAD}<think>"))?;
    let answer_at = body.rfind(&format!("</think>{ANSWER_LEAD}<answer>"))?;
    if answer_at < reasoning_at {
        return None;
    }
    let think = &body[reasoning_at + REASONING_LEAD.len()..answer_at + "</think>".len()];
    let answer = &body[answer_at + "</think>".len() + ANSWER_LEAD.len()..];
    let parsed = parse_trace(&format!("{think}{answer}")).ok()?;
    parsed
        .steps
        .iter()
        .all(|s| s.label.is_some())
        .then_some((parsed.steps, parsed.answer))
}

/// The content of the last `<revised_answer>…</revised_answer>` span.
pub fn extract_revised_answer(reply: &str) -> Result<String, CurationError> {
    let missing = || CurationError::MissingRevisedAnswerTags(reply.to_string());
    let close = reply.rfind(REVISED_CLOSE).ok_or_else(missing)?;
    let open = reply[..close].rfind(REVISED_OPEN).ok_or_else(missing)?;
    Ok(reply[open + REVISED_OPEN.len()..close].trim().to_string())
}

pub fn project_answer(
    trace: &AnnotatedTrace,
    chat: &dyn ChatBackend,
    model: &str,
) -> Result<String, CurationError> {
    let prompt = render_projection_prompt(trace)?;
    let reply = chat.complete(&ChatRequest::deterministic(model, prompt))?;
    extract_revised_answer(&reply.content)
}

fn vocabulary<'a>(steps: impl IntoIterator<Item = &'a ReasoningStep>) -> BTreeSet<String> {
    steps
        .into_iter()
        .flat_map(|s| content_words(&s.text))
        .collect()
}

fn labeled(
    steps: &[ReasoningStep],
    label: ReliabilityLabel,
) -> impl Iterator<Item = &ReasoningStep> {
    steps.iter().filter(move |s| s.label == Some(label))
}

/// Deterministic stand-in for the projection judge: keeps the answer
/// sentences whose content words all occur in reliable steps. Sentences with
/// no content words are always kept.
pub fn reference_projection(steps: &[ReasoningStep], answer: &str) -> String {
    let reliable = vocabulary(labeled(steps, ReliabilityLabel::Reliable));
    split_steps(answer)
        .into_iter()
        .filter(|sentence| content_words(sentence).is_subset(&reliable))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Content words that occur in unreliable steps and nowhere else in the
/// reasoning.
pub fn unreliable_only_words(steps: &[ReasoningStep]) -> BTreeSet<String> {
    let unreliable = vocabulary(labeled(steps, ReliabilityLabel::Unreliable));
    let others = vocabulary(
        steps
            .iter()
            .filter(|s| s.label != Some(ReliabilityLabel::Unreliable)),
    );
    unreliable.difference(&others).cloned().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionReport {
    /// Supported fraction of the original answer's claims (1 with no claims).
    pub pre_factuality: f64,
    /// Same for the projected answer.
    pub post_factuality: f64,
    /// Every projected claim is supported by the reasoning and original answer.
    pub fully_supported: bool,
    /// Projected claims containing a word found only in unreliable steps.
    pub unreliable_leakage: usize,
}

pub fn check_projection(
    trace: &AnnotatedTrace,
    projected: &str,
    backends: &Backends,
    top_k: usize,
) -> Result<ProjectionReport, CurationError> {
    if projected.trim().is_empty() {
        return Err(CurationError::EmptyProjection(trace.query.id.clone()));
    }
    let original_claims = verify_text(&trace.original_answer, backends, top_k)?;
    let projected_claims = verify_text(projected, backends, top_k)?;

    let mut context: Vec<&str> = trace.steps.iter().map(|s| s.text.as_str()).collect();
    context.push(&trace.original_answer);
    let context = context.join("\n");
    let mut fully_supported = true;
    for claim in &projected_claims {
        if !backends.judge.is_supported(&claim.text, &context)? {
            fully_supported = false;
            break;
        }
    }

    let leaked = unreliable_only_words(&trace.steps);
    let unreliable_leakage = projected_claims
        .iter()
        .filter(|c| !content_words(&c.text).is_disjoint(&leaked))
        .count();

    Ok(ProjectionReport {
        pre_factuality: score_step(&original_claims).factuality_or_vacuous(),
        post_factuality: score_step(&projected_claims).factuality_or_vacuous(),
        fully_supported,
        unreliable_leakage,
    })
}

/// A labeled trace with its projected answer and, when non-empty, the
/// projection check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedTrace {
    pub trace: AnnotatedTrace,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<ProjectionReport>,
}

pub fn project_trace(
    trace: &AnnotatedTrace,
    backends: &Backends,
    top_k: usize,
) -> Result<ProjectedTrace, CurationError> {
    let projected = project_answer(trace, backends.chat.as_ref(), &backends.models.projector)?;
    let report = if projected.is_empty() {
        log::warn!(
            "projection of `{}` removed the whole answer",
            trace.query.id
        );
        None
    } else {
        Some(check_projection(trace, &projected, backends, top_k)?)
    };
    let mut trace = trace.clone();
    trace.projected_answer = Some(projected);
    Ok(ProjectedTrace { trace, report })
}

pub fn project_traces(
    traces: &[AnnotatedTrace],
    backends: &Backends,
    top_k: usize,
    exec: Exec,
) -> Result<Vec<ProjectedTrace>, CurationError> {
    exec.try_map(traces, |t| project_trace(t, backends, top_k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{BackendError, MockChat, MockFixtures};
    use crate::trace::{Query, Verdict};
    use std::collections::HashMap;
    use ReliabilityLabel::*;

    fn trace(labels: &[(&str, ReliabilityLabel)], answer: &str) -> AnnotatedTrace {
        AnnotatedTrace::new(
            Query::new("q1", "Where is Paris?").unwrap(),
            labels
                .iter()
                .enumerate()
                .map(|(i, (t, l))| ReasoningStep::labeled(i + 1, *t, *l))
                .collect(),
            answer,
        )
    }

    fn sample() -> AnnotatedTrace {
        trace(
            &[
                ("Paris is the capital of France.", Reliable),
                ("Paris has forty bridges.", Unreliable),
                ("Let me summarise.", Nonverifiable),
            ],
            "Paris is the capital of France. It has forty bridges. In summary, that is all.",
        )
    }

    #[test]
    fn prompt_round_trips_through_parser() {
        let t = sample();
        let prompt = render_projection_prompt(&t).unwrap();
        assert!(prompt.contains("User Question: Where is Paris?\n"));
        assert!(prompt
            .contains("Reasoning Process: <think>Paris is the capital of France. <reliable> "));
        let (steps, answer) = parse_projection_prompt(&prompt).unwrap();
        assert_eq!(answer, t.original_answer);
        assert_eq!(steps, t.steps);
        assert!(parse_projection_prompt("something else").is_none());
    }

    #[test]
    fn reference_projection_examples() {
        let t = sample();
        assert_eq!(
            reference_projection(&t.steps, &t.original_answer),
            "Paris is the capital of France. In summary, that is all."
        );
        let all_reliable: Vec<_> = t
            .steps
            .iter()
            .cloned()
            .map(|mut s| {
                s.label = Some(Reliable);
                s
            })
            .collect();
        let answer = "Paris is the capital of France. Paris has forty bridges.";
        assert_eq!(reference_projection(&all_reliable, answer), answer);
        let none_reliable = trace(&[("Paris is the capital of France.", Unreliable)], answer);
        assert_eq!(reference_projection(&none_reliable.steps, answer), "");
    }

    #[test]
    fn mock_projection_via_chat() {
        let backends = Backends::mock(MockFixtures::default());
        let projected = project_answer(&sample(), backends.chat.as_ref(), "m").unwrap();
        assert_eq!(
            projected,
            "Paris is the capital of France. In summary, that is all."
        );
        let mut unlabeled = sample();
        unlabeled.steps[1].label = None;
        assert!(matches!(
            project_answer(&unlabeled, backends.chat.as_ref(), "m"),
            Err(CurationError::UnlabeledStep { step: 2, .. })
        ));
    }

    #[test]
    fn untagged_reply_is_an_error() {
        assert!(matches!(
            extract_revised_answer("Paris is in France."),
            Err(CurationError::MissingRevisedAnswerTags(_))
        ));
        assert_eq!(
            extract_revised_answer("Sure. <revised_answer> A. </revised_answer>").unwrap(),
            "A."
        );
        let chat = MockChat::new(HashMap::new());
        assert!(matches!(
            project_answer(&sample(), &chat, "m"),
            Err(CurationError::Backend(BackendError::Rejected {
                status: 404,
                ..
            }))
        ));
    }

    fn fixtures() -> MockFixtures {
        let mut fx = MockFixtures::default();
        fx.verdicts
            .insert("Paris is the capital of France.".into(), Verdict::Supported);
        fx.verdicts
            .insert("It has forty bridges.".into(), Verdict::Unsupported);
        fx.verdicts
            .insert("In summary, that is all.".into(), Verdict::Unsupported);
        fx
    }

    #[test]
    fn removing_unreliable_claims_raises_factuality() {
        let backends = Backends::mock(fixtures());
        let t = sample();
        let projected = reference_projection(&t.steps, &t.original_answer);
        let report = check_projection(&t, &projected, &backends, 5).unwrap();
        assert!(report.post_factuality > report.pre_factuality);
        assert_eq!(report.unreliable_leakage, 0);
        assert!(report.fully_supported);
    }

    #[test]
    fn identical_answer_keeps_factuality() {
        let backends = Backends::mock(fixtures());
        let t = trace(
            &[("Paris is the capital of France.", Reliable)],
            "Paris is the capital of France.",
        );
        let report = check_projection(&t, &t.original_answer, &backends, 5).unwrap();
        assert_eq!(report.pre_factuality, report.post_factuality);
        assert_eq!(report.pre_factuality, 1.0);
        assert!(report.fully_supported);
    }

    #[test]
    fn invented_sentence_is_not_fully_supported() {
        let backends = Backends::mock(fixtures());
        let t = sample();
        let report = check_projection(&t, "Paris hosts the Louvre museum.", &backends, 5).unwrap();
        assert!(!report.fully_supported);
        let leaky = check_projection(&t, "It has forty bridges.", &backends, 5).unwrap();
        assert_eq!(leaky.unreliable_leakage, 1);
        assert!(check_projection(&t, " ", &backends, 5).is_err());
    }
}
