//! The three judge prompts, shipped verbatim as resource files.

pub const FACT_CHECK: &str = include_str!("../../templates/fact_check.txt");
pub const KNOWLEDGE_REQUIREMENT: &str = include_str!("../../templates/knowledge_requirement.txt");
pub const ANSWER_PROJECTION: &str = include_str!("../../templates/answer_projection.txt");

pub const PROMPT_SLOT: &str = "<Here is the prompt>";
pub const QUESTION_SLOT: &str = "<Here is the question>";
pub const REASONING_SLOT: &str = "<Here is the reasoning>";
pub const RESPONSE_SLOT: &str = "<Here is the response>";

/// Substitutes each slot, in template order, in a single pass so that slot
/// markers inside substituted values are left alone.
fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    for (slot, value) in slots {
        let at = rest
            .find(slot)
            .unwrap_or_else(|| panic!("template is missing slot {slot}"));
        out.push_str(&rest[..at]);
        out.push_str(value);
        rest = &rest[at + slot.len()..];
    }
    out.push_str(rest);
    out
}

pub fn render_fact_check(prompt: &str) -> String {
    fill(FACT_CHECK, &[(PROMPT_SLOT, prompt)])
}

pub fn render_knowledge_requirement(prompt: &str) -> String {
    fill(KNOWLEDGE_REQUIREMENT, &[(PROMPT_SLOT, prompt)])
}

/// `reasoning` and `response` are inserted as given; callers wrap them in
/// their think and answer tags.
pub fn render_answer_projection(question: &str, reasoning: &str, response: &str) -> String {
    fill(
        ANSWER_PROJECTION,
        &[
            (QUESTION_SLOT, question),
            (REASONING_SLOT, reasoning),
            (RESPONSE_SLOT, response),
        ],
    )
}

/// The fixed text of the projection template before the question and after
/// the response.
pub(crate) fn projection_frame() -> (&'static str, &'static str) {
    let head = &ANSWER_PROJECTION[..ANSWER_PROJECTION.find(QUESTION_SLOT).expect("slot")];
    let tail_at = ANSWER_PROJECTION.find(RESPONSE_SLOT).expect("slot") + RESPONSE_SLOT.len();
    (head, &ANSWER_PROJECTION[tail_at..])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchors_present() {
        assert!(FACT_CHECK.starts_with("You are a strict fact-checker."));
        assert!(KNOWLEDGE_REQUIREMENT
            .contains("requires both long-form generation and factual knowledge"));
        assert!(ANSWER_PROJECTION.contains("Output only the revised final answer"));
    }

    #[test]
    fn each_slot_appears_once() {
        assert_eq!(FACT_CHECK.matches(PROMPT_SLOT).count(), 1);
        assert_eq!(KNOWLEDGE_REQUIREMENT.matches(PROMPT_SLOT).count(), 1);
        for slot in [QUESTION_SLOT, REASONING_SLOT, RESPONSE_SLOT] {
            assert_eq!(ANSWER_PROJECTION.matches(slot).count(), 1);
        }
    }

    #[test]
    fn slot_markers_in_values_are_not_expanded() {
        let rendered = render_answer_projection(REASONING_SLOT, "R", "A");
        assert!(rendered.contains(&format!("User Question: {REASONING_SLOT}\n")));
        assert!(rendered.contains("Reasoning Process: R\n"));
    }
}
