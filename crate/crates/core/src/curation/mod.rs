//! Building calibration-aware training data: prompt filtering, answer
//! projection onto reliable steps, projection checks and dataset emission.

pub mod dataset;
pub mod judge;
pub mod projection;
pub mod templates;

use thiserror::Error;

use crate::backends::BackendError;
use crate::io::JsonlError;
use crate::trace::TraceError;

pub use dataset::{emit_cass_dataset, read_cass_dataset};
pub use judge::{
    curate_prompts, filter_prompt, filter_prompt_factual, filter_prompt_requires_knowledge,
    PromptFilterResult, DEFAULT_KEEP_THRESHOLD,
};
pub use projection::{
    check_projection, project_answer, project_trace, reference_projection, ProjectedTrace,
    ProjectionReport,
};

#[derive(Debug, Error)]
pub enum CurationError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("could not parse {what} from judge reply after one retry: {reply:?}")]
    UnparseableJudgment { what: &'static str, reply: String },
    #[error("projection reply has no <revised_answer>…</revised_answer> tags: {0:?}")]
    MissingRevisedAnswerTags(String),
    #[error("trace `{query}` step {step} has no reliability label")]
    UnlabeledStep { query: String, step: usize },
    #[error("trace `{0}` has an empty original answer")]
    EmptyAnswer(String),
    #[error("projected answer for `{0}` is empty")]
    EmptyProjection(String),
    #[error("invalid training tuple: {0}")]
    InvalidTuple(#[source] TraceError),
    #[error(transparent)]
    Io(#[from] JsonlError),
}

impl CurationError {
    pub fn is_backend(&self) -> bool {
        matches!(self, CurationError::Backend(_))
    }
}
