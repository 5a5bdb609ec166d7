//! Training-tuple JSONL files.

use std::path::Path;

use super::CurationError;
use crate::io::{read_jsonl, write_jsonl};
use crate::trace::TrainingTuple;

/// Writes one tuple per line after validating all of them; nothing is written
/// if any tuple is invalid.
pub fn emit_cass_dataset(
    tuples: &[TrainingTuple],
    destination: &Path,
) -> Result<usize, CurationError> {
    for tuple in tuples {
        tuple.validate().map_err(CurationError::InvalidTuple)?;
    }
    Ok(write_jsonl(destination, tuples)?)
}

pub fn read_cass_dataset(path: &Path) -> Result<Vec<TrainingTuple>, CurationError> {
    let tuples: Vec<TrainingTuple> = read_jsonl(path)?;
    for tuple in &tuples {
        tuple.validate().map_err(CurationError::InvalidTuple)?;
    }
    Ok(tuples)
}
