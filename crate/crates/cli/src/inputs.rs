//! Input record shapes accepted by the commands.

use std::path::Path;

use anyhow::{Context, Result};
use cag_core::io::read_jsonl;
use cag_core::{AnnotatedTrace, DecodeStats, Query};
use serde::Deserialize;

/// A trace given either as a full record or as a query plus its tagged text.
#[derive(Deserialize)]
#[serde(untagged)]
enum TraceInput {
    Tagged {
        query: Query,
        trace: String,
        #[serde(default)]
        decode_stats: Option<DecodeStats>,
    },
    Full(AnnotatedTrace),
}

fn into_trace(record: TraceInput) -> Result<AnnotatedTrace> {
    let trace = match record {
        TraceInput::Tagged {
            query,
            trace,
            decode_stats,
        } => {
            let mut t = AnnotatedTrace::from_tagged(query, &trace)?;
            t.decode_stats = decode_stats;
            t
        }
        TraceInput::Full(t) => t,
    };
    trace.validate()?;
    Ok(trace)
}

pub fn read_traces(path: &Path) -> Result<Vec<AnnotatedTrace>> {
    let records: Vec<TraceInput> = read_jsonl(path)?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, record)| {
            into_trace(record).with_context(|| format!("{} line {}", path.display(), i + 1))
        })
        .collect()
}

#[derive(Debug, Deserialize)]
pub struct AucRecord {
    pub predicted: f64,
    pub correct: bool,
}
