//! VeriScore-style factuality metric and decoding-efficiency statistics.
//!
//! For a response with `|A|` extracted claims of which `S` are supported,
//! precision is `S / |A|`, recall is `min(S / K, 1)` and F1 is their harmonic
//! mean, or 0 when `S = 0`. `K` is the median supported-claim count of the
//! responses in the same domain.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, Backends};
use crate::exec::Exec;
use crate::trace::AnnotatedTrace;
use crate::verification::verify_text;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("precision is undefined for a response without claims")]
    NoClaims,
    #[error("supported count {supported} exceeds claim count {total}")]
    SupportedExceedsTotal { supported: u64, total: u64 },
    #[error("K must be positive, got {0}")]
    NonpositiveK(f64),
    #[error("cannot estimate K for domain `{0}`: no responses")]
    EmptyDomain(String),
    #[error("cannot estimate K for domain `{0}`: every response has zero supported claims")]
    AllZero(String),
    #[error("trace `{0}` has no decode statistics")]
    MissingDecodeStats(String),
    #[error("efficiency comparison needs non-empty groups")]
    EmptyGroup,
    #[error("baseline mean for {0} is zero; relative change undefined")]
    ZeroBaseline(&'static str),
}

pub fn precision(supported: u64, total: u64) -> Result<f64, MetricsError> {
    if total == 0 {
        return Err(MetricsError::NoClaims);
    }
    if supported > total {
        return Err(MetricsError::SupportedExceedsTotal { supported, total });
    }
    Ok(supported as f64 / total as f64)
}

pub fn recall(supported: u64, k: f64) -> Result<f64, MetricsError> {
    if !(k > 0.0) || !k.is_finite() {
        return Err(MetricsError::NonpositiveK(k));
    }
    Ok((supported as f64 / k).min(1.0))
}

pub fn f1(p: f64, r: f64, supported: u64) -> f64 {
    if supported == 0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Median of the supported-claim counts; midpoint for even lengths.
pub fn estimate_k(counts: &[u64]) -> Result<f64, MetricsError> {
    estimate_k_in("", counts)
}

fn estimate_k_in(domain: &str, counts: &[u64]) -> Result<f64, MetricsError> {
    if counts.is_empty() {
        return Err(MetricsError::EmptyDomain(domain.to_string()));
    }
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    };
    if median == 0.0 {
        return Err(MetricsError::AllZero(domain.to_string()));
    }
    Ok(median)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VeriScoreResult {
    pub supported: u64,
    pub total_claims: u64,
    pub k: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Scores one response. A response without claims scores 0 throughout.
pub fn veriscore(
    supported: u64,
    total_claims: u64,
    k: f64,
) -> Result<VeriScoreResult, MetricsError> {
    let r = recall(supported, k)?;
    let p = if total_claims == 0 {
        0.0
    } else {
        precision(supported, total_claims)?
    };
    Ok(VeriScoreResult {
        supported,
        total_claims,
        k,
        precision: p,
        recall: r,
        f1: f1(p, r, supported),
    })
}

/// A response to evaluate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub id: String,
    #[serde(default = "default_domain")]
    pub domain: String,
    #[serde(default = "default_system")]
    pub system: String,
    pub response: String,
}

fn default_domain() -> String {
    "default".into()
}

fn default_system() -> String {
    ORIGINAL_SYSTEM.into()
}

/// System name given to unprojected answers.
pub const ORIGINAL_SYSTEM: &str = "original";
/// System name given to projected answers.
pub const PROJECTED_SYSTEM: &str = "projected";

impl EvalItem {
    /// One item for the original answer and, when present, one for the
    /// projected answer.
    pub fn from_trace(trace: &AnnotatedTrace, domain: &str) -> Vec<EvalItem> {
        let mut items = vec![EvalItem {
            id: trace.query.id.clone(),
            domain: domain.to_string(),
            system: ORIGINAL_SYSTEM.into(),
            response: trace.original_answer.clone(),
        }];
        if let Some(projected) = &trace.projected_answer {
            items.push(EvalItem {
                id: trace.query.id.clone(),
                domain: domain.to_string(),
                system: PROJECTED_SYSTEM.into(),
                response: projected.clone(),
            });
        }
        items
    }
}

/// Claim counts for one response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimCounts {
    pub id: String,
    pub domain: String,
    pub system: String,
    pub supported: u64,
    pub total_claims: u64,
}

pub fn count_claims(
    items: &[EvalItem],
    backends: &Backends,
    top_k: usize,
    exec: Exec,
) -> Result<Vec<ClaimCounts>, BackendError> {
    exec.try_map(items, |item| {
        let claims = verify_text(&item.response, backends, top_k)?;
        Ok(ClaimCounts {
            id: item.id.clone(),
            domain: item.domain.clone(),
            system: item.system.clone(),
            supported: claims
                .iter()
                .filter(|c| c.verdict == crate::trace::Verdict::Supported)
                .count() as u64,
            total_claims: claims.len() as u64,
        })
    })
}

/// Which responses define a domain's K.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KPolicy {
    /// The same K everywhere.
    Fixed(f64),
    /// The named system's responses. Falls back to pooling in domains where
    /// that system is absent or never has a supported claim.
    FromSystem(String),
    /// All responses in the domain, across systems.
    Pooled,
}

impl Default for KPolicy {
    fn default() -> Self {
        KPolicy::FromSystem(ORIGINAL_SYSTEM.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub domain: String,
    pub system: String,
    #[serde(flatten)]
    pub score: VeriScoreResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub domain: String,
    pub system: String,
    pub responses: usize,
    pub k: f64,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k_policy: KPolicy,
    pub rows: Vec<EvalRow>,
    pub summaries: Vec<EvalSummary>,
}

fn domain_k(domain: &str, counts: &[&ClaimCounts], policy: &KPolicy) -> Result<f64, MetricsError> {
    let pooled = || counts.iter().map(|c| c.supported).collect::<Vec<_>>();
    match policy {
        KPolicy::Fixed(k) => {
            if !(*k > 0.0) {
                return Err(MetricsError::NonpositiveK(*k));
            }
            Ok(*k)
        }
        KPolicy::Pooled => estimate_k_in(domain, &pooled()),
        KPolicy::FromSystem(system) => {
            let own: Vec<u64> = counts
                .iter()
                .filter(|c| &c.system == system)
                .map(|c| c.supported)
                .collect();
            match estimate_k_in(domain, &own) {
                Ok(k) => Ok(k),
                Err(MetricsError::EmptyDomain(_) | MetricsError::AllZero(_)) => {
                    log::warn!(
                        "no usable `{system}` responses in domain `{domain}`; pooling for K"
                    );
                    estimate_k_in(domain, &pooled())
                }
                Err(e) => Err(e),
            }
        }
    }
}

/// Scores every response against its domain's K. Rows keep input order;
/// summaries are sorted by domain then system.
pub fn evaluate(counts: &[ClaimCounts], policy: &KPolicy) -> Result<EvalReport, MetricsError> {
    let mut by_domain: BTreeMap<&str, Vec<&ClaimCounts>> = BTreeMap::new();
    for c in counts {
        by_domain.entry(c.domain.as_str()).or_default().push(c);
    }
    let mut ks = BTreeMap::new();
    for (domain, members) in &by_domain {
        ks.insert(*domain, domain_k(domain, members, policy)?);
    }
    let rows = counts
        .iter()
        .map(|c| {
            Ok(EvalRow {
                id: c.id.clone(),
                domain: c.domain.clone(),
                system: c.system.clone(),
                score: veriscore(c.supported, c.total_claims, ks[c.domain.as_str()])?,
            })
        })
        .collect::<Result<Vec<_>, MetricsError>>()?;

    let mut groups: BTreeMap<(&str, &str), Vec<&VeriScoreResult>> = BTreeMap::new();
    for row in &rows {
        groups
            .entry((row.domain.as_str(), row.system.as_str()))
            .or_default()
            .push(&row.score);
    }
    let summaries = groups
        .into_iter()
        .map(|((domain, system), scores)| {
            let n = scores.len() as f64;
            let mean =
                |f: fn(&VeriScoreResult) -> f64| scores.iter().map(|s| f(s)).sum::<f64>() / n;
            EvalSummary {
                domain: domain.to_string(),
                system: system.to_string(),
                responses: scores.len(),
                k: ks[domain],
                mean_precision: mean(|s| s.precision),
                mean_recall: mean(|s| s.recall),
                mean_f1: mean(|s| s.f1),
            }
        })
        .collect();
    Ok(EvalReport {
        k_policy: policy.clone(),
        rows,
        summaries,
    })
}

impl EvalReport {
    /// Mean F1 × 100 with one row per system and one column per domain,
    /// followed by the unweighted average over domains.
    pub fn to_csv(&self) -> String {
        let domains: BTreeSet<&str> = self.summaries.iter().map(|s| s.domain.as_str()).collect();
        let systems: BTreeSet<&str> = self.summaries.iter().map(|s| s.system.as_str()).collect();
        let mut out = String::from("system");
        for d in &domains {
            out.push(',');
            out.push_str(&csv_field(d));
        }
        out.push_str(",average\n");
        for system in systems {
            out.push_str(&csv_field(system));
            let mut values = Vec::new();
            for domain in &domains {
                match self
                    .summaries
                    .iter()
                    .find(|s| s.system == system && s.domain == *domain)
                {
                    Some(s) => {
                        values.push(s.mean_f1 * 100.0);
                        let _ = write!(out, ",{:.2}", s.mean_f1 * 100.0);
                    }
                    None => out.push(','),
                }
            }
            let avg = values.iter().sum::<f64>() / values.len() as f64;
            let _ = writeln!(out, ",{avg:.2}");
        }
        out
    }
}

fn csv_field(value: &str) -> String {
    if value.contains([',', '"', '\n']) {
        format!("\"{}\"", value.replace('"', "\"\""))
    } else {
        value.to_string()
    }
}

/// Mean decoding cost of a group of traces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeMeans {
    pub think_tokens: f64,
    pub answer_tokens: f64,
    pub total_tokens: f64,
    pub wall_seconds: f64,
    pub approximate_tokens: bool,
}

/// Signed percentage changes, `(treated − baseline) / baseline × 100`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyDelta {
    pub think_delta: f64,
    pub answer_delta: f64,
    pub total_delta: f64,
    pub time_delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub baseline: DecodeMeans,
    pub treated: DecodeMeans,
    pub delta: EfficiencyDelta,
}

pub fn relative_change(
    baseline: f64,
    treated: f64,
    what: &'static str,
) -> Result<f64, MetricsError> {
    if baseline == 0.0 {
        return Err(MetricsError::ZeroBaseline(what));
    }
    Ok((treated - baseline) / baseline * 100.0)
}

pub fn decode_means(traces: &[AnnotatedTrace]) -> Result<DecodeMeans, MetricsError> {
    if traces.is_empty() {
        return Err(MetricsError::EmptyGroup);
    }
    let mut sums = [0.0; 3];
    let mut approximate = false;
    for t in traces {
        let stats = t
            .decode_stats
            .as_ref()
            .ok_or_else(|| MetricsError::MissingDecodeStats(t.query.id.clone()))?;
        sums[0] += stats.think_tokens as f64;
        sums[1] += stats.answer_tokens as f64;
        sums[2] += stats.wall_seconds;
        approximate |= stats.approximate_tokens;
    }
    let n = traces.len() as f64;
    Ok(DecodeMeans {
        think_tokens: sums[0] / n,
        answer_tokens: sums[1] / n,
        total_tokens: (sums[0] + sums[1]) / n,
        wall_seconds: sums[2] / n,
        approximate_tokens: approximate,
    })
}

pub fn delta_between(
    baseline: &DecodeMeans,
    treated: &DecodeMeans,
) -> Result<EfficiencyDelta, MetricsError> {
    Ok(EfficiencyDelta {
        think_delta: relative_change(baseline.think_tokens, treated.think_tokens, "think tokens")?,
        answer_delta: relative_change(
            baseline.answer_tokens,
            treated.answer_tokens,
            "answer tokens",
        )?,
        total_delta: relative_change(baseline.total_tokens, treated.total_tokens, "total tokens")?,
        time_delta: relative_change(baseline.wall_seconds, treated.wall_seconds, "wall seconds")?,
    })
}

pub fn efficiency_stats(
    baseline: &[AnnotatedTrace],
    treated: &[AnnotatedTrace],
) -> Result<EfficiencyReport, MetricsError> {
    let b = decode_means(baseline)?;
    let t = decode_means(treated)?;
    Ok(EfficiencyReport {
        baseline: b,
        treated: t,
        delta: delta_between(&b, &t)?,
    })
}
