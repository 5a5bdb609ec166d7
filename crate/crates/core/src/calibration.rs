//! Reliability bucketing and the decision theory behind it.
//!
//! Committing to a step that is correct with probability `p` is worth
//! `u1·p − u2·(1 − p)` against 0 for discarding it, so the utility-maximising
//! rule commits iff `p ≥ τ* = u2 / (u1 + u2)`. Thresholding a proxy score `s`
//! with `|s − p| ≤ ε` instead loses at most `(u1 + u2)·ε` per decision; the
//! simulations here check that bound empirically.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::trace::{AnnotatedTrace, ReliabilityLabel};

/// Absolute slack when comparing a simulated regret with its bound. Covers
/// the rounding in `clamp(p + noise)`; far below any meaningful regret.
pub const REGRET_SLACK: f64 = 1e-12;

/// Trials per independently seeded shard in [`simulate_regret`].
const REGRET_SHARD: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("utilities must be positive (u1 = {u1}, u2 = {u2})")]
    NonpositiveUtility { u1: f64, u2: f64 },
    #[error("epsilon {0} outside [0, 1]")]
    InvalidEpsilon(f64),
    #[error("invalid bucket scheme: {0}")]
    InvalidScheme(String),
    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("lambda {0} outside [0, 1]")]
    InvalidLambda(f64),
    #[error("step {0} has no reliability label")]
    UnlabeledStep(usize),
    #[error("AUC needs both positive and negative examples")]
    DegenerateLabels,
    #[error("AUC input contains a NaN score")]
    NanScore,
    #[error("grid search needs at least one candidate")]
    NoCandidates,
    #[error("regret simulation needs at least one trial")]
    NoTrials,
}

/// Maps a factuality score to a label: `labels[k]` where `k` counts the
/// thresholds `≤ score`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketScheme {
    thresholds: Vec<f64>,
    labels: Vec<ReliabilityLabel>,
}

impl BucketScheme {
    pub fn new(
        thresholds: Vec<f64>,
        labels: Vec<ReliabilityLabel>,
    ) -> Result<Self, CalibrationError> {
        if labels.len() != thresholds.len() + 1 {
            return Err(CalibrationError::InvalidScheme(format!(
                "{} thresholds need {} labels, got {}",
                thresholds.len(),
                thresholds.len() + 1,
                labels.len()
            )));
        }
        if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return Err(CalibrationError::InvalidScheme(format!(
                "threshold {t} outside (0, 1)"
            )));
        }
        if thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CalibrationError::InvalidScheme(
                "thresholds must be strictly ascending".into(),
            ));
        }
        if labels.contains(&ReliabilityLabel::Nonverifiable) {
            return Err(CalibrationError::InvalidScheme(
                "nonverifiable is reserved for steps without claims".into(),
            ));
        }
        Ok(BucketScheme { thresholds, labels })
    }

    /// Unreliable below `tau`, reliable at or above it.
    pub fn binary(tau: f64) -> Result<Self, CalibrationError> {
        BucketScheme::new(
            vec![tau],
            vec![ReliabilityLabel::Unreliable, ReliabilityLabel::Reliable],
        )
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn labels(&self) -> &[ReliabilityLabel] {
        &self.labels
    }

    /// The high-reliability label set: the top bucket's label.
    pub fn high_labels(&self) -> Vec<ReliabilityLabel> {
        self.labels.last().copied().into_iter().collect()
    }

    /// Index of the bucket `score` falls into.
    pub fn bucket_index(&self, score: f64) -> usize {
        self.thresholds.iter().filter(|t| **t <= score).count()
    }
}

pub fn bucket(
    score: Option<f64>,
    scheme: &BucketScheme,
) -> Result<ReliabilityLabel, CalibrationError> {
    match score {
        None => Ok(ReliabilityLabel::Nonverifiable),
        Some(s) if !(0.0..=1.0).contains(&s) => Err(CalibrationError::ScoreOutOfRange(s)),
        Some(s) => Ok(scheme.labels[scheme.bucket_index(s)]),
    }
}

/// Labels every step of a scored trace.
pub fn bucket_trace(
    trace: &AnnotatedTrace,
    scheme: &BucketScheme,
) -> Result<AnnotatedTrace, CalibrationError> {
    let mut labeled = trace.clone();
    for step in &mut labeled.steps {
        step.label = Some(bucket(step.score, scheme)?);
    }
    Ok(labeled)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionConfig {
    pub u1: f64,
    pub u2: f64,
    pub epsilon: f64,
}

impl DecisionConfig {
    pub fn new(u1: f64, u2: f64, epsilon: f64) -> Result<Self, CalibrationError> {
        let cfg = DecisionConfig { u1, u2, epsilon };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CalibrationError> {
        bayes_threshold(self.u1, self.u2)?;
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(CalibrationError::InvalidEpsilon(self.epsilon));
        }
        Ok(())
    }

    pub fn tau_star(&self) -> f64 {
        self.u2 / (self.u1 + self.u2)
    }

    /// The worst-case regret of thresholding an ε-accurate proxy.
    pub fn regret_bound(&self) -> f64 {
        (self.u1 + self.u2) * self.epsilon
    }

    /// Commit iff the probability reaches τ*.
    pub fn decide(&self, p: f64) -> bool {
        p >= self.tau_star()
    }
}

pub fn bayes_threshold(u1: f64, u2: f64) -> Result<f64, CalibrationError> {
    if !(u1 > 0.0 && u2 > 0.0) || !u1.is_finite() || !u2.is_finite() {
        return Err(CalibrationError::NonpositiveUtility { u1, u2 });
    }
    Ok(u2 / (u1 + u2))
}

pub fn expected_utility(p: f64, commit: bool, cfg: &DecisionConfig) -> f64 {
    if commit {
        cfg.u1 * p - cfg.u2 * (1.0 - p)
    } else {
        0.0
    }
}

/// Utility lost by acting on proxy `s` instead of the true probability `p`.
pub fn regret(p: f64, s: f64, cfg: &DecisionConfig) -> f64 {
    if cfg.decide(p) == cfg.decide(s) {
        0.0
    } else {
        (cfg.u1 + cfg.u2) * (p - cfg.tau_star()).abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretReport {
    pub u1: f64,
    pub u2: f64,
    pub epsilon: f64,
    pub tau_star: f64,
    pub trials: u64,
    pub max_regret: f64,
    pub bound: f64,
    pub violations: u64,
}

impl RegretReport {
    fn empty(cfg: &DecisionConfig) -> Self {
        RegretReport {
            u1: cfg.u1,
            u2: cfg.u2,
            epsilon: cfg.epsilon,
            tau_star: cfg.tau_star(),
            trials: 0,
            max_regret: 0.0,
            bound: cfg.regret_bound(),
            violations: 0,
        }
    }

    fn observe(&mut self, regret: f64) {
        self.trials += 1;
        self.max_regret = self.max_regret.max(regret);
        if regret > self.bound + REGRET_SLACK {
            self.violations += 1;
        }
    }

    fn merge(mut self, other: RegretReport) -> Self {
        self.trials += other.trials;
        self.max_regret = self.max_regret.max(other.max_regret);
        self.violations += other.violations;
        self
    }

    pub fn holds(&self) -> bool {
        self.violations == 0 && self.max_regret <= self.bound + REGRET_SLACK
    }
}

/// A generator for stream `stream` of the root seed. Streams never overlap,
/// so shards and traces get independent reproducible randomness.
pub fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Independent seed for item `index` of a batch run under `root`.
pub fn derive_seed(root: u64, index: u64) -> u64 {
    seeded_stream(root, index).random()
}

/// Monte Carlo check of the regret bound: `p ~ U[0, 1]`,
/// `s = clamp(p + U[−ε, ε], 0, 1)`. Trials are split into fixed-size shards
/// with their own streams, so the report does not depend on `exec`.
pub fn simulate_regret(
    cfg: &DecisionConfig,
    trials: u64,
    seed: u64,
    exec: Exec,
) -> Result<RegretReport, CalibrationError> {
    cfg.validate()?;
    if trials == 0 {
        return Err(CalibrationError::NoTrials);
    }
    let shards = (trials as usize).div_ceil(REGRET_SHARD);
    let partials = exec.map_range(shards, |shard| {
        let mut rng = seeded_stream(seed, shard as u64);
        let start = shard * REGRET_SHARD;
        let len = REGRET_SHARD.min(trials as usize - start);
        let mut report = RegretReport::empty(cfg);
        for _ in 0..len {
            let p: f64 = rng.random();
            let noise = if cfg.epsilon > 0.0 {
                rng.random_range(-cfg.epsilon..=cfg.epsilon)
            } else {
                0.0
            };
            let s = (p + noise).clamp(0.0, 1.0);
            report.observe(regret(p, s, cfg));
        }
        report
    });
    Ok(partials
        .into_iter()
        .fold(RegretReport::empty(cfg), RegretReport::merge))
}

/// Worst-case proxies: for `points` evenly spaced `p` in [0, 1], evaluates
/// `s = clamp(p ± ε)`.
pub fn adversarial_regret_sweep(
    cfg: &DecisionConfig,
    points: usize,
) -> Result<RegretReport, CalibrationError> {
    cfg.validate()?;
    if points < 2 {
        return Err(CalibrationError::NoTrials);
    }
    let mut report = RegretReport::empty(cfg);
    for i in 0..points {
        let p = i as f64 / (points - 1) as f64;
        for s in [p + cfg.epsilon, p - cfg.epsilon] {
            report.observe(regret(p, s.clamp(0.0, 1.0), cfg));
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub best_tau: f64,
    pub best_score: f64,
    /// `(τ, score)` in candidate order.
    pub table: Vec<(f64, f64)>,
}

/// Evaluates `evaluate` at every candidate and returns the argmax. Ties go to
/// the smaller τ; NaN scores never win.
pub fn grid_search_threshold<E>(
    candidates: &[f64],
    mut evaluate: impl FnMut(f64) -> Result<f64, E>,
) -> Result<GridSearchResult, E>
where
    E: From<CalibrationError>,
{
    if candidates.is_empty() {
        return Err(CalibrationError::NoCandidates.into());
    }
    let mut table = Vec::with_capacity(candidates.len());
    for &tau in candidates {
        table.push((tau, evaluate(tau)?));
    }
    let mut best: Option<(f64, f64)> = None;
    for &(tau, score) in &table {
        best = match best {
            _ if score.is_nan() => best,
            None => Some((tau, score)),
            Some((bt, bs)) if score > bs || (score == bs && tau < bt) => Some((tau, score)),
            keep => keep,
        };
    }
    let (best_tau, best_score) = best.unwrap_or(table[0]);
    Ok(GridSearchResult {
        best_tau,
        best_score,
        table,
    })
}

/// Rank AUC: the probability a random positive outranks a random negative,
/// ties counting one half. Computed from midranks as `U / (n⁺·n⁻)`.
pub fn auc(pairs: &[(f64, bool)]) -> Result<f64, CalibrationError> {
    if pairs.iter().any(|(s, _)| s.is_nan()) {
        return Err(CalibrationError::NanScore);
    }
    let positives = pairs.iter().filter(|(_, y)| *y).count();
    let negatives = pairs.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(CalibrationError::DegenerateLabels);
    }
    let mut sorted: Vec<(f64, bool)> = pairs.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut positive_rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        // Ranks i+1..=j share their mean.
        let midrank = (i + 1 + j) as f64 / 2.0;
        let tied_positives = sorted[i..j].iter().filter(|(_, y)| *y).count();
        positive_rank_sum += midrank * tied_positives as f64;
        i = j;
    }
    let n_pos = positives as f64;
    let u = positive_rank_sum - n_pos * (n_pos + 1.0) / 2.0;
    Ok(u / (n_pos * negatives as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlipDirection {
    /// Unreliable steps are relabeled reliable.
    UnrelToRel,
    /// Reliable steps are relabeled unreliable.
    RelToUnrel,
}

impl std::str::FromStr for FlipDirection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "unreltorel" => Ok(FlipDirection::UnrelToRel),
            "reltounrel" => Ok(FlipDirection::RelToUnrel),
            other => Err(format!(
                "unknown direction `{other}` (expected unrel-to-rel or rel-to-unrel)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterventionConfig {
    pub lambda: f64,
    pub direction: FlipDirection,
    pub seed: u64,
}

impl InterventionConfig {
    pub fn new(lambda: f64, direction: FlipDirection, seed: u64) -> Result<Self, CalibrationError> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(CalibrationError::InvalidLambda(lambda));
        }
        Ok(InterventionConfig {
            lambda,
            direction,
            seed,
        })
    }
}

/// Independently flips each eligible step's label with probability λ. One
/// uniform draw is consumed per step in index order, eligible or not, so the
/// flipped set only grows with λ for a fixed seed.
pub fn flip_labels(
    trace: &AnnotatedTrace,
    cfg: &InterventionConfig,
) -> Result<AnnotatedTrace, CalibrationError> {
    if !(0.0..=1.0).contains(&cfg.lambda) {
        return Err(CalibrationError::InvalidLambda(cfg.lambda));
    }
    let (from, to) = match cfg.direction {
        FlipDirection::UnrelToRel => (ReliabilityLabel::Unreliable, ReliabilityLabel::Reliable),
        FlipDirection::RelToUnrel => (ReliabilityLabel::Reliable, ReliabilityLabel::Unreliable),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut flipped = trace.clone();
    for step in &mut flipped.steps {
        let label = step
            .label
            .ok_or(CalibrationError::UnlabeledStep(step.index))?;
        let draw: f64 = rng.random();
        if label == from && draw < cfg.lambda {
            step.label = Some(to);
        }
    }
    Ok(flipped)
}
