//! Reward functions for RL baselines and the GRPO / distillation kernels.
//!
//! These are standalone numeric pieces; callers supply policy ratios and
//! token distributions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;

/// Tolerance for a probability vector summing to 1.
pub const NORMALIZATION_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("group `{prompt_id}` has {n} rewards; advantages need at least 2")]
    GroupTooSmall { prompt_id: String, n: usize },
    #[error("policy ratio must be positive, got {0}")]
    NonpositiveRatio(f64),
    #[error("distributions have lengths {student} and {teacher}")]
    LengthMismatch { student: usize, teacher: usize },
    #[error("{which} distribution is not normalized (sum {sum})")]
    NotNormalized { which: &'static str, sum: f64 },
    #[error("teacher assigns zero probability to index {0} where the student does not")]
    SupportMismatch(usize),
    #[error("invalid reward config: {0}")]
    InvalidConfig(String),
    #[error("reward input out of range: {0}")]
    OutOfRange(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub lambda_detail: f64,
    pub mu_rel: f64,
    pub clip_epsilon: f64,
    pub kl_beta: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            lambda_detail: 0.1,
            mu_rel: 0.0,
            clip_epsilon: 0.2,
            kl_beta: 0.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        if !(self.lambda_detail >= 0.0) {
            return Err(RewardError::InvalidConfig(
                "lambda_detail must be >= 0".into(),
            ));
        }
        if !(self.mu_rel >= 0.0) {
            return Err(RewardError::InvalidConfig("mu_rel must be >= 0".into()));
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(RewardError::InvalidConfig(
                "clip_epsilon must be in (0, 1)".into(),
            ));
        }
        if !(self.kl_beta >= 0.0) {
            return Err(RewardError::InvalidConfig("kl_beta must be >= 0".into()));
        }
        Ok(())
    }
}

/// `R_fact + λ·ln(1 + F) + μ·R_rel`.
pub fn reward_veriscore(
    r_fact: f64,
    f_supported: u64,
    r_rel: f64,
    cfg: &RewardConfig,
) -> Result<f64, RewardError> {
    for (name, v) in [("r_fact", r_fact), ("r_rel", r_rel)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(RewardError::OutOfRange(format!("{name} = {v}")));
        }
    }
    Ok(r_fact + cfg.lambda_detail * (f_supported as f64).ln_1p() + cfg.mu_rel * r_rel)
}

/// 1 when verification finds no contradiction, else 0.
pub fn reward_binary_rar(contradiction_found: bool) -> f64 {
    if contradiction_found {
        0.0
    } else {
        1.0
    }
}

/// Group-normalized advantages `(r_i − mean) / std` with the population
/// standard deviation. A group with (numerically) equal rewards gets all
/// zeros.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>, RewardError> {
    let n = rewards.len();
    if n < 2 {
        return Err(RewardError::GroupTooSmall {
            prompt_id: String::new(),
            n,
        });
    }
    let mean = rewards.iter().sum::<f64>() / n as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    let scale = rewards.iter().fold(1.0f64, |m, r| m.max(r.abs()));
    if std <= 1e-12 * scale {
        return Ok(vec![0.0; n]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Per-token KL estimate `ratio − ln(ratio) − 1`, zero iff `ratio = 1`.
pub fn kl_penalty(ratio: f64) -> Result<f64, RewardError> {
    if !(ratio > 0.0) || !ratio.is_finite() {
        return Err(RewardError::NonpositiveRatio(ratio));
    }
    // ln_1p keeps the result nonnegative near ratio = 1.
    let x = ratio - 1.0;
    Ok((x - x.ln_1p()).max(0.0))
}

/// Clipped surrogate `min(ratio·A, clip(ratio, 1−ε, 1+ε)·A)`.
pub fn grpo_surrogate(ratio: f64, advantage: f64, clip_epsilon: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon);
    (ratio * advantage).min(clipped * advantage)
}

fn check_distribution(p: &[f64], which: &'static str) -> Result<(), RewardError> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > NORMALIZATION_TOL {
        return Err(RewardError::NotNormalized { which, sum });
    }
    Ok(())
}

/// `KL(student ‖ teacher) = Σ p_s ln(p_s / p_t)`, with `0·ln(0/q) = 0`.
pub fn capd_kl(student: &[f64], teacher: &[f64]) -> Result<f64, RewardError> {
    if student.len() != teacher.len() {
        return Err(RewardError::LengthMismatch {
            student: student.len(),
            teacher: teacher.len(),
        });
    }
    check_distribution(student, "student")?;
    check_distribution(teacher, "teacher")?;
    let mut kl = 0.0;
    for (i, (&ps, &pt)) in student.iter().zip(teacher).enumerate() {
        if ps == 0.0 {
            continue;
        }
        if pt == 0.0 {
            return Err(RewardError::SupportMismatch(i));
        }
        kl += ps * (ps / pt).ln();
    }
    Ok(kl.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRollout {
    pub prompt_id: String,
    pub rewards: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advantages: Option<Vec<f64>>,
}

/// Fills in `advantages` for every group.
pub fn attach_advantages(
    rollouts: &[GroupRollout],
    exec: Exec,
) -> Result<Vec<GroupRollout>, RewardError> {
    exec.try_map(rollouts, |g| {
        let advantages = group_advantages(&g.rewards).map_err(|e| match e {
            RewardError::GroupTooSmall { n, .. } => RewardError::GroupTooSmall {
                prompt_id: g.prompt_id.clone(),
                n,
            },
            other => other,
        })?;
        Ok(GroupRollout {
            advantages: Some(advantages),
            ..g.clone()
        })
    })
}
