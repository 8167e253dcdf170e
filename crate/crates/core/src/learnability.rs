//! Pass-rate estimation, the soft value of the reward-tilted policy, the
//! exact KL between the initial and tilted policies with its second-order
//! approximation, and the moderate-difficulty keep/drop filter.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{AgentError, ChatClient};
use crate::capability::DatasetRecord;
use crate::diagnosis::responder_request;
use crate::store::{self, StoreError};
use crate::util::bounded_map;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LearnabilityError {
    #[error("probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("beta must be finite and positive, got {0}")]
    BadBeta(f64),
    #[error("rollout count must be at least 1")]
    NoRollouts,
    #[error("every rollout of `{0}` failed verification")]
    AllRolloutsFailed(String),
    #[error("difficulty band must satisfy 0 <= low < high <= 1, got [{0}, {1}]")]
    BadBand(f64, f64),
}

fn check(p: f64, beta: f64) -> Result<(), LearnabilityError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(LearnabilityError::BadProbability(p));
    }
    if !(beta.is_finite() && beta > 0.0) {
        return Err(LearnabilityError::BadBeta(beta));
    }
    Ok(())
}

/// `β · ln((1 − p) + p·e^{1/β})` for a binary reward.
///
/// Evaluated as `β · ln1p(p · expm1(1/β))` while `e^{1/β}` is representable
/// and as `1 + β · ln(p + (1 − p)·e^{−1/β})` beyond that.
pub fn soft_value(p: f64, beta: f64) -> Result<f64, LearnabilityError> {
    check(p, beta)?;
    if p == 0.0 {
        return Ok(0.0);
    }
    let x = 1.0 / beta;
    Ok(if x <= 700.0 {
        beta * (p * x.exp_m1()).ln_1p()
    } else {
        1.0 + beta * (p + (1.0 - p) * (-x).exp()).ln()
    })
}

/// `KL(π_init ‖ π*) = (V* − p) / β`.
pub fn kl_exact(p: f64, beta: f64) -> Result<f64, LearnabilityError> {
    let v = soft_value(p, beta)?;
    // Jensen gives V* >= p; clamp the last-ulp noise at the endpoints.
    Ok(((v - p) / beta).max(0.0))
}

/// `p(1 − p) / (2β²)`.
pub fn kl_lower_bound(p: f64, beta: f64) -> Result<f64, LearnabilityError> {
    check(p, beta)?;
    Ok(p * (1.0 - p) / (2.0 * beta * beta))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DifficultyBand {
    pub low: f64,
    pub high: f64,
}

impl Default for DifficultyBand {
    fn default() -> Self {
        Self { low: 0.2, high: 0.8 }
    }
}

impl DifficultyBand {
    pub fn new(low: f64, high: f64) -> Result<Self, LearnabilityError> {
        let b = Self { low, high };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), LearnabilityError> {
        if !(0.0 <= self.low && self.low < self.high && self.high <= 1.0) {
            return Err(LearnabilityError::BadBand(self.low, self.high));
        }
        Ok(())
    }

    /// Inclusive on both ends.
    pub fn contains(&self, p: f64) -> bool {
        self.low <= p && p <= self.high
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnabilityProfile {
    pub sample_id: String,
    #[serde(rename = "p")]
    pub pass_rate: f64,
    pub rollouts_used: usize,
    #[serde(rename = "v_star")]
    pub soft_value: f64,
    pub kl_exact: f64,
    #[serde(rename = "kl_bound")]
    pub kl_lower_bound: f64,
    pub beta: f64,
    pub kept: bool,
    /// Whether `kl_exact >= kl_bound` holds at this point. The quadratic
    /// term is only a lower bound for `p < 1/2` and large enough `β`.
    pub bound_holds: bool,
}

impl LearnabilityProfile {
    pub fn compute(
        sample_id: impl Into<String>,
        pass_rate: f64,
        rollouts_used: usize,
        beta: f64,
        band: &DifficultyBand,
    ) -> Result<Self, LearnabilityError> {
        let soft_value = soft_value(pass_rate, beta)?;
        let kl = kl_exact(pass_rate, beta)?;
        let bound = kl_lower_bound(pass_rate, beta)?;
        Ok(Self {
            sample_id: sample_id.into(),
            pass_rate,
            rollouts_used,
            soft_value,
            kl_exact: kl,
            kl_lower_bound: bound,
            beta,
            kept: band.contains(pass_rate),
            bound_holds: kl >= bound - 1e-12,
        })
    }
}

/// A policy that can answer a record several times independently.
pub trait RolloutPolicy: Send + Sync {
    fn rollout(&self, record: &DatasetRecord, index: usize) -> Result<String, AgentError>;
}

/// Binary reward for one response.
pub trait RewardVerifier: Send + Sync {
    fn reward(&self, record: &DatasetRecord, response: &str) -> Result<f64, AgentError>;
}

/// Mechanical answer check against the record's reference.
#[derive(Debug, Clone, Copy, Default)]
pub struct AnswerVerifier;

impl RewardVerifier for AnswerVerifier {
    fn reward(&self, record: &DatasetRecord, response: &str) -> Result<f64, AgentError> {
        Ok(if record.answer_key().matches_response(response) { 1.0 } else { 0.0 })
    }
}

/// Rollouts sampled from a chat model at a non-zero temperature.
pub struct ChatRolloutPolicy<'a> {
    pub client: &'a dyn ChatClient,
    pub temperature: f64,
}

impl RolloutPolicy for ChatRolloutPolicy<'_> {
    fn rollout(&self, record: &DatasetRecord, _index: usize) -> Result<String, AgentError> {
        let req = responder_request(self.client.model(), &record.to_instance()).with_temperature(self.temperature);
        Ok(self.client.chat(&req)?.text)
    }
}

/// `(successes / valid rollouts, valid rollouts)`. Rollouts whose
/// generation or verification fails are excluded from both counts.
pub fn estimate_pass_rate(
    record: &DatasetRecord,
    policy: &dyn RolloutPolicy,
    rollouts: usize,
    verifier: &dyn RewardVerifier,
) -> Result<(f64, usize), LearnabilityError> {
    if rollouts == 0 {
        return Err(LearnabilityError::NoRollouts);
    }
    let mut valid = 0usize;
    let mut successes = 0usize;
    for i in 0..rollouts {
        let reward = policy.rollout(record, i).and_then(|resp| verifier.reward(record, &resp));
        match reward {
            Ok(r) => {
                valid += 1;
                successes += usize::from(r >= 0.5);
            }
            Err(e) => tracing::debug!(id = %record.id, rollout = i, error = %e, "rollout excluded"),
        }
    }
    if valid == 0 {
        return Err(LearnabilityError::AllRolloutsFailed(record.id.clone()));
    }
    Ok((successes as f64 / valid as f64, valid))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub rollouts: usize,
    pub band: DifficultyBand,
    pub beta: f64,
    #[serde(skip)]
    pub concurrency: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { rollouts: 8, band: DifficultyBand::default(), beta: 0.05, concurrency: 8 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct FilterOutcome {
    pub kept: Vec<DatasetRecord>,
    pub profiles: Vec<LearnabilityProfile>,
    /// Samples with no usable rollout; neither kept nor profiled.
    pub unscored: Vec<String>,
    pub warning: Option<String>,
}

/// Keep samples whose estimated pass rate lies in the band.
pub fn filter_dataset(
    dataset: &[DatasetRecord],
    policy: &dyn RolloutPolicy,
    verifier: &dyn RewardVerifier,
    config: &FilterConfig,
) -> Result<FilterOutcome, LearnabilityError> {
    config.band.validate()?;
    check(0.5, config.beta)?;
    if config.rollouts == 0 {
        return Err(LearnabilityError::NoRollouts);
    }
    let estimates = bounded_map(dataset, config.concurrency, |_, r| estimate_pass_rate(r, policy, config.rollouts, verifier));
    let mut out = FilterOutcome::default();
    for (record, est) in dataset.iter().zip(estimates) {
        match est {
            Ok((p, used)) => {
                let profile = LearnabilityProfile::compute(&record.id, p, used, config.beta, &config.band)?;
                if profile.kept {
                    out.kept.push(record.clone());
                }
                out.profiles.push(profile);
            }
            Err(LearnabilityError::AllRolloutsFailed(id)) => out.unscored.push(id),
            Err(e) => return Err(e),
        }
    }
    if out.kept.is_empty() {
        let msg = format!("difficulty filter kept 0 of {} samples", dataset.len());
        tracing::warn!("{msg}");
        out.warning = Some(msg);
    }
    Ok(out)
}

/// Re-apply a band to existing profiles without new rollouts.
pub fn apply_band(dataset: &[DatasetRecord], profiles: &[LearnabilityProfile], band: &DifficultyBand) -> Vec<DatasetRecord> {
    let keep: std::collections::HashSet<&str> =
        profiles.iter().filter(|p| band.contains(p.pass_rate)).map(|p| p.sample_id.as_str()).collect();
    dataset.iter().filter(|r| keep.contains(r.id.as_str())).cloned().collect()
}

pub fn write_profiles(jsonl: &Path, csv: &Path, profiles: &[LearnabilityProfile]) -> Result<(), StoreError> {
    store::write_jsonl(jsonl, profiles)?;
    store::write_csv(csv, profiles)
}
