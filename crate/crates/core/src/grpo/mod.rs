//! Group-relative policy optimization over an abstract policy, with a
//! tabular softmax policy whose gradients are exact.

mod tabular;

pub use tabular::TabularSoftmaxPolicy;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::AgentError;
use crate::store::{self, StoreError, SCHEMA_VERSION};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GrpoError {
    #[error("a group needs at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("group is inconsistent: {0}")]
    MalformedGroup(String),
    #[error("non-finite importance ratio at prompt {prompt}, trajectory {trajectory}, token {token}")]
    NonFiniteRatio { prompt: usize, trajectory: usize, token: usize },
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("expected {expected} parameters, got {got}")]
    ParameterShape { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    /// `f64::INFINITY` disables clipping.
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub group_size: usize,
    pub learning_rate: f64,
    pub epochs_per_batch: usize,
    pub std_floor: f64,
    /// Prompts per rollout batch; `π_old` is refreshed once per batch.
    pub batch_prompts: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            kl_beta: 0.05,
            group_size: 8,
            learning_rate: 0.5,
            epochs_per_batch: 1,
            std_floor: 1e-8,
            batch_prompts: 16,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let eps_ok = self.clip_epsilon == f64::INFINITY || (self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0);
        if !eps_ok {
            return Err(GrpoError::Config(format!("clip_epsilon must be in (0, 1), got {}", self.clip_epsilon)));
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return Err(GrpoError::Config(format!("kl_beta must be >= 0, got {}", self.kl_beta)));
        }
        if self.group_size < 2 {
            return Err(GrpoError::Config(format!("group_size must be >= 2, got {}", self.group_size)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(GrpoError::Config("learning_rate must be finite and positive".into()));
        }
        if self.epochs_per_batch == 0 || self.batch_prompts == 0 {
            return Err(GrpoError::Config("epochs_per_batch and batch_prompts must be >= 1".into()));
        }
        if !(self.std_floor > 0.0) {
            return Err(GrpoError::Config("std_floor must be positive".into()));
        }
        Ok(())
    }
}

pub trait Policy: Clone + Send + Sync {
    fn sample<R: Rng + ?Sized>(&self, prompt: usize, count: usize, rng: &mut R) -> Vec<Vec<usize>>;
    /// Per-token log-probabilities of a trajectory.
    fn log_prob(&self, prompt: usize, trajectory: &[usize]) -> Vec<f64>;
    fn parameters(&self) -> Vec<f64>;
    fn set_parameters(&mut self, theta: &[f64]) -> Result<(), GrpoError>;
    /// Every trajectory with its probability, when the policy is small
    /// enough to enumerate.
    fn full_distribution(&self, _prompt: usize) -> Option<Vec<(Vec<usize>, f64)>> {
        None
    }
}

pub trait DifferentiablePolicy: Policy {
    /// Sparse gradient of `log π(o_t | x, o_<t)` with respect to the
    /// parameter vector.
    fn grad_log_prob(&self, prompt: usize, trajectory: &[usize], t: usize) -> Vec<(usize, f64)>;
}

/// `Â_i = (r_i − mean) / max(std, floor)` with population std. Groups whose
/// std is below the floor get all-zero advantages.
pub fn group_advantages(rewards: &[f64], std_floor: f64) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(GrpoError::NonFinite("reward".into()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std < std_floor {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryGroup {
    pub prompt: usize,
    pub trajectories: Vec<Vec<usize>>,
    pub rewards: Vec<f64>,
    pub old_logp: Vec<Vec<f64>>,
    pub cur_logp: Vec<Vec<f64>>,
    pub init_logp: Vec<Vec<f64>>,
    pub advantages: Vec<f64>,
    /// `KL(π_θ(·|x) ‖ π_init(·|x))` when it can be computed exactly.
    pub exact_kl: Option<f64>,
}

impl TrajectoryGroup {
    /// Roll out `π_old` for one prompt and fill every field. `cur_logp`
    /// starts equal to `old_logp`.
    pub fn rollout<P: Policy, R: Rng + ?Sized>(
        prompt: usize,
        old: &P,
        init: &P,
        group_size: usize,
        std_floor: f64,
        reward: &mut dyn FnMut(usize, &[usize]) -> Result<f64, AgentError>,
        rng: &mut R,
    ) -> Result<Result<Self, AgentError>, GrpoError> {
        let trajectories = old.sample(prompt, group_size, rng);
        let mut rewards = Vec::with_capacity(group_size);
        for y in &trajectories {
            match reward(prompt, y) {
                Ok(r) => rewards.push(r),
                Err(e) => return Ok(Err(e)),
            }
        }
        let advantages = group_advantages(&rewards, std_floor)?;
        let old_logp: Vec<Vec<f64>> = trajectories.iter().map(|y| old.log_prob(prompt, y)).collect();
        let init_logp = trajectories.iter().map(|y| init.log_prob(prompt, y)).collect();
        let mut g = Self {
            prompt,
            cur_logp: old_logp.clone(),
            old_logp,
            init_logp,
            trajectories,
            rewards,
            advantages,
            exact_kl: None,
        };
        g.exact_kl = exact_kl(old, init, prompt);
        Ok(Ok(g))
    }

    pub fn is_effective(&self) -> bool {
        self.advantages.iter().any(|a| *a != 0.0)
    }

    fn check(&self) -> Result<(), GrpoError> {
        let g = self.trajectories.len();
        if g < 2 {
            return Err(GrpoError::GroupTooSmall(g));
        }
        let same = [self.rewards.len(), self.advantages.len(), self.old_logp.len(), self.cur_logp.len(), self.init_logp.len()]
            .iter()
            .all(|&n| n == g);
        if !same {
            return Err(GrpoError::MalformedGroup("per-trajectory fields differ in length".into()));
        }
        for (i, y) in self.trajectories.iter().enumerate() {
            if y.is_empty() {
                return Err(GrpoError::MalformedGroup(format!("trajectory {i} is empty")));
            }
            if [&self.old_logp[i], &self.cur_logp[i], &self.init_logp[i]].iter().any(|l| l.len() != y.len()) {
                return Err(GrpoError::MalformedGroup(format!("trajectory {i} log-prob length mismatch")));
            }
        }
        Ok(())
    }
}

/// Exact `KL(π ‖ π_init)` over the prompt's full trajectory distribution.
pub fn exact_kl<P: Policy>(policy: &P, init: &P, prompt: usize) -> Option<f64> {
    let dist = policy.full_distribution(prompt)?;
    Some(
        dist.iter()
            .filter(|(_, p)| *p > 0.0)
            .map(|(y, p)| p * (p.ln() - init.log_prob(prompt, y).iter().sum::<f64>()))
            .sum::<f64>()
            .max(0.0),
    )
}

fn clip(x: f64, lo: f64, hi: f64) -> f64 {
    x.max(lo).min(hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SurrogateTerms {
    pub j: f64,
    pub policy_term: f64,
    pub kl: f64,
    pub clip_frac: f64,
}

/// Per-group clipped surrogate with the KL penalty, from stored
/// log-probabilities.
///
/// The trajectory advantage is used for every token. The KL term is the
/// exact sequence-level divergence when the group carries one; otherwise
/// the per-token estimator `e^Δ − Δ − 1` with `Δ = init − cur`, summed over
/// tokens and averaged over trajectories, which is unbiased for the same
/// sequence-level quantity.
pub fn surrogate_objective(group: &TrajectoryGroup, config: &GrpoConfig) -> Result<SurrogateTerms, GrpoError> {
    group.check()?;
    let eps = config.clip_epsilon;
    let g = group.trajectories.len() as f64;
    let mut policy_term = 0.0;
    let mut sampled_kl = 0.0;
    let mut clipped = 0usize;
    let mut tokens = 0usize;
    for (i, y) in group.trajectories.iter().enumerate() {
        let a = group.advantages[i];
        let mut traj = 0.0;
        for t in 0..y.len() {
            let rho = (group.cur_logp[i][t] - group.old_logp[i][t]).exp();
            if !rho.is_finite() {
                return Err(GrpoError::NonFiniteRatio { prompt: group.prompt, trajectory: i, token: t });
            }
            let unclipped = rho * a;
            let clipped_v = clip(rho, 1.0 - eps, 1.0 + eps) * a;
            if clipped_v < unclipped {
                clipped += 1;
            }
            traj += unclipped.min(clipped_v);
            let d = group.init_logp[i][t] - group.cur_logp[i][t];
            sampled_kl += d.exp() - d - 1.0;
            tokens += 1;
        }
        policy_term += traj / y.len() as f64;
    }
    policy_term /= g;
    let kl = group.exact_kl.unwrap_or(sampled_kl / g);
    Ok(SurrogateTerms {
        j: policy_term - config.kl_beta * kl,
        policy_term,
        kl,
        clip_frac: clipped as f64 / tokens as f64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub j: f64,
    pub kl: f64,
    pub clip_frac: f64,
    pub mean_abs_adv: f64,
    pub effective_groups: usize,
    pub gradient: Vec<f64>,
}

/// Objective and its analytic gradient at the policy's current parameters,
/// averaged over effective groups. Old and init log-probabilities come from
/// the groups; current ones and exact KL are recomputed.
pub fn evaluate<P: DifferentiablePolicy>(
    policy: &P,
    init: &P,
    groups: &[TrajectoryGroup],
    config: &GrpoConfig,
) -> Result<Evaluation, GrpoError> {
    let dim = policy.parameters().len();
    let mut grad = vec![0.0; dim];
    let (mut j, mut kl, mut clip_frac, mut abs_adv) = (0.0, 0.0, 0.0, 0.0);
    let effective: Vec<&TrajectoryGroup> = groups.iter().filter(|g| g.is_effective()).collect();
    let eps = config.clip_epsilon;
    for group in &effective {
        let mut grp = (*group).clone();
        grp.cur_logp = grp.trajectories.iter().map(|y| policy.log_prob(grp.prompt, y)).collect();
        let full = policy.full_distribution(grp.prompt);
        grp.exact_kl = full.as_ref().map(|_| exact_kl(policy, init, grp.prompt).unwrap_or(0.0));
        let terms = surrogate_objective(&grp, config)?;
        j += terms.j;
        kl += terms.kl;
        clip_frac += terms.clip_frac;
        abs_adv += grp.advantages.iter().map(|a| a.abs()).sum::<f64>() / grp.advantages.len() as f64;

        let g = grp.trajectories.len() as f64;
        for (i, y) in grp.trajectories.iter().enumerate() {
            let a = grp.advantages[i];
            let len = y.len() as f64;
            for t in 0..y.len() {
                let rho = (grp.cur_logp[i][t] - grp.old_logp[i][t]).exp();
                let unclipped = rho * a;
                let active = unclipped <= clip(rho, 1.0 - eps, 1.0 + eps) * a;
                let mut coef = if active { rho * a / (g * len) } else { 0.0 };
                if full.is_none() {
                    let d = grp.init_logp[i][t] - grp.cur_logp[i][t];
                    coef -= config.kl_beta * (1.0 - d.exp()) / g;
                }
                if coef != 0.0 {
                    for (k, v) in policy.grad_log_prob(grp.prompt, y, t) {
                        grad[k] += coef * v;
                    }
                }
            }
        }
        if let Some(dist) = &full {
            // ∇KL = Σ_y π(y) (log π(y) − log π_init(y) − KL) ∇log π(y)
            let kl_g = grp.exact_kl.unwrap_or(0.0);
            for (y, p) in dist.iter().filter(|(_, p)| *p > 0.0) {
                let w = p * (p.ln() - init.log_prob(grp.prompt, y).iter().sum::<f64>() - kl_g);
                for t in 0..y.len() {
                    for (k, v) in policy.grad_log_prob(grp.prompt, y, t) {
                        grad[k] -= config.kl_beta * w * v;
                    }
                }
            }
        }
    }
    let n = effective.len();
    if n > 0 {
        let inv = 1.0 / n as f64;
        grad.iter_mut().for_each(|x| *x *= inv);
        j *= inv;
        kl *= inv;
        clip_frac *= inv;
        abs_adv *= inv;
    }
    if grad.iter().any(|x| !x.is_finite()) || !j.is_finite() {
        return Err(GrpoError::NonFinite("gradient".into()));
    }
    Ok(Evaluation { j, kl, clip_frac, mean_abs_adv: abs_adv, effective_groups: n, gradient: grad })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub j_before: f64,
    pub j_after: f64,
    pub kl: f64,
    pub clip_frac: f64,
    pub mean_abs_adv: f64,
    pub effective_groups: usize,
}

/// `epochs_per_batch` gradient-ascent steps on one batch. A batch without
/// effective groups leaves the parameters untouched.
pub fn policy_gradient_step<P: DifferentiablePolicy>(
    policy: &mut P,
    init: &P,
    groups: &[TrajectoryGroup],
    config: &GrpoConfig,
) -> Result<StepReport, GrpoError> {
    config.validate()?;
    let first = evaluate(policy, init, groups, config)?;
    if first.effective_groups == 0 {
        return Ok(StepReport {
            j_before: 0.0,
            j_after: 0.0,
            kl: 0.0,
            clip_frac: 0.0,
            mean_abs_adv: 0.0,
            effective_groups: 0,
        });
    }
    let mut eval = first.clone();
    for _ in 0..config.epochs_per_batch {
        let theta: Vec<f64> =
            policy.parameters().iter().zip(&eval.gradient).map(|(t, g)| t + config.learning_rate * g).collect();
        policy.set_parameters(&theta)?;
        eval = evaluate(policy, init, groups, config)?;
    }
    Ok(StepReport {
        j_before: first.j,
        j_after: eval.j,
        kl: eval.kl,
        clip_frac: first.clip_frac,
        mean_abs_adv: first.mean_abs_adv,
        effective_groups: first.effective_groups,
    })
}

/// `π*(y) ∝ π_init(y) · e^{r(y)/β}`.
pub fn tilted_optimal_policy(init: &[f64], rewards: &[f64], beta: f64) -> Result<Vec<f64>, GrpoError> {
    if init.len() != rewards.len() || init.is_empty() {
        return Err(GrpoError::MalformedGroup("init and rewards must have equal, non-zero length".into()));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(GrpoError::Config(format!("beta must be positive, got {beta}")));
    }
    let total: f64 = init.iter().sum();
    if init.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(GrpoError::MalformedGroup("init is not a distribution".into()));
    }
    // Shift by the largest reward so the weights stay representable.
    let r_max = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = init.iter().zip(rewards).map(|(p, r)| p * ((r - r_max) / beta).exp()).collect();
    let z: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / z).collect())
}

/// Gradient of the unclipped objective `E_{π_old}[ρ A] − β KL(π_θ ‖ π_init)`
/// with exact expectations for one prompt, taking `π_old = π_θ` and the
/// centered advantage `A(y) = r(y) − E_{π_old}[r]`.
///
/// Equals the gradient of `E_θ[r] − β KL(π_θ ‖ π_init)`, so it vanishes at
/// the tilted optimum.
pub fn exhaustive_objective_gradient<P: DifferentiablePolicy>(
    policy: &P,
    init: &P,
    prompt: usize,
    reward: &dyn Fn(&[usize]) -> f64,
    beta: f64,
) -> Result<Vec<f64>, GrpoError> {
    let dist = policy
        .full_distribution(prompt)
        .ok_or_else(|| GrpoError::Config("policy cannot enumerate its distribution".into()))?;
    let mean_r: f64 = dist.iter().map(|(y, p)| p * reward(y)).sum();
    let kl = exact_kl(policy, init, prompt).unwrap_or(0.0);
    let mut grad = vec![0.0; policy.parameters().len()];
    for (y, p) in dist.iter().filter(|(_, p)| *p > 0.0) {
        let log_ratio = p.ln() - init.log_prob(prompt, y).iter().sum::<f64>();
        let w = p * ((reward(y) - mean_r) - beta * (log_ratio - kl));
        for t in 0..y.len() {
            for (k, v) in policy.grad_log_prob(prompt, y, t) {
                grad[k] += w * v;
            }
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub iter: u32,
    pub step: usize,
    #[serde(rename = "J")]
    pub j: f64,
    pub kl: f64,
    pub clip_frac: f64,
    pub mean_abs_adv: f64,
    pub effective_groups: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IterationOutcome {
    pub steps: Vec<StepMetrics>,
    /// Prompts whose group carried signal and entered an update.
    pub effective_prompts: Vec<usize>,
    /// Prompts skipped because their rewards could not be verified.
    pub failed_prompts: Vec<usize>,
}

/// One training iteration over `prompts`. `π_init` is the policy as passed
/// in; `π_old` is refreshed at the start of every batch.
pub fn train_iteration<P: DifferentiablePolicy>(
    policy: &mut P,
    prompts: &[usize],
    reward: &mut dyn FnMut(usize, &[usize]) -> Result<f64, AgentError>,
    config: &GrpoConfig,
    iteration: u32,
    seed: u64,
) -> Result<IterationOutcome, GrpoError> {
    config.validate()?;
    let init = policy.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = IterationOutcome::default();
    for (step, batch) in prompts.chunks(config.batch_prompts).enumerate() {
        let old = policy.clone();
        let mut groups = Vec::with_capacity(batch.len());
        for &prompt in batch {
            match TrajectoryGroup::rollout(prompt, &old, &init, config.group_size, config.std_floor, reward, &mut rng)? {
                Ok(g) => {
                    if g.is_effective() {
                        out.effective_prompts.push(prompt);
                    }
                    groups.push(g);
                }
                Err(e) => {
                    tracing::warn!(prompt, error = %e, "reward verification failed; group skipped");
                    out.failed_prompts.push(prompt);
                }
            }
        }
        let report = policy_gradient_step(policy, &init, &groups, config)?;
        out.steps.push(StepMetrics {
            iter: iteration,
            step,
            j: report.j_after,
            kl: report.kl,
            clip_frac: report.clip_frac,
            mean_abs_adv: report.mean_abs_adv,
            effective_groups: report.effective_groups,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BanditTrace {
    /// Probability of the rewarded action after each step.
    pub p_correct: Vec<f64>,
}

impl BanditTrace {
    pub fn first_step_above(&self, threshold: f64) -> Option<usize> {
        self.p_correct.iter().position(|p| *p > threshold).map(|i| i + 1)
    }
}

/// Single-prompt bandit: action 0 earns reward 1, every other action 0.
/// Each step rolls out one group from the current policy and applies one
/// update, with the KL anchor at the uniform starting policy.
pub fn bandit_convergence(vocab: usize, steps: usize, config: &GrpoConfig, seed: u64) -> Result<BanditTrace, GrpoError> {
    config.validate()?;
    let mut policy = TabularSoftmaxPolicy::new(1, vocab);
    let init = policy.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reward = |_: usize, y: &[usize]| -> Result<f64, AgentError> { Ok(f64::from(u8::from(y[0] == 0))) };
    let mut p_correct = Vec::with_capacity(steps);
    for _ in 0..steps {
        let old = policy.clone();
        let g = TrajectoryGroup::rollout(0, &old, &init, config.group_size, config.std_floor, &mut reward, &mut rng)?
            .map_err(|e| GrpoError::Config(e.to_string()))?;
        policy_gradient_step(&mut policy, &init, std::slice::from_ref(&g), config)?;
        p_correct.push(policy.probs(0, 0)[0]);
    }
    Ok(BanditTrace { p_correct })
}

pub fn write_metrics(path: &Path, steps: &[StepMetrics]) -> Result<(), StoreError> {
    store::write_jsonl(path, steps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<S> {
    pub schema_version: String,
    pub format: String,
    pub iteration: u32,
    pub parameters: Vec<f64>,
    pub config: GrpoConfig,
    pub state: S,
}

impl<S: Serialize + serde::de::DeserializeOwned> Checkpoint<S> {
    pub const FORMAT: &'static str = "dpe-checkpoint";

    pub fn new(iteration: u32, parameters: Vec<f64>, config: GrpoConfig, state: S) -> Self {
        Self { schema_version: SCHEMA_VERSION.into(), format: Self::FORMAT.into(), iteration, parameters, config, state }
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        store::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let c: Self = store::read_json(path)?;
        if c.format != Self::FORMAT {
            return Err(StoreError::Invalid { path: path.to_path_buf(), message: format!("not a checkpoint (format `{}`)", c.format) });
        }
        Ok(c)
    }
}
