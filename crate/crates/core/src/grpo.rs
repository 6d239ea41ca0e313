//! GRPO optimization core on small linear-softmax policies.
//!
//! The objective maximized per group of K rollouts is
//!
//! ```text
//! J = mean_k [ min(rho_k A_k, clip(rho_k, 1-eps, 1+eps) A_k) - beta_kl * k3_k ]
//! rho_k = exp(logp_new - logp_old)
//! k3_k  = exp(logp_ref - logp_new) - (logp_ref - logp_new) - 1
//! A_k   = (r_k - mean(r)) / (std(r) + 1e-8)        (population std)
//! ```
//!
//! Everything here has an exact analytic gradient; [`grad_check`] compares it
//! against central finite differences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clip threshold used by default.
pub const DEFAULT_EPSILON: f64 = 0.2;
/// KL coefficient used by default.
pub const DEFAULT_BETA_KL: f64 = 0.01;
/// Group size used by default.
pub const DEFAULT_GROUP_SIZE: usize = 6;

const ADV_EPS: f64 = 1e-8;

/// Normalizes rewards within one group.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::arg(format!(
            "group needs >= 2 rewards, got {}",
            rewards.len()
        )));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let (lo, hi) = rewards
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), r| (l.min(*r), h.max(*r)));
    if lo == hi {
        return Ok(vec![0.0; rewards.len()]);
    }
    let std = (rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / (std + ADV_EPS)).collect())
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 {
        Ok(())
    } else {
        Err(Error::arg(format!("epsilon must be > 0, got {epsilon}")))
    }
}

pub fn clipped_surrogate(logp_new: f64, logp_old: f64, advantage: f64, epsilon: f64) -> Result<f64> {
    check_epsilon(epsilon)?;
    let rho = (logp_new - logp_old).exp();
    let clipped = rho.clamp(1.0 - epsilon, 1.0 + epsilon);
    Ok((rho * advantage).min(clipped * advantage))
}

/// Derivative of [`clipped_surrogate`] with respect to `logp_new`.
fn clipped_surrogate_dlogp(logp_new: f64, logp_old: f64, advantage: f64, epsilon: f64) -> f64 {
    let rho = (logp_new - logp_old).exp();
    let clipped = rho.clamp(1.0 - epsilon, 1.0 + epsilon);
    let inside = (1.0 - epsilon..=1.0 + epsilon).contains(&rho);
    if rho * advantage <= clipped * advantage || inside {
        rho * advantage
    } else {
        0.0
    }
}

/// Non-negative per-sample KL estimator (k3).
pub fn kl_penalty(logp_new: f64, logp_ref: f64) -> f64 {
    let d = logp_ref - logp_new;
    d.exp() - d - 1.0
}

fn kl_penalty_dlogp(logp_new: f64, logp_ref: f64) -> f64 {
    1.0 - (logp_ref - logp_new).exp()
}

/// One sampled response of a group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout<E> {
    pub episode: E,
    pub logprob_new: f64,
    pub logprob_old: f64,
    pub logprob_ref: f64,
    pub reward: f64,
}

fn check_group<E>(group: &[Rollout<E>], epsilon: f64, beta_kl: f64) -> Result<()> {
    if group.len() < 2 {
        return Err(Error::arg(format!("group needs >= 2 rollouts, got {}", group.len())));
    }
    check_epsilon(epsilon)?;
    if !(beta_kl >= 0.0) {
        return Err(Error::arg(format!("beta_kl must be >= 0, got {beta_kl}")));
    }
    for r in group {
        for lp in [r.logprob_new, r.logprob_old, r.logprob_ref] {
            if !(lp <= 0.0) {
                return Err(Error::arg(format!("log-probability {lp} is not <= 0")));
            }
        }
    }
    Ok(())
}

/// Objective value from the logprobs stored in the rollouts.
pub fn grpo_objective<E>(group: &[Rollout<E>], epsilon: f64, beta_kl: f64) -> Result<f64> {
    check_group(group, epsilon, beta_kl)?;
    let rewards: Vec<f64> = group.iter().map(|r| r.reward).collect();
    let adv = group_advantages(&rewards)?;
    let mut total = 0.0;
    for (r, a) in group.iter().zip(&adv) {
        total += clipped_surrogate(r.logprob_new, r.logprob_old, *a, epsilon)?
            - beta_kl * kl_penalty(r.logprob_new, r.logprob_ref);
    }
    Ok(total / group.len() as f64)
}

/// Observation given to a linear-softmax head.
///
/// `logit(a) = <theta, phi(a)>`. `Dense` stores `phi(a)` row by row; `Shared`
/// stores one vector `x` with `phi(a) = e_a (x) x`, i.e. a weight matrix with
/// one row per action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Observation {
    Dense { n_actions: usize, dim: usize, features: Vec<f64> },
    Shared { n_actions: usize, x: Vec<f64> },
}

impl Observation {
    pub fn dense(n_actions: usize, dim: usize, features: Vec<f64>) -> Result<Self> {
        if features.len() != n_actions * dim {
            return Err(Error::Shape(format!(
                "{} features for {n_actions} actions x {dim}",
                features.len()
            )));
        }
        Ok(Observation::Dense { n_actions, dim, features })
    }

    pub fn shared(n_actions: usize, x: Vec<f64>) -> Self {
        Observation::Shared { n_actions, x }
    }

    pub fn n_actions(&self) -> usize {
        match self {
            Observation::Dense { n_actions, .. } | Observation::Shared { n_actions, .. } => *n_actions,
        }
    }

    /// Length of the parameter vector this observation expects.
    pub fn param_dim(&self) -> usize {
        match self {
            Observation::Dense { dim, .. } => *dim,
            Observation::Shared { n_actions, x } => n_actions * x.len(),
        }
    }

    fn logit(&self, a: usize, theta: &[f64]) -> f64 {
        match self {
            Observation::Dense { dim, features, .. } => {
                let row = &features[a * dim..(a + 1) * dim];
                row.iter().zip(theta).map(|(f, t)| f * t).sum()
            }
            Observation::Shared { x, .. } => {
                let w = &theta[a * x.len()..(a + 1) * x.len()];
                x.iter().zip(w).map(|(f, t)| f * t).sum()
            }
        }
    }

    fn add_feature(&self, a: usize, scale: f64, grad: &mut [f64]) {
        match self {
            Observation::Dense { dim, features, .. } => {
                for (g, f) in grad.iter_mut().zip(&features[a * dim..(a + 1) * dim]) {
                    *g += scale * f;
                }
            }
            Observation::Shared { x, .. } => {
                let w = &mut grad[a * x.len()..(a + 1) * x.len()];
                for (g, f) in w.iter_mut().zip(x) {
                    *g += scale * f;
                }
            }
        }
    }
}

/// Linear-softmax policy over a discrete action set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    pub n_actions: usize,
    pub weights: Vec<f64>,
}

/// One decision: the observation and the action taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub obs: Observation,
    pub action: usize,
}

/// Log-softmax of a linear head with parameters `theta`.
pub fn head_log_probs(theta: &[f64], obs: &Observation) -> Vec<f64> {
    debug_assert_eq!(obs.param_dim(), theta.len());
    let logits: Vec<f64> = (0..obs.n_actions()).map(|a| obs.logit(a, theta)).collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.into_iter().map(|l| l - lse).collect()
}

/// Adds `scale * grad log pi(action | obs)` into `grad`; returns the log-prob.
pub fn head_log_prob_grad(theta: &[f64], obs: &Observation, action: usize, scale: f64, grad: &mut [f64]) -> f64 {
    let lp = head_log_probs(theta, obs);
    obs.add_feature(action, scale, grad);
    for (a, l) in lp.iter().enumerate() {
        obs.add_feature(a, -scale * l.exp(), grad);
    }
    lp[action]
}

impl ToyPolicy {
    pub fn zeros(n_actions: usize, n_params: usize) -> Self {
        Self {
            n_actions,
            weights: vec![0.0; n_params],
        }
    }

    pub fn logits(&self, obs: &Observation) -> Vec<f64> {
        debug_assert_eq!(obs.n_actions(), self.n_actions);
        (0..self.n_actions).map(|a| obs.logit(a, &self.weights)).collect()
    }

    pub fn log_probs(&self, obs: &Observation) -> Vec<f64> {
        head_log_probs(&self.weights, obs)
    }

    pub fn probs(&self, obs: &Observation) -> Vec<f64> {
        self.log_probs(obs).into_iter().map(f64::exp).collect()
    }

    pub fn log_prob(&self, obs: &Observation, action: usize) -> f64 {
        self.log_probs(obs)[action]
    }

    pub fn log_prob_grad(&self, obs: &Observation, action: usize, scale: f64, grad: &mut [f64]) -> f64 {
        head_log_prob_grad(&self.weights, obs, action, scale, grad)
    }

    pub fn entropy(&self, obs: &Observation) -> f64 {
        self.log_probs(obs).iter().map(|l| -l.exp() * l).sum()
    }

    pub fn argmax(&self, obs: &Observation) -> usize {
        argmax(&self.logits(obs))
    }
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Anything with a flat parameter vector and differentiable episode log-probs.
pub trait Policy: Clone {
    type Episode;

    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    fn episode_log_prob(&self, episode: &Self::Episode) -> f64;
    /// Adds `scale * grad log pi(episode)` into `grad`; returns the log-prob.
    fn episode_log_prob_grad(&self, episode: &Self::Episode, scale: f64, grad: &mut [f64]) -> f64;
}

impl Policy for ToyPolicy {
    type Episode = Vec<Step>;

    fn params(&self) -> &[f64] {
        &self.weights
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    fn episode_log_prob(&self, episode: &Vec<Step>) -> f64 {
        episode.iter().map(|s| self.log_prob(&s.obs, s.action)).sum()
    }

    fn episode_log_prob_grad(&self, episode: &Vec<Step>, scale: f64, grad: &mut [f64]) -> f64 {
        episode
            .iter()
            .map(|s| self.log_prob_grad(&s.obs, s.action, scale, grad))
            .sum()
    }
}

/// Cross-entropy of the target actions: `-sum_t log pi(y_t | obs_t)`.
pub fn bc_loss(policy: &ToyPolicy, observations: &[Observation], targets: &[usize]) -> Result<f64> {
    if observations.len() != targets.len() {
        return Err(Error::arg(format!(
            "{} observations vs {} targets",
            observations.len(),
            targets.len()
        )));
    }
    let mut loss = 0.0;
    for (obs, &a) in observations.iter().zip(targets) {
        if a >= policy.n_actions {
            return Err(Error::arg(format!("target action {a} >= {}", policy.n_actions)));
        }
        loss -= policy.log_prob(obs, a);
    }
    Ok(loss)
}

/// A scalar function of policy parameters with an analytic gradient.
pub trait Objective<P: Policy> {
    fn value(&self, policy: &P) -> f64;
    fn gradient(&self, policy: &P) -> Vec<f64>;
}

/// [`bc_loss`] as an objective over arbitrary policy episodes.
pub struct CloningObjective<'a, P: Policy> {
    pub episodes: &'a [P::Episode],
}

impl<P: Policy> Objective<P> for CloningObjective<'_, P> {
    fn value(&self, policy: &P) -> f64 {
        -self.episodes.iter().map(|e| policy.episode_log_prob(e)).sum::<f64>()
    }

    fn gradient(&self, policy: &P) -> Vec<f64> {
        let mut g = vec![0.0; policy.params().len()];
        for e in self.episodes {
            policy.episode_log_prob_grad(e, -1.0, &mut g);
        }
        g
    }
}

/// GRPO objective of one group with frozen old/reference log-probs.
pub struct GrpoObjective<'a, P: Policy> {
    pub group: &'a [Rollout<P::Episode>],
    pub advantages: Vec<f64>,
    pub epsilon: f64,
    pub beta_kl: f64,
}

impl<'a, P: Policy> GrpoObjective<'a, P> {
    pub fn new(group: &'a [Rollout<P::Episode>], epsilon: f64, beta_kl: f64) -> Result<Self> {
        check_group(group, epsilon, beta_kl)?;
        let rewards: Vec<f64> = group.iter().map(|r| r.reward).collect();
        Ok(Self {
            group,
            advantages: group_advantages(&rewards)?,
            epsilon,
            beta_kl,
        })
    }

    /// Value and gradient in one pass, accumulating `scale * grad` into `grad`.
    pub fn accumulate(&self, policy: &P, scale: f64, grad: &mut [f64]) -> f64 {
        let k = self.group.len() as f64;
        let mut total = 0.0;
        for (r, &adv) in self.group.iter().zip(&self.advantages) {
            let lp = policy.episode_log_prob(&r.episode);
            let s = clipped_surrogate(lp, r.logprob_old, adv, self.epsilon).expect("epsilon checked");
            total += s - self.beta_kl * kl_penalty(lp, r.logprob_ref);
            let d = clipped_surrogate_dlogp(lp, r.logprob_old, adv, self.epsilon)
                - self.beta_kl * kl_penalty_dlogp(lp, r.logprob_ref);
            if d != 0.0 {
                policy.episode_log_prob_grad(&r.episode, scale * d / k, grad);
            }
        }
        total / k
    }
}

impl<P: Policy> Objective<P> for GrpoObjective<'_, P> {
    fn value(&self, policy: &P) -> f64 {
        let k = self.group.len() as f64;
        self.group
            .iter()
            .zip(&self.advantages)
            .map(|(r, &adv)| {
                let lp = policy.episode_log_prob(&r.episode);
                clipped_surrogate(lp, r.logprob_old, adv, self.epsilon).expect("epsilon checked")
                    - self.beta_kl * kl_penalty(lp, r.logprob_ref)
            })
            .sum::<f64>()
            / k
    }

    fn gradient(&self, policy: &P) -> Vec<f64> {
        let mut g = vec![0.0; policy.params().len()];
        self.accumulate(policy, 1.0, &mut g);
        g
    }
}

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Max relative error between the analytic gradient and central differences.
///
/// Denominator is `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<P: Policy, O: Objective<P>>(policy: &P, objective: &O, h: f64) -> f64 {
    let analytic = objective.gradient(policy);
    let mut probe = policy.clone();
    let mut worst = 0.0f64;
    for i in 0..policy.params().len() {
        let orig = policy.params()[i];
        probe.params_mut()[i] = orig + h;
        let up = objective.value(&probe);
        probe.params_mut()[i] = orig - h;
        let down = objective.value(&probe);
        probe.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

/// Adam on a flat parameter vector; `step` ascends along `grad`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] += self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}
