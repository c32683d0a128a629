//! Gaussian MLP policy trained with PPO on the constraint-penalized reward.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::constraint::ConstraintModel;
use crate::envs::{Env, EnvSpec, PointAction, PointState, ACTION_LIMIT};
use crate::error::{Error, Result};
use crate::nn::{Activation, AdamConfig, AdamState, Matrix, MlpGrads, MlpParams, VectorAdam};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 1.0;
const ACTION_DIM: usize = 2;
/// Observation features: scaled position plus heading as (cos, sin).
pub const OBS_DIM: usize = 4;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_epsilon: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    /// Global gradient-norm clip per network; `0` disables clipping.
    pub max_grad_norm: f64,
    /// PPO updates per outer iteration.
    pub forward_iterations: usize,
    /// Transitions collected per PPO update.
    pub forward_timesteps: usize,
    /// `w_p`
    pub penalty_weight: f64,
    /// Penalize the part of the true constraint the agent is told about.
    pub known_region: bool,
    pub hidden_layers: Vec<usize>,
    pub log_std_init: f64,
    /// Positions are multiplied by this before entering the networks.
    pub obs_scale: f64,
}

impl PpoConfig {
    pub fn point_circle() -> Self {
        PpoConfig {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_epsilon: 0.2,
            entropy_coef: 0.01,
            value_coef: 0.5,
            learning_rate: 3e-4,
            epochs: 10,
            minibatch_size: 64,
            max_grad_norm: 0.5,
            forward_iterations: 5,
            forward_timesteps: 20_000,
            penalty_weight: 0.5,
            known_region: true,
            hidden_layers: vec![16, 16],
            log_std_init: -1.5,
            obs_scale: 0.1,
        }
    }

    pub fn point_obstacle() -> Self {
        PpoConfig {
            forward_iterations: 6,
            penalty_weight: 0.7,
            ..Self::point_circle()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(Error::config(name, "must lie in (0, 1]"))
            }
        };
        unit("ppo.gamma", self.gamma)?;
        unit("ppo.gae_lambda", self.gae_lambda)?;
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon.is_finite()) {
            return Err(Error::config("ppo.clip_epsilon", "must be positive"));
        }
        for (name, v) in [
            ("ppo.entropy_coef", self.entropy_coef),
            ("ppo.value_coef", self.value_coef),
            ("ppo.max_grad_norm", self.max_grad_norm),
            ("ppo.penalty_weight", self.penalty_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be non-negative"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("ppo.learning_rate", "must be positive"));
        }
        for (name, v) in [
            ("ppo.epochs", self.epochs),
            ("ppo.minibatch_size", self.minibatch_size),
            ("ppo.forward_iterations", self.forward_iterations),
            ("ppo.forward_timesteps", self.forward_timesteps),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if self.hidden_layers.is_empty() || self.hidden_layers.contains(&0) {
            return Err(Error::config("ppo.hidden_layers", "need positive layer sizes"));
        }
        if !(LOG_STD_MIN..=LOG_STD_MAX).contains(&self.log_std_init) {
            return Err(Error::config("ppo.log_std_init", "must lie in [-5, 1]"));
        }
        if !(self.obs_scale > 0.0 && self.obs_scale.is_finite()) {
            return Err(Error::config("ppo.obs_scale", "must be positive"));
        }
        Ok(())
    }
}

/// Actor (state → tanh-bounded action mean), state-independent log std, and critic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyModel {
    pub actor: MlpParams,
    pub log_std: Vec<f64>,
    pub value_net: MlpParams,
    pub obs_scale: f64,
}

pub fn observation(s: &PointState, scale: f64) -> [f64; OBS_DIM] {
    [s.x * scale, s.y * scale, s.psi.cos(), s.psi.sin()]
}

fn gaussian_log_prob(action: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    action
        .iter()
        .zip(mean)
        .zip(log_std)
        .map(|((a, m), ls)| {
            let z = (a - m) / ls.exp();
            -0.5 * z * z - ls - HALF_LN_2PI
        })
        .sum()
}

impl PolicyModel {
    pub fn new<R: Rng + ?Sized>(cfg: &PpoConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut sizes = vec![OBS_DIM];
        sizes.extend_from_slice(&cfg.hidden_layers);
        let mut actor_sizes = sizes.clone();
        actor_sizes.push(ACTION_DIM);
        sizes.push(1);
        let actor = MlpParams::new(&actor_sizes, Activation::leaky_relu(), Activation::Tanh, rng)?;
        let value_net = MlpParams::new(&sizes, Activation::leaky_relu(), Activation::Identity, rng)?;
        Ok(PolicyModel {
            actor,
            log_std: vec![cfg.log_std_init; ACTION_DIM],
            value_net,
            obs_scale: cfg.obs_scale,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.actor.validate()?;
        self.value_net.validate()?;
        if self.actor.input_dim() != OBS_DIM || self.actor.output_dim() != ACTION_DIM {
            return Err(Error::Snapshot(format!(
                "actor maps {} -> {}, expected {OBS_DIM} -> {ACTION_DIM}",
                self.actor.input_dim(),
                self.actor.output_dim()
            )));
        }
        if self.value_net.input_dim() != OBS_DIM || self.value_net.output_dim() != 1 {
            return Err(Error::Snapshot("value network must map observations to a scalar".into()));
        }
        if self.actor.output_activation != Activation::Tanh {
            return Err(Error::Snapshot("actor needs a tanh output".into()));
        }
        if self.log_std.len() != ACTION_DIM || self.log_std.iter().any(|v| !v.is_finite()) {
            return Err(Error::Snapshot("log_std must hold two finite values".into()));
        }
        Ok(())
    }

    pub fn observe(&self, s: &PointState) -> [f64; OBS_DIM] {
        observation(s, self.obs_scale)
    }

    /// Action mean, always inside the action box.
    pub fn mean(&self, s: &PointState) -> [f64; ACTION_DIM] {
        let mut out = Vec::with_capacity(ACTION_DIM);
        self.actor.predict_one(&self.observe(s), &mut out);
        [ACTION_LIMIT * out[0], ACTION_LIMIT * out[1]]
    }

    pub fn value(&self, s: &PointState) -> f64 {
        let mut out = Vec::with_capacity(1);
        self.value_net.predict_one(&self.observe(s), &mut out);
        out[0]
    }

    pub fn log_std_clamped(&self) -> [f64; ACTION_DIM] {
        [
            self.log_std[0].clamp(LOG_STD_MIN, LOG_STD_MAX),
            self.log_std[1].clamp(LOG_STD_MIN, LOG_STD_MAX),
        ]
    }

    /// Differential entropy of the action distribution (before clamping).
    pub fn entropy(&self) -> f64 {
        self.log_std_clamped()
            .iter()
            .map(|ls| ls + 0.5 + HALF_LN_2PI)
            .sum()
    }

    pub fn log_prob(&self, s: &PointState, raw_action: &[f64; ACTION_DIM]) -> f64 {
        gaussian_log_prob(raw_action, &self.mean(s), &self.log_std_clamped())
    }
}

/// Draw from the policy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionSample {
    /// The clamped action sent to the environment.
    pub action: PointAction,
    /// The Gaussian draw before clamping.
    pub raw: [f64; ACTION_DIM],
    /// Log density of `raw`.
    pub log_prob: f64,
}

pub fn sample_action<R: Rng + ?Sized>(policy: &PolicyModel, s: &PointState, rng: &mut R) -> ActionSample {
    let mean = policy.mean(s);
    let log_std = policy.log_std_clamped();
    let mut raw = [0.0; ACTION_DIM];
    for j in 0..ACTION_DIM {
        let eps: f64 = rng.sample(StandardNormal);
        raw[j] = mean[j] + log_std[j].exp() * eps;
    }
    ActionSample {
        action: PointAction::new(raw[0], raw[1]),
        raw,
        log_prob: gaussian_log_prob(&raw, &mean, &log_std),
    }
}

/// `r − w_p · c`, with `c = 1` for an infeasible state.
pub fn penalized_reward(reward: f64, indicator: u8, penalty_weight: f64) -> f64 {
    debug_assert!(indicator <= 1);
    reward - penalty_weight * f64::from(indicator)
}

/// One collected batch of transitions. Index `t` refers to the action taken in
/// `states[t]` and the transition it caused.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutBuffer {
    pub states: Vec<PointState>,
    pub next_states: Vec<PointState>,
    pub raw_actions: Vec<[f64; ACTION_DIM]>,
    pub actions: Vec<PointAction>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub penalized_rewards: Vec<f64>,
    pub raw_rewards: Vec<f64>,
    /// Penalty indicator that was applied (learned constraint or known region).
    pub constraint_flags: Vec<u8>,
    pub true_violations: Vec<bool>,
    /// The episode ended after this step (goal, time limit, or end of buffer).
    pub dones: Vec<bool>,
    /// Episode ended at the goal: bootstrap with zero.
    pub terminals: Vec<bool>,
    /// Value of the next state, used when an episode is cut off at this step.
    pub bootstrap_values: Vec<f64>,
    /// `[start, end)` index ranges of the episodes, in order.
    pub episodes: Vec<std::ops::Range<usize>>,
    /// Whether each episode ran to its natural end (the last one may be cut).
    pub episode_complete: Vec<bool>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Checks equal lengths and that the episodes partition the index range.
    pub fn check_invariants(&self) -> bool {
        let n = self.len();
        let lens = [
            self.next_states.len(),
            self.raw_actions.len(),
            self.actions.len(),
            self.log_probs.len(),
            self.values.len(),
            self.penalized_rewards.len(),
            self.raw_rewards.len(),
            self.constraint_flags.len(),
            self.true_violations.len(),
            self.dones.len(),
            self.terminals.len(),
            self.bootstrap_values.len(),
        ];
        if lens.iter().any(|&l| l != n) || self.episodes.len() != self.episode_complete.len() {
            return false;
        }
        let mut next = 0;
        for ep in &self.episodes {
            if ep.start != next || ep.end <= ep.start || !self.dones[ep.end - 1] {
                return false;
            }
            if self.dones[ep.start..ep.end - 1].iter().any(|&d| d) {
                return false;
            }
            next = ep.end;
        }
        next == n
    }

    /// Undiscounted raw and penalized returns of the complete episodes.
    pub fn episode_returns(&self) -> Vec<(f64, f64)> {
        self.episodes
            .iter()
            .zip(&self.episode_complete)
            .filter(|(_, &c)| c)
            .map(|(ep, _)| {
                (
                    self.raw_rewards[ep.clone()].iter().sum(),
                    self.penalized_rewards[ep.clone()].iter().sum(),
                )
            })
            .collect()
    }
}

/// Runs the policy for `cfg.forward_timesteps` steps against a frozen
/// constraint model, penalizing every step whose successor state the model
/// classifies as infeasible.
pub fn collect_rollouts<R: Rng + ?Sized>(
    policy: &PolicyModel,
    spec: &EnvSpec,
    constraint: &ConstraintModel,
    cfg: &PpoConfig,
    rng: &mut R,
) -> RolloutBuffer {
    let n = cfg.forward_timesteps;
    let mut buf = RolloutBuffer {
        states: Vec::with_capacity(n),
        next_states: Vec::with_capacity(n),
        raw_actions: Vec::with_capacity(n),
        actions: Vec::with_capacity(n),
        log_probs: Vec::with_capacity(n),
        values: Vec::with_capacity(n),
        penalized_rewards: Vec::with_capacity(n),
        raw_rewards: Vec::with_capacity(n),
        constraint_flags: Vec::with_capacity(n),
        true_violations: Vec::with_capacity(n),
        dones: Vec::with_capacity(n),
        terminals: Vec::with_capacity(n),
        bootstrap_values: Vec::with_capacity(n),
        episodes: Vec::new(),
        episode_complete: Vec::new(),
    };
    let mut env = Env::new(spec.clone(), rng);
    let mut episode_start = 0;
    for t in 0..n {
        let s = env.state();
        let sample = sample_action(policy, &s, rng);
        let value = policy.value(&s);
        let out = env.step(&sample.action);
        let next = out.next_state;
        let learned = constraint.indicator(&next);
        let known = cfg.known_region && spec.known_infeasible_xy(next.x, next.y);
        let flag = learned.max(u8::from(known));
        let cut = t + 1 == n;
        let done = out.done || cut;
        let bootstrap = if done && !out.terminal {
            policy.value(&next)
        } else {
            0.0
        };

        buf.states.push(s);
        buf.next_states.push(next);
        buf.raw_actions.push(sample.raw);
        buf.actions.push(sample.action);
        buf.log_probs.push(sample.log_prob);
        buf.values.push(value);
        buf.raw_rewards.push(out.reward);
        buf.penalized_rewards
            .push(penalized_reward(out.reward, flag, cfg.penalty_weight));
        buf.constraint_flags.push(flag);
        buf.true_violations.push(out.true_violation);
        buf.dones.push(done);
        buf.terminals.push(out.terminal);
        buf.bootstrap_values.push(bootstrap);

        if done {
            buf.episodes.push(episode_start..t + 1);
            buf.episode_complete.push(out.done);
            episode_start = t + 1;
            if !cut {
                env.reset(rng);
            }
        }
    }
    buf
}

/// Generalized advantage estimation over `rewards`, restarting at episode
/// boundaries. Returns raw (unnormalized) advantages and value targets.
pub fn compute_gae_with(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap_values: &[f64],
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let (next_value, carry) = if dones[t] {
            (bootstrap_values[t], 0.0)
        } else {
            (values[t + 1], running)
        };
        let delta = rewards[t] + gamma * next_value - values[t];
        running = delta + gamma * lambda * carry;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// GAE on the penalized rewards of a rollout buffer.
pub fn compute_gae(buffer: &RolloutBuffer, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    compute_gae_with(
        &buffer.penalized_rewards,
        &buffer.values,
        &buffer.dones,
        &buffer.bootstrap_values,
        gamma,
        lambda,
    )
}

/// `min(ρ·A, clip(ρ, 1−ε, 1+ε)·A)`
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - clip, 1.0 + clip) * advantage)
}

/// Minibatch of training samples for the PPO loss.
#[derive(Clone, Debug)]
pub struct PpoBatch {
    pub observations: Matrix,
    pub raw_actions: Vec<[f64; ACTION_DIM]>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// Loss terms and their gradients for one minibatch.
#[derive(Clone, Debug)]
pub struct PpoLoss {
    /// Mean clipped surrogate objective (to be maximized).
    pub surrogate: f64,
    pub entropy: f64,
    pub value_loss: f64,
    /// `−surrogate − entropy_coef·entropy + value_coef·value_loss`
    pub total: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub actor_grads: MlpGrads,
    pub log_std_grads: Vec<f64>,
    pub value_grads: MlpGrads,
}

pub fn ppo_loss(policy: &PolicyModel, batch: &PpoBatch, cfg: &PpoConfig) -> Result<PpoLoss> {
    let b = batch.raw_actions.len();
    if b == 0 {
        return Err(Error::Usage("empty PPO minibatch".into()));
    }
    let bf = b as f64;
    let (mean_out, actor_cache) = policy.actor.forward(&batch.observations)?;
    let (value_out, value_cache) = policy.value_net.forward(&batch.observations)?;
    let log_std = policy.log_std_clamped();
    let std = [log_std[0].exp(), log_std[1].exp()];
    let ls_free: Vec<bool> = policy
        .log_std
        .iter()
        .map(|v| (LOG_STD_MIN..=LOG_STD_MAX).contains(v))
        .collect();

    let mut surrogate = 0.0;
    let mut clipped = 0usize;
    let mut approx_kl = 0.0;
    let mut actor_grad = Matrix::zeros(b, ACTION_DIM);
    let mut log_std_grads = vec![0.0; ACTION_DIM];
    let mut value_loss = 0.0;
    let mut value_grad = Matrix::zeros(b, 1);
    let eps = cfg.clip_epsilon;

    for i in 0..b {
        let a = &batch.raw_actions[i];
        let mu = [ACTION_LIMIT * mean_out.get(i, 0), ACTION_LIMIT * mean_out.get(i, 1)];
        let logp = gaussian_log_prob(a, &mu, &log_std);
        let log_ratio = logp - batch.old_log_probs[i];
        let ratio = log_ratio.exp();
        let adv = batch.advantages[i];
        let unclipped = ratio * adv;
        let clipped_obj = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
        surrogate += unclipped.min(clipped_obj);
        approx_kl += (ratio - 1.0) - log_ratio;
        if (ratio - 1.0).abs() > eps {
            clipped += 1;
        }
        // d(−surrogate_i / b) / d logp
        let dlogp = if unclipped <= clipped_obj {
            -adv * ratio / bf
        } else {
            0.0
        };
        if dlogp != 0.0 {
            for j in 0..ACTION_DIM {
                let diff = a[j] - mu[j];
                let var = std[j] * std[j];
                // dlogp/dμ = (a−μ)/σ², dμ/d(tanh out) = ACTION_LIMIT
                actor_grad.set(i, j, dlogp * diff / var * ACTION_LIMIT);
                // dlogp/dlogσ = (a−μ)²/σ² − 1
                if ls_free[j] {
                    log_std_grads[j] += dlogp * (diff * diff / var - 1.0);
                }
            }
        }
        let err = value_out.get(i, 0) - batch.returns[i];
        value_loss += err * err / bf;
        value_grad.set(i, 0, cfg.value_coef * 2.0 * err / bf);
    }
    surrogate /= bf;
    approx_kl /= bf;

    let entropy = policy.entropy();
    for j in 0..ACTION_DIM {
        if ls_free[j] {
            log_std_grads[j] -= cfg.entropy_coef;
        }
    }
    let total = -surrogate - cfg.entropy_coef * entropy + cfg.value_coef * value_loss;
    if !total.is_finite() {
        return Err(Error::non_finite("PPO loss"));
    }
    let (actor_grads, _) = policy.actor.backward(&actor_cache, &actor_grad)?;
    let (value_grads, _) = policy.value_net.backward(&value_cache, &value_grad)?;
    Ok(PpoLoss {
        surrogate,
        entropy,
        value_loss,
        total,
        clip_fraction: clipped as f64 / bf,
        approx_kl,
        actor_grads,
        log_std_grads,
        value_grads,
    })
}

/// Adam state for the three parameter groups of a [`PolicyModel`].
#[derive(Clone, Debug)]
pub struct PolicyOptimizer {
    actor: AdamState,
    log_std: VectorAdam,
    value: AdamState,
}

impl PolicyOptimizer {
    pub fn new(policy: &PolicyModel) -> Self {
        let cfg = AdamConfig::default();
        PolicyOptimizer {
            actor: AdamState::new(&policy.actor, cfg),
            log_std: VectorAdam::new(policy.log_std.len(), cfg),
            value: AdamState::new(&policy.value_net, cfg),
        }
    }

    pub fn steps(&self) -> u64 {
        self.actor.step
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    /// Mean surrogate of the very first minibatch, evaluated at ratio 1.
    pub initial_surrogate: f64,
    pub mean_advantage_first_batch: f64,
    pub gradient_steps: usize,
}

fn clip_grad_norm(grads: &mut MlpGrads, extra: Option<&mut [f64]>, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let extra_sq: f64 = extra.as_ref().map_or(0.0, |e| e.iter().map(|g| g * g).sum());
    let norm = (grads.sq_norm() + extra_sq).sqrt();
    if norm > max_norm {
        let k = max_norm / (norm + 1e-6);
        grads.scale(k);
        if let Some(e) = extra {
            e.iter_mut().for_each(|g| *g *= k);
        }
    }
}

fn normalize(values: &mut [f64]) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for v in values {
        *v = (*v - mean) / (std + 1e-8);
    }
}

/// `cfg.epochs` passes of shuffled minibatch Adam steps on the PPO loss.
pub fn ppo_update<R: Rng + ?Sized>(
    policy: &mut PolicyModel,
    optimizer: &mut PolicyOptimizer,
    buffer: &RolloutBuffer,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<UpdateStats> {
    if buffer.is_empty() {
        return Err(Error::Usage("empty rollout buffer".into()));
    }
    let (mut advantages, returns) = compute_gae(buffer, cfg.gamma, cfg.gae_lambda);
    normalize(&mut advantages);
    let n = buffer.len();
    let mut obs = Vec::with_capacity(n * OBS_DIM);
    for s in &buffer.states {
        obs.extend_from_slice(&policy.observe(s));
    }
    let obs = Matrix::from_vec(n, OBS_DIM, obs)?;

    let mut stats = UpdateStats::default();
    let mut indices: Vec<usize> = (0..n).collect();
    let mut sums = (0.0, 0.0, 0.0, 0.0, 0usize);
    let mb = cfg.minibatch_size.min(n);
    for epoch in 0..cfg.epochs {
        indices.shuffle(rng);
        for chunk in indices.chunks(mb) {
            let mut batch_obs = Matrix::zeros(chunk.len(), OBS_DIM);
            for (r, &i) in chunk.iter().enumerate() {
                batch_obs.row_mut(r).copy_from_slice(obs.row(i));
            }
            let batch = PpoBatch {
                observations: batch_obs,
                raw_actions: chunk.iter().map(|&i| buffer.raw_actions[i]).collect(),
                old_log_probs: chunk.iter().map(|&i| buffer.log_probs[i]).collect(),
                advantages: chunk.iter().map(|&i| advantages[i]).collect(),
                returns: chunk.iter().map(|&i| returns[i]).collect(),
            };
            let mut loss = ppo_loss(policy, &batch, cfg).map_err(|e| match e {
                Error::NonFinite { context } => Error::non_finite(format!(
                    "{context} at epoch {epoch}, gradient step {}",
                    stats.gradient_steps
                )),
                other => other,
            })?;
            if stats.gradient_steps == 0 {
                stats.initial_surrogate = loss.surrogate;
                stats.mean_advantage_first_batch =
                    batch.advantages.iter().sum::<f64>() / batch.advantages.len() as f64;
            }
            clip_grad_norm(
                &mut loss.actor_grads,
                Some(&mut loss.log_std_grads),
                cfg.max_grad_norm,
            );
            clip_grad_norm(&mut loss.value_grads, None, cfg.max_grad_norm);
            optimizer
                .actor
                .step(&mut policy.actor, &loss.actor_grads, cfg.learning_rate)?;
            optimizer
                .log_std
                .step(&mut policy.log_std, &loss.log_std_grads, cfg.learning_rate)?;
            for v in &mut policy.log_std {
                *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
            }
            optimizer
                .value
                .step(&mut policy.value_net, &loss.value_grads, cfg.learning_rate)?;
            sums.0 += -loss.surrogate;
            sums.1 += loss.value_loss;
            sums.2 += loss.approx_kl;
            sums.3 += loss.clip_fraction;
            sums.4 += 1;
            stats.gradient_steps += 1;
        }
    }
    let k = sums.4 as f64;
    stats.policy_loss = sums.0 / k;
    stats.value_loss = sums.1 / k;
    stats.approx_kl = sums.2 / k;
    stats.clip_fraction = sums.3 / k;
    stats.entropy = policy.entropy();
    if !policy.actor.is_finite() || !policy.value_net.is_finite() {
        return Err(Error::non_finite("policy parameters after PPO update"));
    }
    Ok(stats)
}

/// Mean undiscounted returns of one rollout batch plus the update statistics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyTrainRecord {
    pub iteration: usize,
    pub mean_raw_return: f64,
    pub mean_penalized_return: f64,
    pub entropy: f64,
    pub value_loss: f64,
    pub policy_loss: f64,
}

/// Collect-then-update, `cfg.forward_iterations` times. Returns one record per
/// update and the buffer of the last collection.
pub fn train_policy<R: Rng + ?Sized>(
    policy: &mut PolicyModel,
    optimizer: &mut PolicyOptimizer,
    spec: &EnvSpec,
    constraint: &ConstraintModel,
    cfg: &PpoConfig,
    iterations: usize,
    rng: &mut R,
) -> Result<(Vec<PolicyTrainRecord>, RolloutBuffer)> {
    let mut records = Vec::with_capacity(iterations);
    let mut last = RolloutBuffer::default();
    for it in 0..iterations {
        let buffer = collect_rollouts(policy, spec, constraint, cfg, rng);
        let stats = ppo_update(policy, optimizer, &buffer, cfg, rng)?;
        let returns = buffer.episode_returns();
        let k = returns.len().max(1) as f64;
        records.push(PolicyTrainRecord {
            iteration: it,
            mean_raw_return: returns.iter().map(|r| r.0).sum::<f64>() / k,
            mean_penalized_return: returns.iter().map(|r| r.1).sum::<f64>() / k,
            entropy: stats.entropy,
            value_loss: stats.value_loss,
            policy_loss: stats.policy_loss,
        });
        last = buffer;
    }
    Ok((records, last))
}

/// Angle helper re-exported for scripted policies in tests and tools.
pub fn heading_towards(from: &PointState, x: f64, y: f64) -> f64 {
    (y - from.y).atan2(x - from.x).rem_euclid(2.0 * PI)
}
