//! The outer inverse-constraint loop: expert demonstrations, the
//! high-reward trajectory filter, constraint memory replay, and metrics.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraint::{ConstraintLearner, ConstraintModel, ConstraintTrainConfig};
use crate::envs::{Env, EnvSpec, PointAction, PointState};
use crate::error::{Error, Result};
use crate::policy::{
    sample_action, train_policy, PolicyModel, PolicyOptimizer, PolicyTrainRecord, PpoConfig,
    RolloutBuffer,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    /// State reached by the step; the reward and violation flag refer to it.
    pub state: PointState,
    pub action: PointAction,
    pub reward: f64,
    pub true_violation: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub start: PointState,
    steps: Vec<Step>,
    total: f64,
}

impl Trajectory {
    pub fn new(start: PointState, steps: Vec<Step>) -> Self {
        let total = steps.iter().map(|s| s.reward).sum();
        Trajectory { start, steps, total }
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Undiscounted sum of rewards.
    pub fn total_return(&self) -> f64 {
        self.total
    }

    pub fn states(&self) -> impl Iterator<Item = PointState> + '_ {
        self.steps.iter().map(|s| s.state)
    }

    pub fn violates(&self) -> bool {
        self.steps.iter().any(|s| s.true_violation)
    }
}

/// The complete episodes of a rollout buffer, in order.
pub fn buffer_trajectories(buffer: &RolloutBuffer) -> Vec<Trajectory> {
    buffer
        .episodes
        .iter()
        .zip(&buffer.episode_complete)
        .filter(|(_, &complete)| complete)
        .map(|(ep, _)| {
            let steps = ep
                .clone()
                .map(|t| Step {
                    state: buffer.next_states[t],
                    action: buffer.actions[t],
                    reward: buffer.raw_rewards[t],
                    true_violation: buffer.true_violations[t],
                })
                .collect();
            Trajectory::new(buffer.states[ep.start], steps)
        })
        .collect()
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoSet {
    trajectories: Vec<Trajectory>,
    return_mean: f64,
    return_std: f64,
}

impl DemoSet {
    /// Fails if the set is empty or any state is truly infeasible under `spec`.
    pub fn new(trajectories: Vec<Trajectory>, spec: &EnvSpec) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::Usage("demonstration set is empty".into()));
        }
        for (i, tr) in trajectories.iter().enumerate() {
            if tr.is_empty() {
                return Err(Error::Usage(format!("demonstration {i} has no steps")));
            }
            if tr.len() > spec.episode_length {
                return Err(Error::Usage(format!(
                    "demonstration {i} has {} steps, episode length is {}",
                    tr.len(),
                    spec.episode_length
                )));
            }
            if spec.true_infeasible(&tr.start) || tr.states().any(|s| spec.true_infeasible(&s)) {
                return Err(Error::Usage(format!(
                    "demonstration {i} visits an infeasible state"
                )));
            }
        }
        let returns: Vec<f64> = trajectories.iter().map(Trajectory::total_return).collect();
        let (return_mean, return_std) = mean_std(&returns);
        Ok(DemoSet {
            trajectories,
            return_mean,
            return_std,
        })
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    /// `r_D`
    pub fn return_mean(&self) -> f64 {
        self.return_mean
    }

    /// `σ_D`
    pub fn return_std(&self) -> f64 {
        self.return_std
    }

    pub fn states(&self) -> Vec<PointState> {
        self.trajectories.iter().flat_map(|t| t.states()).collect()
    }
}

/// Keeps the trajectories with `return ≥ r_D − α·σ_D`.
pub fn filter_trajectories<'a>(
    trajs: &'a [Trajectory],
    demos: &DemoSet,
    alpha: f64,
) -> Vec<&'a Trajectory> {
    let threshold = filter_threshold(demos, alpha);
    trajs
        .iter()
        .filter(|t| t.total_return() >= threshold)
        .collect()
}

pub fn filter_threshold(demos: &DemoSet, alpha: f64) -> f64 {
    demos.return_mean() - alpha * demos.return_std()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub state: PointState,
    /// ζ when the state was captured.
    pub zeta: f64,
    pub iteration: usize,
}

/// Append-only store of representative infeasible states.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MemoryBuffer {
    entries: Vec<MemoryEntry>,
    seen: HashSet<[u64; 3]>,
}

fn state_key(s: &PointState) -> [u64; 3] {
    [s.x.to_bits(), s.y.to_bits(), s.psi.to_bits()]
}

impl MemoryBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn states(&self) -> impl Iterator<Item = PointState> + '_ {
        self.entries.iter().map(|e| e.state)
    }

    /// Returns false if the exact state is already stored.
    pub fn push(&mut self, entry: MemoryEntry) -> bool {
        if self.seen.insert(state_key(&entry.state)) {
            self.entries.push(entry);
            true
        } else {
            false
        }
    }
}

/// Appends the lowest-ζ `⌊k / N_m⌋` of the `k` states in `trajs` that `model`
/// classifies as infeasible. Returns the number of new entries.
pub fn update_memory(
    model: &ConstraintModel,
    trajs: &[&Trajectory],
    buffer: &mut MemoryBuffer,
    memory_fraction: usize,
    iteration: usize,
) -> usize {
    assert!(memory_fraction >= 1, "memory fraction must be at least 1");
    let d = model.decision_threshold;
    let states: Vec<PointState> = trajs.iter().flat_map(|t| t.states()).collect();
    let zetas = model.zeta_batch(&states);
    let mut infeasible: Vec<(f64, PointState)> = zetas
        .into_iter()
        .zip(states)
        .filter(|(z, _)| *z <= d)
        .collect();
    infeasible.sort_by(|a, b| a.0.total_cmp(&b.0));
    let keep = infeasible.len() / memory_fraction;
    infeasible
        .into_iter()
        .take(keep)
        .filter(|&(zeta, state)| {
            buffer.push(MemoryEntry {
                state,
                zeta,
                iteration,
            })
        })
        .count()
}

/// Intersection over union of two boolean masks; 1 when both are empty.
pub fn iou_from_masks(a: &[bool], b: &[bool]) -> f64 {
    assert_eq!(a.len(), b.len(), "masks must have equal length");
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &q) in a.iter().zip(b) {
        inter += usize::from(p && q);
        union += usize::from(p || q);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// `n` evenly spaced values from `lo` to `hi`, both included.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Grid points of a `resolution × resolution` lattice over the state box,
/// x varying fastest.
pub fn grid_states(spec: &EnvSpec, resolution: usize) -> Vec<PointState> {
    let b = spec.bounds;
    let xs = linspace(b.x_min, b.x_max, resolution);
    let ys = linspace(b.y_min, b.y_max, resolution);
    ys.iter()
        .flat_map(|&y| xs.iter().map(move |&x| PointState::new(x, y, 0.0)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IouOptions {
    pub resolution: usize,
    /// Count the known region as part of both sets; when false, grid points
    /// inside it are ignored.
    pub include_known: bool,
    /// Treat the known region as predicted infeasible (the agent is told about it).
    pub predict_known: bool,
}

impl Default for IouOptions {
    fn default() -> Self {
        IouOptions {
            resolution: 200,
            include_known: true,
            predict_known: true,
        }
    }
}

/// IoU between the predicted and true infeasible sets on a grid over the state box.
pub fn metric_iou(model: &ConstraintModel, spec: &EnvSpec, opts: &IouOptions) -> f64 {
    let states = grid_states(spec, opts.resolution);
    let zetas = model.zeta_batch(&states);
    let d = model.decision_threshold;
    let mut predicted = Vec::with_capacity(states.len());
    let mut truth = Vec::with_capacity(states.len());
    for (s, z) in states.iter().zip(zetas) {
        let known = spec.known_infeasible_xy(s.x, s.y);
        if known && !opts.include_known {
            continue;
        }
        predicted.push(z <= d || (known && opts.predict_known));
        truth.push(spec.true_infeasible(s));
    }
    iou_from_masks(&predicted, &truth)
}

/// First `x ≥ x_from` on the line `y` (ψ = 0) classified infeasible, scanning
/// in `steps` increments up to the box edge.
pub fn boundary_probe(
    model: &ConstraintModel,
    spec: &EnvSpec,
    y: f64,
    x_from: f64,
    steps: usize,
) -> Option<f64> {
    linspace(x_from, spec.bounds.x_max, steps)
        .into_iter()
        .find(|&x| model.classify(&PointState::new(x, y, 0.0)).is_infeasible())
}

/// One episode with stochastic actions.
pub fn rollout_episode<R: Rng + ?Sized>(
    policy: &PolicyModel,
    spec: &EnvSpec,
    rng: &mut R,
) -> Trajectory {
    let mut env = Env::new(spec.clone(), rng);
    let start = env.state();
    let mut steps = Vec::with_capacity(spec.episode_length);
    loop {
        let a = sample_action(policy, &env.state(), rng).action;
        let out = env.step(&a);
        steps.push(Step {
            state: out.next_state,
            action: a,
            reward: out.reward,
            true_violation: out.true_violation,
        });
        if out.done {
            return Trajectory::new(start, steps);
        }
    }
}

/// Fraction of steps in `trajs` that land in a truly infeasible state.
pub fn violation_rate(trajs: &[Trajectory]) -> f64 {
    let steps: usize = trajs.iter().map(Trajectory::len).sum();
    if steps == 0 {
        return 0.0;
    }
    let violations: usize = trajs
        .iter()
        .flat_map(|t| t.steps())
        .filter(|s| s.true_violation)
        .count();
    violations as f64 / steps as f64
}

/// Per-step true violation rate of `policy` over `episodes` fresh episodes.
pub fn metric_violation<R: Rng + ?Sized>(
    policy: &PolicyModel,
    spec: &EnvSpec,
    episodes: usize,
    rng: &mut R,
) -> f64 {
    let trajs: Vec<Trajectory> = (0..episodes)
        .map(|_| rollout_episode(policy, spec, rng))
        .collect();
    violation_rate(&trajs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertConfig {
    /// PPO updates against the true constraint before sampling demonstrations.
    pub ppo_updates: usize,
    pub trajectories: usize,
    /// Episodes that may be sampled in total while collecting demonstrations.
    pub max_attempts: usize,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig {
            ppo_updates: 150,
            trajectories: 20,
            max_attempts: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvSpec,
    pub ppo: PpoConfig,
    pub constraint: ConstraintTrainConfig,
    pub expert: ExpertConfig,
    pub iterations: usize,
    /// `α` of the trajectory filter.
    pub alpha: f64,
    /// `N_m`
    pub memory_fraction: usize,
    pub cmr_enabled: bool,
    pub filter_enabled: bool,
    /// Episodes rolled out for the per-iteration violation rate.
    pub eval_episodes: usize,
    pub iou: IouOptions,
}

impl RunConfig {
    pub fn point_circle() -> Self {
        RunConfig {
            env: EnvSpec::point_circle(),
            ppo: PpoConfig::point_circle(),
            constraint: ConstraintTrainConfig::point_circle(),
            expert: ExpertConfig::default(),
            iterations: 25,
            alpha: 1.0,
            memory_fraction: 2,
            cmr_enabled: true,
            filter_enabled: true,
            eval_episodes: 10,
            iou: IouOptions::default(),
        }
    }

    pub fn point_obstacle() -> Self {
        RunConfig {
            env: EnvSpec::point_obstacle(),
            ppo: PpoConfig::point_obstacle(),
            constraint: ConstraintTrainConfig::point_obstacle(),
            iterations: 50,
            ..Self::point_circle()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.ppo.validate()?;
        self.constraint.validate()?;
        if self.iterations == 0 {
            return Err(Error::config("iterations", "must be positive"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha", "must be non-negative"));
        }
        if self.memory_fraction == 0 {
            return Err(Error::config("memory_fraction", "must be at least 1"));
        }
        if self.eval_episodes == 0 {
            return Err(Error::config("eval_episodes", "must be positive"));
        }
        if self.iou.resolution == 0 {
            return Err(Error::config("iou.resolution", "must be positive"));
        }
        if self.expert.trajectories == 0 {
            return Err(Error::config("expert.trajectories", "must be positive"));
        }
        if self.expert.max_attempts < self.expert.trajectories {
            return Err(Error::config(
                "expert.max_attempts",
                "must be at least expert.trajectories",
            ));
        }
        Ok(())
    }
}

/// Training and evaluation streams derived from one seed, so that metric
/// evaluation never perturbs training.
pub fn seeded_streams(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let train = ChaCha8Rng::seed_from_u64(seed);
    let mut eval = ChaCha8Rng::seed_from_u64(seed);
    eval.set_stream(1);
    (train, eval)
}

/// Trains a policy against the true constraint and samples violation-free
/// demonstrations from it.
pub fn generate_expert<R: Rng + ?Sized>(
    cfg: &RunConfig,
    rng: &mut R,
) -> Result<(DemoSet, PolicyModel)> {
    cfg.validate()?;
    let oracle = ConstraintModel::oracle(cfg.env.clone());
    let mut policy = PolicyModel::new(&cfg.ppo, rng)?;
    let mut optimizer = PolicyOptimizer::new(&policy);
    train_policy(
        &mut policy,
        &mut optimizer,
        &cfg.env,
        &oracle,
        &cfg.ppo,
        cfg.expert.ppo_updates,
        rng,
    )?;
    let mut demos = Vec::with_capacity(cfg.expert.trajectories);
    for _ in 0..cfg.expert.max_attempts {
        let tr = rollout_episode(&policy, &cfg.env, rng);
        if !tr.violates() {
            demos.push(tr);
            if demos.len() == cfg.expert.trajectories {
                return Ok((DemoSet::new(demos, &cfg.env)?, policy));
            }
        }
    }
    Err(Error::Generation(format!(
        "only {} of {} violation-free trajectories in {} attempts",
        demos.len(),
        cfg.expert.trajectories,
        cfg.expert.max_attempts
    )))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub timesteps_cumulative: u64,
    pub iou: f64,
    pub violation_rate: f64,
    /// Mean raw return of the complete episodes in the last rollout batch.
    pub mean_return: f64,
    pub n_sampled_trajectories: usize,
    pub n_filtered_trajectories: usize,
    /// Lowest return among the trajectories handed to the constraint learner.
    pub min_filtered_return: Option<f64>,
    pub filter_threshold: f64,
    pub constraint_updated: bool,
    pub memory_size: usize,
    pub f: f64,
    pub d: f64,
    pub policy_records: Vec<PolicyTrainRecord>,
}

/// What the per-iteration observer of [`run_icrl`] can inspect.
#[derive(Clone, Copy, Debug)]
pub struct IterationView<'a> {
    pub report: &'a IterationReport,
    pub constraint: &'a ConstraintModel,
    pub policy: &'a PolicyModel,
    pub memory: &'a MemoryBuffer,
    /// Trajectories handed to the constraint learner this iteration.
    pub filtered: &'a [&'a Trajectory],
}

#[derive(Clone, Debug)]
pub struct IcrlOutcome {
    pub constraint: ConstraintModel,
    pub policy: PolicyModel,
    pub memory: MemoryBuffer,
    pub reports: Vec<IterationReport>,
}

/// Alternates policy learning against the current constraint with constraint
/// learning from demonstrations versus filtered policy trajectories.
///
/// `observe` is called after every iteration; an error from it aborts the run.
pub fn run_icrl<F>(cfg: &RunConfig, demos: &DemoSet, seed: u64, mut observe: F) -> Result<IcrlOutcome>
where
    F: FnMut(&IterationView<'_>) -> Result<()>,
{
    cfg.validate()?;
    let (mut rng, mut eval_rng) = seeded_streams(seed);
    let demo_states = demos.states();
    let mut learner = ConstraintLearner::new(
        ConstraintModel::network(&cfg.constraint, &mut rng)?,
        cfg.constraint.clone(),
    )?;
    let mut policy = PolicyModel::new(&cfg.ppo, &mut rng)?;
    let mut optimizer = PolicyOptimizer::new(&policy);
    let mut memory = MemoryBuffer::new();
    let mut reports = Vec::with_capacity(cfg.iterations);
    let mut timesteps = 0u64;
    let threshold = filter_threshold(demos, cfg.alpha);

    for iteration in 0..cfg.iterations {
        let with_context = |e: Error| match e {
            Error::NonFinite { context } => {
                Error::non_finite(format!("{context} (outer iteration {iteration})"))
            }
            other => other,
        };
        let (records, buffer) = train_policy(
            &mut policy,
            &mut optimizer,
            &cfg.env,
            &learner.model,
            &cfg.ppo,
            cfg.ppo.forward_iterations,
            &mut rng,
        )
        .map_err(with_context)?;
        timesteps += (cfg.ppo.forward_iterations * cfg.ppo.forward_timesteps) as u64;

        let sampled = buffer_trajectories(&buffer);
        let kept: Vec<&Trajectory> = if cfg.filter_enabled {
            filter_trajectories(&sampled, demos, cfg.alpha)
        } else {
            sampled.iter().collect()
        };
        if cfg.filter_enabled {
            assert!(
                kept.iter().all(|t| t.total_return() >= threshold),
                "filtered trajectory below the return threshold"
            );
        }
        let min_filtered_return = kept
            .iter()
            .map(|t| t.total_return())
            .min_by(|a, b| a.total_cmp(b));

        let constraint_updated = !kept.is_empty();
        if constraint_updated {
            let mut unlabeled: Vec<PointState> = kept.iter().flat_map(|t| t.states()).collect();
            if cfg.cmr_enabled {
                unlabeled.extend(memory.states());
            }
            learner
                .train(&demo_states, &unlabeled, &mut rng)
                .map_err(with_context)?;
            if cfg.cmr_enabled {
                update_memory(&learner.model, &kept, &mut memory, cfg.memory_fraction, iteration);
            }
        }

        let returns: Vec<f64> = sampled.iter().map(Trajectory::total_return).collect();
        let report = IterationReport {
            iteration,
            timesteps_cumulative: timesteps,
            iou: metric_iou(&learner.model, &cfg.env, &cfg.iou),
            violation_rate: metric_violation(&policy, &cfg.env, cfg.eval_episodes, &mut eval_rng),
            mean_return: mean_std(&returns).0,
            n_sampled_trajectories: sampled.len(),
            n_filtered_trajectories: kept.len(),
            min_filtered_return,
            filter_threshold: threshold,
            constraint_updated,
            memory_size: memory.len(),
            f: learner.model.label_frequency,
            d: learner.model.decision_threshold,
            policy_records: records,
        };
        observe(&IterationView {
            report: &report,
            constraint: &learner.model,
            policy: &policy,
            memory: &memory,
            filtered: &kept,
        })?;
        reports.push(report);
    }
    Ok(IcrlOutcome {
        constraint: learner.model,
        policy,
        memory,
        reports,
    })
}

/// Result of [`forgetting_scenario`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForgettingOutcome {
    /// Buffered representatives of the abandoned region.
    pub region_size: usize,
    /// How many of them the final model still classifies as infeasible.
    pub still_infeasible: usize,
}

/// Scripted two-phase constraint learning on the circle task. In phase 1 the
/// unlabeled states sweep the whole line `y = 0`, including region A
/// (`x < −6`); in phase 2 they avoid A. Returns how many of the region-A
/// states captured in memory during phase 1 remain infeasible after
/// `post_shift_updates` phase-2 constraint updates.
pub fn forgetting_scenario(cmr: bool, post_shift_updates: usize, seed: u64) -> ForgettingOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ConstraintTrainConfig::point_circle();
    let demo: Vec<PointState> = (0..2000)
        .map(|_| PointState::new(rng.random_range(-6.0..6.0), rng.random_range(-12.0..12.0), 0.0))
        .collect();
    let line = |lo: f64, hi: f64| {
        let steps = (0..3000)
            .map(|i| Step {
                state: PointState::new(lo + (hi - lo) * i as f64 / 3000.0, 0.0, 0.0),
                action: PointAction::new(0.0, 0.0),
                reward: 0.0,
                true_violation: false,
            })
            .collect();
        Trajectory::new(PointState::new(0.0, 0.0, 0.0), steps)
    };
    let phase1 = line(-12.0, 12.0);
    let phase2 = line(-5.0, 12.0);
    let model = ConstraintModel::network(&cfg, &mut rng).expect("preset is valid");
    let mut learner = ConstraintLearner::new(model, cfg).expect("preset is valid");
    let mut memory = MemoryBuffer::new();
    for it in 0..3 {
        let unlabeled: Vec<PointState> = phase1.states().chain(memory.states()).collect();
        learner.train(&demo, &unlabeled, &mut rng).expect("finite training");
        update_memory(&learner.model, &[&phase1], &mut memory, 2, it);
    }
    let region_a: Vec<PointState> = memory.states().filter(|s| s.x < -6.0).collect();
    for it in 3..3 + post_shift_updates {
        let mut unlabeled: Vec<PointState> = phase2.states().collect();
        if cmr {
            unlabeled.extend(memory.states());
        }
        learner.train(&demo, &unlabeled, &mut rng).expect("finite training");
        if cmr {
            update_memory(&learner.model, &[&phase2], &mut memory, 2, it);
        }
    }
    ForgettingOutcome {
        region_size: region_a.len(),
        still_infeasible: region_a
            .iter()
            .filter(|s| learner.model.classify(s).is_infeasible())
            .count(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::EnvKind;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn traj_with_return(r: f64) -> Trajectory {
        let s = PointState::new(0.0, 0.0, 0.0);
        Trajectory::new(
            s,
            vec![Step {
                state: s,
                action: PointAction::new(0.0, 0.0),
                reward: r,
                true_violation: false,
            }],
        )
    }

    fn demo_set(returns: &[f64]) -> DemoSet {
        DemoSet::new(
            returns.iter().map(|&r| traj_with_return(r)).collect(),
            &EnvSpec::point_circle(),
        )
        .unwrap()
    }

    #[test]
    fn trajectory_return_is_sum() {
        let t = Trajectory::new(
            PointState::new(0.0, 0.0, 0.0),
            (0..150)
                .map(|i| Step {
                    state: PointState::new(0.0, 0.0, 0.0),
                    action: PointAction::new(0.0, 0.0),
                    reward: 0.1 * i as f64 - 3.0,
                    true_violation: false,
                })
                .collect(),
        );
        let direct: f64 = t.steps().iter().map(|s| s.reward).sum();
        assert!((t.total_return() - direct).abs() < 1e-9);
    }

    #[test]
    fn filter_example() {
        // r_D = 100, σ_D = 10
        let demos = demo_set(&[90.0, 110.0]);
        assert_eq!(demos.return_mean(), 100.0);
        assert_eq!(demos.return_std(), 10.0);
        let trajs: Vec<_> = [95.0, 89.0, 91.0].iter().map(|&r| traj_with_return(r)).collect();
        let kept: Vec<f64> = filter_trajectories(&trajs, &demos, 1.0)
            .iter()
            .map(|t| t.total_return())
            .collect();
        assert_eq!(kept, vec![95.0, 91.0]);
        assert_eq!(filter_threshold(&demos, 0.0), 100.0);
    }

    #[test]
    fn filter_boundary_is_inclusive() {
        let demos = demo_set(&[5.0, 5.0, 5.0]);
        assert_eq!(demos.return_std(), 0.0);
        let trajs: Vec<_> = (0..4).map(|_| traj_with_return(5.0)).collect();
        assert_eq!(filter_trajectories(&trajs, &demos, 1.0).len(), 4);
    }

    #[test]
    fn demo_set_rejects_infeasible_states() {
        let s = PointState::new(7.0, 0.0, 0.0);
        let t = Trajectory::new(
            PointState::new(0.0, 0.0, 0.0),
            vec![Step {
                state: s,
                action: PointAction::new(0.25, 0.0),
                reward: 0.0,
                true_violation: true,
            }],
        );
        assert!(DemoSet::new(vec![t], &EnvSpec::point_circle()).is_err());
        assert!(DemoSet::new(vec![], &EnvSpec::point_circle()).is_err());
    }

    /// A model whose ζ equals the x coordinate mapped through a sigmoid,
    /// so lower x means lower ζ.
    fn x_model(threshold: f64) -> ConstraintModel {
        let cfg = ConstraintTrainConfig {
            hidden_layers: vec![1],
            input_scale: 1.0,
            ..ConstraintTrainConfig::point_circle()
        };
        let mut m = ConstraintModel::network(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let net = m.net_mut().unwrap();
        // hidden = leaky(x + 100) = x + 100, out = sigmoid(hidden - 100)
        let flat = vec![1.0, 0.0, 100.0, 1.0, -100.0];
        net.set_flat(&flat).unwrap();
        m.decision_threshold = threshold;
        m
    }

    fn line_traj(xs: &[f64]) -> Trajectory {
        Trajectory::new(
            PointState::new(0.0, 0.0, 0.0),
            xs.iter()
                .map(|&x| Step {
                    state: PointState::new(x, 0.0, 0.0),
                    action: PointAction::new(0.0, 0.0),
                    reward: 0.0,
                    true_violation: false,
                })
                .collect(),
        )
    }

    #[test]
    fn memory_keeps_lowest_half() {
        let m = x_model(0.5);
        // 10 infeasible (x < 0) and 5 feasible states
        let xs: Vec<f64> = (1..=10).map(|i| -(i as f64) * 0.3).chain((1..=5).map(f64::from)).collect();
        let t = line_traj(&xs);
        let mut buf = MemoryBuffer::new();
        let added = update_memory(&m, &[&t], &mut buf, 2, 0);
        assert_eq!(added, 5);
        let max_kept = buf.entries().iter().map(|e| e.zeta).fold(f64::MIN, f64::max);
        let min_rest = xs
            .iter()
            .map(|&x| m.zeta(&PointState::new(x, 0.0, 0.0)))
            .filter(|&z| z <= 0.5)
            .filter(|z| !buf.entries().iter().any(|e| e.zeta == *z))
            .fold(f64::MAX, f64::min);
        assert!(max_kept <= min_rest);
        assert!(buf.entries().iter().all(|e| e.state.x <= -1.8 + 1e-12));
    }

    #[test]
    fn memory_unchanged_without_infeasible_states() {
        let m = x_model(0.5);
        let t = line_traj(&[1.0, 2.0, 3.0]);
        let mut buf = MemoryBuffer::new();
        assert_eq!(update_memory(&m, &[&t], &mut buf, 2, 0), 0);
        assert!(buf.is_empty());
    }

    #[test]
    fn memory_deduplicates_exact_states() {
        let m = x_model(0.5);
        let t = line_traj(&[-1.0, -2.0]);
        let mut buf = MemoryBuffer::new();
        update_memory(&m, &[&t], &mut buf, 1, 0);
        update_memory(&m, &[&t], &mut buf, 1, 1);
        assert_eq!(buf.len(), 2);
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou_from_masks(&[true, false, true], &[true, false, true]), 1.0);
        assert_eq!(iou_from_masks(&[true, false], &[false, true]), 0.0);
        assert_eq!(iou_from_masks(&[false; 3], &[false; 3]), 1.0);
        let mut a = vec![false; 200];
        let mut b = vec![false; 200];
        a[..100].iter_mut().for_each(|v| *v = true);
        b[50..150].iter_mut().for_each(|v| *v = true);
        assert!((iou_from_masks(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn iou_bounded_and_symmetric(a in proptest::collection::vec(proptest::bool::ANY, 1..200), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b: Vec<bool> = a.iter().map(|_| rng.random_bool(0.5)).collect();
            let v = iou_from_masks(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou_from_masks(&b, &a));
            prop_assert_eq!(v == 1.0, a == b);
        }
    }

    #[test]
    fn oracle_iou_is_one() {
        for kind in [EnvKind::Circle, EnvKind::Obstacle] {
            let spec = EnvSpec::for_kind(kind);
            let oracle = ConstraintModel::oracle(spec.clone());
            assert_eq!(metric_iou(&oracle, &spec, &IouOptions::default()), 1.0);
            let opts = IouOptions {
                include_known: false,
                ..IouOptions::default()
            };
            assert_eq!(metric_iou(&oracle, &spec, &opts), 1.0);
        }
    }

    #[test]
    fn grid_covers_box_with_endpoints() {
        let spec = EnvSpec::point_circle();
        let g = grid_states(&spec, 200);
        assert_eq!(g.len(), 40_000);
        assert_eq!(g[0].x, -12.0);
        assert_eq!(g[199].x, 12.0);
        assert_eq!(g[39_999].y, 12.0);
    }

    #[test]
    fn oracle_boundary_probe() {
        let spec = EnvSpec::point_circle();
        let oracle = ConstraintModel::oracle(spec.clone());
        let x = boundary_probe(&oracle, &spec, 0.0, 0.0, 1201).unwrap();
        assert!((x - 6.01).abs() < 1e-9);
    }

    fn scripted(speed_bias: f64) -> PolicyModel {
        let mut p = PolicyModel::new(&PpoConfig::point_circle(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let zeros = vec![0.0; p.actor.num_params()];
        p.actor.set_flat(&zeros).unwrap();
        // constant tanh output: speed = 0.25·tanh(bias), omega = 0
        *p.actor.biases.last_mut().unwrap() = vec![speed_bias, 0.0];
        p.log_std = vec![-5.0, -5.0];
        p
    }

    #[test]
    fn violation_metric_examples() {
        let spec = EnvSpec::point_circle();
        let still = scripted(0.0);
        let v = metric_violation(&still, &spec, 5, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(v, 0.0);
        // Full speed in a random fixed heading for 150 steps covers 37.5 units.
        let fast = scripted(20.0);
        let v1 = metric_violation(&fast, &spec, 5, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(v1 > 0.0);
        let v2 = metric_violation(&fast, &spec, 5, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(v1, v2);
    }

    #[test]
    fn buffer_trajectories_match_episode_returns() {
        let spec = EnvSpec::point_circle();
        let cfg = PpoConfig {
            forward_timesteps: 1000,
            ..PpoConfig::point_circle()
        };
        let p = PolicyModel::new(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let buf = crate::policy::collect_rollouts(
            &p,
            &spec,
            &ConstraintModel::oracle(spec.clone()),
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(5),
        );
        let trajs = buffer_trajectories(&buf);
        assert_eq!(trajs.len(), 6);
        for (t, (raw, _)) in trajs.iter().zip(buf.episode_returns()) {
            assert_eq!(t.len(), 150);
            assert!((t.total_return() - raw).abs() < 1e-9);
        }
    }

    #[test]
    fn memory_replay_prevents_forgetting() {
        let out = forgetting_scenario(true, 10, 7);
        assert!(out.region_size > 0);
        assert_eq!(out.still_infeasible, out.region_size);
        let out = forgetting_scenario(false, 10, 7);
        eprintln!("without memory: {}/{} still infeasible", out.still_infeasible, out.region_size);
    }
}
