//! Positive-unlabeled constraint learner.
//!
//! The network ζ is trained as a labeled-vs-unlabeled classifier: demonstration
//! states are labeled (positive), policy states and replayed memory states are
//! unlabeled and treated as negative. Under the selected-completely-at-random
//! assumption `Pr(l=1|s) = f·Pr(c=1|s)`, so thresholding ζ at `0.5·f` instead
//! of `0.5` turns it into a feasible/infeasible classifier.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{Bounds, EnvSpec, Feasibility, PointState};
use crate::error::{Error, Result};
use crate::nn::{Activation, AdamConfig, AdamState, Matrix, MlpGrads, MlpParams};

/// Clamp applied to ζ before taking logarithms in the loss.
pub const ZETA_CLAMP: f64 = 1e-7;

/// ζ reported by the ground-truth oracle for feasible / infeasible states.
const ORACLE_FEASIBLE: f64 = 1.0 - 1e-6;
const ORACLE_INFEASIBLE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintInput {
    /// `(x, y)` only.
    #[default]
    Position,
    /// `(x, y, ψ)`.
    FullState,
}

impl ConstraintInput {
    pub fn dim(self) -> usize {
        match self {
            ConstraintInput::Position => 2,
            ConstraintInput::FullState => 3,
        }
    }
}

/// How the two log terms of the classification loss are averaged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeighting {
    /// Separate means over the labeled and the unlabeled set.
    #[default]
    PerSet,
    /// One mean over the pooled labeled and unlabeled samples; the optimum is
    /// the calibrated `Pr(l=1|s)`.
    PerSample,
}

/// The function behind ζ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ZetaFunction {
    Network {
        net: MlpParams,
        input: ConstraintInput,
        /// Positions are multiplied by this before entering the network.
        input_scale: f64,
    },
    /// Ground-truth constraint of an environment, for control runs and audits.
    Oracle { env: EnvSpec },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintModel {
    pub zeta: ZetaFunction,
    pub label_frequency: f64,
    pub decision_threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintTrainConfig {
    pub hidden_layers: Vec<usize>,
    pub learning_rate: f64,
    pub backward_iterations: usize,
    /// `w_r`
    pub reg_weight: f64,
    /// `N_r`, regularizer states drawn per iteration.
    pub reg_samples: usize,
    pub reg_bounds: Bounds,
    pub label_frequency: f64,
    /// Explicit threshold; derived as `0.5·f` when absent.
    #[serde(default)]
    pub decision_threshold: Option<f64>,
    /// Re-estimate `f` as the maximum ζ over demonstration states after each update.
    #[serde(default)]
    pub estimate_label_frequency: bool,
    #[serde(default)]
    pub input: ConstraintInput,
    pub input_scale: f64,
    #[serde(default)]
    pub weighting: LossWeighting,
    #[serde(default = "default_leaky_slope")]
    pub leaky_slope: f64,
}

fn default_leaky_slope() -> f64 {
    Activation::DEFAULT_LEAKY_SLOPE
}

impl ConstraintTrainConfig {
    pub fn point_circle() -> Self {
        ConstraintTrainConfig {
            hidden_layers: vec![4],
            learning_rate: 0.03,
            backward_iterations: 20,
            reg_weight: 0.05,
            reg_samples: 2000,
            reg_bounds: Bounds::square(12.0),
            label_frequency: 0.4,
            decision_threshold: None,
            estimate_label_frequency: false,
            input: ConstraintInput::Position,
            input_scale: 3.0,
            weighting: LossWeighting::PerSet,
            leaky_slope: Activation::DEFAULT_LEAKY_SLOPE,
        }
    }

    pub fn point_obstacle() -> Self {
        ConstraintTrainConfig {
            hidden_layers: vec![16, 16],
            reg_weight: 0.25,
            label_frequency: 0.1,
            input_scale: 1.0 / 12.0,
            ..Self::point_circle()
        }
    }

    pub fn threshold(&self) -> Result<f64> {
        match self.decision_threshold {
            Some(d) => Ok(d),
            None => threshold_from_f(self.label_frequency),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers.is_empty() || self.hidden_layers.contains(&0) {
            return Err(Error::config("constraint.hidden_layers", "need positive layer sizes"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("constraint.learning_rate", "must be positive"));
        }
        if !(self.reg_weight >= 0.0 && self.reg_weight.is_finite()) {
            return Err(Error::config("constraint.reg_weight", "must be non-negative"));
        }
        if self.reg_samples == 0 {
            return Err(Error::config("constraint.reg_samples", "must be positive"));
        }
        if !self.reg_bounds.is_valid() {
            return Err(Error::config("constraint.reg_bounds", "empty box"));
        }
        if !(self.label_frequency > 0.0 && self.label_frequency <= 1.0) {
            return Err(Error::config("constraint.label_frequency", "must lie in (0, 1]"));
        }
        if let Some(d) = self.decision_threshold {
            if !(d > 0.0 && d < 1.0) {
                return Err(Error::config("constraint.decision_threshold", "must lie in (0, 1)"));
            }
        }
        if !(self.input_scale > 0.0 && self.input_scale.is_finite()) {
            return Err(Error::config("constraint.input_scale", "must be positive"));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::config("constraint.leaky_slope", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Threshold on ζ equivalent to `Pr(c=1|s) > 0.5` given label frequency `f`.
pub fn threshold_from_f(f: f64) -> Result<f64> {
    if !(f > 0.0 && f <= 1.0) {
        return Err(Error::config("label_frequency", format!("{f} is outside (0, 1]")));
    }
    Ok(0.5 * f)
}

/// Indicator rule: infeasible iff `ζ <= d`.
pub fn classify_zeta(zeta: f64, d: f64) -> Feasibility {
    if zeta > d {
        Feasibility::Feasible
    } else {
        Feasibility::Infeasible
    }
}

fn features_into(input: ConstraintInput, scale: f64, s: &PointState, out: &mut Vec<f64>) {
    out.clear();
    out.push(s.x * scale);
    out.push(s.y * scale);
    if input == ConstraintInput::FullState {
        out.push(s.psi / std::f64::consts::PI);
    }
}

impl ConstraintModel {
    /// Freshly initialized network model.
    pub fn network<R: Rng + ?Sized>(cfg: &ConstraintTrainConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut sizes = vec![cfg.input.dim()];
        sizes.extend_from_slice(&cfg.hidden_layers);
        sizes.push(1);
        let net = MlpParams::new(
            &sizes,
            Activation::LeakyRelu {
                slope: cfg.leaky_slope,
            },
            Activation::Sigmoid,
            rng,
        )?;
        Ok(ConstraintModel {
            zeta: ZetaFunction::Network {
                net,
                input: cfg.input,
                input_scale: cfg.input_scale,
            },
            label_frequency: cfg.label_frequency,
            decision_threshold: cfg.threshold()?,
        })
    }

    /// Wraps the true constraint of `env`.
    pub fn oracle(env: EnvSpec) -> Self {
        ConstraintModel {
            zeta: ZetaFunction::Oracle { env },
            label_frequency: 1.0,
            decision_threshold: 0.5,
        }
    }

    pub fn is_oracle(&self) -> bool {
        matches!(self.zeta, ZetaFunction::Oracle { .. })
    }

    pub fn net(&self) -> Option<&MlpParams> {
        match &self.zeta {
            ZetaFunction::Network { net, .. } => Some(net),
            ZetaFunction::Oracle { .. } => None,
        }
    }

    pub fn net_mut(&mut self) -> Option<&mut MlpParams> {
        match &mut self.zeta {
            ZetaFunction::Network { net, .. } => Some(net),
            ZetaFunction::Oracle { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.label_frequency > 0.0 && self.label_frequency <= 1.0) {
            return Err(Error::config("label_frequency", "must lie in (0, 1]"));
        }
        if !(self.decision_threshold > 0.0 && self.decision_threshold < 1.0) {
            return Err(Error::config("decision_threshold", "must lie in (0, 1)"));
        }
        if let ZetaFunction::Network {
            net,
            input,
            input_scale,
        } = &self.zeta
        {
            net.validate()?;
            if net.input_dim() != input.dim() || net.output_dim() != 1 {
                return Err(Error::Snapshot(format!(
                    "constraint network maps {} -> {}, expected {} -> 1",
                    net.input_dim(),
                    net.output_dim(),
                    input.dim()
                )));
            }
            if net.output_activation != Activation::Sigmoid {
                return Err(Error::Snapshot("constraint network needs a sigmoid output".into()));
            }
            if !(*input_scale > 0.0 && input_scale.is_finite()) {
                return Err(Error::config("input_scale", "must be positive"));
            }
        }
        Ok(())
    }

    /// ζ(s), the probability-like feasibility score.
    pub fn zeta(&self, s: &PointState) -> f64 {
        match &self.zeta {
            ZetaFunction::Network {
                net,
                input,
                input_scale,
            } => {
                let mut feats = Vec::with_capacity(3);
                features_into(*input, *input_scale, s, &mut feats);
                let mut out = Vec::with_capacity(1);
                net.predict_one(&feats, &mut out);
                out[0]
            }
            ZetaFunction::Oracle { env } => {
                if env.true_infeasible(s) {
                    ORACLE_INFEASIBLE
                } else {
                    ORACLE_FEASIBLE
                }
            }
        }
    }

    pub fn zeta_batch(&self, states: &[PointState]) -> Vec<f64> {
        match &self.zeta {
            ZetaFunction::Network { net, .. } => {
                let x = self.feature_matrix(states);
                net.predict(&x)
                    .expect("feature width matches the network")
                    .into_vec()
            }
            ZetaFunction::Oracle { .. } => states.iter().map(|s| self.zeta(s)).collect(),
        }
    }

    fn feature_matrix(&self, states: &[PointState]) -> Matrix {
        let (input, scale) = match &self.zeta {
            ZetaFunction::Network {
                input, input_scale, ..
            } => (*input, *input_scale),
            ZetaFunction::Oracle { .. } => (ConstraintInput::Position, 1.0),
        };
        let mut data = Vec::with_capacity(states.len() * input.dim());
        let mut feats = Vec::with_capacity(3);
        for s in states {
            features_into(input, scale, s, &mut feats);
            data.extend_from_slice(&feats);
        }
        Matrix::from_vec(states.len(), input.dim(), data).unwrap()
    }

    pub fn classify(&self, s: &PointState) -> Feasibility {
        classify_zeta(self.zeta(s), self.decision_threshold)
    }

    /// Indicator `c(s)`: 1 infeasible, 0 feasible.
    pub fn indicator(&self, s: &PointState) -> u8 {
        self.classify(s).indicator()
    }

    /// Sets `f` and the derived threshold `0.5·f`.
    pub fn set_label_frequency(&mut self, f: f64) -> Result<()> {
        self.decision_threshold = threshold_from_f(f)?;
        self.label_frequency = f;
        Ok(())
    }
}

/// `f̂ = max ζ(s)` over demonstration states.
pub fn estimate_label_frequency(model: &ConstraintModel, demos: &[PointState]) -> Result<f64> {
    if demos.is_empty() {
        return Err(Error::Usage(
            "label frequency estimate needs at least one demonstration state".into(),
        ));
    }
    Ok(model
        .zeta_batch(demos)
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Classification loss plus regularizer and its gradient:
///
/// `−mean_D log ζ − mean_U log(1−ζ) − w_r · mean_S ζ`
///
/// with ζ clamped to `[1e-7, 1 − 1e-7]` inside the logarithms.
pub fn constraint_loss(
    model: &ConstraintModel,
    demo: &[PointState],
    unlabeled: &[PointState],
    regularizer: &[PointState],
    reg_weight: f64,
    weighting: LossWeighting,
) -> Result<(f64, MlpGrads)> {
    if unlabeled.is_empty() {
        return Err(Error::Usage(
            "no high-reward trajectories this iteration: unlabeled set is empty".into(),
        ));
    }
    if demo.is_empty() {
        return Err(Error::Usage("demonstration set is empty".into()));
    }
    if reg_weight > 0.0 && regularizer.is_empty() {
        return Err(Error::Usage("regularizer weight set but no regularizer states".into()));
    }
    let net = model
        .net()
        .ok_or_else(|| Error::Usage("the oracle constraint cannot be trained".into()))?;

    let n = demo.len();
    let m = unlabeled.len();
    let r = if reg_weight > 0.0 { regularizer.len() } else { 0 };
    let mut batch = Vec::with_capacity(n + m + r);
    batch.extend_from_slice(demo);
    batch.extend_from_slice(unlabeled);
    batch.extend_from_slice(&regularizer[..r]);
    let x = model.feature_matrix(&batch);
    let (out, cache) = net.forward(&x)?;

    let (wd, wu) = match weighting {
        LossWeighting::PerSet => (1.0 / n as f64, 1.0 / m as f64),
        LossWeighting::PerSample => {
            let w = 1.0 / (n + m) as f64;
            (w, w)
        }
    };
    let lo = ZETA_CLAMP;
    let hi = 1.0 - ZETA_CLAMP;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(batch.len(), 1);
    let g = grad.data_mut();
    let zeta = out.data();
    for i in 0..n {
        let z = zeta[i];
        loss -= wd * z.clamp(lo, hi).ln();
        if z > lo && z < hi {
            g[i] = -wd / z;
        }
    }
    for i in n..n + m {
        let z = zeta[i];
        loss -= wu * (1.0 - z.clamp(lo, hi)).ln();
        if z > lo && z < hi {
            g[i] = wu / (1.0 - z);
        }
    }
    if r > 0 {
        let wr = reg_weight / r as f64;
        for i in n + m..n + m + r {
            loss -= wr * zeta[i];
            g[i] = -wr;
        }
    }
    if !loss.is_finite() {
        return Err(Error::non_finite("constraint loss"));
    }
    let (grads, _) = net.backward(&cache, &grad)?;
    Ok((loss, grads))
}

/// Per-call record of a constraint update.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintTrainStats {
    /// Loss before each of the gradient steps.
    pub losses: Vec<f64>,
    /// Loss after the last step, on the last regularizer batch.
    pub final_loss: f64,
}

fn sample_regularizer<R: Rng + ?Sized>(cfg: &ConstraintTrainConfig, rng: &mut R) -> Vec<PointState> {
    (0..cfg.reg_samples)
        .map(|_| {
            let [x, y] = cfg.reg_bounds.sample(rng);
            let psi = if cfg.input == ConstraintInput::FullState {
                rng.random_range(-std::f64::consts::PI..=std::f64::consts::PI)
            } else {
                0.0
            };
            PointState::new(x, y, psi)
        })
        .collect()
}

/// A constraint model together with the optimizer state that persists across
/// outer iterations.
#[derive(Clone, Debug)]
pub struct ConstraintLearner {
    pub model: ConstraintModel,
    pub config: ConstraintTrainConfig,
    optimizer: AdamState,
}

impl ConstraintLearner {
    pub fn new(model: ConstraintModel, config: ConstraintTrainConfig) -> Result<Self> {
        config.validate()?;
        let net = model
            .net()
            .ok_or_else(|| Error::Usage("the oracle constraint cannot be trained".into()))?;
        let optimizer = AdamState::new(net, AdamConfig::default());
        Ok(ConstraintLearner {
            model,
            config,
            optimizer,
        })
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.optimizer.step
    }

    /// Runs `backward_iterations` full-batch Adam steps, resampling the
    /// regularizer states every step.
    pub fn train<R: Rng + ?Sized>(
        &mut self,
        demo: &[PointState],
        unlabeled: &[PointState],
        rng: &mut R,
    ) -> Result<ConstraintTrainStats> {
        let cfg = &self.config;
        let mut losses = Vec::with_capacity(cfg.backward_iterations);
        let mut reg = Vec::new();
        for it in 0..cfg.backward_iterations {
            reg = sample_regularizer(cfg, rng);
            let (loss, grads) =
                constraint_loss(&self.model, demo, unlabeled, &reg, cfg.reg_weight, cfg.weighting)
                    .map_err(|e| match e {
                        Error::NonFinite { context } => {
                            Error::non_finite(format!("{context} at constraint iteration {it}"))
                        }
                        other => other,
                    })?;
            losses.push(loss);
            let net = self.model.net_mut().expect("learner holds a network");
            self.optimizer.step(net, &grads, cfg.learning_rate)?;
            if !net.is_finite() {
                return Err(Error::non_finite(format!(
                    "constraint parameters at iteration {it}"
                )));
            }
        }
        let final_loss = if reg.is_empty() {
            f64::NAN
        } else {
            constraint_loss(&self.model, demo, unlabeled, &reg, cfg.reg_weight, cfg.weighting)?.0
        };
        if cfg.estimate_label_frequency {
            let f = estimate_label_frequency(&self.model, demo)?;
            self.model.set_label_frequency(f)?;
        }
        Ok(ConstraintTrainStats { losses, final_loss })
    }
}

/// One constraint update with a fresh optimizer.
pub fn train_constraint<R: Rng + ?Sized>(
    model: &mut ConstraintModel,
    demo: &[PointState],
    unlabeled: &[PointState],
    cfg: &ConstraintTrainConfig,
    rng: &mut R,
) -> Result<ConstraintTrainStats> {
    let mut learner = ConstraintLearner::new(model.clone(), cfg.clone())?;
    let stats = learner.train(demo, unlabeled, rng)?;
    *model = learner.model;
    Ok(stats)
}
