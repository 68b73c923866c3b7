//! Volt-var control: smart-inverter reactive power set by a GCN/GRN policy
//! trained with PPO against the power-flow solver.

use std::fmt::Write as _;
use std::rc::Rc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::estimation::{add_measurement_noise, build_measurement_model, Estimator, DEFAULT_MU1};
use crate::grid::{GridCase, PowerFlow};
use crate::gso::{build_real_gso, graph_signal, kron_reduce, signal_indices};
use crate::nn::{
    clip_grad_norm, stack_windows, Adam, GraphModel, GraphShiftOp, Head, ModelConfig, SignalScaler,
    Tape, Var,
};
use crate::{Error, Result};

/// Number of discrete action levels on `[−1, 1]` with spacing `0.2`.
pub const ACTION_LEVELS: usize = 11;
const SPACING: f64 = 0.2;

/// Value of action level `k`: `−1 + 0.2 k`.
pub fn level_value(k: usize) -> f64 {
    assert!(k < ACTION_LEVELS, "action level {k} out of range");
    -1.0 + SPACING * k as f64
}

/// Index of a grid value, if it lies on the grid (within `1e-9`).
pub fn level_index(a: f64) -> Option<usize> {
    let k = ((a + 1.0) / SPACING).round();
    (k >= 0.0 && k < ACTION_LEVELS as f64 && (level_value(k as usize) - a).abs() <= 1e-9)
        .then_some(k as usize)
}

/// Inverter state at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverterSpec {
    pub node: usize,
    pub s_rating: f64,
    pub p_actual: f64,
}

impl InverterSpec {
    pub fn reactive_limit(&self) -> Result<f64> {
        reactive_limit(self.s_rating, self.p_actual)
    }
}

/// `q̄ = √(s² − p²)`.
pub fn reactive_limit(s_rating: f64, p_actual: f64) -> Result<f64> {
    if !(0.0..=s_rating).contains(&p_actual) {
        return Err(Error::InverterOverload { p_actual, s_rating });
    }
    Ok((s_rating * s_rating - p_actual * p_actual).sqrt())
}

/// One action level per inverter.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionVector {
    levels: Vec<usize>,
}

impl ActionVector {
    pub fn from_levels(levels: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = levels.iter().find(|&&k| k >= ACTION_LEVELS) {
            return Err(Error::InvalidAction(bad as f64));
        }
        Ok(Self { levels })
    }

    pub fn from_values(values: &[f64]) -> Result<Self> {
        let levels = values
            .iter()
            .map(|&a| level_index(a).ok_or(Error::InvalidAction(a)))
            .collect::<Result<_>>()?;
        Ok(Self { levels })
    }

    pub fn zero(inverters: usize) -> Self {
        Self {
            levels: vec![ACTION_LEVELS / 2; inverters],
        }
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn values(&self) -> Vec<f64> {
        self.levels.iter().map(|&k| level_value(k)).collect()
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub episode_length: usize,
    pub window: usize,
    /// Scale applied to the nominal loads before the daily profile.
    pub load_scale: f64,
    /// Standard deviation of the per-episode, per-load scale factor.
    pub load_spread: f64,
    /// Standard deviation of the per-step load noise.
    pub step_noise: f64,
    /// Standard deviation of the per-episode PV peak factor.
    pub pv_spread: f64,
    /// Reward on a non-convergent power flow (ends the episode).
    pub penalty: f64,
    pub target_voltage: f64,
    /// Measured nodes; `None` observes the full state. Set in code, not
    /// read from documents, because positions depend on the case.
    #[serde(skip)]
    pub observed: Option<Vec<usize>>,
    pub noise_sigma: f64,
    pub mu1: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            episode_length: 24,
            window: 10,
            load_scale: 1.0,
            load_spread: 0.1,
            step_noise: 0.02,
            pv_spread: 0.1,
            penalty: -10.0,
            target_voltage: 1.0,
            observed: None,
            noise_sigma: 0.0,
            mu1: DEFAULT_MU1,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episode_length == 0 || self.window == 0 {
            return Err(Error::InvalidArgument("episode length and window must be positive".into()));
        }
        for (name, v) in [
            ("load_scale", self.load_scale),
            ("load_spread", self.load_spread),
            ("step_noise", self.step_noise),
            ("pv_spread", self.pv_spread),
            ("noise_sigma", self.noise_sigma),
            ("mu1", self.mu1),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if !(self.penalty <= 0.0) {
            return Err(Error::InvalidArgument(format!("penalty must be nonpositive, got {}", self.penalty)));
        }
        Ok(())
    }
}

/// Daily load shape: evening peak plus a smaller morning peak.
pub fn load_profile(hour: f64) -> f64 {
    let bump = |c: f64, w: f64| (-((hour - c) / w).powi(2)).exp();
    0.55 + 0.35 * bump(19.0, 3.0) + 0.15 * bump(8.0, 2.0)
}

/// Normalized PV output: half sine between 06:00 and 18:00.
pub fn pv_profile(hour: f64) -> f64 {
    if (6.0..18.0).contains(&hour) {
        (std::f64::consts::PI * (hour - 6.0) / 12.0).sin()
    } else {
        0.0
    }
}

/// Result of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    /// Mean `| |v| − v̄ |` over the inverter nodes (`NaN` on failure).
    pub deviation: f64,
    pub done: bool,
    pub converged: bool,
}

#[derive(Debug, Clone)]
struct Scenario {
    injections: Vec<Vec<Complex64>>,
    pv: Vec<Vec<f64>>,
}

/// Power-flow-backed episode over a daily load/PV profile.
#[derive(Debug, Clone)]
pub struct VoltVarEnv {
    case: GridCase,
    config: EnvConfig,
    pf: PowerFlow,
    slack: Vec<Complex64>,
    inverter_nodes: Vec<usize>,
    signal_rows: Vec<usize>,
    estimator: Option<Estimator>,
    shift: DMatrix<f64>,
    rng: ChaCha8Rng,
    scenario: Option<Scenario>,
    step: usize,
    done: bool,
    window: DMatrix<f64>,
}

impl VoltVarEnv {
    pub fn new(case: &GridCase, config: EnvConfig) -> Result<Self> {
        config.validate()?;
        if case.inverters.is_empty() {
            return Err(Error::Validation("the case has no inverters".into()));
        }
        let pf = PowerFlow::new(case)?;
        let gso = build_real_gso(case);
        let n = case.node_count();
        let (signal_rows, estimator, shift) = match &config.observed {
            None => ((0..2 * n).collect(), None, gso.s_full.clone()),
            Some(observed) => {
                let model = build_measurement_model(pf.admittance(), observed)?;
                let est = Estimator::new(model, &gso.b_hat, config.mu1)?;
                let rows = signal_indices(observed, n);
                let reduced = kron_reduce(&gso.s_full, &rows)?;
                (rows, Some(est), reduced.s_red)
            }
        };
        Ok(Self {
            slack: case.nominal_slack_voltage(),
            inverter_nodes: case.inverter_positions(),
            case: case.clone(),
            window: DMatrix::zeros(signal_rows.len(), config.window),
            config,
            pf,
            signal_rows,
            estimator,
            shift,
            rng: ChaCha8Rng::seed_from_u64(0),
            scenario: None,
            step: 0,
            done: true,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn case(&self) -> &GridCase {
        &self.case
    }

    pub fn inverter_count(&self) -> usize {
        self.inverter_nodes.len()
    }

    /// Length of one observation frame.
    pub fn observation_dim(&self) -> usize {
        self.signal_rows.len()
    }

    /// Shift operator matching the observation: the full operator, or its
    /// Kron reduction onto the observed signal entries.
    pub fn shift_matrix(&self) -> &DMatrix<f64> {
        &self.shift
    }

    /// Current window, `d × T` with column `τ` = lag `τ`.
    pub fn window(&self) -> &DMatrix<f64> {
        &self.window
    }

    pub fn current_step(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Inverter ratings and PV output at the current step.
    pub fn inverter_specs(&self) -> Vec<InverterSpec> {
        let scenario = self.scenario.as_ref().expect("reset before use");
        let t = self.step.min(self.config.episode_length - 1);
        self.inverter_nodes
            .iter()
            .zip(&self.case.inverters)
            .enumerate()
            .map(|(k, (&node, inv))| InverterSpec {
                node,
                s_rating: inv.s_rating,
                p_actual: scenario.pv[t][k],
            })
            .collect()
    }

    /// Draws a new exogenous scenario and fills the window with the state
    /// at the first step under zero reactive injection.
    pub fn reset(&mut self, scenario_seed: u64) -> Result<&DMatrix<f64>> {
        self.rng = ChaCha8Rng::seed_from_u64(scenario_seed);
        self.scenario = Some(self.draw_scenario());
        self.step = 0;
        self.done = false;
        let zero = ActionVector::zero(self.inverter_count());
        let point = self.solve(0, &zero)?;
        let frame = self.observe(&point.v)?;
        for lag in 0..self.config.window {
            self.window.set_column(lag, &frame);
        }
        Ok(&self.window)
    }

    fn draw_scenario(&mut self) -> Scenario {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let nominal = self.case.nominal_injections();
        let len = self.config.episode_length;
        let node_scale: Vec<f64> = nominal
            .iter()
            .map(|_| (1.0 + self.config.load_spread * normal.sample(&mut self.rng)).max(0.0))
            .collect();
        let pv_scale: Vec<f64> = self
            .case
            .inverters
            .iter()
            .map(|_| (1.0 + self.config.pv_spread * normal.sample(&mut self.rng)).max(0.0))
            .collect();
        let mut injections = Vec::with_capacity(len);
        let mut pv = Vec::with_capacity(len);
        for t in 0..len {
            let hour = 24.0 * t as f64 / len as f64;
            let shape = self.config.load_scale * load_profile(hour);
            injections.push(
                nominal
                    .iter()
                    .zip(&node_scale)
                    .map(|(s, k)| {
                        let noise = (1.0 + self.config.step_noise * normal.sample(&mut self.rng)).max(0.0);
                        s * (shape * k * noise)
                    })
                    .collect(),
            );
            let sun = pv_profile(hour);
            pv.push(
                self.case
                    .inverters
                    .iter()
                    .zip(&pv_scale)
                    .map(|(inv, k)| (inv.pv_peak * sun * k).clamp(0.0, inv.s_rating))
                    .collect(),
            );
        }
        Scenario { injections, pv }
    }

    fn solve(&self, t: usize, action: &ActionVector) -> Result<crate::grid::OperatingPoint> {
        let scenario = self.scenario.as_ref().expect("reset before use");
        let mut s = scenario.injections[t].clone();
        for (k, (&node, a)) in self.inverter_nodes.iter().zip(action.values()).enumerate() {
            let s_rating = self.case.inverters[k].s_rating;
            let p = scenario.pv[t][k];
            let q_bar = reactive_limit(s_rating, p)?;
            let q = a * q_bar;
            assert!(q.abs() <= q_bar + 1e-12, "reactive injection exceeds the inverter limit");
            s[node] += Complex64::new(p, q);
        }
        self.pf.solve_all(&s, &self.slack)
    }

    /// Observation frame of a voltage vector: the graph signal, or the
    /// observed entries of the state recovered from the measurements.
    fn observe(&mut self, v: &crate::grid::CVector) -> Result<DVector<f64>> {
        let full = match &self.estimator {
            None => return Ok(graph_signal(&self.case, v)),
            Some(est) => {
                let z = est.model().measure(v)?;
                let noisy = add_measurement_noise(&z, self.config.noise_sigma, &mut self.rng);
                graph_signal(&self.case, &est.recover(&noisy.z)?)
            }
        };
        Ok(DVector::from_iterator(
            self.signal_rows.len(),
            self.signal_rows.iter().map(|&r| full[r]),
        ))
    }

    /// Applies the action at the current step and advances the episode.
    pub fn step(&mut self, action: &ActionVector) -> Result<StepOutcome> {
        if self.done || self.scenario.is_none() {
            return Err(Error::InvalidArgument("episode is finished; call reset".into()));
        }
        if action.len() != self.inverter_count() {
            return Err(Error::DimensionMismatch {
                what: "action vector",
                expected: self.inverter_count(),
                got: action.len(),
            });
        }
        let point = match self.solve(self.step, action) {
            Ok(p) => p,
            Err(Error::NonConvergence { .. }) => {
                self.done = true;
                return Ok(StepOutcome {
                    reward: self.config.penalty,
                    deviation: f64::NAN,
                    done: true,
                    converged: false,
                });
            }
            Err(e) => return Err(e),
        };
        let total: f64 = self
            .inverter_nodes
            .iter()
            .map(|&k| (point.v[k].norm() - self.config.target_voltage).abs())
            .sum();
        let frame = self.observe(&point.v)?;
        let t = self.config.window;
        if t > 1 {
            let older = self.window.columns(0, t - 1).into_owned();
            self.window.columns_mut(1, t - 1).copy_from(&older);
        }
        self.window.set_column(0, &frame);
        self.step += 1;
        self.done = self.step == self.config.episode_length;
        Ok(StepOutcome {
            reward: -total,
            deviation: total / self.inverter_count() as f64,
            done: self.done,
            converged: true,
        })
    }
}

/// Policy network for an environment: per-inverter logits over the action
/// levels plus a value estimate; inputs normalized as `(x − [0; 1]) / 0.05`.
pub fn init_policy(env: &VoltVarEnv, config: ModelConfig, seed: u64) -> Result<GraphModel> {
    let d = env.observation_dim();
    let n = d / 2;
    let mut center = vec![0.0; d];
    center[n..].fill(1.0);
    let scaler = SignalScaler::new(center, 0.05)?;
    let config = ModelConfig {
        signal_dim: d,
        window: env.config().window,
        head: Head::Policy {
            inverters: env.inverter_count(),
            levels: ACTION_LEVELS,
        },
        ..config
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GraphModel::init(config, scaler, None, &mut rng)
}

/// Action selection: sampled from the policy or its per-inverter argmax.
pub enum ActMode<'a> {
    Sample(&'a mut ChaCha8Rng),
    Greedy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyStep {
    pub action: ActionVector,
    /// Sum of the per-inverter log-probabilities of the chosen levels.
    pub log_prob: f64,
    pub value: f64,
}

/// Per-inverter probabilities from one row of logits.
pub fn level_probabilities(logits: &[f64], inverters: usize) -> Result<Vec<Vec<f64>>> {
    if logits.len() != inverters * ACTION_LEVELS {
        return Err(Error::DimensionMismatch {
            what: "policy logits",
            expected: inverters * ACTION_LEVELS,
            got: logits.len(),
        });
    }
    Ok(logits
        .chunks(ACTION_LEVELS)
        .map(|g| {
            let max = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = g.iter().map(|x| (x - max).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|x| x / z).collect()
        })
        .collect())
}

pub fn policy_act(
    model: &GraphModel,
    shift: &GraphShiftOp,
    window: &DMatrix<f64>,
    mode: ActMode<'_>,
) -> Result<PolicyStep> {
    let Head::Policy { inverters, .. } = model.config.head else {
        return Err(Error::InvalidArgument("model has no policy head".into()));
    };
    let (logits, value) = model.predict(shift, window)?;
    let row: Vec<f64> = logits.row(0).iter().copied().collect();
    let probs = level_probabilities(&row, inverters)?;
    let mut rng = match mode {
        ActMode::Sample(rng) => Some(rng),
        ActMode::Greedy => None,
    };
    let mut levels = Vec::with_capacity(inverters);
    let mut log_prob = 0.0;
    for p in &probs {
        let k = match rng.as_mut() {
            Some(rng) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                p.iter()
                    .position(|&pk| {
                        acc += pk;
                        u < acc
                    })
                    .unwrap_or(ACTION_LEVELS - 1)
            }
            None => argmax(p),
        };
        log_prob += p[k].ln();
        levels.push(k);
    }
    Ok(PolicyStep {
        action: ActionVector::from_levels(levels)?,
        log_prob,
        value: value.expect("policy head")[(0, 0)],
    })
}

/// First index of the maximum.
fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = k;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub learning_rate: f64,
    pub gamma: f64,
    pub clip: f64,
    pub entropy_weight: f64,
    pub value_weight: f64,
    /// Episodes collected per policy update.
    pub episodes_per_update: usize,
    /// Passes over each rollout batch.
    pub update_epochs: usize,
    pub minibatch_size: usize,
    pub max_grad_norm: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            learning_rate: 7e-4,
            gamma: 0.99,
            clip: 0.1,
            entropy_weight: 0.01,
            value_weight: 1.0,
            episodes_per_update: 4,
            update_epochs: 4,
            minibatch_size: 32,
            max_grad_norm: 0.5,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidArgument(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if !(self.clip > 0.0) {
            return Err(Error::InvalidArgument(format!("clip must be positive, got {}", self.clip)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be nonnegative, got {}",
                self.learning_rate
            )));
        }
        for (name, v) in [
            ("entropy_weight", self.entropy_weight),
            ("value_weight", self.value_weight),
            ("max_grad_norm", self.max_grad_norm),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if self.episodes_per_update == 0 || self.update_epochs == 0 || self.minibatch_size == 0 {
            return Err(Error::InvalidArgument("rollout and minibatch counts must be positive".into()));
        }
        Ok(())
    }
}

/// One training episode as seen by the learner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeRecord {
    pub total_reward: f64,
    pub mean_deviation: f64,
    pub steps: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PpoReport {
    pub episodes: Vec<EpisodeRecord>,
    pub updates: usize,
}

struct Transition {
    window: DMatrix<f64>,
    levels: Vec<usize>,
    log_prob: f64,
    ret: f64,
    advantage: f64,
}

/// Runs one episode and appends its transitions with discounted returns.
fn rollout(
    env: &mut VoltVarEnv,
    model: &GraphModel,
    shift: &GraphShiftOp,
    scenario_seed: u64,
    gamma: f64,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<Transition>,
) -> Result<EpisodeRecord> {
    env.reset(scenario_seed)?;
    let mut steps: Vec<(DMatrix<f64>, PolicyStep, f64)> = Vec::new();
    let mut deviation = 0.0;
    let mut converged = true;
    while !env.is_done() {
        let window = env.window().clone();
        let act = policy_act(model, shift, &window, ActMode::Sample(rng))?;
        let outcome = env.step(&act.action)?;
        if outcome.converged {
            deviation += outcome.deviation;
        } else {
            converged = false;
        }
        steps.push((window, act, outcome.reward));
    }
    let total_reward = steps.iter().map(|s| s.2).sum();
    let n = steps.len();
    let counted = if converged { n } else { n - 1 };
    let mut ret = 0.0;
    let mut fresh = Vec::with_capacity(n);
    for (window, act, reward) in steps.into_iter().rev() {
        ret = reward + gamma * ret;
        fresh.push(Transition {
            window,
            levels: act.action.levels().to_vec(),
            log_prob: act.log_prob,
            ret,
            advantage: ret - act.value,
        });
    }
    fresh.reverse();
    out.extend(fresh);
    Ok(EpisodeRecord {
        total_reward,
        mean_deviation: if counted == 0 { f64::NAN } else { deviation / counted as f64 },
        steps: n,
        converged,
    })
}

/// Clipped surrogate with value loss and entropy bonus over a minibatch.
fn record_ppo_loss(
    tape: &mut Tape,
    model: &GraphModel,
    params: &[Var],
    shift: &GraphShiftOp,
    batch: &[&Transition],
    advantages: &[f64],
    config: &PpoConfig,
) -> Result<Var> {
    let Head::Policy { inverters, levels } = model.config.head else {
        return Err(Error::InvalidArgument("model has no policy head".into()));
    };
    let b = batch.len();
    let windows: Vec<&DMatrix<f64>> = batch.iter().map(|t| &t.window).collect();
    let x = tape.leaf(stack_windows(&windows));
    let out = model.forward(tape, params, shift, x)?;
    let logp = tape.log_softmax_groups(out.output, levels);
    let choice: Vec<usize> = batch.iter().flat_map(|t| t.levels.iter().copied()).collect();
    let picked = tape.gather_groups(logp, levels, &choice);
    let joint = tape.matmul_const(picked, Rc::new(DMatrix::from_element(inverters, 1, 1.0)));
    let old = DMatrix::from_fn(b, 1, |r, _| -batch[r].log_prob);
    let log_ratio = tape.add_const(joint, &old);
    let ratio = tape.exp(log_ratio);
    let adv = Rc::new(DMatrix::from_fn(b, 1, |r, _| advantages[r]));
    let zeros = DMatrix::zeros(b, 1);
    let surr1 = tape.affine_const(ratio, adv.clone(), &zeros);
    let clipped = tape.clamp(ratio, 1.0 - config.clip, 1.0 + config.clip);
    let surr2 = tape.affine_const(clipped, adv, &zeros);
    let surr = tape.minimum(surr1, surr2);
    let policy_gain = tape.mean(surr);
    let value = out.value.expect("policy head");
    let neg_ret = DMatrix::from_fn(b, 1, |r, _| -batch[r].ret);
    let err = tape.add_const(value, &neg_ret);
    let sq = tape.mul(err, err);
    let value_loss = tape.mean(sq);
    let p = tape.exp(logp);
    let plogp = tape.mul(p, logp);
    let neg_entropy = tape.sum(plogp);
    let neg_entropy = tape.scale(neg_entropy, 1.0 / b as f64);
    let a = tape.scale(policy_gain, -1.0);
    let v = tape.scale(value_loss, config.value_weight);
    let e = tape.scale(neg_entropy, config.entropy_weight);
    let loss = tape.add(a, v);
    Ok(tape.add(loss, e))
}

/// Trains the policy for `episodes` episodes; each update uses the
/// advantage `G_t − V(s_t)` with `G_t` the discounted return, normalized
/// over the rollout batch.
pub fn ppo_train(
    env: &mut VoltVarEnv,
    model: &mut GraphModel,
    shift: &GraphShiftOp,
    config: &PpoConfig,
    episodes: usize,
    seed: u64,
) -> Result<PpoReport> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(config.learning_rate);
    let mut values = model.param_values();
    let mut report = PpoReport::default();
    let mut last_finite = f64::NAN;
    while report.episodes.len() < episodes {
        let mut batch = Vec::new();
        let count = config.episodes_per_update.min(episodes - report.episodes.len());
        for _ in 0..count {
            let scenario = rng.next_u64();
            let record = rollout(env, model, shift, scenario, config.gamma, &mut rng, &mut batch)?;
            report.episodes.push(record);
        }
        let n = batch.len() as f64;
        let mean = batch.iter().map(|t| t.advantage).sum::<f64>() / n;
        let std = (batch.iter().map(|t| (t.advantage - mean).powi(2)).sum::<f64>() / n).sqrt();
        let normalized: Vec<f64> = batch.iter().map(|t| (t.advantage - mean) / (std + 1e-8)).collect();
        let mut order: Vec<usize> = (0..batch.len()).collect();
        for _ in 0..config.update_epochs {
            shuffle(&mut order, &mut rng);
            for chunk in order.chunks(config.minibatch_size) {
                let mb: Vec<&Transition> = chunk.iter().map(|&i| &batch[i]).collect();
                let adv: Vec<f64> = chunk.iter().map(|&i| normalized[i]).collect();
                let mut tape = Tape::new();
                let params: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone())).collect();
                let loss = record_ppo_loss(&mut tape, model, &params, shift, &mb, &adv, config)?;
                let l = tape.scalar(loss);
                if !l.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch: report.updates,
                        last_finite,
                    });
                }
                last_finite = l;
                let grads = tape.backward(loss)?;
                let mut g: Vec<DMatrix<f64>> = params.iter().map(|&p| grads.wrt(&tape, p)).collect();
                if config.max_grad_norm > 0.0 {
                    clip_grad_norm(&mut g, config.max_grad_norm);
                }
                adam.step(&mut values, &g);
                model.set_param_values(values.clone());
            }
        }
        report.updates += 1;
    }
    Ok(report)
}

/// Fisher–Yates shuffle driven by the given generator.
fn shuffle(v: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

/// How actions are chosen during evaluation.
pub enum Controller<'a> {
    /// No reactive injection.
    Zero,
    /// Argmax of the policy.
    Greedy(&'a GraphModel, &'a GraphShiftOp),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    /// Mean `| |v| − v̄ |` over inverter nodes and converged steps.
    pub mean_deviation: f64,
    pub mean_episode_reward: f64,
    pub failures: usize,
}

/// Runs one episode per scenario seed.
pub fn evaluate_controller(
    env: &mut VoltVarEnv,
    controller: &Controller<'_>,
    scenario_seeds: &[u64],
) -> Result<EvalSummary> {
    if scenario_seeds.is_empty() {
        return Err(Error::InvalidArgument("no evaluation scenarios".into()));
    }
    let (mut dev, mut steps, mut reward, mut failures) = (0.0, 0usize, 0.0, 0usize);
    for &seed in scenario_seeds {
        env.reset(seed)?;
        while !env.is_done() {
            let action = match controller {
                Controller::Zero => ActionVector::zero(env.inverter_count()),
                Controller::Greedy(model, shift) => {
                    policy_act(model, shift, env.window(), ActMode::Greedy)?.action
                }
            };
            let out = env.step(&action)?;
            reward += out.reward;
            if out.converged {
                dev += out.deviation;
                steps += 1;
            } else {
                failures += 1;
            }
        }
    }
    Ok(EvalSummary {
        episodes: scenario_seeds.len(),
        mean_deviation: if steps == 0 { f64::NAN } else { dev / steps as f64 },
        mean_episode_reward: reward / scenario_seeds.len() as f64,
        failures,
    })
}

/// Per-episode reward mean and standard deviation across training runs.
pub fn reward_trace_csv(runs: &[PpoReport]) -> String {
    let mut out = String::from("episode,mean_reward,std_reward,mean_deviation\n");
    let len = runs.iter().map(|r| r.episodes.len()).min().unwrap_or(0);
    for e in 0..len {
        let rewards: Vec<f64> = runs.iter().map(|r| r.episodes[e].total_reward).collect();
        let devs: Vec<f64> = runs.iter().map(|r| r.episodes[e].mean_deviation).collect();
        let k = rewards.len() as f64;
        let mean = rewards.iter().sum::<f64>() / k;
        let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / k).sqrt();
        let dev = devs.iter().sum::<f64>() / k;
        writeln!(out, "{e},{mean:.12e},{std:.12e},{dev:.12e}").expect("write to string");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::fixtures::four_bus_3ph;
    use crate::nn::Architecture;

    fn small(arch: Architecture) -> ModelConfig {
        let mut cfg = ModelConfig::new(arch, 1, Head::Policy { inverters: 1, levels: ACTION_LEVELS });
        cfg.channels = 3;
        cfg.features = 3;
        cfg.hidden = 16;
        cfg
    }

    fn short_env(observed: Option<Vec<usize>>) -> VoltVarEnv {
        let cfg = EnvConfig {
            episode_length: 6,
            window: 3,
            observed,
            ..Default::default()
        };
        VoltVarEnv::new(&four_bus_3ph(), cfg).unwrap()
    }

    #[test]
    fn reactive_limit_examples() {
        assert_eq!(reactive_limit(5.0, 3.0).unwrap(), 4.0);
        assert_eq!(reactive_limit(2.0, 2.0).unwrap(), 0.0);
        assert_eq!(reactive_limit(2.0, 0.0).unwrap(), 2.0);
        assert!(matches!(reactive_limit(1.0, 1.5), Err(Error::InverterOverload { .. })));
    }

    #[test]
    fn action_grid_has_eleven_levels() {
        let values: Vec<f64> = (0..ACTION_LEVELS).map(level_value).collect();
        assert_eq!(values[0], -1.0);
        assert!((values[10] - 1.0).abs() < 1e-12);
        assert!((values[5]).abs() < 1e-12);
        assert_eq!(ActionVector::from_values(&[-0.4, 0.6]).unwrap().levels(), &[3, 8]);
        assert!(matches!(ActionVector::from_values(&[0.3]), Err(Error::InvalidAction(_))));
        assert!(ActionVector::from_levels(vec![11]).is_err());
    }

    #[test]
    fn rewards_are_nonpositive_and_zero_action_is_the_baseline() {
        let mut env = short_env(None);
        env.reset(4).unwrap();
        let mut rewards = Vec::new();
        while !env.is_done() {
            let out = env.step(&ActionVector::zero(2)).unwrap();
            assert!(out.reward <= 0.0 && out.converged);
            assert!((out.deviation * 2.0 + out.reward).abs() < 1e-15);
            rewards.push(out.reward);
        }
        assert_eq!(rewards.len(), 6);
        assert!(env.step(&ActionVector::zero(2)).is_err());
    }

    #[test]
    fn trajectories_are_reproducible() {
        let run = || {
            let mut env = short_env(None);
            env.reset(11).unwrap();
            let mut trace = Vec::new();
            for k in 0..6 {
                let a = ActionVector::from_levels(vec![k % 11, (3 * k) % 11]).unwrap();
                trace.push(env.step(&a).unwrap());
                trace.push(StepOutcome { reward: env.window().sum(), deviation: 0.0, done: false, converged: true });
            }
            trace
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn window_shifts_by_one_frame() {
        let mut env = short_env(None);
        env.reset(2).unwrap();
        let first = env.window().clone();
        assert!(first.column_iter().all(|c| c == first.column(0)));
        env.step(&ActionVector::from_values(&[1.0, -1.0]).unwrap()).unwrap();
        let w = env.window();
        assert_eq!(w.column(1), first.column(0));
        assert_ne!(w.column(0), first.column(0));
    }

    #[test]
    fn positive_reactive_power_raises_the_local_voltage() {
        let mut env = short_env(None);
        let node = env.inverter_nodes[0];
        let n = env.case().node_count();
        env.reset(3).unwrap();
        env.step(&ActionVector::zero(2)).unwrap();
        let base = env.window()[(n + node, 0)];
        env.reset(3).unwrap();
        env.step(&ActionVector::from_values(&[1.0, 0.0]).unwrap()).unwrap();
        assert!(env.window()[(n + node, 0)] > base);
    }

    #[test]
    fn overloaded_network_ends_with_the_penalty() {
        let cfg = EnvConfig { episode_length: 4, window: 2, load_scale: 60.0, ..Default::default() };
        let mut env = VoltVarEnv::new(&four_bus_3ph(), cfg).unwrap();
        let err = env.reset(0);
        assert!(matches!(err, Err(Error::NonConvergence { .. })), "{err:?}");
    }

    #[test]
    fn observing_every_node_matches_the_full_pipeline() {
        let n = four_bus_3ph().node_count();
        let mut full = short_env(None);
        // exact recovery needs an unregularized estimator
        let cfg = EnvConfig { mu1: 0.0, ..short_env(Some((0..n).collect())).config().clone() };
        let mut reduced = VoltVarEnv::new(&four_bus_3ph(), cfg).unwrap();
        assert!((full.shift_matrix() - reduced.shift_matrix()).amax() <= 1e-10);
        full.reset(5).unwrap();
        reduced.reset(5).unwrap();
        let a = ActionVector::from_values(&[0.4, -0.2]).unwrap();
        full.step(&a).unwrap();
        reduced.step(&a).unwrap();
        let gap = (full.window() - reduced.window()).amax();
        assert!(gap <= 1e-10, "{gap}");
        let model = init_policy(&full, small(Architecture::Gcn), 1).unwrap();
        let s_full = GraphShiftOp::new(full.shift_matrix(), true).unwrap();
        let s_red = GraphShiftOp::new(reduced.shift_matrix(), true).unwrap();
        let (l1, _) = model.predict(&s_full, full.window()).unwrap();
        let (l2, _) = model.predict(&s_red, reduced.window()).unwrap();
        assert!((l1 - l2).amax() <= 1e-10);
    }

    #[test]
    fn partial_observation_uses_the_reduced_operator() {
        let env = short_env(Some(vec![0, 6, 11]));
        assert_eq!(env.observation_dim(), 6);
        assert_eq!(env.shift_matrix().shape(), (6, 6));
    }

    #[test]
    fn uniform_logits_give_uniform_probabilities() {
        let probs = level_probabilities(&[0.0; 22], 2).unwrap();
        for p in probs.iter().flatten() {
            assert!((p - 1.0 / 11.0).abs() < 1e-15);
        }
        assert!(level_probabilities(&[0.0; 21], 2).is_err());
    }

    #[test]
    fn greedy_action_ignores_logit_offsets_and_log_probs_add() {
        let env = short_env(None);
        let mut model = init_policy(&env, small(Architecture::Grn), 2).unwrap();
        let shift = GraphShiftOp::new(env.shift_matrix(), true).unwrap();
        let mut env = env;
        env.reset(1).unwrap();
        let window = env.window().clone();
        let greedy = policy_act(&model, &shift, &window, ActMode::Greedy).unwrap();
        let idx = model.params.iter().position(|p| p.name == "policy.bias").unwrap();
        model.params[idx].value.add_scalar_mut(3.5);
        let shifted = policy_act(&model, &shift, &window, ActMode::Greedy).unwrap();
        assert_eq!(greedy.action, shifted.action);
        assert!((greedy.log_prob - shifted.log_prob).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let step = policy_act(&model, &shift, &window, ActMode::Sample(&mut rng)).unwrap();
        let (logits, _) = model.predict(&shift, &window).unwrap();
        let row: Vec<f64> = logits.row(0).iter().copied().collect();
        let probs = level_probabilities(&row, 2).unwrap();
        let expected: f64 = step.action.levels().iter().zip(&probs).map(|(&k, p)| p[k].ln()).sum();
        assert!((step.log_prob - expected).abs() < 1e-12);
    }

    #[test]
    fn ppo_loss_gradient_matches_finite_differences() {
        let mut env = short_env(None);
        let model = init_policy(&env, small(Architecture::Gcn), 4).unwrap();
        let shift = GraphShiftOp::new(env.shift_matrix(), true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut batch = Vec::new();
        rollout(&mut env, &model, &shift, 1, 0.99, &mut rng, &mut batch).unwrap();
        let refs: Vec<&Transition> = batch.iter().collect();
        let adv: Vec<f64> = (0..refs.len()).map(|k| (k as f64 - 2.5) / 3.0).collect();
        let cfg = PpoConfig::default();
        // perturb old log-probs so the clip is active for some samples
        let shifted: Vec<Transition> = batch
            .iter()
            .enumerate()
            .map(|(k, t)| Transition {
                window: t.window.clone(),
                levels: t.levels.clone(),
                log_prob: t.log_prob + if k % 2 == 0 { 0.3 } else { 0.0 },
                ret: t.ret,
                advantage: t.advantage,
            })
            .collect();
        let refs: Vec<&Transition> = shifted.iter().collect();
        let _ = refs.len();
        let eval = |values: &[DMatrix<f64>]| {
            let mut tape = Tape::new();
            let p: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone())).collect();
            let l = record_ppo_loss(&mut tape, &model, &p, &shift, &refs, &adv, &cfg).unwrap();
            tape.scalar(l)
        };
        let values = model.param_values();
        let mut tape = Tape::new();
        let p: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let l = record_ppo_loss(&mut tape, &model, &p, &shift, &refs, &adv, &cfg).unwrap();
        let grads = tape.backward(l).unwrap();
        let h = 1e-6;
        for (k, &var) in p.iter().enumerate() {
            let g = grads.wrt(&tape, var);
            for idx in [0, g.len() / 2, g.len() - 1] {
                let mut plus = values.clone();
                plus[k][idx] += h;
                let mut minus = values.clone();
                minus[k][idx] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                assert!((fd - g[idx]).abs() <= 1e-5 * fd.abs().max(1e-2), "param {k}[{idx}]: {fd} vs {}", g[idx]);
            }
        }
    }

    #[test]
    fn frozen_policy_does_not_change() {
        let mut env = short_env(None);
        let mut model = init_policy(&env, small(Architecture::Gcn), 0).unwrap();
        let before = model.param_values();
        let shift = GraphShiftOp::new(env.shift_matrix(), true).unwrap();
        let cfg = PpoConfig { learning_rate: 0.0, ..Default::default() };
        let report = ppo_train(&mut env, &mut model, &shift, &cfg, 8, 1).unwrap();
        assert_eq!(report.episodes.len(), 8);
        assert_eq!(model.param_values(), before);
    }

    #[test]
    fn training_is_reproducible_per_seed() {
        let run = || {
            let mut env = short_env(None);
            let mut model = init_policy(&env, small(Architecture::Grn), 0).unwrap();
            let shift = GraphShiftOp::new(env.shift_matrix(), true).unwrap();
            let report = ppo_train(&mut env, &mut model, &shift, &PpoConfig::default(), 6, 42).unwrap();
            (report, model.param_values())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn invalid_ppo_config_is_rejected() {
        assert!(PpoConfig { gamma: 1.0, ..Default::default() }.validate().is_err());
        assert!(PpoConfig { clip: 0.0, ..Default::default() }.validate().is_err());
        assert!(PpoConfig::default().validate().is_ok());
    }

    #[test]
    fn reward_trace_aggregates_over_runs() {
        let rec = |r| EpisodeRecord { total_reward: r, mean_deviation: 0.1, steps: 24, converged: true };
        let a = PpoReport { episodes: vec![rec(-1.0), rec(-2.0)], updates: 1 };
        let b = PpoReport { episodes: vec![rec(-3.0), rec(-2.0)], updates: 1 };
        let csv = reward_trace_csv(&[a, b]);
        let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
        assert_eq!(row[0], "0");
        assert_eq!(row[1].parse::<f64>().unwrap(), -2.0);
        assert_eq!(row[2].parse::<f64>().unwrap(), 1.0);
    }
}
