//! Phasor state estimation (`H = 0`) and forecasting (`H ≥ 1`) from
//! sub-sampled measurements with a physics-regularized GCN/GRN.

use std::fmt::Write as _;
use std::ops::Range;
use std::rc::Rc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::estimation::{add_measurement_noise, build_measurement_model, Estimator};
use crate::grid::{AdmittanceMatrix, CVector, GridCase, OperatingPoint, PowerFlow};
use crate::gso::{graph_signal, linearized_injections, RealGso};
use crate::nn::{
    stack_windows, Adam, GraphModel, GraphShiftOp, Head, ModelConfig, SignalScaler, Tape, Var,
};
use crate::{Error, Result};

/// Default regularizer weight of the physics term.
pub const DEFAULT_MU2: f64 = 1e-3;

/// Load multiplier process `m_{t+1} = 1 + ρ (m_t − 1) + σ ε_t` per loaded
/// node, started from its stationary distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ar1Params {
    pub rho: f64,
    pub sigma: f64,
}

impl Default for Ar1Params {
    fn default() -> Self {
        Self { rho: 0.9, sigma: 0.02 }
    }
}

impl Ar1Params {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho.abs() < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "AR(1) coefficient must satisfy |rho| < 1, got {}",
                self.rho
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "AR(1) noise must be finite and nonnegative, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    pub fn stationary_std(&self) -> f64 {
        self.sigma / (1.0 - self.rho * self.rho).sqrt()
    }
}

/// Uniformly spaced operating points; step `k` has timestamp `start + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSeries {
    pub start: usize,
    /// Load multiplier per loaded node and step.
    pub multipliers: Vec<DVector<f64>>,
    pub points: Vec<OperatingPoint>,
}

impl StateSeries {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn times(&self) -> Range<usize> {
        self.start..self.start + self.len()
    }

    /// Contiguous sub-series over local step indices.
    pub fn slice(&self, range: Range<usize>) -> StateSeries {
        StateSeries {
            start: self.start + range.start,
            multipliers: self.multipliers[range.clone()].to_vec(),
            points: self.points[range].to_vec(),
        }
    }

    pub fn signals(&self, case: &GridCase) -> Vec<DVector<f64>> {
        self.points.iter().map(|p| graph_signal(case, &p.v)).collect()
    }
}

/// Solves one power flow per step with every nominal load scaled by its own
/// AR(1) multiplier (the power factor is unchanged).
pub fn generate_synthetic_series(
    case: &GridCase,
    steps: usize,
    process: Ar1Params,
    seed: u64,
) -> Result<StateSeries> {
    process.validate()?;
    let pf = PowerFlow::new(case)?;
    let nominal = case.nominal_injections();
    let loaded: Vec<usize> = (0..nominal.len()).filter(|&k| nominal[k].norm() > 0.0).collect();
    let slack = case.nominal_slack_voltage();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let std = process.stationary_std();
    let mut m = DVector::from_fn(loaded.len(), |_, _| 1.0 + std * normal.sample(&mut rng));
    let mut multipliers = Vec::with_capacity(steps);
    let mut points = Vec::with_capacity(steps);
    for step in 0..steps {
        if step > 0 {
            for v in m.iter_mut() {
                *v = 1.0 + process.rho * (*v - 1.0) + process.sigma * normal.sample(&mut rng);
            }
        }
        let mut s = nominal.clone();
        for (k, &p) in loaded.iter().enumerate() {
            s[p] *= m[k];
        }
        let point = pf.solve_all(&s, &slack).map_err(|e| Error::SeriesStep {
            step,
            source: Box::new(e),
        })?;
        multipliers.push(m.clone());
        points.push(point);
    }
    Ok(StateSeries {
        start: 0,
        multipliers,
        points,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub window: usize,
    pub horizon: usize,
    pub mu1: f64,
    pub noise_sigma: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            window: 10,
            horizon: 1,
            mu1: crate::estimation::DEFAULT_MU1,
            noise_sigma: crate::estimation::DEFAULT_NOISE_SIGMA,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::InvalidArgument("window must be at least 1".into()));
        }
        if !(self.mu1 >= 0.0 && self.mu1.is_finite()) {
            return Err(Error::InvalidArgument(format!("mu1 must be nonnegative, got {}", self.mu1)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise sigma must be nonnegative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// One input window of recovered states and its target.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastSample {
    /// Timestamp of the newest input frame.
    pub time: usize,
    /// `d × T` recovered states, column `τ` = lag `τ`.
    pub window: DMatrix<f64>,
    /// True state at `time + H`.
    pub target: DVector<f64>,
    /// `v̂_𝓜 ∘ conj(î_𝓜)` from the noisy measurements at `time + H`.
    pub measured_power: CVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastDataset {
    pub window: usize,
    pub horizon: usize,
    pub observed: Vec<usize>,
    pub samples: Vec<ForecastSample>,
}

impl ForecastDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Every timestamp read by some sample, inputs and targets alike.
    pub fn timestamps(&self) -> std::collections::BTreeSet<usize> {
        let mut out = std::collections::BTreeSet::new();
        for s in &self.samples {
            out.extend(s.time + 1 - self.window..=s.time + self.horizon);
        }
        out
    }

    /// Input batch `(B·d) × T`.
    pub fn inputs(&self) -> DMatrix<f64> {
        let windows: Vec<&DMatrix<f64>> = self.samples.iter().map(|s| &s.window).collect();
        stack_windows(&windows)
    }

    /// Targets `B × d`.
    pub fn targets(&self) -> DMatrix<f64> {
        let d = self.samples[0].target.len();
        DMatrix::from_fn(self.len(), d, |b, j| self.samples[b].target[j])
    }

    /// Persistence forecast `B × d`: the newest recovered frame.
    pub fn persistence(&self) -> DMatrix<f64> {
        let d = self.samples[0].target.len();
        DMatrix::from_fn(self.len(), d, |b, j| self.samples[b].window[(j, 0)])
    }
}

/// Recovers every frame of `series` from noisy measurements at `observed`
/// and cuts windows of `T` recovered frames with targets `H` steps ahead.
pub fn build_dataset(
    case: &GridCase,
    gso: &RealGso,
    series: &StateSeries,
    observed: &[usize],
    config: &DatasetConfig,
    seed: u64,
) -> Result<ForecastDataset> {
    config.validate()?;
    let need = config.window + config.horizon;
    if series.len() < need {
        return Err(Error::SeriesTooShort {
            need,
            got: series.len(),
        });
    }
    let pf = PowerFlow::new(case)?;
    let model = build_measurement_model(pf.admittance(), observed)?;
    let m = observed.len();
    let estimator = Estimator::new(model, &gso.b_hat, config.mu1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(series.start as u64);
    let mut recovered = Vec::with_capacity(series.len());
    let mut measured = Vec::with_capacity(series.len());
    for point in &series.points {
        let z = estimator.model().measure(&point.v)?;
        let noisy = add_measurement_noise(&z, config.noise_sigma, &mut rng).z;
        recovered.push(graph_signal(case, &estimator.recover(&noisy)?));
        measured.push(CVector::from_fn(m, |k, _| noisy[m + k] * noisy[k].conj()));
    }
    let truth = series.signals(case);
    let d = truth[0].len();
    let samples = (config.window - 1..series.len() - config.horizon)
        .map(|t| ForecastSample {
            time: series.start + t,
            window: DMatrix::from_fn(d, config.window, |i, lag| recovered[t - lag][i]),
            target: truth[t + config.horizon].clone(),
            measured_power: measured[t + config.horizon].clone(),
        })
        .collect();
    Ok(ForecastDataset {
        window: config.window,
        horizon: config.horizon,
        observed: observed.to_vec(),
        samples,
    })
}

/// Train/validation/test datasets cut from disjoint, chronologically
/// ordered segments of one series.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub train: ForecastDataset,
    pub validation: ForecastDataset,
    pub test: ForecastDataset,
}

impl DatasetSplits {
    /// True when no timestamp is read by more than one split.
    pub fn is_disjoint(&self) -> bool {
        let a = self.train.timestamps();
        let b = self.validation.timestamps();
        let c = self.test.timestamps();
        a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c)
    }
}

/// Splits the series into `[train | validation | test]` segments by the
/// given fractions (the test segment takes the rest) and builds a dataset
/// inside each one.
pub fn build_splits(
    case: &GridCase,
    gso: &RealGso,
    series: &StateSeries,
    observed: &[usize],
    config: &DatasetConfig,
    fractions: [f64; 2],
    seed: u64,
) -> Result<DatasetSplits> {
    let [f_train, f_val] = fractions;
    if !(f_train > 0.0 && f_val >= 0.0 && f_train + f_val < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split fractions {fractions:?} must be positive and sum below 1"
        )));
    }
    let n = series.len();
    let a = (n as f64 * f_train).round() as usize;
    let b = a + (n as f64 * f_val).round() as usize;
    let build = |r: Range<usize>| build_dataset(case, gso, &series.slice(r), observed, config, seed);
    Ok(DatasetSplits {
        train: build(0..a)?,
        validation: build(a..b)?,
        test: build(b..n)?,
    })
}

/// Fits the scalers on the training data and initializes a regression model.
pub fn init_forecaster(
    config: ModelConfig,
    train: &ForecastDataset,
    seed: u64,
) -> Result<GraphModel> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let d = train.samples[0].target.len();
    let frames: Vec<DVector<f64>> = train
        .samples
        .iter()
        .flat_map(|s| s.window.column_iter().map(|c| c.into_owned()))
        .collect();
    let input = SignalScaler::fit(&frames, 0.1)?;
    let targets: Vec<DVector<f64>> = train.samples.iter().map(|s| s.target.clone()).collect();
    let output = SignalScaler::fit(&targets, 0.1)?;
    let config = ModelConfig {
        head: Head::Regression { outputs: d },
        ..config
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GraphModel::init(config, input, Some(output), &mut rng)
}

/// `‖[y_c ∘ conj(Y y_c)]_𝓜 − v̂_𝓜 ∘ conj(î_𝓜)‖²` evaluated on the tape from a
/// batch of predicted `[φ; |v|]` rows.
#[derive(Debug, Clone)]
pub struct PhysicsRegularizer {
    node_count: usize,
    angles: Vec<f64>,
    /// `(G_𝓜·)ᵀ` and `(B_𝓜·)ᵀ`, `N × m`.
    g_t: Rc<DMatrix<f64>>,
    b_t: Rc<DMatrix<f64>>,
    observed: Vec<usize>,
}

impl PhysicsRegularizer {
    pub fn new(case: &GridCase, y: &AdmittanceMatrix, observed: &[usize]) -> Result<Self> {
        let n = case.node_count();
        if y.dim() != n {
            return Err(Error::DimensionMismatch {
                what: "admittance matrix",
                expected: n,
                got: y.dim(),
            });
        }
        if let Some(&bad) = observed.iter().find(|&&p| p >= n) {
            return Err(Error::NodeOutOfRange { node: bad, count: n });
        }
        let m = observed.len();
        let g_t = DMatrix::from_fn(n, m, |j, k| y.get(observed[k], j).re);
        let b_t = DMatrix::from_fn(n, m, |j, k| y.get(observed[k], j).im);
        Ok(Self {
            node_count: n,
            angles: case.nodes().iter().map(|node| node.phase.nominal_angle()).collect(),
            g_t: Rc::new(g_t),
            b_t: Rc::new(b_t),
            observed: observed.to_vec(),
        })
    }

    /// Mean over samples and observed nodes of the squared power mismatch.
    pub fn record(&self, tape: &mut Tape, y: Var, measured: &[&CVector]) -> Var {
        let n = self.node_count;
        let batch = tape.value(y).nrows();
        let phi_idx: Vec<usize> = (0..n).collect();
        let mag_idx: Vec<usize> = (n..2 * n).collect();
        let phi = tape.select_cols(y, &phi_idx);
        let mag = tape.select_cols(y, &mag_idx);
        let nominal = DMatrix::from_fn(batch, n, |_, j| self.angles[j]);
        let theta = tape.add_const(phi, &nominal);
        let cos = tape.cos(theta);
        let sin = tape.sin(theta);
        let vr = tape.mul(mag, cos);
        let vi = tape.mul(mag, sin);
        let a = tape.matmul_const(vr, self.g_t.clone());
        let b = tape.matmul_const(vi, self.b_t.clone());
        let ir = tape.sub(a, b);
        let a = tape.matmul_const(vi, self.g_t.clone());
        let b = tape.matmul_const(vr, self.b_t.clone());
        let ii = tape.add(a, b);
        let vr_m = tape.select_cols(vr, &self.observed);
        let vi_m = tape.select_cols(vi, &self.observed);
        let a = tape.mul(vr_m, ir);
        let b = tape.mul(vi_m, ii);
        let p = tape.add(a, b);
        let a = tape.mul(vi_m, ir);
        let b = tape.mul(vr_m, ii);
        let q = tape.sub(a, b);
        let m = self.observed.len();
        let p_ref = DMatrix::from_fn(batch, m, |r, k| -measured[r][k].re);
        let q_ref = DMatrix::from_fn(batch, m, |r, k| -measured[r][k].im);
        let dp = tape.add_const(p, &p_ref);
        let dq = tape.add_const(q, &q_ref);
        let dp2 = tape.mul(dp, dp);
        let dq2 = tape.mul(dq, dq);
        let total = tape.add(dp2, dq2);
        let sum = tape.sum(total);
        tape.scale(sum, 1.0 / batch as f64)
    }

    /// Value of [`PhysicsRegularizer::record`] for a `B × 2N` batch.
    pub fn value(&self, y: &DMatrix<f64>, measured: &[&CVector]) -> f64 {
        let mut tape = Tape::new();
        let v = tape.leaf(y.clone());
        let r = self.record(&mut tape, v, measured);
        tape.scalar(r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: usize,
    pub learning_rate: f64,
    pub mu2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            patience: 200,
            learning_rate: 1e-3,
            mu2: DEFAULT_MU2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu2 >= 0.0 && self.mu2.is_finite()) {
            return Err(Error::InvalidArgument(format!("mu2 must be nonnegative, got {}", self.mu2)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be nonnegative, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Per-epoch losses; `best_epoch` indexes the restored parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
    pub best_epoch: usize,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,validation_loss\n");
        for (e, l) in self.train_loss.iter().enumerate() {
            let v = self.validation_loss.get(e).map(|v| format!("{v:.12e}")).unwrap_or_default();
            writeln!(out, "{e},{l:.12e},{v}").expect("write to string");
        }
        out
    }
}

/// Mean squared error plus `μ₂` times the physics mismatch.
fn record_loss(
    tape: &mut Tape,
    model: &GraphModel,
    params: &[Var],
    shift: &GraphShiftOp,
    data: &ForecastDataset,
    inputs: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    reg: &PhysicsRegularizer,
    mu2: f64,
) -> Result<Var> {
    let x = tape.leaf(inputs.clone());
    let y = model.forward(tape, params, shift, x)?.output;
    let neg = -targets;
    let r = tape.add_const(y, &neg);
    let sq = tape.mul(r, r);
    let mse = tape.mean(sq);
    if mu2 == 0.0 {
        return Ok(mse);
    }
    let measured: Vec<&CVector> = data.samples.iter().map(|s| &s.measured_power).collect();
    let phys = reg.record(tape, y, &measured);
    let phys = tape.scale(phys, mu2);
    Ok(tape.add(mse, phys))
}

fn loss_value(
    model: &GraphModel,
    shift: &GraphShiftOp,
    data: &ForecastDataset,
    reg: &PhysicsRegularizer,
    mu2: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let params = model.register(&mut tape);
    let loss = record_loss(&mut tape, model, &params, shift, data, &data.inputs(), &data.targets(), reg, mu2)?;
    Ok(tape.scalar(loss))
}

/// Full-batch Adam on the regularized loss with early stopping on the
/// validation loss; the best parameters are restored.
pub fn train_forecaster(
    model: &mut GraphModel,
    shift: &GraphShiftOp,
    train: &ForecastDataset,
    validation: Option<&ForecastDataset>,
    regularizer: &PhysicsRegularizer,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let validation = validation.filter(|v| !v.is_empty());
    let inputs = train.inputs();
    let targets = train.targets();
    let mut values = model.param_values();
    let mut adam = Adam::new(config.learning_rate);
    let mut report = TrainReport::default();
    let mut best = (f64::INFINITY, values.clone());
    let mut last_finite = f64::NAN;
    for epoch in 0..config.epochs {
        let mut tape = Tape::new();
        let params: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let loss = record_loss(&mut tape, model, &params, shift, train, &inputs, &targets, regularizer, config.mu2)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, last_finite });
        }
        last_finite = value;
        report.train_loss.push(value);
        let score = match validation {
            Some(v) => {
                let l = loss_value(model, shift, v, regularizer, config.mu2)?;
                report.validation_loss.push(l);
                l
            }
            None => value,
        };
        if score < best.0 {
            best = (score, values.clone());
            report.best_epoch = epoch;
        } else if validation.is_some() && epoch - report.best_epoch >= config.patience {
            break;
        }
        let grads = tape.backward(loss)?;
        let g: Vec<DMatrix<f64>> = params.iter().map(|&p| grads.wrt(&tape, p)).collect();
        adam.step(&mut values, &g);
        model.set_param_values(values.clone());
    }
    model.set_param_values(best.1);
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastMetrics {
    /// Mean over samples and signal entries.
    pub mse: f64,
    /// Mean absolute percentage error of the linearized injections of the
    /// prediction against those of the true state, over entries whose true
    /// value exceeds `1e-6` in magnitude.
    pub mape_proxy: f64,
    pub samples: usize,
}

/// Scores a `B × d` prediction against the dataset targets.
pub fn score(predictions: &DMatrix<f64>, data: &ForecastDataset, gso: &RealGso) -> Result<ForecastMetrics> {
    if data.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let targets = data.targets();
    if predictions.shape() != targets.shape() {
        return Err(Error::DimensionMismatch {
            what: "prediction rows",
            expected: targets.nrows(),
            got: predictions.nrows(),
        });
    }
    let mse = (predictions - &targets).norm_squared() / targets.len() as f64;
    let offsets = gso.offsets();
    let (mut sum, mut count) = (0.0, 0usize);
    for b in 0..targets.nrows() {
        let truth = linearized_injections(gso, &targets.row(b).transpose())? + &offsets;
        let pred = linearized_injections(gso, &predictions.row(b).transpose())? + &offsets;
        for (t, p) in truth.iter().zip(pred.iter()) {
            if t.abs() > 1e-6 {
                sum += ((p - t) / t).abs();
                count += 1;
            }
        }
    }
    Ok(ForecastMetrics {
        mse,
        mape_proxy: if count == 0 { 0.0 } else { 100.0 * sum / count as f64 },
        samples: data.len(),
    })
}

pub fn evaluate(
    model: &GraphModel,
    shift: &GraphShiftOp,
    data: &ForecastDataset,
    gso: &RealGso,
) -> Result<ForecastMetrics> {
    if data.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let (pred, _) = model.predict(shift, &data.inputs())?;
    score(&pred, data, gso)
}

/// Repeats the newest recovered frame.
pub fn persistence_baseline(data: &ForecastDataset, gso: &RealGso) -> Result<ForecastMetrics> {
    if data.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    score(&data.persistence(), data, gso)
}

/// One row per sample: time, target entries, then the newest input frame.
pub fn dataset_csv(data: &ForecastDataset, labels: &[String]) -> String {
    let mut out = String::from("time");
    for l in labels {
        write!(out, ",target_{l}").expect("write to string");
    }
    for l in labels {
        write!(out, ",input_{l}").expect("write to string");
    }
    out.push('\n');
    for s in &data.samples {
        write!(out, "{}", s.time).expect("write to string");
        for v in s.target.iter().chain(s.window.column(0).iter()) {
            write!(out, ",{v:.12e}").expect("write to string");
        }
        out.push('\n');
    }
    out
}

pub fn metrics_csv(rows: &[(String, ForecastMetrics)]) -> String {
    let mut out = String::from("model,samples,mse,mape_proxy\n");
    for (name, m) in rows {
        writeln!(out, "{name},{},{:.12e},{:.12e}", m.samples, m.mse, m.mape_proxy).expect("write to string");
    }
    out
}
