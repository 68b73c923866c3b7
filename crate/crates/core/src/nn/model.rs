use std::rc::Rc;

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::CsrMatrix;
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use crate::gso::fingerprint;
use crate::gsp::{check_symmetric, gft};
use crate::{Error, Result};

/// Graph feature extractor variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// Graph-temporal convolution over the whole window.
    Gcn,
    /// Graph recurrent cell stepped through the window.
    Grn,
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcn" => Ok(Self::Gcn),
            "grn" => Ok(Self::Grn),
            other => Err(Error::InvalidArgument(format!(
                "unknown architecture `{other}` (expected gcn or grn)"
            ))),
        }
    }
}

/// Output layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// `tanh` outputs mapped affinely to physical units.
    Regression { outputs: usize },
    /// Per-inverter logits over `levels` actions plus a scalar value.
    Policy { inverters: usize, levels: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Graph filter order `K`.
    pub order: usize,
    /// Window length `T`.
    pub window: usize,
    /// Temporal/spatial channels per hop `C`.
    pub channels: usize,
    /// Graph-layer output features per node `F`.
    pub features: usize,
    /// Width of the dense hidden layer.
    pub hidden: usize,
    /// Graph signal dimension `d`.
    pub signal_dim: usize,
    pub head: Head,
}

impl ModelConfig {
    /// Defaults of ten channels and features and one 512-unit hidden layer.
    pub fn new(architecture: Architecture, signal_dim: usize, head: Head) -> Self {
        Self {
            architecture,
            order: 2,
            window: 10,
            channels: 10,
            features: 10,
            hidden: 512,
            signal_dim,
            head,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("window", self.window),
            ("channels", self.channels),
            ("features", self.features),
            ("hidden", self.hidden),
            ("signal_dim", self.signal_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        match self.head {
            Head::Regression { outputs: 0 } => {
                Err(Error::InvalidArgument("regression head needs outputs".into()))
            }
            Head::Policy { inverters, levels } if inverters == 0 || levels < 2 => Err(
                Error::InvalidArgument("policy head needs inverters and ≥ 2 levels".into()),
            ),
            _ => Ok(()),
        }
    }
}

/// Per-feature center with one global scale: `normalized = (x − c)/s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalScaler {
    pub center: Vec<f64>,
    pub scale: f64,
}

impl SignalScaler {
    pub fn new(center: Vec<f64>, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("scale must be positive, got {scale}")));
        }
        Ok(Self { center, scale })
    }

    /// Fallback map for `[φ; |v|]`: `φ ∈ [−0.5, 0.5]`, `|v| ∈ [0.5, 1.5]`.
    pub fn default_ranges(node_count: usize) -> Self {
        let mut center = vec![0.0; 2 * node_count];
        center[node_count..].fill(1.0);
        Self { center, scale: 0.5 }
    }

    /// Centers at each feature's mid-range; the scale is the largest
    /// half-range times `1 + margin` (floored at `1e-6`).
    pub fn fit<'a>(samples: impl IntoIterator<Item = &'a DVector<f64>>, margin: f64) -> Result<Self> {
        let mut lo: Vec<f64> = Vec::new();
        let mut hi: Vec<f64> = Vec::new();
        for x in samples {
            if lo.is_empty() {
                lo = x.iter().copied().collect();
                hi = lo.clone();
            }
            if x.len() != lo.len() {
                return Err(Error::DimensionMismatch {
                    what: "scaler sample",
                    expected: lo.len(),
                    got: x.len(),
                });
            }
            for (k, &v) in x.iter().enumerate() {
                lo[k] = lo[k].min(v);
                hi[k] = hi[k].max(v);
            }
        }
        if lo.is_empty() {
            return Err(Error::InvalidArgument("cannot fit a scaler to no samples".into()));
        }
        let center: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect();
        let half = lo.iter().zip(&hi).map(|(a, b)| 0.5 * (b - a)).fold(0.0, f64::max);
        Self::new(center, (half * (1.0 + margin)).max(1e-6))
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn normalize(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| (x[i] - self.center[i]) / self.scale)
    }

    pub fn denormalize(&self, o: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(o.len(), |i, _| self.center[i] + self.scale * o[i])
    }
}

/// Shift operator used by the graph layers, optionally rescaled to
/// `2S/λ_max − I` with `λ_max` the largest eigenvalue magnitude.
#[derive(Debug, Clone)]
pub struct GraphShiftOp {
    csr: Rc<CsrMatrix<f64>>,
    dense: DMatrix<f64>,
    fingerprint: String,
}

impl GraphShiftOp {
    pub fn new(s: &DMatrix<f64>, rescale: bool) -> Result<Self> {
        check_symmetric(s)?;
        let mut dense = s.clone();
        if rescale {
            let lmax = gft(s)?.eigvals.amax();
            if lmax > 0.0 {
                dense = dense * (2.0 / lmax) - DMatrix::identity(s.nrows(), s.ncols());
            }
        }
        Ok(Self {
            csr: Rc::new(CsrMatrix::from(&dense)),
            fingerprint: fingerprint(&dense),
            dense,
        })
    }

    pub fn dim(&self) -> usize {
        self.dense.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.dense
    }

    pub fn csr(&self) -> Rc<CsrMatrix<f64>> {
        Rc::clone(&self.csr)
    }

    /// SHA-256 of the operator actually applied.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }
}

/// Named trainable matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: DMatrix<f64>,
}

/// Graph-temporal network with its input (and, for regression, output) map.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphModel {
    pub config: ModelConfig,
    pub params: Vec<Param>,
    pub input_scaler: SignalScaler,
    pub output_scaler: Option<SignalScaler>,
}

/// Recorded outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// Regression: physical predictions `B × outputs`. Policy: logits
    /// `B × (inverters · levels)`, inverter-major.
    pub output: Var,
    /// Policy value estimate `B × 1`.
    pub value: Option<Var>,
}

fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
    DMatrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}

impl GraphModel {
    /// Glorot-uniform weights, zero biases, uniform temporal/hop weights.
    pub fn init<R: Rng + ?Sized>(
        config: ModelConfig,
        input_scaler: SignalScaler,
        output_scaler: Option<SignalScaler>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.signal_dim;
        if input_scaler.dim() != d {
            return Err(Error::DimensionMismatch {
                what: "input scaler",
                expected: d,
                got: input_scaler.dim(),
            });
        }
        match (config.head, &output_scaler) {
            (Head::Regression { outputs }, Some(s)) if s.dim() != outputs => {
                return Err(Error::DimensionMismatch {
                    what: "output scaler",
                    expected: outputs,
                    got: s.dim(),
                })
            }
            (Head::Regression { .. }, None) => {
                return Err(Error::InvalidArgument("regression head needs an output scaler".into()))
            }
            _ => {}
        }
        let (k1, t, c, f, h) = (
            config.order + 1,
            config.window,
            config.channels,
            config.features,
            config.hidden,
        );
        let mut params = Vec::new();
        let mut push = |name: String, value: DMatrix<f64>| params.push(Param { name, value });
        match config.architecture {
            Architecture::Gcn => {
                for k in 0..k1 {
                    push(format!("temporal.{k}"), DMatrix::from_element(t, c, 1.0 / (t * k1) as f64));
                }
                push("mix".into(), glorot(k1 * c, f, rng));
            }
            Architecture::Grn => {
                push("hops".into(), DMatrix::from_element(k1, c, 1.0 / k1 as f64));
                push("input".into(), glorot(c, f, rng));
                push("recurrent".into(), glorot(f, f, rng));
            }
        }
        push("graph_bias".into(), DMatrix::zeros(1, f));
        push("hidden.weight".into(), glorot(d * f, h, rng));
        push("hidden.bias".into(), DMatrix::zeros(1, h));
        match config.head {
            Head::Regression { outputs } => {
                push("out.weight".into(), glorot(h, outputs, rng));
                push("out.bias".into(), DMatrix::zeros(1, outputs));
            }
            Head::Policy { inverters, levels } => {
                push("policy.weight".into(), glorot(h, inverters * levels, rng) * 0.01);
                push("policy.bias".into(), DMatrix::zeros(1, inverters * levels));
                push("value.weight".into(), glorot(h, 1, rng));
                push("value.bias".into(), DMatrix::zeros(1, 1));
            }
        }
        Ok(Self {
            config,
            params,
            input_scaler,
            output_scaler,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn param_values(&self) -> Vec<DMatrix<f64>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn set_param_values(&mut self, values: Vec<DMatrix<f64>>) {
        assert_eq!(values.len(), self.params.len(), "one value per parameter");
        for (p, v) in self.params.iter_mut().zip(values) {
            assert_eq!(p.value.shape(), v.shape(), "shape of `{}` changed", p.name);
            p.value = v;
        }
    }

    /// Records every parameter as a leaf.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.clone())).collect()
    }

    /// Checks a raw window batch `(B·d) × T` against the configuration.
    pub fn check_batch(&self, shift: &GraphShiftOp, batch: &DMatrix<f64>) -> Result<usize> {
        let d = self.config.signal_dim;
        if shift.dim() != d {
            return Err(Error::DimensionMismatch {
                what: "shift operator",
                expected: d,
                got: shift.dim(),
            });
        }
        if batch.ncols() != self.config.window {
            return Err(Error::ShortWindow {
                need: self.config.window,
                got: batch.ncols(),
            });
        }
        if batch.nrows() == 0 || !batch.nrows().is_multiple_of(d) {
            return Err(Error::DimensionMismatch {
                what: "batch rows (multiple of the signal dimension)",
                expected: d,
                got: batch.nrows(),
            });
        }
        Ok(batch.nrows() / d)
    }

    /// Records the forward pass of a raw batch. `x` holds `(B·d) × T` with
    /// samples stacked by rows and column `τ` the frame with lag `τ`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &[Var],
        shift: &GraphShiftOp,
        x: Var,
    ) -> Result<ForwardOutput> {
        let batch = self.check_batch(shift, tape.value(x))?;
        let d = self.config.signal_dim;
        let graph = self.graph_layer(tape, params, shift, x)?;
        let rest = &params[self.graph_param_count()..];
        let flat = tape.reshape(graph, batch, d * self.config.features);
        let h = tape.matmul(flat, rest[0]);
        let h = tape.add_row(h, rest[1]);
        let h = tape.relu(h);
        match self.config.head {
            Head::Regression { outputs } => {
                let o = tape.matmul(h, rest[2]);
                let o = tape.add_row(o, rest[3]);
                let o = tape.tanh(o);
                let scaler = self.output_scaler.as_ref().expect("validated at init");
                let scale = Rc::new(DMatrix::from_element(batch, outputs, scaler.scale));
                let offset = DMatrix::from_fn(batch, outputs, |_, j| scaler.center[j]);
                Ok(ForwardOutput {
                    output: tape.affine_const(o, scale, &offset),
                    value: None,
                })
            }
            Head::Policy { .. } => {
                let logits = tape.matmul(h, rest[2]);
                let logits = tape.add_row(logits, rest[3]);
                let value = tape.matmul(h, rest[4]);
                let value = tape.add_row(value, rest[5]);
                Ok(ForwardOutput {
                    output: logits,
                    value: Some(value),
                })
            }
        }
    }

    /// Number of parameters owned by the graph layer (they come first).
    pub fn graph_param_count(&self) -> usize {
        match self.config.architecture {
            Architecture::Gcn => self.config.order + 3,
            Architecture::Grn => 4,
        }
    }

    /// Normalized input through the graph feature layer: `(B·d) × F`.
    pub fn graph_layer(
        &self,
        tape: &mut Tape,
        params: &[Var],
        shift: &GraphShiftOp,
        x: Var,
    ) -> Result<Var> {
        let batch = self.check_batch(shift, tape.value(x))?;
        let (inv, off) = per_row_affine(&self.input_scaler, batch, self.config.window);
        let xn = tape.affine_const(x, Rc::new(inv), &off);
        Ok(match self.config.architecture {
            Architecture::Gcn => gcn_features(tape, params, &self.config, shift, xn),
            Architecture::Grn => grn_features(tape, params, &self.config, shift, xn),
        })
    }

    /// Forward pass without gradients; returns the output (and value).
    pub fn predict(&self, shift: &GraphShiftOp, batch: &DMatrix<f64>) -> Result<(DMatrix<f64>, Option<DMatrix<f64>>)> {
        let mut tape = Tape::new();
        let params = self.register(&mut tape);
        let x = tape.leaf(batch.clone());
        let out = self.forward(&mut tape, &params, shift, x)?;
        Ok((
            tape.value(out.output).clone(),
            out.value.map(|v| tape.value(v).clone()),
        ))
    }
}

/// Elementwise `1/s` and `−c/s` for a `(B·d) × T` batch.
fn per_row_affine(scaler: &SignalScaler, batch: usize, t: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = scaler.dim();
    let inv = DMatrix::from_element(batch * d, t, 1.0 / scaler.scale);
    let off = DMatrix::from_fn(batch * d, t, |r, _| -scaler.center[r % d] / scaler.scale);
    (inv, off)
}

/// `ReLU(Σ_k S^k (X H_k) Θ_k + b)` as `(B·d) × F` features.
fn gcn_features(
    tape: &mut Tape,
    params: &[Var],
    config: &ModelConfig,
    shift: &GraphShiftOp,
    xn: Var,
) -> Var {
    let k1 = config.order + 1;
    let mut hops = Vec::with_capacity(k1);
    for (k, &h_k) in params[..k1].iter().enumerate() {
        let mut z = tape.matmul(xn, h_k);
        for _ in 0..k {
            z = tape.graph_shift(z, shift.csr());
        }
        hops.push(z);
    }
    let u = tape.concat_cols(&hops);
    let w = tape.matmul(u, params[k1]);
    let w = tape.add_row(w, params[k1 + 1]);
    tape.relu(w)
}

/// `w_t = ReLU(Σ_k S^k x_t h_k Θ_in + w_{t−1} Θ_rec + b)` from the oldest
/// frame to the newest, starting at `w_0 = 0`.
fn grn_features(
    tape: &mut Tape,
    params: &[Var],
    config: &ModelConfig,
    shift: &GraphShiftOp,
    xn: Var,
) -> Var {
    let (hops, input, recurrent, bias) = (params[0], params[1], params[2], params[3]);
    let k1 = config.order + 1;
    let mut state: Option<Var> = None;
    for lag in (0..config.window).rev() {
        let frame = tape.select_cols(xn, &[lag]);
        let mut powers = Vec::with_capacity(k1);
        let mut p = frame;
        powers.push(p);
        for _ in 1..k1 {
            p = tape.graph_shift(p, shift.csr());
            powers.push(p);
        }
        let stacked = tape.concat_cols(&powers);
        let z = tape.matmul(stacked, hops);
        let mut pre = tape.matmul(z, input);
        if let Some(w) = state {
            let r = tape.matmul(w, recurrent);
            pre = tape.add(pre, r);
        }
        let pre = tape.add_row(pre, bias);
        state = Some(tape.relu(pre));
    }
    state.expect("window ≥ 1")
}

/// Stacks `d × T` windows (column `τ` = lag `τ`) into a `(B·d) × T` batch.
pub fn stack_windows(windows: &[&DMatrix<f64>]) -> DMatrix<f64> {
    assert!(!windows.is_empty(), "empty batch");
    let (d, t) = windows[0].shape();
    let mut out = DMatrix::zeros(windows.len() * d, t);
    for (b, w) in windows.iter().enumerate() {
        assert_eq!(w.shape(), (d, t), "window shape mismatch");
        out.rows_mut(b * d, d).copy_from(w);
    }
    out
}
