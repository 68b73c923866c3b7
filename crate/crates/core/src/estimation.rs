//! Sensor placement and regularized least-squares phasor recovery.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::grid::{AdmittanceMatrix, CMatrix, CVector};
use crate::gsp::GftBasis;
use crate::{Error, Result};



/// Default Laplacian-smoothing weight.
pub const DEFAULT_MU1: f64 = 1e-6;
/// Default measurement noise standard deviation (p.u.).
pub const DEFAULT_NOISE_SIGMA: f64 = 1e-3;

/// Greedy sensor selection and its sampling quality.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacementResult {
    /// Selected positions in selection order.
    pub selected: Vec<usize>,
    /// Smallest singular value of the selected rows of the first `k` GFT columns.
    pub sigma_min: f64,
}

/// `σ_min` of the `rows` × first-`k` submatrix of `u_k`; zero when there are
/// fewer rows than columns.
pub fn sampled_sigma_min(u_k: &DMatrix<f64>, rows: &[usize]) -> f64 {
    if rows.len() < u_k.ncols() {
        return 0.0;
    }
    smallest_singular_value(u_k, rows)
}

fn smallest_singular_value(u_k: &DMatrix<f64>, rows: &[usize]) -> f64 {
    if rows.is_empty() || u_k.ncols() == 0 {
        return 0.0;
    }
    let sub = u_k.select_rows(rows);
    sub.singular_values().min()
}

/// Greedy max–min singular value selection of `m` rows of `U_𝒦`, the first
/// `k_freqs` eigenvectors.
///
/// While fewer than `k_freqs` rows are selected the criterion is the smallest
/// of the `|selected|` nonzero-dimension singular values, so early picks are
/// informative; ties go to the lowest position.
pub fn place_pmus(basis: &GftBasis, k_freqs: usize, m: usize) -> Result<PlacementResult> {
    let n = basis.dim();
    if m > n {
        return Err(Error::TooManySensors {
            requested: m,
            available: n,
        });
    }
    if k_freqs == 0 || k_freqs > n {
        return Err(Error::InvalidArgument(format!(
            "frequency count must be in 1..={n}, got {k_freqs}"
        )));
    }
    let u_k = basis.low_frequencies(k_freqs);
    let mut selected: Vec<usize> = Vec::with_capacity(m);
    let mut available = vec![true; n];
    for _ in 0..m {
        let mut best: Option<(usize, f64)> = None;
        for cand in (0..n).filter(|&c| available[c]) {
            selected.push(cand);
            let score = smallest_singular_value(&u_k, &selected);
            selected.pop();
            if best.is_none_or(|(_, b)| score > b + 1e-12) {
                best = Some((cand, score));
            }
        }
        let (pick, _) = best.expect("m ≤ n leaves a candidate");
        available[pick] = false;
        selected.push(pick);
    }
    let sigma_min = sampled_sigma_min(&u_k, &selected);
    Ok(PlacementResult {
        selected,
        sigma_min,
    })
}

/// Linear map from the voltage phasors to the stacked measurements
/// `z = [î_𝓜; v̂_𝓜]`, with state columns ordered `[𝓜; 𝒰]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementModel {
    /// `[[Y_𝓜𝓜, Y_𝓜𝒰], [I, 0]]`.
    pub h: CMatrix,
    pub observed: Vec<usize>,
    pub hidden: Vec<usize>,
}

impl MeasurementModel {
    pub fn node_count(&self) -> usize {
        self.observed.len() + self.hidden.len()
    }

    pub fn measurement_dim(&self) -> usize {
        2 * self.observed.len()
    }

    /// State column order: observed positions, then hidden ones.
    pub fn column_order(&self) -> Vec<usize> {
        self.observed.iter().chain(&self.hidden).copied().collect()
    }

    /// Numerical column rank of `H`; the state is identifiable from noiseless
    /// measurements only when this equals the node count.
    pub fn column_rank(&self) -> usize {
        let (rows, cols) = self.h.shape();
        let sv = self.h.singular_values();
        let tol = rows.max(cols) as f64 * f64::EPSILON * sv.max();
        sv.iter().filter(|&&s| s > tol).count()
    }

    pub fn is_identifiable(&self) -> bool {
        self.column_rank() == self.node_count()
    }

    /// Noiseless measurements of a node-ordered voltage vector.
    pub fn measure(&self, v: &CVector) -> Result<CVector> {
        Ok(&self.h * self.to_columns(v)?)
    }

    /// Reorders a node-ordered vector into the `[𝓜; 𝒰]` column order.
    pub fn to_columns(&self, v: &CVector) -> Result<CVector> {
        if v.len() != self.node_count() {
            return Err(Error::DimensionMismatch {
                what: "voltage vector",
                expected: self.node_count(),
                got: v.len(),
            });
        }
        let order = self.column_order();
        Ok(CVector::from_iterator(order.len(), order.iter().map(|&p| v[p])))
    }

    /// Inverse of [`MeasurementModel::to_columns`].
    pub fn to_nodes(&self, x: &CVector) -> CVector {
        let mut out = CVector::zeros(x.len());
        for (k, p) in self.column_order().into_iter().enumerate() {
            out[p] = x[k];
        }
        out
    }
}

/// Noisy measurement vector at one timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSample {
    pub z: CVector,
    pub noise_sigma: f64,
}

/// Extracts the measurement blocks for the observed positions.
pub fn build_measurement_model(
    y: &AdmittanceMatrix,
    observed: &[usize],
) -> Result<MeasurementModel> {
    let n = y.dim();
    if observed.is_empty() {
        return Err(Error::EmptyObserved);
    }
    let mut seen = vec![false; n];
    for &p in observed {
        if p >= n {
            return Err(Error::NodeOutOfRange { node: p, count: n });
        }
        if seen[p] {
            return Err(Error::InvalidArgument(format!("node {p} observed twice")));
        }
        seen[p] = true;
    }
    let hidden: Vec<usize> = (0..n).filter(|&p| !seen[p]).collect();
    let m = observed.len();
    let order: Vec<usize> = observed.iter().chain(&hidden).copied().collect();
    let mut h = CMatrix::zeros(2 * m, n);
    h.view_mut((0, 0), (m, n)).copy_from(&y.block(observed, &order));
    for k in 0..m {
        h[(m + k, k)] = Complex64::new(1.0, 0.0);
    }
    Ok(MeasurementModel {
        h,
        observed: observed.to_vec(),
        hidden,
    })
}

/// Precomputed recovery operator `W = (HᴴH + μ₁ R)† Hᴴ`.
///
/// Singular values at or below `max(rows, cols) · ε · σ_max` are treated as
/// zero.
#[derive(Debug, Clone)]
pub struct Estimator {
    model: MeasurementModel,
    w: CMatrix,
    rank: usize,
}

impl Estimator {
    /// `reg` is a real symmetric node-ordered matrix, typically `B̂`.
    pub fn new(model: MeasurementModel, reg: &DMatrix<f64>, mu1: f64) -> Result<Self> {
        let n = model.node_count();
        if !(mu1 >= 0.0 && mu1.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "regularization weight must be finite and nonnegative, got {mu1}"
            )));
        }
        if reg.nrows() != n || reg.ncols() != n {
            return Err(Error::DimensionMismatch {
                what: "regularizer",
                expected: n,
                got: reg.nrows(),
            });
        }
        let order = model.column_order();
        let reg_cols = CMatrix::from_fn(n, n, |i, j| {
            Complex64::new(reg[(order[i], order[j])], 0.0)
        });
        let hh = model.h.adjoint();
        let normal = &hh * &model.h + reg_cols * Complex64::new(mu1, 0.0);
        let (pinv, rank) = pseudo_inverse(normal);
        let w = pinv * hh;
        Ok(Self { model, w, rank })
    }

    pub fn model(&self) -> &MeasurementModel {
        &self.model
    }

    /// Numerical rank of the regularized normal matrix.
    pub fn effective_rank(&self) -> usize {
        self.rank
    }

    pub fn is_rank_deficient(&self) -> bool {
        self.rank < self.model.node_count()
    }

    /// Node-ordered voltage estimate.
    pub fn recover(&self, z: &CVector) -> Result<CVector> {
        if z.len() != self.model.measurement_dim() {
            return Err(Error::DimensionMismatch {
                what: "measurement vector",
                expected: self.model.measurement_dim(),
                got: z.len(),
            });
        }
        Ok(self.model.to_nodes(&(&self.w * z)))
    }
}

/// Moore–Penrose inverse and numerical rank.
pub fn pseudo_inverse(a: CMatrix) -> (CMatrix, usize) {
    let (rows, cols) = a.shape();
    let svd = a.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let smax = svd.singular_values.max();
    let tol = rows.max(cols) as f64 * f64::EPSILON * smax;
    let mut rank = 0;
    let mut pinv = CMatrix::zeros(cols, rows);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > tol {
            rank += 1;
            let vk = v_t.row(k).adjoint();
            let uk = u.column(k).adjoint();
            pinv += (vk * uk) * Complex64::new(1.0 / s, 0.0);
        }
    }
    (pinv, rank)
}

/// One-shot recovery; see [`Estimator`] for repeated use.
pub fn recover_state(
    z: &MeasurementSample,
    model: &MeasurementModel,
    reg: &DMatrix<f64>,
    mu1: f64,
) -> Result<CVector> {
    Estimator::new(model.clone(), reg, mu1)?.recover(&z.z)
}

/// `‖z − H x‖² + μ₁ xᴴ R x` for a node-ordered `x`.
pub fn objective(
    model: &MeasurementModel,
    reg: &DMatrix<f64>,
    mu1: f64,
    z: &CVector,
    x: &CVector,
) -> Result<f64> {
    let cols = model.to_columns(x)?;
    let fit = (z - &model.h * cols).norm_squared();
    let rx = DVector::from_fn(x.len(), |i, _| {
        (0..x.len()).fold(Complex64::new(0.0, 0.0), |acc, j| acc + x[j] * reg[(i, j)])
    });
    Ok(fit + mu1 * x.dotc(&rx).re)
}

/// Adds circular complex Gaussian noise with total variance `σ²` per entry.
pub fn add_measurement_noise<R: Rng + ?Sized>(z: &CVector, sigma: f64, rng: &mut R) -> MeasurementSample {
    let mut out = z.clone();
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma / std::f64::consts::SQRT_2).expect("finite sigma");
        for v in out.iter_mut() {
            *v += Complex64::new(normal.sample(rng), normal.sample(rng));
        }
    }
    MeasurementSample {
        z: out,
        noise_sigma: sigma,
    }
}
