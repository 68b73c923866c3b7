//! Graph Fourier transform and polynomial (spatio-temporal) graph filters.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::CsrMatrix;
use num_complex::Complex64;

use crate::{Error, Result};

/// Orthonormal eigenbasis of a symmetric shift operator, eigenvalues ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct GftBasis {
    pub eigvecs: DMatrix<f64>,
    pub eigvals: DVector<f64>,
}

impl GftBasis {
    pub fn dim(&self) -> usize {
        self.eigvals.len()
    }

    /// `x̃ = Uᵀ x`.
    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        self.eigvecs.tr_mul(x)
    }

    /// `x = U x̃`.
    pub fn inverse(&self, coeffs: &DVector<f64>) -> DVector<f64> {
        &self.eigvecs * coeffs
    }

    /// First `k` columns of `U` (lowest graph frequencies).
    pub fn low_frequencies(&self, k: usize) -> DMatrix<f64> {
        self.eigvecs.columns(0, k).into_owned()
    }
}

/// Checks symmetry within `1e-10` (relative to the largest entry when that
/// exceeds one).
pub fn check_symmetric(s: &DMatrix<f64>) -> Result<()> {
    if !s.is_square() {
        return Err(Error::DimensionMismatch {
            what: "operator columns",
            expected: s.nrows(),
            got: s.ncols(),
        });
    }
    let asym = (s - s.transpose()).amax();
    if asym > 1e-10 * s.amax().max(1.0) {
        return Err(Error::NonSymmetric {
            max_asymmetry: asym,
        });
    }
    Ok(())
}

/// Eigendecomposition `S = U Λ Uᵀ` with ascending eigenvalues.
///
/// Each eigenvector is signed so that its largest-magnitude entry is positive;
/// entries within `1e-12` of the largest count as ties and the first wins.
pub fn gft(s: &DMatrix<f64>) -> Result<GftBasis> {
    check_symmetric(s)?;
    let sym = (s + s.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let n = s.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let eigvals = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let mut eigvecs = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        let peak = col.amax();
        let lead = col
            .iter()
            .position(|v| v.abs() >= peak - 1e-12)
            .unwrap_or(0);
        if col[lead] < 0.0 {
            col.neg_mut();
        }
        eigvecs.set_column(dst, &col);
    }
    Ok(GftBasis { eigvecs, eigvals })
}

/// Sparse copy of a dense operator, dropping exact zeros.
pub fn to_csr(s: &DMatrix<f64>) -> CsrMatrix<f64> {
    CsrMatrix::from(s)
}

/// `H(S) = Σ_k h_k S^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialFilter {
    pub coeffs: Vec<f64>,
}

impl PolynomialFilter {
    pub fn new(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::InvalidArgument("filter needs at least one tap".into()));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument("filter taps must be finite".into()));
        }
        Ok(Self { coeffs })
    }

    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }

    /// Frequency response `h̃(λ) = Σ_k h_k λ^k`.
    pub fn response(&self, lambda: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, &h| acc * lambda + h)
    }
}

/// `H(S, z) = Σ_k Σ_τ h_{k,τ} S^k z^{-τ}`; `coeffs[(k, τ)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatioTemporalFilter {
    pub coeffs: DMatrix<f64>,
}

impl SpatioTemporalFilter {
    pub fn new(coeffs: DMatrix<f64>) -> Result<Self> {
        if coeffs.nrows() == 0 || coeffs.ncols() == 0 {
            return Err(Error::InvalidArgument(
                "spatio-temporal filter needs K ≥ 0 and T ≥ 1".into(),
            ));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument("filter taps must be finite".into()));
        }
        Ok(Self { coeffs })
    }

    /// Temporal taps `T`.
    pub fn taps(&self) -> usize {
        self.coeffs.ncols()
    }

    /// Graph filter applied to the frame with lag `tau`.
    pub fn at_lag(&self, tau: usize) -> PolynomialFilter {
        PolynomialFilter {
            coeffs: self.coeffs.column(tau).iter().copied().collect(),
        }
    }

    /// Graph filter with the temporal taps summed out.
    pub fn collapsed(&self) -> PolynomialFilter {
        PolynomialFilter {
            coeffs: self.coeffs.row_iter().map(|r| r.sum()).collect(),
        }
    }

    /// Joint transfer function `ℍ(λ, z)`.
    pub fn response(&self, lambda: f64, z: Complex64) -> Complex64 {
        let zinv = z.inv();
        (0..self.taps())
            .rev()
            .fold(Complex64::new(0.0, 0.0), |acc, tau| {
                acc * zinv + self.at_lag(tau).response(lambda)
            })
    }
}

/// `Σ_k h_k S^k x` by Horner iteration with sparse mat-vec products.
pub fn apply_filter(
    f: &PolynomialFilter,
    s: &CsrMatrix<f64>,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    if s.nrows() != s.ncols() || s.ncols() != x.len() {
        return Err(Error::DimensionMismatch {
            what: "graph signal",
            expected: s.ncols(),
            got: x.len(),
        });
    }
    let mut taps = f.coeffs.iter().rev();
    let mut y = x * *taps.next().expect("nonempty filter");
    for &h in taps {
        y = s * &y;
        y.axpy(h, x, 1.0);
    }
    Ok(y)
}

/// `w_t = Σ_k Σ_τ h_{k,τ} S^k x_{t−τ}` for a window ordered oldest to newest.
pub fn apply_st_filter(
    f: &SpatioTemporalFilter,
    s: &CsrMatrix<f64>,
    window: &[DVector<f64>],
) -> Result<DVector<f64>> {
    let taps = f.taps();
    if window.len() < taps {
        return Err(Error::ShortWindow {
            need: taps,
            got: window.len(),
        });
    }
    let newest = window.len() - 1;
    let mut out = DVector::zeros(s.nrows());
    for tau in 0..taps {
        out += apply_filter(&f.at_lag(tau), s, &window[newest - tau])?;
    }
    Ok(out)
}

/// CSV with one row per graph frequency: `index,eigenvalue,coefficient`.
pub fn spectrum_csv(basis: &GftBasis, x: &DVector<f64>) -> Result<String> {
    if x.len() != basis.dim() {
        return Err(Error::DimensionMismatch {
            what: "graph signal",
            expected: basis.dim(),
            got: x.len(),
        });
    }
    let coeffs = basis.forward(x);
    let mut out = String::from("index,eigenvalue,coefficient\n");
    for (k, (lam, c)) in basis.eigvals.iter().zip(coeffs.iter()).enumerate() {
        let _ = writeln!(out, "{k},{lam:.17e},{c:.17e}");
    }
    Ok(out)
}
