//! Real-valued graph shift operator derived from the linearized power-flow
//! equations.
//!
//! For a graph signal `x = [φ; |v|]` of re-centered phase angles and voltage
//! magnitudes, `S = blockdiag(B̂, B̂)` satisfies `[p; q] ≈ S x + [p_cst; q_cst]`
//! near a balanced flat operating point, where `B̂` is a phase-coupled
//! susceptance Laplacian.

mod export;
mod kron;

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

pub use export::{
    fingerprint, parse_matrix_text, read_matrix_text, render_matrix_text, write_matrix_text,
    MatrixFormat, MatrixText,
};
pub use kron::{kron_reduce, ReducedGso};

use crate::grid::{AdmittanceMatrix, GridCase, Phase};
use crate::{Error, Result};

/// Cosine and sine parts of the phase rotation outer product `Γ = Ψ 𝟙𝟙ᵀ Ψᴴ`
/// with `Ψ = diag(1, e^{-j2π/3}, e^{j2π/3})`, restricted to a phase subset.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaMatrices {
    pub gamma_c: DMatrix<f64>,
    pub gamma_s: DMatrix<f64>,
}

impl GammaMatrices {
    pub fn dim(&self) -> usize {
        self.gamma_c.nrows()
    }
}

/// `Γ[k, l] = e^{j 2π (l - k)/3}` over the present phases; this is the
/// product `v_k v_l^*` of unit balanced phasors.
pub fn gamma_matrices(phases: &[Phase]) -> Result<GammaMatrices> {
    if phases.is_empty() {
        return Err(Error::EmptyPhaseSet);
    }
    let angle = |k: usize, l: usize| {
        let d = phases[l].index() as f64 - phases[k].index() as f64;
        2.0 * PI * d / 3.0
    };
    let p = phases.len();
    let gamma_c = DMatrix::from_fn(p, p, |k, l| if k == l { 1.0 } else { angle(k, l).cos() });
    let gamma_s = DMatrix::from_fn(p, p, |k, l| if k == l { 0.0 } else { angle(k, l).sin() });
    Ok(GammaMatrices { gamma_c, gamma_s })
}

/// Wraps an angle to `(-π, π]`.
pub fn wrap_angle(angle: f64) -> f64 {
    let mut a = angle % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// Removes the nominal ±2π/3 offsets: `φ_a = ∠v_a`, `φ_b = ∠v_b + 2π/3`,
/// `φ_c = ∠v_c − 2π/3`, wrapped to `(-π, π]`.
pub fn recenter_phases(raw_angles: &[f64], phases: &[Phase]) -> Result<Vec<f64>> {
    if raw_angles.len() != phases.len() {
        return Err(Error::DimensionMismatch {
            what: "phase angles",
            expected: phases.len(),
            got: raw_angles.len(),
        });
    }
    Ok(raw_angles
        .iter()
        .zip(phases)
        .map(|(&a, p)| wrap_angle(a - p.nominal_angle()))
        .collect())
}

/// Phase of every node of a case, in node order.
pub fn node_phases(case: &GridCase) -> Vec<Phase> {
    case.nodes().iter().map(|n| n.phase).collect()
}

/// Graph signal `[φ; |v|]` of a complex voltage vector.
pub fn graph_signal(case: &GridCase, v: &DVector<Complex64>) -> DVector<f64> {
    let n = case.node_count();
    assert_eq!(v.len(), n, "voltage vector does not match the case");
    let mut x = DVector::zeros(2 * n);
    for (k, node) in case.nodes().iter().enumerate() {
        x[k] = wrap_angle(v[k].arg() - node.phase.nominal_angle());
        x[n + k] = v[k].norm();
    }
    x
}

/// Inverse of [`graph_signal`]: `|v| e^{j(φ + nominal angle)}`.
pub fn voltage_from_signal(case: &GridCase, x: &DVector<f64>) -> DVector<Complex64> {
    let n = case.node_count();
    assert_eq!(x.len(), 2 * n, "graph signal does not match the case");
    DVector::from_iterator(
        n,
        case.nodes()
            .iter()
            .enumerate()
            .map(|(k, node)| Complex64::from_polar(x[n + k], x[k] + node.phase.nominal_angle())),
    )
}

/// Indices of the `[φ; |v|]` signal entries belonging to the given nodes.
pub fn signal_indices(nodes: &[usize], node_count: usize) -> Vec<usize> {
    nodes
        .iter()
        .copied()
        .chain(nodes.iter().map(|&k| k + node_count))
        .collect()
}

/// Physics graph shift operator with its constant offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct RealGso {
    pub b_hat: DMatrix<f64>,
    pub p_cst: DVector<f64>,
    pub q_cst: DVector<f64>,
    pub s_full: DMatrix<f64>,
    /// `bus.phase` label of every node.
    pub labels: Vec<String>,
}

impl RealGso {
    pub fn node_count(&self) -> usize {
        self.b_hat.nrows()
    }

    pub fn signal_dim(&self) -> usize {
        self.s_full.nrows()
    }

    /// Stacked `[p_cst; q_cst]`.
    pub fn offsets(&self) -> DVector<f64> {
        let n = self.node_count();
        DVector::from_fn(2 * n, |i, _| {
            if i < n {
                self.p_cst[i]
            } else {
                self.q_cst[i - n]
            }
        })
    }

    /// Labels of the signal entries: `φ` entries first, then `|v|`.
    pub fn signal_labels(&self) -> Vec<String> {
        self.labels
            .iter()
            .map(|l| format!("phi:{l}"))
            .chain(self.labels.iter().map(|l| format!("vmag:{l}")))
            .collect()
    }
}

/// Assembles `B̂` block by block from the line data.
///
/// For a line `(m, n)` with `B̂^s = Γ_c ∘ Im(Y^s)`, `B̂^(n) = Γ_c ∘ Im(Y^(n))`
/// and `B̂^(m) = Γ_c ∘ Im(Y^(m))` (per-unit), the line adds
/// `diag((½B̂^s + B̂^(n) + B̂^(m))𝟙) − (½B̂^s + B̂^(n))` to the diagonal block
/// of each end and `−B̂^(m)` to the off-diagonal blocks. The shunt terms
/// cancel in the diagonal, so `B̂𝟙 = 0`. The constants collect
/// `½ D(Γ_s Im(Y^s))` (active) and `−½ D(B̂^s)` (reactive) over incident lines.
pub fn build_real_gso(case: &GridCase) -> RealGso {
    let n = case.node_count();
    let z_base = case.z_base();
    let mut b_hat = DMatrix::zeros(n, n);
    let mut p_cst = DVector::zeros(n);
    let mut q_cst = DVector::zeros(n);

    for line in &case.lines {
        let gamma = gamma_matrices(&line.phases).expect("validated line phases");
        let p = line.phases.len();
        let im = |m: &crate::grid::CMatrix, scale: f64| {
            DMatrix::from_fn(p, p, |i, j| 0.5 * (m[(i, j)].im + m[(j, i)].im) * scale)
        };
        let b_shunt = im(&line.shunt, z_base);
        let b_own = im(&line.series_from, z_base);
        let b_other = im(&line.series_to(), z_base);

        let shunt_hat = gamma.gamma_c.component_mul(&b_shunt);
        let own_hat = gamma.gamma_c.component_mul(&b_own);
        let other_hat = gamma.gamma_c.component_mul(&b_other);

        let self_part = &shunt_hat * 0.5 + &own_hat;
        let row_sums = (&self_part + &other_hat) * DVector::from_element(p, 1.0);
        let mut diag_block = -self_part;
        for k in 0..p {
            diag_block[(k, k)] += row_sums[k];
        }
        let p_const = (&gamma.gamma_s * &b_shunt).diagonal() * 0.5;
        let q_const = shunt_hat.diagonal() * -0.5;

        let from = case.positions(line.from, &line.phases);
        let to = case.positions(line.to, &line.phases);
        for (a, b) in [(&from, &to), (&to, &from)] {
            for i in 0..p {
                for j in 0..p {
                    b_hat[(a[i], a[j])] += diag_block[(i, j)];
                    b_hat[(a[i], b[j])] -= other_hat[(i, j)];
                }
                p_cst[a[i]] += p_const[i];
                q_cst[a[i]] += q_const[i];
            }
        }
    }

    let mut s_full = DMatrix::zeros(2 * n, 2 * n);
    s_full.view_mut((0, 0), (n, n)).copy_from(&b_hat);
    s_full.view_mut((n, n), (n, n)).copy_from(&b_hat);
    let labels = (0..n).map(|k| case.node_label(k)).collect();
    RealGso {
        b_hat,
        p_cst,
        q_cst,
        s_full,
        labels,
    }
}

/// `S x`, the linear part of the injection prediction. Adding
/// [`RealGso::offsets`] gives the predicted `[p; q]`.
pub fn linearized_injections(gso: &RealGso, x: &DVector<f64>) -> Result<DVector<f64>> {
    if x.len() != gso.signal_dim() {
        return Err(Error::DimensionMismatch {
            what: "graph signal",
            expected: gso.signal_dim(),
            got: x.len(),
        });
    }
    Ok(&gso.s_full * x)
}

/// Closed form `((𝟙𝟙ᵀ)_N ⊗ Γ_c) ∘ B` with `B = −Im(Y)` the susceptance
/// Laplacian, expanded over the node phases. Off the block diagonal it
/// coincides with the block assembly of [`build_real_gso`].
pub fn hadamard_gso(case: &GridCase, y: &AdmittanceMatrix) -> DMatrix<f64> {
    let phases = node_phases(case);
    let full = gamma_matrices(&Phase::ALL).expect("nonempty");
    let n = case.node_count();
    DMatrix::from_fn(n, n, |i, j| {
        full.gamma_c[(phases[i].index(), phases[j].index())] * -y.get(i, j).im
    })
}
