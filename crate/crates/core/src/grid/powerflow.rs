use std::collections::VecDeque;

use nalgebra::{DVector, LU};
use num_complex::Complex64;

use super::{assemble_admittance, AdmittanceMatrix, CMatrix, GridCase};
use crate::{Error, Result};

use super::CVector;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerFlowOptions {
    /// Stop once the largest voltage update falls below this (per-unit).
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Largest admissible power mismatch of a converged solve (per-unit).
    pub residual_tolerance: f64,
}

impl Default for PowerFlowOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 200,
            residual_tolerance: 1e-8,
        }
    }
}

/// Complex voltages, net currents and net power injections per node.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatingPoint {
    pub v: CVector,
    pub i: CVector,
    pub s: CVector,
}

impl OperatingPoint {
    pub fn from_voltage(v: CVector, y: &AdmittanceMatrix) -> Self {
        let i = y.matrix() * &v;
        let s = v.zip_map(&i, |v, i| v * i.conj());
        Self { v, i, s }
    }

    pub fn magnitudes(&self) -> DVector<f64> {
        self.v.map(|v| v.norm())
    }

    pub fn angles(&self) -> DVector<f64> {
        self.v.map(|v| v.arg())
    }
}

/// Z-bus fixed-point solver with the non-slack admittance block factored
/// once, so repeated solves on the same network are cheap.
#[derive(Debug, Clone)]
pub struct PowerFlow {
    y: AdmittanceMatrix,
    slack: Vec<usize>,
    load: Vec<usize>,
    y_ls: CMatrix,
    /// Nominal angle of each non-slack node and of the first slack node.
    start_angles: Vec<f64>,
    slack_reference: f64,
    lu: LU<Complex64, nalgebra::Dyn, nalgebra::Dyn>,
    options: PowerFlowOptions,
}

impl PowerFlow {
    pub fn new(case: &GridCase) -> Result<Self> {
        Self::with_options(case, PowerFlowOptions::default())
    }

    pub fn with_options(case: &GridCase, options: PowerFlowOptions) -> Result<Self> {
        let y = assemble_admittance(case);
        let slack = case.slack_positions();
        let load: Vec<usize> = (0..case.node_count())
            .filter(|&p| !case.is_slack_position(p))
            .collect();
        let floating = unreachable_nodes(&y, &slack);
        if !floating.is_empty() {
            return Err(Error::SingularAdmittance { nodes: floating });
        }
        let angle = |p: usize| case.nodes()[p].phase.nominal_angle();
        let start_angles = load.iter().map(|&p| angle(p)).collect();
        let slack_reference = angle(slack[0]);
        let y_ll = y.block(&load, &load);
        let y_ls = y.block(&load, &slack);
        Ok(Self {
            lu: y_ll.lu(),
            start_angles,
            slack_reference,
            y,
            slack,
            load,
            y_ls,
            options,
        })
    }

    pub fn admittance(&self) -> &AdmittanceMatrix {
        &self.y
    }

    pub fn options(&self) -> PowerFlowOptions {
        self.options
    }

    /// Positions of the non-slack nodes, in the order `solve` expects injections.
    pub fn load_positions(&self) -> &[usize] {
        &self.load
    }

    pub fn slack_positions(&self) -> &[usize] {
        &self.slack
    }

    /// Solves for the voltages that realize `injections` (one per non-slack
    /// node, positive into the network) with the slack held at `slack_voltage`.
    pub fn solve(
        &self,
        injections: &[Complex64],
        slack_voltage: &[Complex64],
    ) -> Result<OperatingPoint> {
        if injections.len() != self.load.len() {
            return Err(Error::DimensionMismatch {
                what: "non-slack injections",
                expected: self.load.len(),
                got: injections.len(),
            });
        }
        if slack_voltage.len() != self.slack.len() {
            return Err(Error::DimensionMismatch {
                what: "slack voltages",
                expected: self.slack.len(),
                got: slack_voltage.len(),
            });
        }
        let v_s = CVector::from_column_slice(slack_voltage);
        let offset = &self.y_ls * &v_s;
        let s_l = CVector::from_column_slice(injections);

        // Flat start: slack magnitude, nominal phase offsets from the slack reference.
        let magnitude = slack_voltage.iter().map(|v| v.norm()).fold(0.0, f64::max);
        let shift = slack_voltage[0].arg() - self.slack_reference;
        let mut v_l = CVector::from_iterator(
            self.load.len(),
            self.start_angles
                .iter()
                .map(|&a| Complex64::from_polar(magnitude, a + shift)),
        );

        let mut last_update = f64::INFINITY;
        for iteration in 1..=self.options.max_iterations {
            let rhs = s_l.zip_map(&v_l, |s, v| (s / v).conj()) - &offset;
            let next = self.lu.solve(&rhs).ok_or(Error::SingularAdmittance {
                nodes: self.load.clone(),
            })?;
            last_update = next
                .iter()
                .zip(v_l.iter())
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
            v_l = next;
            if !last_update.is_finite() || v_l.iter().any(|v| !(v.norm() < 1e3)) {
                return Err(Error::NonConvergence {
                    iterations: iteration,
                    last_update,
                });
            }
            if last_update < self.options.tolerance {
                let point = self.assemble(&v_l, &v_s);
                let residual = self
                    .load
                    .iter()
                    .zip(injections)
                    .map(|(&p, s)| (point.s[p] - s).norm())
                    .fold(0.0, f64::max);
                if residual > self.options.residual_tolerance {
                    return Err(Error::NonConvergence {
                        iterations: iteration,
                        last_update: residual,
                    });
                }
                return Ok(point);
            }
        }
        Err(Error::NonConvergence {
            iterations: self.options.max_iterations,
            last_update,
        })
    }

    /// [`PowerFlow::solve`] with injections given for every node; slack
    /// entries are ignored.
    pub fn solve_all(
        &self,
        injections: &[Complex64],
        slack_voltage: &[Complex64],
    ) -> Result<OperatingPoint> {
        if injections.len() != self.y.dim() {
            return Err(Error::DimensionMismatch {
                what: "node injections",
                expected: self.y.dim(),
                got: injections.len(),
            });
        }
        let picked: Vec<Complex64> = self.load.iter().map(|&p| injections[p]).collect();
        self.solve(&picked, slack_voltage)
    }

    fn assemble(&self, v_l: &CVector, v_s: &CVector) -> OperatingPoint {
        let mut v = CVector::zeros(self.y.dim());
        for (k, &p) in self.slack.iter().enumerate() {
            v[p] = v_s[k];
        }
        for (k, &p) in self.load.iter().enumerate() {
            v[p] = v_l[k];
        }
        OperatingPoint::from_voltage(v, &self.y)
    }
}

/// Non-slack nodes with no admittance path to a slack node.
fn unreachable_nodes(y: &AdmittanceMatrix, slack: &[usize]) -> Vec<usize> {
    let n = y.dim();
    let mut seen = vec![false; n];
    let mut queue: VecDeque<usize> = slack.iter().copied().collect();
    for &s in slack {
        seen[s] = true;
    }
    while let Some(i) = queue.pop_front() {
        for j in 0..n {
            if !seen[j] && y.get(i, j).norm() != 0.0 {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    (0..n).filter(|&i| !seen[i]).collect()
}

/// Convenience wrapper: builds the solver and runs a single solve.
pub fn solve_power_flow(
    case: &GridCase,
    injections: &[Complex64],
    slack_voltage: &[Complex64],
) -> Result<OperatingPoint> {
    PowerFlow::new(case)?.solve(injections, slack_voltage)
}

/// Net complex power injection `v ∘ conj(Y v)` per node.
pub fn compute_injections(v: &CVector, y: &AdmittanceMatrix) -> Result<CVector> {
    if v.len() != y.dim() {
        return Err(Error::DimensionMismatch {
            what: "voltage vector",
            expected: y.dim(),
            got: v.len(),
        });
    }
    let i = y.matrix() * v;
    Ok(v.zip_map(&i, |v, i| v * i.conj()))
}
