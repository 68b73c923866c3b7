use nalgebra::DMatrix;

use crate::{Error, Result};

/// Schur complement of a symmetric operator onto a retained node set.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedGso {
    /// Retained positions in the original operator, in output order.
    pub retained: Vec<usize>,
    pub s_red: DMatrix<f64>,
}

impl ReducedGso {
    pub fn dim(&self) -> usize {
        self.retained.len()
    }

    /// Reduces further onto a subset of the retained positions, given in the
    /// original numbering. Equals a direct reduction of the original operator.
    pub fn reduce_further(&self, retained: &[usize]) -> Result<ReducedGso> {
        let local: Vec<usize> = retained
            .iter()
            .map(|&r| {
                self.retained
                    .iter()
                    .position(|&k| k == r)
                    .ok_or(Error::NodeOutOfRange {
                        node: r,
                        count: self.retained.len(),
                    })
            })
            .collect::<Result<_>>()?;
        let inner = kron_reduce(&self.s_red, &local)?;
        Ok(ReducedGso {
            retained: retained.to_vec(),
            s_red: inner.s_red,
        })
    }
}

/// `S_MM − S_MC S_CC⁻¹ S_CM` for the retained set `M` and its complement `C`.
///
/// Fails with [`Error::SingularInterior`] when the complement block is
/// singular, which for a Laplacian means a connected component of the
/// eliminated nodes has no retained neighbor; the offending component is
/// reported.
pub fn kron_reduce(s: &DMatrix<f64>, retained: &[usize]) -> Result<ReducedGso> {
    let n = s.nrows();
    if !s.is_square() {
        return Err(Error::DimensionMismatch {
            what: "operator columns",
            expected: n,
            got: s.ncols(),
        });
    }
    if retained.is_empty() {
        return Err(Error::EmptyObserved);
    }
    let mut seen = vec![false; n];
    for &r in retained {
        if r >= n {
            return Err(Error::NodeOutOfRange { node: r, count: n });
        }
        if seen[r] {
            return Err(Error::InvalidArgument(format!(
                "position {r} retained twice"
            )));
        }
        seen[r] = true;
    }
    let scale = s.amax().max(f64::MIN_POSITIVE);
    let asym = (s - s.transpose()).amax();
    if asym > 1e-10 * scale {
        return Err(Error::NonSymmetric {
            max_asymmetry: asym,
        });
    }

    let interior: Vec<usize> = (0..n).filter(|&k| !seen[k]).collect();
    let pick = |rows: &[usize], cols: &[usize]| {
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| s[(rows[i], cols[j])])
    };
    let s_mm = pick(retained, retained);
    if interior.is_empty() {
        return Ok(ReducedGso {
            retained: retained.to_vec(),
            s_red: s_mm,
        });
    }
    let s_cc = pick(&interior, &interior);
    let s_cm = pick(&interior, retained);

    let sv = s_cc.singular_values();
    let smax = sv.max();
    if sv.min() <= 1e-10 * smax.max(scale) {
        return Err(Error::SingularInterior {
            component: floating_component(s, &seen, &interior),
        });
    }
    let x = s_cc
        .lu()
        .solve(&s_cm)
        .ok_or_else(|| Error::SingularInterior {
            component: floating_component(s, &seen, &interior),
        })?;
    let reduced = s_mm - s_cm.transpose() * x;
    let s_red = (&reduced + reduced.transpose()) * 0.5;
    Ok(ReducedGso {
        retained: retained.to_vec(),
        s_red,
    })
}

/// First connected component of the eliminated nodes with no edge to a
/// retained node; falls back to the whole eliminated set.
fn floating_component(s: &DMatrix<f64>, retained: &[bool], interior: &[usize]) -> Vec<usize> {
    let n = s.nrows();
    let mut visited = vec![false; n];
    for &start in interior {
        if visited[start] {
            continue;
        }
        let mut component = vec![start];
        let mut touches_retained = false;
        visited[start] = true;
        let mut head = 0;
        while head < component.len() {
            let u = component[head];
            head += 1;
            for w in 0..n {
                if w == u || s[(u, w)] == 0.0 {
                    continue;
                }
                if retained[w] {
                    touches_retained = true;
                } else if !visited[w] {
                    visited[w] = true;
                    component.push(w);
                }
            }
        }
        if !touches_retained {
            component.sort_unstable();
            return component;
        }
    }
    interior.to_vec()
}
