use num_complex::Complex64;

use super::{CMatrix, GridCase};

/// Bus admittance matrix in per-unit, indexed by the case node ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmittanceMatrix {
    matrix: CMatrix,
}

impl AdmittanceMatrix {
    pub fn from_matrix(matrix: CMatrix) -> Self {
        assert!(matrix.is_square(), "admittance matrix must be square");
        Self { matrix }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.matrix[(i, j)]
    }

    /// Entries with nonzero magnitude.
    pub fn nnz(&self) -> usize {
        self.matrix.iter().filter(|z| z.norm() != 0.0).count()
    }

    /// Sub-block with the given row and column positions.
    pub fn block(&self, rows: &[usize], cols: &[usize]) -> CMatrix {
        CMatrix::from_fn(rows.len(), cols.len(), |i, j| self.matrix[(rows[i], cols[j])])
    }

    pub fn susceptance(&self) -> nalgebra::DMatrix<f64> {
        self.matrix.map(|z| z.im)
    }
}

/// Assembles `Y` from the line blocks.
///
/// Each line contributes `shunt/2 + series_from` to the diagonal block of
/// both ends and `series_to` to the two off-diagonal blocks. Blocks are
/// converted from siemens to per-unit with the case impedance base.
pub fn assemble_admittance(case: &GridCase) -> AdmittanceMatrix {
    let n = case.node_count();
    let z_base = case.z_base();
    let mut y = CMatrix::zeros(n, n);
    for line in &case.lines {
        let series = symmetric(&line.series_from, z_base);
        let to_block = symmetric(&line.series_to(), z_base);
        let half_shunt = symmetric(&line.shunt, 0.5 * z_base);
        let from = case.positions(line.from, &line.phases);
        let to = case.positions(line.to, &line.phases);
        let p = line.phases.len();
        for a in 0..p {
            for b in 0..p {
                let own = half_shunt[(a, b)] + series[(a, b)];
                y[(from[a], from[b])] += own;
                y[(to[a], to[b])] += own;
                y[(from[a], to[b])] += to_block[(a, b)];
                y[(to[a], from[b])] += to_block[(a, b)];
            }
        }
    }
    AdmittanceMatrix { matrix: y }
}

/// Scaled copy with the two triangles averaged so `Y` is exactly symmetric.
fn symmetric(block: &CMatrix, scale: f64) -> CMatrix {
    CMatrix::from_fn(block.nrows(), block.ncols(), |i, j| {
        (block[(i, j)] + block[(j, i)]) * (0.5 * scale)
    })
}
