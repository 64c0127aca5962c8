//! Direct solves with the interior unknowns eliminated.
//!
//! The nonlinearity only acts on boundary rows, so every system met by the
//! solvers has the shape `A − W` with `W` supported on boundary × boundary.
//! The interior block `A_II` is factored once (sparse Cholesky) and the
//! Schur complement `S = A_BB − A_BI A_II⁻¹ A_IB` is formed once as a dense
//! matrix; each Newton step then costs a dense LU on the boundary plus a
//! few interior back-substitutions.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::sparse::{CsrMatrix, EnvelopeCholesky, FactorError};

#[derive(Debug, Error, PartialEq)]
pub enum LinearSolveError {
    #[error("interior block: {0}")]
    Interior(#[from] FactorError),
    #[error("boundary system is singular")]
    Singular,
    #[error("no boundary unknowns")]
    NoBoundary,
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Interior,
    Boundary(usize),
}

#[derive(Debug, Clone)]
pub struct BoundaryCondensation {
    n: usize,
    interior: Vec<usize>,
    boundary: Vec<usize>,
    slots: Vec<Slot>,
    a_ii: Option<EnvelopeCholesky>,
    a_ib: CsrMatrix,
    a_bi: CsrMatrix,
    schur: DMatrix<f64>,
}

impl BoundaryCondensation {
    /// `boundary` lists the dofs that may carry boundary terms; all others
    /// are eliminated.
    pub fn new(a: &CsrMatrix, boundary: &[usize]) -> Result<Self, LinearSolveError> {
        let n = a.dim();
        if boundary.is_empty() {
            return Err(LinearSolveError::NoBoundary);
        }
        let mut slots = vec![Slot::Interior; n];
        for (k, &b) in boundary.iter().enumerate() {
            slots[b] = Slot::Boundary(k);
        }
        let mut interior = Vec::with_capacity(n - boundary.len());
        for (i, slot) in slots.iter().enumerate() {
            if let Slot::Interior = slot {
                interior.push(i);
            }
        }
        let a_ib = a.extract(&interior, boundary);
        let a_bi = a.extract(boundary, &interior);
        let a_bb = a.extract(boundary, boundary);
        let nb = boundary.len();
        let mut schur = DMatrix::from_fn(nb, nb, |i, j| a_bb.get(i, j));
        let a_ii = if interior.is_empty() {
            None
        } else {
            let chol = EnvelopeCholesky::factor(&a.extract(&interior, &interior))?;
            let mut columns: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nb];
            for i in 0..interior.len() {
                for (c, v) in a_ib.row(i) {
                    columns[c].push((i, v));
                }
            }
            let mut col = vec![0.0; interior.len()];
            for (j, entries) in columns.iter().enumerate() {
                col.iter_mut().for_each(|c| *c = 0.0);
                for &(i, v) in entries {
                    col[i] = v;
                }
                let y = chol.solve(&col);
                let correction = a_bi.mul_vec(&y);
                for (i, c) in correction.iter().enumerate() {
                    schur[(i, j)] -= c;
                }
            }
            Some(chol)
        };
        // the Schur complement of a symmetric matrix is symmetric; remove the
        // rounding asymmetry of the column-wise construction
        let schur = (&schur + schur.transpose()) * 0.5;
        Ok(Self { n, interior, boundary: boundary.to_vec(), slots, a_ii, a_ib, a_bi, schur })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn boundary(&self) -> &[usize] {
        &self.boundary
    }

    /// Position of a global dof among the boundary unknowns.
    pub fn boundary_slot(&self, dof: usize) -> Option<usize> {
        match self.slots[dof] {
            Slot::Boundary(k) => Some(k),
            Slot::Interior => None,
        }
    }

    /// Dense Schur complement on the boundary dofs.
    pub fn schur(&self) -> &DMatrix<f64> {
        &self.schur
    }

    fn split(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let xi = self.interior.iter().map(|&i| x[i]).collect();
        let xb = self.boundary.iter().map(|&i| x[i]).collect();
        (xi, xb)
    }

    fn merge(&self, xi: &[f64], xb: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.n];
        for (&i, v) in self.interior.iter().zip(xi) {
            x[i] = *v;
        }
        for (&i, v) in self.boundary.iter().zip(xb) {
            x[i] = *v;
        }
        x
    }

    fn interior_solve(&self, rhs: &[f64]) -> Vec<f64> {
        match &self.a_ii {
            Some(chol) => chol.solve(rhs),
            None => Vec::new(),
        }
    }

    /// Full-space vector with boundary values `xb` and interior values
    /// solving the homogeneous interior equations.
    pub fn lift(&self, xb: &[f64]) -> Vec<f64> {
        let rhs: Vec<f64> = self.a_ib.mul_vec(xb).iter().map(|v| -v).collect();
        let xi = self.interior_solve(&rhs);
        self.merge(&xi, xb)
    }

    /// Solves `(A − W) x = rhs` where `W` is given on boundary × boundary.
    pub fn solve(&self, w_bb: &DMatrix<f64>, rhs: &[f64]) -> Result<Vec<f64>, LinearSolveError> {
        let (fi, fb) = self.split(rhs);
        let p = self.interior_solve(&fi);
        let reduced = DVector::from_iterator(fb.len(), fb.iter().zip(self.a_bi.mul_vec(&p)).map(|(f, c)| f - c));
        let k = &self.schur - w_bb;
        let xb = k.lu().solve(&reduced).ok_or(LinearSolveError::Singular)?;
        let xb: Vec<f64> = xb.iter().copied().collect();
        let shift = self.a_ib.mul_vec(&xb);
        let rhs_i: Vec<f64> = fi.iter().zip(&shift).map(|(f, s)| f - s).collect();
        let xi = self.interior_solve(&rhs_i);
        Ok(self.merge(&xi, &xb))
    }

    /// Solves the bordered system
    ///
    /// ```text
    /// [ A − W   col  ] [x]   [rhs     ]
    /// [ rowᵀ   corner] [y] = [rhs_last]
    /// ```
    pub fn solve_bordered(
        &self,
        w_bb: &DMatrix<f64>,
        col: &[f64],
        row: &[f64],
        corner: f64,
        rhs: &[f64],
        rhs_last: f64,
    ) -> Result<(Vec<f64>, f64), LinearSolveError> {
        let (fi, fb) = self.split(rhs);
        let (bi, bb) = self.split(col);
        let (ci, cb) = self.split(row);
        let p = self.interior_solve(&fi);
        let q = self.interior_solve(&bi);
        let z = self.interior_solve(&ci);
        let a_bi_p = self.a_bi.mul_vec(&p);
        let a_bi_q = self.a_bi.mul_vec(&q);
        let a_bi_z = self.a_bi.mul_vec(&z);

        let nb = self.boundary.len();
        let mut m = DMatrix::zeros(nb + 1, nb + 1);
        m.view_mut((0, 0), (nb, nb)).copy_from(&(&self.schur - w_bb));
        for k in 0..nb {
            m[(k, nb)] = bb[k] - a_bi_q[k];
            m[(nb, k)] = cb[k] - a_bi_z[k];
        }
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        m[(nb, nb)] = corner - dot(&ci, &q);
        let mut r = DVector::zeros(nb + 1);
        for k in 0..nb {
            r[k] = fb[k] - a_bi_p[k];
        }
        r[nb] = rhs_last - dot(&ci, &p);

        let sol = m.lu().solve(&r).ok_or(LinearSolveError::Singular)?;
        let xb: Vec<f64> = sol.iter().take(nb).copied().collect();
        let y = sol[nb];
        let shift = self.a_ib.mul_vec(&xb);
        let rhs_i: Vec<f64> = (0..fi.len()).map(|k| fi[k] - shift[k] - bi[k] * y).collect();
        let xi = self.interior_solve(&rhs_i);
        Ok((self.merge(&xi, &xb), y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_matrix() -> CsrMatrix {
        // 2-D grid Laplacian plus identity on a 4×4 grid
        let m = 4;
        let id = |i: usize, j: usize| i * m + j;
        let mut t = Vec::new();
        for i in 0..m {
            for j in 0..m {
                t.push((id(i, j), id(i, j), 5.0));
                if i + 1 < m {
                    t.push((id(i, j), id(i + 1, j), -1.0));
                    t.push((id(i + 1, j), id(i, j), -1.0));
                }
                if j + 1 < m {
                    t.push((id(i, j), id(i, j + 1), -1.0));
                    t.push((id(i, j + 1), id(i, j), -1.0));
                }
            }
        }
        CsrMatrix::from_triplets(m * m, &t)
    }

    fn dense_apply(a: &CsrMatrix, w: &DMatrix<f64>, bnd: &[usize], x: &[f64]) -> Vec<f64> {
        let mut y = a.mul_vec(x);
        for (k, &i) in bnd.iter().enumerate() {
            for (l, &j) in bnd.iter().enumerate() {
                y[i] -= w[(k, l)] * x[j];
            }
        }
        y
    }

    #[test]
    fn condensed_solve_matches_full_system() {
        let a = test_matrix();
        let bnd = [0, 1, 2, 3, 7, 11, 15, 14, 13, 12, 8, 4];
        let cond = BoundaryCondensation::new(&a, &bnd).unwrap();
        let nb = bnd.len();
        let w = DMatrix::from_fn(nb, nb, |i, j| {
            if i == j {
                0.7
            } else if i.abs_diff(j) == 1 {
                0.2
            } else {
                0.0
            }
        });
        let x_true: Vec<f64> = (0..16).map(|i| (i as f64).cos()).collect();
        let rhs = dense_apply(&a, &w, &bnd, &x_true);
        let x = cond.solve(&w, &rhs).unwrap();
        for (u, v) in x.iter().zip(&x_true) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn bordered_solve_matches_full_system() {
        let a = test_matrix();
        let bnd = [0, 1, 2, 3, 7, 11, 15, 14, 13, 12, 8, 4];
        let cond = BoundaryCondensation::new(&a, &bnd).unwrap();
        let w = DMatrix::from_diagonal_element(bnd.len(), bnd.len(), 1.5);
        let col: Vec<f64> = (0..16).map(|i| 0.1 * i as f64 - 0.4).collect();
        let row: Vec<f64> = (0..16).map(|i| (0.3 * i as f64).sin()).collect();
        let (x_true, y_true) = ((0..16).map(|i| 1.0 / (1.0 + i as f64)).collect::<Vec<_>>(), 0.25);
        let mut rhs = dense_apply(&a, &w, &bnd, &x_true);
        for (r, c) in rhs.iter_mut().zip(&col) {
            *r += c * y_true;
        }
        let corner = -0.3;
        let last = row.iter().zip(&x_true).map(|(a, b)| a * b).sum::<f64>() + corner * y_true;
        let (x, y) = cond.solve_bordered(&w, &col, &row, corner, &rhs, last).unwrap();
        assert!((y - y_true).abs() < 1e-12);
        for (u, v) in x.iter().zip(&x_true) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn lift_satisfies_interior_rows() {
        let a = test_matrix();
        let bnd = [0, 1, 2, 3, 7, 11, 15, 14, 13, 12, 8, 4];
        let cond = BoundaryCondensation::new(&a, &bnd).unwrap();
        let xb: Vec<f64> = (0..bnd.len()).map(|k| 1.0 + k as f64).collect();
        let x = cond.lift(&xb);
        let r = a.mul_vec(&x);
        for i in [5, 6, 9, 10] {
            assert!(r[i].abs() < 1e-12);
        }
    }
}
