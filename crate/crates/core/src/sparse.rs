//! Compressed sparse row storage and a profile (envelope) Cholesky solver
//! with reverse Cuthill–McKee ordering.

use std::collections::VecDeque;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FactorError {
    #[error("matrix is not positive definite (pivot {pivot:e} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },
    #[error("matrix is not square")]
    NotSquare,
}

/// Sparse matrix in CSR form with sorted column indices. Assembled
/// operators are square; [`CsrMatrix::extract`] produces rectangular blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from triplets, summing duplicates in insertion order. Two
    /// entries receiving the same contributions in the same order therefore
    /// end up bitwise equal.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut order: Vec<usize> = (0..triplets.len()).collect();
        order.sort_by_key(|&k| (triplets[k].0, triplets[k].1));
        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::new();
        let mut values: Vec<f64> = Vec::new();
        let mut last: Option<(usize, usize)> = None;
        for &k in &order {
            let (i, j, v) = triplets[k];
            assert!(i < n && j < n, "triplet ({i},{j}) out of range for n={n}");
            if last == Some((i, j)) {
                *values.last_mut().expect("entry exists") += v;
            } else {
                col_idx.push(j);
                values.push(v);
                row_ptr[i + 1] += 1;
                last = Some((i, j));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self { n, ncols: n, row_ptr, col_idx, values }
    }

    /// Row count (equal to the column count for square operators).
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[r.clone()].binary_search(&j) {
            Ok(k) => self.values[r.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        (0..self.n).map(|i| self.row(i).map(|(j, v)| v * x[j]).sum()).collect()
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.mul_vec(x).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).map(|(_, v)| v).sum()).collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// Exact (bitwise) symmetry.
    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| self.row(i).all(|(j, v)| self.get(j, i).to_bits() == v.to_bits()))
    }

    /// Submatrix on `rows × cols` with local numbering given by position in
    /// the index slices.
    pub fn extract(&self, rows: &[usize], cols: &[usize]) -> CsrMatrix {
        let mut local = vec![usize::MAX; self.n];
        for (k, &c) in cols.iter().enumerate() {
            local[c] = k;
        }
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        row_ptr.push(0);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for &r in rows {
            let mut entries: Vec<(usize, f64)> =
                self.row(r).filter(|&(j, _)| local[j] != usize::MAX).map(|(j, v)| (local[j], v)).collect();
            entries.sort_by_key(|e| e.0);
            for (j, v) in entries {
                col_idx.push(j);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        CsrMatrix { n: rows.len(), ncols: cols.len(), row_ptr, col_idx, values }
    }

    /// `selfᵀ x` for a (possibly rectangular) matrix.
    pub fn mul_vec_transposed(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        let mut y = vec![0.0; self.ncols];
        for (i, &xi) in x.iter().enumerate() {
            for (j, v) in self.row(i) {
                y[j] += v * xi;
            }
        }
        y
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols]; self.n];
        for (i, row) in d.iter_mut().enumerate() {
            for (j, v) in self.row(i) {
                row[j] = v;
            }
        }
        d
    }
}

/// Reverse Cuthill–McKee permutation: `perm[k]` is the original index placed
/// at position `k`. Handles disconnected graphs.
pub fn reverse_cuthill_mckee(a: &CsrMatrix) -> Vec<usize> {
    let n = a.dim();
    let degree: Vec<usize> = (0..n).map(|i| a.row(i).filter(|&(j, _)| j != i).count()).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut queue = VecDeque::new();
    while order.len() < n {
        let seed = (0..n).filter(|&i| !visited[i]).min_by_key(|&i| degree[i]).expect("unvisited vertex remains");
        let seed = pseudo_peripheral(a, seed, &degree);
        visited[seed] = true;
        queue.push_back(seed);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut nbrs: Vec<usize> = a.row(v).map(|(j, _)| j).filter(|&j| !visited[j]).collect();
            nbrs.sort_by_key(|&j| (degree[j], j));
            for j in nbrs {
                visited[j] = true;
                queue.push_back(j);
            }
        }
    }
    order.reverse();
    order
}

fn pseudo_peripheral(a: &CsrMatrix, start: usize, degree: &[usize]) -> usize {
    let mut root = start;
    let mut ecc = 0;
    for _ in 0..8 {
        let levels = bfs_levels(a, root);
        let depth = *levels.iter().filter(|&&l| l != usize::MAX).max().unwrap_or(&0);
        if depth <= ecc && ecc > 0 {
            break;
        }
        ecc = depth;
        root = (0..a.dim()).filter(|&i| levels[i] == depth).min_by_key(|&i| (degree[i], i)).unwrap_or(root);
    }
    root
}

fn bfs_levels(a: &CsrMatrix, root: usize) -> Vec<usize> {
    let mut level = vec![usize::MAX; a.dim()];
    level[root] = 0;
    let mut queue = VecDeque::from([root]);
    while let Some(v) = queue.pop_front() {
        for (j, _) in a.row(v) {
            if level[j] == usize::MAX {
                level[j] = level[v] + 1;
                queue.push_back(j);
            }
        }
    }
    level
}

/// Cholesky factor of a symmetric positive definite matrix stored by rows
/// over its envelope, after a fill-reducing RCM permutation.
#[derive(Debug, Clone)]
pub struct EnvelopeCholesky {
    n: usize,
    perm: Vec<usize>,
    first: Vec<usize>,
    row_start: Vec<usize>,
    data: Vec<f64>,
}

impl EnvelopeCholesky {
    pub fn factor(a: &CsrMatrix) -> Result<Self, FactorError> {
        if a.dim() != a.ncols() {
            return Err(FactorError::NotSquare);
        }
        let n = a.dim();
        let perm = reverse_cuthill_mckee(a);
        let mut inv_perm = vec![0; n];
        for (k, &p) in perm.iter().enumerate() {
            inv_perm[p] = k;
        }
        // leftmost column of each permuted row in the lower triangle
        let mut first: Vec<usize> = (0..n).collect();
        for (i, f) in first.iter_mut().enumerate() {
            for (j, _) in a.row(perm[i]) {
                *f = (*f).min(inv_perm[j]);
            }
        }
        let mut row_start = vec![0usize; n + 1];
        for i in 0..n {
            row_start[i + 1] = row_start[i] + (i - first[i] + 1);
        }
        let mut data = vec![0.0; row_start[n]];
        for i in 0..n {
            for (j, v) in a.row(perm[i]) {
                let pj = inv_perm[j];
                if pj <= i {
                    data[row_start[i] + pj - first[i]] = v;
                }
            }
        }
        for i in 0..n {
            let fi = first[i];
            for j in fi..=i {
                let fj = first[j];
                let lo = fi.max(fj);
                let mut s = data[row_start[i] + j - fi];
                let ri = &data[row_start[i] + lo - fi..row_start[i] + j - fi];
                let rj = &data[row_start[j] + lo - fj..row_start[j] + j - fj];
                s -= ri.iter().zip(rj).map(|(x, y)| x * y).sum::<f64>();
                if j < i {
                    data[row_start[i] + j - fi] = s / data[row_start[j] + j - fj];
                } else {
                    if !(s > 0.0) {
                        return Err(FactorError::NotPositiveDefinite { row: perm[i], pivot: s });
                    }
                    data[row_start[i] + i - fi] = s.sqrt();
                }
            }
        }
        Ok(Self { n, perm, first, row_start, data })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of stored factor entries.
    pub fn profile(&self) -> usize {
        self.data.len()
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let mut y: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..self.n {
            let fi = self.first[i];
            let row = &self.data[self.row_start[i]..self.row_start[i + 1]];
            let s: f64 = row[..i - fi].iter().zip(&y[fi..i]).map(|(l, x)| l * x).sum();
            y[i] = (y[i] - s) / row[i - fi];
        }
        for i in (0..self.n).rev() {
            let fi = self.first[i];
            let row = &self.data[self.row_start[i]..self.row_start[i + 1]];
            y[i] /= row[i - fi];
            let yi = y[i];
            for (l, x) in row[..i - fi].iter().zip(&mut y[fi..i]) {
                *x -= l * yi;
            }
        }
        let mut x = vec![0.0; self.n];
        for (k, &p) in self.perm.iter().enumerate() {
            x[p] = y[k];
        }
        x
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn sup_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}
