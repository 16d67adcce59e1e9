//! CSR storage, symbolic Cholesky analysis and level-scheduled factorization.

use std::fmt::Write as _;

use thiserror::Error;

use crate::engine::Engine;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SparseError {
    #[error("malformed CSR: {0}")]
    Malformed(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("pattern is not symmetric at ({row}, {col})")]
    AsymmetricPattern { row: usize, col: usize },
    #[error("diagonal entry {0} is missing")]
    MissingDiagonal(usize),
    #[error("matrix is not positive definite: pivot {pivot} at column {column}")]
    NotPositiveDefinite { column: usize, pivot: f64 },
    #[error("ordering is not a permutation of 0..{0}")]
    BadOrdering(usize),
}

/// Square compressed-sparse-row matrix with strictly increasing column
/// indices in every row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    dim: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn from_parts(
        dim: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self, SparseError> {
        if row_ptr.len() != dim + 1 || row_ptr[0] != 0 {
            return Err(SparseError::Malformed("row_ptr length or origin".into()));
        }
        if row_ptr.windows(2).any(|w| w[0] > w[1]) {
            return Err(SparseError::Malformed("row_ptr decreases".into()));
        }
        let nnz = row_ptr[dim];
        if col_idx.len() != nnz || values.len() != nnz {
            return Err(SparseError::Malformed("nnz does not match row_ptr".into()));
        }
        for r in 0..dim {
            let cols = &col_idx[row_ptr[r]..row_ptr[r + 1]];
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return Err(SparseError::Malformed(format!(
                    "row {r} columns not strictly increasing"
                )));
            }
            if cols.last().is_some_and(|&c| c >= dim) {
                return Err(SparseError::Malformed(format!("row {r} column out of range")));
            }
        }
        Ok(CsrMatrix {
            dim,
            row_ptr,
            col_idx,
            values,
        })
    }

    /// Builds from per-row `(column, value)` lists, which must already be
    /// sorted with no duplicates.
    pub fn from_rows(dim: usize, rows: &[Vec<(usize, f64)>]) -> Result<Self, SparseError> {
        if rows.len() != dim {
            return Err(SparseError::DimensionMismatch {
                expected: dim,
                found: rows.len(),
            });
        }
        let mut row_ptr = Vec::with_capacity(dim + 1);
        row_ptr.push(0);
        let nnz: usize = rows.iter().map(Vec::len).sum();
        let mut col_idx = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        for row in rows {
            for &(c, v) in row {
                col_idx.push(c);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        Self::from_parts(dim, row_ptr, col_idx, values)
    }

    /// Keeps the nonzero entries of a dense square matrix.
    pub fn from_dense(dense: &[Vec<f64>]) -> Self {
        let rows: Vec<Vec<(usize, f64)>> = dense
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(|(c, v)| (c, *v))
                    .collect()
            })
            .collect();
        Self::from_rows(dense.len(), &rows).expect("dense rows are sorted")
    }

    pub fn identity(dim: usize) -> Self {
        CsrMatrix {
            dim,
            row_ptr: (0..=dim).collect(),
            col_idx: (0..dim).collect(),
            values: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        (&self.col_idx[span.clone()], &self.values[span])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        cols.binary_search(&c).map_or(0.0, |k| vals[k])
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut dense = vec![vec![0.0; self.dim]; self.dim];
        for (r, row) in dense.iter_mut().enumerate() {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                row[c] = v;
            }
        }
        dense
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut rows = vec![Vec::new(); self.dim];
        for r in 0..self.dim {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                rows[c].push((r, v));
            }
        }
        Self::from_rows(self.dim, &rows).expect("transpose keeps rows sorted")
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest |A - Aᵀ| entry.
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for r in 0..self.dim {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                worst = worst.max((v - self.get(c, r)).abs());
            }
        }
        worst
    }

    pub fn is_pattern_symmetric(&self) -> bool {
        self.find_asymmetry().is_none()
    }

    fn find_asymmetry(&self) -> Option<(usize, usize)> {
        (0..self.dim).find_map(|r| {
            let (cols, _) = self.row(r);
            cols.iter()
                .find(|&&c| self.row(c).0.binary_search(&r).is_err())
                .map(|&c| (r, c))
        })
    }
}

pub fn spmv(a: &CsrMatrix, v: &[f64]) -> Result<Vec<f64>, SparseError> {
    if v.len() != a.dim {
        return Err(SparseError::DimensionMismatch {
            expected: a.dim,
            found: v.len(),
        });
    }
    Ok((0..a.dim)
        .map(|r| {
            let (cols, vals) = a.row(r);
            cols.iter().zip(vals).map(|(&c, &x)| x * v[c]).sum()
        })
        .collect())
}

/// `P A Pᵀ`: entry `(i, j)` of the result is `a[perm[i]][perm[j]]`.
pub fn permute_symmetric(a: &CsrMatrix, perm: &[usize]) -> Result<CsrMatrix, SparseError> {
    let inverse = inverse_permutation(perm, a.dim)?;
    let rows: Vec<Vec<(usize, f64)>> = perm
        .iter()
        .map(|&old| {
            let (cols, vals) = a.row(old);
            let mut row: Vec<(usize, f64)> = cols.iter().zip(vals).map(|(&c, &v)| (inverse[c], v)).collect();
            row.sort_by_key(|&(c, _)| c);
            row
        })
        .collect();
    CsrMatrix::from_rows(a.dim, &rows)
}

fn inverse_permutation(perm: &[usize], n: usize) -> Result<Vec<usize>, SparseError> {
    if perm.len() != n {
        return Err(SparseError::BadOrdering(n));
    }
    let mut inverse = vec![usize::MAX; n];
    for (new, &old) in perm.iter().enumerate() {
        if old >= n || inverse[old] != usize::MAX {
            return Err(SparseError::BadOrdering(n));
        }
        inverse[old] = new;
    }
    Ok(inverse)
}

/// Matrix Market coordinate dump:
///
/// ```text
/// %%MatrixMarket matrix coordinate real general
/// <rows> <cols> <nnz>
/// <row> <col> <value>        (1-based indices, value as {:.17e}, row-major)
/// ```
pub fn write_matrix_market(a: &CsrMatrix) -> String {
    let mut out = String::from("%%MatrixMarket matrix coordinate real general\n");
    let _ = writeln!(out, "{} {} {}", a.dim, a.dim, a.nnz());
    for r in 0..a.dim {
        let (cols, vals) = a.row(r);
        for (&c, &v) in cols.iter().zip(vals) {
            let _ = writeln!(out, "{} {} {:.17e}", r + 1, c + 1, v);
        }
    }
    out
}

/// Fill pattern of L, elimination tree and level schedule for natural-order
/// Cholesky of a symmetric pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolicFactor {
    dim: usize,
    /// Row pointers of the lower-triangular L pattern; each row ends with its
    /// diagonal.
    pub l_row_ptr: Vec<usize>,
    pub l_col_idx: Vec<usize>,
    pub etree_parent: Vec<Option<usize>>,
    /// Columns grouped by etree depth: leaves first, every child strictly
    /// before its parent.
    pub levels: Vec<Vec<usize>>,
    pub level_of: Vec<usize>,
}

impl SymbolicFactor {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn l_nnz(&self) -> usize {
        self.l_col_idx.len()
    }

    pub fn l_row(&self, r: usize) -> &[usize] {
        &self.l_col_idx[self.l_row_ptr[r]..self.l_row_ptr[r + 1]]
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(Vec::len).collect()
    }

    pub fn stats(&self) -> LevelStats {
        LevelStats {
            dim: self.dim,
            l_nnz: self.l_nnz(),
            levels: self.levels.len(),
            widest_level: self.levels.iter().map(Vec::len).max().unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelStats {
    pub dim: usize,
    pub l_nnz: usize,
    pub levels: usize,
    pub widest_level: usize,
}

pub fn symbolic_analysis(a: &CsrMatrix) -> Result<SymbolicFactor, SparseError> {
    let n = a.dim;
    if let Some((row, col)) = a.find_asymmetry() {
        return Err(SparseError::AsymmetricPattern { row, col });
    }
    if let Some(j) = (0..n).find(|&j| a.row(j).0.binary_search(&j).is_err()) {
        return Err(SparseError::MissingDiagonal(j));
    }

    // Elimination tree with path-compressed ancestors.
    let mut parent = vec![None; n];
    let mut ancestor: Vec<Option<usize>> = vec![None; n];
    for k in 0..n {
        for &j in a.row(k).0.iter().take_while(|&&j| j < k) {
            let mut cur = Some(j);
            while let Some(i) = cur {
                if i >= k {
                    break;
                }
                let next = ancestor[i];
                ancestor[i] = Some(k);
                if next.is_none() {
                    parent[i] = Some(k);
                }
                cur = next;
            }
        }
    }

    // Row k of L is the union of etree paths from each A[k, j<k] up to k.
    let mut mark = vec![usize::MAX; n];
    let mut l_row_ptr = Vec::with_capacity(n + 1);
    let mut l_col_idx = Vec::new();
    l_row_ptr.push(0);
    for k in 0..n {
        mark[k] = k;
        let start = l_col_idx.len();
        for &j in a.row(k).0.iter().take_while(|&&j| j < k) {
            let mut cur = j;
            while mark[cur] != k {
                mark[cur] = k;
                l_col_idx.push(cur);
                cur = parent[cur].expect("path from a row entry reaches k");
            }
        }
        l_col_idx[start..].sort_unstable();
        l_col_idx.push(k);
        l_row_ptr.push(l_col_idx.len());
    }

    let mut level_of = vec![0usize; n];
    for c in 0..n {
        if let Some(p) = parent[c] {
            level_of[p] = level_of[p].max(level_of[c] + 1);
        }
    }
    let depth = level_of.iter().max().map_or(0, |&d| d + 1);
    let mut levels = vec![Vec::new(); depth];
    for (j, &l) in level_of.iter().enumerate() {
        levels[l].push(j);
    }

    Ok(SymbolicFactor {
        dim: n,
        l_row_ptr,
        l_col_idx,
        etree_parent: parent,
        levels,
        level_of,
    })
}

/// Lower-triangular Cholesky factor stored row-wise on the symbolic pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    pub l: CsrMatrix,
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.l.dim
    }

    pub fn diagonal(&self, k: usize) -> f64 {
        let (_, vals) = self.l.row(k);
        *vals.last().expect("every row stores its diagonal")
    }

    /// Dense L·Lᵀ, for verification.
    pub fn reconstruct_dense(&self) -> Vec<Vec<f64>> {
        let l = self.l.to_dense();
        let n = self.dim();
        let mut out = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                out[i][j] = (0..=i.min(j)).map(|p| l[i][p] * l[j][p]).sum();
            }
        }
        out
    }
}

/// Computes row `k` of L, diagonal last:
/// `L[k][j] = (A[k][j] - Σ_{p<j} L[k][p] L[j][p]) / L[j][j]`.
/// Reads only rows of L belonging to etree descendants of `k`, all of which
/// sit in earlier levels.
fn factor_row(a: &CsrMatrix, sym: &SymbolicFactor, l_values: &[f64], k: usize) -> Result<Vec<f64>, SparseError> {
    let pattern = sym.l_row(k);
    let (a_cols, a_vals) = a.row(k);
    let mut row = vec![0.0; pattern.len()];
    let mut q = 0;
    for (&c, &v) in a_cols.iter().zip(a_vals).take_while(|(&c, _)| c <= k) {
        while pattern[q] < c {
            q += 1;
        }
        debug_assert_eq!(pattern[q], c, "input entry ({k}, {c}) outside the L pattern");
        row[q] = v;
    }

    let off = pattern.len() - 1;
    for jdx in 0..off {
        let j = pattern[jdx];
        let span = sym.l_row_ptr[j]..sym.l_row_ptr[j + 1];
        let j_cols = &sym.l_col_idx[span.clone()];
        let j_vals = &l_values[span];
        let mut s = row[jdx];
        let mut q = 0;
        for (&p, &lv) in j_cols.iter().zip(j_vals).take(j_cols.len() - 1) {
            while pattern[q] < p {
                q += 1;
            }
            if pattern[q] == p {
                s -= row[q] * lv;
            }
        }
        row[jdx] = s / j_vals[j_vals.len() - 1];
    }
    let mut d = row[off];
    for v in &row[..off] {
        d -= v * v;
    }
    if !d.is_finite() || d <= 0.0 {
        return Err(SparseError::NotPositiveDefinite { column: k, pivot: d });
    }
    row[off] = d.sqrt();
    Ok(row)
}

/// Numeric Cholesky on the symbolic pattern, one level at a time. Rows in a
/// level run concurrently on `engine`; the result does not depend on the
/// worker count.
pub fn factorize(a: &CsrMatrix, sym: &SymbolicFactor, engine: &Engine) -> Result<CholeskyFactor, SparseError> {
    if a.dim != sym.dim {
        return Err(SparseError::DimensionMismatch {
            expected: sym.dim,
            found: a.dim,
        });
    }
    let mut values = vec![0.0; sym.l_nnz()];
    for level in &sym.levels {
        let rows = engine.map_indexed(level.len(), |t| factor_row(a, sym, &values, level[t]));
        for (&k, row) in level.iter().zip(rows) {
            let row = row?;
            values[sym.l_row_ptr[k]..sym.l_row_ptr[k + 1]].copy_from_slice(&row);
        }
    }
    let l = CsrMatrix {
        dim: sym.dim,
        row_ptr: sym.l_row_ptr.clone(),
        col_idx: sym.l_col_idx.clone(),
        values,
    };
    Ok(CholeskyFactor { l })
}

/// Solves L·Lᵀ·x = b by forward then backward substitution.
pub fn solve(factor: &CholeskyFactor, b: &[f64]) -> Result<Vec<f64>, SparseError> {
    let n = factor.dim();
    if b.len() != n {
        return Err(SparseError::DimensionMismatch {
            expected: n,
            found: b.len(),
        });
    }
    let mut y = b.to_vec();
    for k in 0..n {
        let (cols, vals) = factor.l.row(k);
        let last = cols.len() - 1;
        let mut s = y[k];
        for (&p, &v) in cols[..last].iter().zip(&vals[..last]) {
            s -= v * y[p];
        }
        y[k] = s / vals[last];
    }
    for k in (0..n).rev() {
        let (cols, vals) = factor.l.row(k);
        let last = cols.len() - 1;
        y[k] /= vals[last];
        let xk = y[k];
        for (&p, &v) in cols[..last].iter().zip(&vals[..last]) {
            y[p] -= v * xk;
        }
    }
    Ok(y)
}

/// Symbolic analysis plus numeric factor under an optional symmetric
/// ordering. With `None` the natural order is used.
#[derive(Debug, Clone)]
pub struct SparseCholesky {
    ordering: Option<Vec<usize>>,
    symbolic: SymbolicFactor,
    factor: Option<CholeskyFactor>,
}

impl SparseCholesky {
    pub fn analyze(a: &CsrMatrix, ordering: Option<Vec<usize>>) -> Result<Self, SparseError> {
        let symbolic = match &ordering {
            None => symbolic_analysis(a)?,
            Some(perm) => symbolic_analysis(&permute_symmetric(a, perm)?)?,
        };
        Ok(SparseCholesky {
            ordering,
            symbolic,
            factor: None,
        })
    }

    pub fn symbolic(&self) -> &SymbolicFactor {
        &self.symbolic
    }

    pub fn factor(&self) -> Option<&CholeskyFactor> {
        self.factor.as_ref()
    }

    pub fn factorize(&mut self, a: &CsrMatrix, engine: &Engine) -> Result<(), SparseError> {
        let factor = match &self.ordering {
            None => factorize(a, &self.symbolic, engine)?,
            Some(perm) => factorize(&permute_symmetric(a, perm)?, &self.symbolic, engine)?,
        };
        self.factor = Some(factor);
        Ok(())
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, SparseError> {
        let factor = self
            .factor
            .as_ref()
            .ok_or_else(|| SparseError::Malformed("solve before factorize".into()))?;
        match &self.ordering {
            None => solve(factor, b),
            Some(perm) => {
                if b.len() != perm.len() {
                    return Err(SparseError::DimensionMismatch {
                        expected: perm.len(),
                        found: b.len(),
                    });
                }
                let pb: Vec<f64> = perm.iter().map(|&old| b[old]).collect();
                let px = solve(factor, &pb)?;
                let mut x = vec![0.0; b.len()];
                for (new, &old) in perm.iter().enumerate() {
                    x[old] = px[new];
                }
                Ok(x)
            }
        }
    }
}
