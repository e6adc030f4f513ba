//! Small numerical utilities shared across modules: a compact row-major
//! matrix, compensated summation, and dense linear-algebra helpers for the
//! low-dimensional systems this crate solves.

use nalgebra::{Cholesky, DMatrix, DVector};

/// Upper 97.5% standard-normal quantile, used for 95% confidence intervals.
pub const Z_975: f64 = 1.959_963_984_540_054;

/// Row-major dense matrix with one row per unit.
///
/// `nalgebra` stores column-major, which is the wrong layout for the
/// unit-at-a-time scans that dominate this crate (partial-likelihood passes,
/// influence rows, balancing rows).  This thin wrapper keeps each unit's row
/// contiguous and converts to `DMatrix` only at the small-system boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMat {
    n: usize,
    k: usize,
    data: Vec<f64>,
}

impl RowMat {
    pub fn zeros(n: usize, k: usize) -> Self {
        RowMat { n, k, data: vec![0.0; n * k] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let k = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n * k);
        for r in rows {
            assert_eq!(r.len(), k, "ragged rows");
            data.extend_from_slice(r);
        }
        RowMat { n, k, data }
    }

    /// Builds from column slices, all of equal length.
    pub fn from_columns(cols: &[&[f64]]) -> Self {
        let k = cols.len();
        let n = cols.first().map_or(0, |c| c.len());
        let mut m = RowMat::zeros(n, k);
        for (j, col) in cols.iter().enumerate() {
            assert_eq!(col.len(), n, "ragged columns");
            for (i, &v) in col.iter().enumerate() {
                m.data[i * k + j] = v;
            }
        }
        m
    }

    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn ncols(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.k..(i + 1) * self.k]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.k..(i + 1) * self.k]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.k + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.k + j] = v;
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, j)).collect()
    }

    /// Euclidean norm of row `i`.
    pub fn row_norm(&self, i: usize) -> f64 {
        self.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Keeps the rows flagged `true`, preserving order.
    pub fn filter_rows(&self, keep: &[bool]) -> RowMat {
        assert_eq!(keep.len(), self.n);
        let rows: Vec<Vec<f64>> = (0..self.n)
            .filter(|&i| keep[i])
            .map(|i| self.row(i).to_vec())
            .collect();
        let mut out = RowMat::from_rows(&rows);
        out.k = self.k; // preserve width when no rows survive
        out
    }

    /// Keeps the listed columns, in the order given.
    pub fn select_columns(&self, keep: &[usize]) -> RowMat {
        let mut out = RowMat::zeros(self.n, keep.len());
        for i in 0..self.n {
            for (c, &j) in keep.iter().enumerate() {
                out.set(i, c, self.get(i, j));
            }
        }
        out
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_iterator(self.n, self.k, self.data.iter().copied())
    }
}

/// Compensated (Kahan) summation.  Used where sums must hold tighter
/// tolerances than naive accumulation over tens of thousands of terms
/// guarantees, e.g. inclusion-probability totals.
pub fn kahan_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in values {
        let y = v - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Solves the symmetric positive-definite system `a x = b` by Cholesky.
pub fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    Cholesky::new(a.clone()).map(|ch| ch.solve(b))
}

/// Inverse of a symmetric positive-definite matrix by Cholesky.
pub fn spd_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    Cholesky::new(a.clone()).map(|ch| ch.inverse())
}

/// Returns a nonzero vector in the null space of `m`, which must have more
/// columns than its row count (the balancing-step geometry guarantees this).
///
/// Gaussian elimination with partial pivoting to row-echelon form; the first
/// non-pivot column is set to 1 and the pivot entries back-substituted.
/// Rank-deficient inputs simply yield more free columns, so no failure path
/// exists.
pub fn null_space_vector(m: &RowMat) -> Vec<f64> {
    let rows = m.nrows();
    let cols = m.ncols();
    assert!(cols > rows, "null space requires more columns than rows");
    let mut a = m.clone();
    let mut pivot_col_of_row: Vec<Option<usize>> = vec![None; rows];
    let mut pivot_row_of_col: Vec<Option<usize>> = vec![None; cols];
    let mut r = 0;
    for j in 0..cols {
        if r >= rows {
            break;
        }
        // Partial pivot within column j over rows r..
        let (imax, vmax) = (r..rows)
            .map(|i| (i, a.get(i, j).abs()))
            .fold((r, 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if vmax <= 1e-12 {
            continue; // free column
        }
        if imax != r {
            for c in 0..cols {
                let tmp = a.get(r, c);
                a.set(r, c, a.get(imax, c));
                a.set(imax, c, tmp);
            }
        }
        let piv = a.get(r, j);
        for i in (r + 1)..rows {
            let f = a.get(i, j) / piv;
            if f != 0.0 {
                for c in j..cols {
                    let v = a.get(i, c) - f * a.get(r, c);
                    a.set(i, c, v);
                }
            }
        }
        pivot_col_of_row[r] = Some(j);
        pivot_row_of_col[j] = Some(r);
        r += 1;
    }
    let free = (0..cols)
        .find(|&j| pivot_row_of_col[j].is_none())
        .expect("cols > rows guarantees a free column");
    let mut v = vec![0.0; cols];
    v[free] = 1.0;
    // Back-substitute pivot rows from the bottom up.
    for i in (0..r).rev() {
        let pj = pivot_col_of_row[i].unwrap();
        let mut s = 0.0;
        for c in (pj + 1)..cols {
            s += a.get(i, c) * v[c];
        }
        v[pj] = -s / a.get(i, pj);
    }
    v
}
