//! Dense row-major matrices and the handful of primitives the losses are
//! built from: row normalization (with its backward pass), all-pairs inner
//! products, segment mean pooling and a shifted log-sum-exp.

pub mod io;

use crate::error::{Error, Result};

/// Row-major `f64` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dim(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics; a zero-column matrix still has `rows` empty rows
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Gathers the listed rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Matrix> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: self.rows,
                });
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        })
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dim(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &aik) in a.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                axpy(aik, other.row(k), o);
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::dim(format!(
                "t_matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a = self.row(k);
            let b = other.row(k);
            for (i, &aki) in a.iter().enumerate() {
                if aki == 0.0 {
                    continue;
                }
                axpy(aki, b, out.row_mut(i));
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        gram(self, other)
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn scaled(&self, factor: f64) -> Matrix {
        let mut out = self.clone();
        out.scale(factor);
        out
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, factor: f64, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(format!(
                "add {:?} to {:?}",
                other.shape(),
                self.shape()
            )));
        }
        axpy(factor, &other.data, &mut self.data);
        Ok(())
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&mut self, bias: &[f64]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(Error::dim(format!(
                "bias of length {} for {} columns",
                bias.len(),
                self.cols
            )));
        }
        for i in 0..self.rows {
            for (v, b) in self.row_mut(i).iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(())
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in self.iter_rows() {
            for (o, v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Dense 0/1 matrix, stored one byte per entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMatrix {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl BinaryMatrix {
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                bits.push(f(i, j));
            }
        }
        Self { rows, cols, bits }
    }

    pub fn new(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::dim(format!(
                "{} entries for a {rows}x{cols} binary matrix",
                bits.len()
            )));
        }
        Ok(Self { rows, cols, bits })
    }

    /// Square mask with every off-diagonal entry set.
    pub fn off_diagonal(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| i != j)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        self.bits[i * self.cols + j] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_count(&self, i: usize) -> usize {
        self.row(i).iter().filter(|&&b| b).count()
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| {
            if self.get(i, j) {
                1.0
            } else {
                0.0
            }
        })
    }
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // four independent accumulators so the optimizer can vectorize
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let k = c * 4;
        acc[0] += a[k] * b[k];
        acc[1] += a[k + 1] * b[k + 1];
        acc[2] += a[k + 2] * b[k + 2];
        acc[3] += a[k + 3] * b[k + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in chunks * 4..a.len() {
        s += a[k] * b[k];
    }
    s
}

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Row-wise Euclidean norms.
pub fn row_norms(m: &Matrix) -> Vec<f64> {
    m.iter_rows().map(|r| dot(r, r).sqrt()).collect()
}

/// Scales every row to unit Euclidean norm. Rows with norm below `eps`
/// become all-zero.
pub fn l2_normalize_rows(m: &Matrix, eps: f64) -> Matrix {
    normalize_rows_with_norms(m, eps).0
}

/// Like [`l2_normalize_rows`], also returning the input row norms for
/// [`normalize_rows_backward`].
pub fn normalize_rows_with_norms(m: &Matrix, eps: f64) -> (Matrix, Vec<f64>) {
    let norms = row_norms(m);
    let mut out = m.clone();
    for (i, &n) in norms.iter().enumerate() {
        let row = out.row_mut(i);
        if n < eps {
            row.fill(0.0);
        } else {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    (out, norms)
}

/// Pulls a gradient with respect to normalized rows `y = x / |x|` back to the
/// raw rows: `(g - y (y·g)) / |x|`. Rows that were zeroed get zero gradient.
pub fn normalize_rows_backward(
    normalized: &Matrix,
    norms: &[f64],
    grad: &Matrix,
    eps: f64,
) -> Matrix {
    let mut out = Matrix::zeros(grad.rows(), grad.cols());
    for (i, &n) in norms.iter().enumerate() {
        if n < eps {
            continue;
        }
        let y = normalized.row(i);
        let g = grad.row(i);
        let yg = dot(y, g);
        for ((o, &gi), &yi) in out.row_mut(i).iter_mut().zip(g).zip(y) {
            *o = (gi - yi * yg) / n;
        }
    }
    out
}

/// All pairwise inner products: `out[i][j] = <a_i, b_j>`.
pub fn gram(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::dim(format!(
            "gram of {} and {} column matrices",
            a.cols(),
            b.cols()
        )));
    }
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let ai = a.row(i);
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = dot(ai, b.row(j));
        }
    }
    Ok(out)
}

/// Mean of the rows of `x` sharing each label.
pub fn segment_mean_pool(x: &Matrix, labels: &[usize], num_groups: usize) -> Result<Matrix> {
    if labels.len() != x.rows() {
        return Err(Error::dim(format!(
            "{} labels for {} rows",
            labels.len(),
            x.rows()
        )));
    }
    let mut out = Matrix::zeros(num_groups, x.cols());
    let mut counts = vec![0usize; num_groups];
    for (r, &g) in labels.iter().enumerate() {
        if g >= num_groups {
            return Err(Error::IndexOutOfRange {
                index: g,
                len: num_groups,
            });
        }
        counts[g] += 1;
        axpy(1.0, x.row(r), out.row_mut(g));
    }
    for (g, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(Error::EmptyGroup(g));
        }
        let inv = 1.0 / c as f64;
        out.row_mut(g).iter_mut().for_each(|v| *v *= inv);
    }
    Ok(out)
}

/// `log Σ exp(v)` with the max shift.
pub fn logsumexp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("logsumexp of an empty sequence"));
    }
    Ok(logsumexp_unchecked(values))
}

#[inline]
pub(crate) fn logsumexp_unchecked(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.len() == 1 || max == f64::NEG_INFINITY {
        return max;
    }
    let s: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lcg_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Matrix::from_fn(rows, cols, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn normalize_examples() {
        let m = Matrix::from_rows(&[[3.0, 4.0], [1.0, 0.0], [1e-20, 0.0]]).unwrap();
        let n = l2_normalize_rows(&m, 1e-12);
        assert!((n.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((n.get(0, 1) - 0.8).abs() < 1e-15);
        assert_eq!(n.row(1), &[1.0, 0.0]);
        assert_eq!(n.row(2), &[0.0, 0.0]);
    }

    #[test]
    fn gram_examples() {
        let i2 = Matrix::identity(2);
        assert_eq!(gram(&i2, &i2).unwrap(), i2);
        let a = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let b = Matrix::from_rows(&[[3.0, 4.0]]).unwrap();
        assert_eq!(gram(&a, &b).unwrap().as_slice(), &[11.0]);
        assert!(gram(&a, &Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn gram_matches_triple_loop() {
        let a = lcg_matrix(5, 3, 1);
        let b = lcg_matrix(5, 3, 2);
        let g = gram(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += a.get(i, k) * b.get(j, k);
                }
                assert!((g.get(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pool_examples() {
        let x = Matrix::from_rows(&[[2.0], [4.0]]).unwrap();
        assert_eq!(segment_mean_pool(&x, &[0, 0], 1).unwrap().as_slice(), &[3.0]);
        let x = lcg_matrix(3, 2, 9);
        assert_eq!(segment_mean_pool(&x, &[0, 1, 2], 3).unwrap(), x);
        assert_eq!(
            segment_mean_pool(&x, &[0, 0, 2], 3),
            Err(Error::EmptyGroup(1))
        );
        assert!(segment_mean_pool(&x, &[0, 0, 3], 3).is_err());
    }

    #[test]
    fn pool_matches_group_loop() {
        let x = lcg_matrix(10, 4, 3);
        let labels = [0, 0, 1, 1, 1, 2, 2, 2, 2, 2];
        let pooled = segment_mean_pool(&x, &labels, 3).unwrap();
        for g in 0..3 {
            let members: Vec<usize> = (0..10).filter(|&r| labels[r] == g).collect();
            for c in 0..4 {
                let mean =
                    members.iter().map(|&r| x.get(r, c)).sum::<f64>() / members.len() as f64;
                assert!((pooled.get(g, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn logsumexp_examples() {
        assert!((logsumexp(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((logsumexp(&[1000.0, 1000.0]).unwrap() - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(logsumexp(&[3.5]).unwrap(), 3.5);
        assert!(logsumexp(&[]).is_err());
        let v: Vec<f64> = lcg_matrix(1, 7, 4).as_slice().iter().map(|x| x * 5.0).collect();
        let direct = v.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((logsumexp(&v).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn normalize_backward_matches_differences() {
        let x = lcg_matrix(3, 4, 5);
        let w = lcg_matrix(3, 4, 6);
        let f = |m: &Matrix| {
            let n = l2_normalize_rows(m, 1e-12);
            n.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (y, norms) = normalize_rows_with_norms(&x, 1e-12);
        let g = normalize_rows_backward(&y, &norms, &w, 1e-12);
        let h = 1e-6;
        for idx in 0..12 {
            let mut p = x.clone();
            p.as_mut_slice()[idx] += h;
            let mut m = x.clone();
            m.as_mut_slice()[idx] -= h;
            let numeric = (f(&p) - f(&m)) / (2.0 * h);
            assert!((numeric - g.as_slice()[idx]).abs() < 1e-8);
        }
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let v = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(v), 2.0);
    }

    fn matrix_strategy() -> impl Strategy<Value = Matrix> {
        (1usize..6, 1usize..5).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-10.0f64..10.0, r * c)
                .prop_map(move |d| Matrix::new(r, c, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(m in matrix_strategy()) {
            let once = l2_normalize_rows(&m, 1e-12);
            let twice = l2_normalize_rows(&once, 1e-12);
            prop_assert!(once.max_abs_diff(&twice) < 1e-12);
            for (r, n) in row_norms(&once).into_iter().enumerate() {
                prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-12, "row {} norm {}", r, n);
            }
        }

        #[test]
        fn gram_of_self_is_symmetric_with_unit_diagonal(m in matrix_strategy()) {
            let g = gram(&m, &m).unwrap();
            prop_assert!(g.max_abs_diff(&g.transpose()) < 1e-12);
            let n = l2_normalize_rows(&m, 1e-6);
            let gn = gram(&n, &n).unwrap();
            for (i, norm) in row_norms(&m).into_iter().enumerate() {
                if norm >= 1e-6 {
                    prop_assert!((gn.get(i, i) - 1.0).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn logsumexp_shift(v in proptest::collection::vec(-50.0f64..50.0, 1..12), c in -500.0f64..500.0) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let a = logsumexp(&shifted).unwrap();
            let b = logsumexp(&v).unwrap() + c;
            prop_assert!((a - b).abs() < 1e-10);
        }

        #[test]
        fn identity_pooling(m in matrix_strategy()) {
            let labels: Vec<usize> = (0..m.rows()).collect();
            prop_assert_eq!(segment_mean_pool(&m, &labels, m.rows()).unwrap(), m);
        }
    }
}
