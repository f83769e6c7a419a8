//! Dense real linear algebra at desk scale.
//!
//! Everything here is 64-bit and row-major. The matrices involved are small
//! (head dimensions up to 64), so the eigensolver is a plain cyclic Jacobi
//! iteration rather than anything tridiagonal-based.

use std::fmt;

use crate::error::{Error, Result};

/// Tolerance on column orthonormality accepted by [`build_projector`].
pub const ORTHONORMAL_TOL: f64 = 1e-8;
/// Relative tolerance for the symmetry check in [`sym_eig`].
pub const SYMMETRY_TOL: f64 = 1e-10;

const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_REL_TOL: f64 = 1e-12;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries. Zero-sized dimensions are allowed so that an
    /// empty basis (`d x 0`) can be represented.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("matrix contains non-finite entries"));
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_vec_unchecked(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        if rows.iter().any(|r| r.as_ref().len() != cols) {
            return Err(Error::invalid("rows have differing lengths"));
        }
        let data = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Self::new(rows.len(), cols, data)
    }

    /// Builds a `n x k` matrix whose columns are the given vectors.
    pub fn from_columns<C: AsRef<[f64]>>(n: usize, columns: &[C]) -> Result<Self> {
        if columns.iter().any(|c| c.as_ref().len() != n) {
            return Err(Error::invalid("columns have differing lengths"));
        }
        let k = columns.len();
        let mut data = vec![0.0; n * k];
        for (j, c) in columns.iter().enumerate() {
            for (i, &x) in c.as_ref().iter().enumerate() {
                data[i * k + j] = x;
            }
        }
        Self::new(n, k, data)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.get(r, c);
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::invalid(format!(
                "matmul shape mismatch: {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let out_row = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for (k, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `M v` for a column vector `v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::invalid(format!(
                "matvec: matrix has {} cols, vector has {} entries",
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }

    /// `v M` for a row vector `v`.
    pub fn vecmat(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::invalid(format!(
                "vecmat: matrix has {} rows, vector has {} entries",
                self.rows,
                v.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &a) in v.iter().enumerate() {
            for (o, &b) in out.iter_mut().zip(self.row(r)) {
                *o += a * b;
            }
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::invalid("sub: shape mismatch"));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Matrix::from_vec_unchecked(self.rows, self.cols, data))
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix::from_vec_unchecked(self.rows, self.cols, self.data.iter().map(|x| x * s).collect())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Largest entrywise asymmetry `|a_ij - a_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.rows.min(self.cols) {
            for j in (i + 1)..self.rows.min(self.cols) {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// `vᵀ M v`.
    pub fn quadratic_form(&self, v: &[f64]) -> Result<f64> {
        Ok(dot(v, &self.matvec(v)?))
    }

    /// First `k` columns as a new `rows x k` matrix.
    pub fn leading_columns(&self, k: usize) -> Matrix {
        let k = k.min(self.cols);
        let mut out = Matrix::zeros(self.rows, k);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[..k]);
        }
        out
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sub_vec(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `a + s b`.
pub fn axpy(a: &[f64], s: f64, b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + s * y).collect()
}

/// Numerically stable softmax over one row of logits.
pub fn softmax_row(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("softmax input contains non-finite values"));
    }
    Ok(softmax_unchecked(logits))
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for x in &mut out {
        *x /= total;
    }
    out
}

/// Symmetric eigendecomposition: eigenvalues in non-increasing order and the
/// matching unit eigenvectors as columns.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenResult {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

impl EigenResult {
    /// The top-`p` eigenvectors as a `d x p` basis.
    pub fn top_basis(&self, p: usize) -> Matrix {
        self.eigenvectors.leading_columns(p)
    }

    /// `‖A - U Λ Uᵀ‖_F / max(1, ‖A‖_F)`.
    pub fn reconstruction_residual(&self, a: &Matrix) -> f64 {
        let n = self.eigenvalues.len();
        let mut recon = Matrix::zeros(n, n);
        for (k, &lam) in self.eigenvalues.iter().enumerate() {
            for i in 0..n {
                let ui = self.eigenvectors.get(i, k) * lam;
                for j in 0..n {
                    let v = recon.get(i, j) + ui * self.eigenvectors.get(j, k);
                    recon.set(i, j, v);
                }
            }
        }
        let diff = a.sub(&recon).expect("shapes agree").frobenius_norm();
        diff / a.frobenius_norm().max(1.0)
    }
}

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a.get(i, j) * a.get(i, j);
            }
        }
    }
    s.sqrt()
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Sweeps visit the pairs `(p, q)`, `p < q`, in row order and stop once the
/// off-diagonal Frobenius norm is at most `1e-12 * ‖A‖_F` (or after 100
/// sweeps). Equal eigenvalues keep their Jacobi order under a stable
/// descending sort, and each eigenvector is signed so that its largest
/// magnitude entry is positive.
pub fn sym_eig(a: &Matrix) -> Result<EigenResult> {
    if !a.is_square() {
        return Err(Error::invalid(format!(
            "sym_eig needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let n = a.rows();
    let scale = a.data().iter().fold(1.0f64, |m, x| m.max(x.abs()));
    if a.asymmetry() > SYMMETRY_TOL * scale {
        return Err(Error::invalid("sym_eig input is not symmetric"));
    }

    let mut m = a.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m.get(i, j) + m.get(j, i));
            m.set(i, j, avg);
            m.set(j, i, avg);
        }
    }
    let mut v = Matrix::identity(n);
    let target = JACOBI_REL_TOL * m.frobenius_norm();

    let mut sweeps = 0;
    while off_diagonal_norm(&m) > target && sweeps < JACOBI_MAX_SWEEPS {
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let akp = m.get(k, p);
                    let akq = m.get(k, q);
                    m.set(k, p, c * akp - s * akq);
                    m.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = m.get(p, k);
                    let aqk = m.get(q, k);
                    m.set(p, k, c * apk - s * aqk);
                    m.set(q, k, s * apk + c * aqk);
                }
                m.set(p, q, 0.0);
                m.set(q, p, 0.0);

                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
        sweeps += 1;
    }
    if sweeps == JACOBI_MAX_SWEEPS {
        log::warn!("jacobi hit the sweep cap with off-diagonal norm {:e}", off_diagonal_norm(&m));
    }

    let raw: Vec<f64> = (0..n).map(|i| m.get(i, i)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| raw[j].total_cmp(&raw[i]));

    let mut vectors = Matrix::zeros(n, n);
    let mut eigenvalues = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        eigenvalues.push(raw[src]);
        let mut col = v.column(src);
        let mut pivot = 0;
        for (i, x) in col.iter().enumerate() {
            if x.abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        if col[pivot] < 0.0 {
            col.iter_mut().for_each(|x| *x = -*x);
        }
        for (i, x) in col.into_iter().enumerate() {
            vectors.set(i, dst, x);
        }
    }
    Ok(EigenResult {
        eigenvalues,
        eigenvectors: vectors,
    })
}

/// Running sum of outer products `v vᵀ`. Only the upper triangle is
/// accumulated and mirrored on output, so the result is exactly symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentAccumulator {
    dim: usize,
    upper: Vec<f64>,
    count: usize,
}

impl MomentAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            upper: vec![0.0; dim * (dim + 1) / 2],
            count: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn add(&mut self, v: &[f64]) {
        debug_assert_eq!(v.len(), self.dim);
        let mut idx = 0;
        for i in 0..self.dim {
            let vi = v[i];
            for &vj in &v[i..] {
                self.upper[idx] += vi * vj;
                idx += 1;
            }
        }
        self.count += 1;
    }

    /// Folds another accumulator in. Merge order matters for the last bits
    /// of the sum, so callers merge in a fixed order.
    pub fn merge(&mut self, other: &MomentAccumulator) {
        debug_assert_eq!(self.dim, other.dim);
        for (a, b) in self.upper.iter_mut().zip(&other.upper) {
            *a += b;
        }
        self.count += other.count;
    }

    /// The mean outer product, or `None` if nothing was accumulated.
    pub fn mean(&self) -> Option<Matrix> {
        if self.count == 0 {
            return None;
        }
        let n = self.count as f64;
        let mut out = Matrix::zeros(self.dim, self.dim);
        let mut idx = 0;
        for i in 0..self.dim {
            for j in i..self.dim {
                let x = self.upper[idx] / n;
                out.set(i, j, x);
                out.set(j, i, x);
                idx += 1;
            }
        }
        Some(out)
    }
}

/// `(1/n) Σ vᵢ vᵢᵀ` over a non-empty set of equal-length vectors.
pub fn second_moment<V: AsRef<[f64]>>(vectors: &[V]) -> Result<Matrix> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::invalid("second moment of an empty set"))?;
    let dim = first.as_ref().len();
    let mut acc = MomentAccumulator::new(dim);
    for v in vectors {
        let v = v.as_ref();
        if v.len() != dim {
            return Err(Error::invalid("vectors have differing dimensions"));
        }
        acc.add(v);
    }
    Ok(acc.mean().expect("non-empty"))
}

/// Orthogonal projector `I - U Uᵀ` onto the complement of span(U).
pub fn build_projector(u: &Matrix) -> Result<Matrix> {
    let (n, p) = u.shape();
    for a in 0..p {
        for b in a..p {
            let g: f64 = (0..n).map(|i| u.get(i, a) * u.get(i, b)).sum();
            let expected = if a == b { 1.0 } else { 0.0 };
            if (g - expected).abs() > ORTHONORMAL_TOL {
                return Err(Error::invalid(format!(
                    "projector basis is not orthonormal: <u{a}, u{b}> = {g}"
                )));
            }
        }
    }
    let mut out = Matrix::identity(n);
    for i in 0..n {
        for j in i..n {
            let uu: f64 = (0..p).map(|k| u.get(i, k) * u.get(j, k)).sum();
            let x = out.get(i, j) - uu;
            out.set(i, j, x);
            out.set(j, i, x);
        }
    }
    Ok(out)
}

/// `P r`.
pub fn project(p: &Matrix, r: &[f64]) -> Result<Vec<f64>> {
    if !p.is_square() || p.rows() != r.len() {
        return Err(Error::invalid(format!(
            "cannot project a {}-vector with a {}x{} matrix",
            r.len(),
            p.rows(),
            p.cols()
        )));
    }
    p.matvec(r)
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = stream_rng(seed, 99, 0);
        let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    fn random_symmetric(n: usize, seed: u64) -> Matrix {
        let a = random_matrix(n, n, seed);
        let mut s = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                s.set(i, j, a.get(i, j) + a.get(j, i));
            }
        }
        s
    }

    #[test]
    fn matrix_rejects_bad_data() {
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::new(1, 1, vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn softmax_uniform_and_singleton() {
        let p = softmax_row(&[0.0, 0.0, 0.0]).unwrap();
        for x in p {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(softmax_row(&[123.4]).unwrap(), vec![1.0]);
        assert_eq!(softmax_row(&[-1e300]).unwrap(), vec![1.0]);
    }

    #[test]
    fn softmax_rejects_empty() {
        assert!(matches!(softmax_row(&[]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn softmax_shift_invariance_cases() {
        let base = softmax_row(&[1.0, 2.0, 3.0]).unwrap();
        for c in [-50.0, 7.3, 1e3] {
            let shifted = softmax_row(&[1.0 + c, 2.0 + c, 3.0 + c]).unwrap();
            for (a, b) in base.iter().zip(&shifted) {
                assert!((a - b).abs() <= 1e-12, "c={c}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn eig_identity_and_diagonal() {
        let e = sym_eig(&Matrix::identity(3)).unwrap();
        assert_eq!(e.eigenvalues, vec![1.0, 1.0, 1.0]);

        let d = Matrix::from_rows(&[[0.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 5.0]]).unwrap();
        let e = sym_eig(&d).unwrap();
        assert_eq!(e.eigenvalues, vec![5.0, 2.0, 0.0]);
        // signed permutation of the standard basis, sign fixed positive
        assert_eq!(e.eigenvectors.column(0), vec![0.0, 0.0, 1.0]);
        assert_eq!(e.eigenvectors.column(1), vec![0.0, 1.0, 0.0]);
        assert_eq!(e.eigenvectors.column(2), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn eig_rejects_bad_shapes() {
        assert!(sym_eig(&Matrix::zeros(2, 3)).is_err());
        let asym = Matrix::from_rows(&[[1.0, 2.0], [0.0, 1.0]]).unwrap();
        assert!(sym_eig(&asym).is_err());
    }

    #[test]
    fn eig_random_reconstruction() {
        let a = random_symmetric(8, 11);
        let e = sym_eig(&a).unwrap();
        assert!(e.reconstruction_residual(&a) <= 1e-8);
        for w in e.eigenvalues.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn eig_is_deterministic() {
        let a = random_symmetric(16, 3);
        assert_eq!(sym_eig(&a).unwrap(), sym_eig(&a).unwrap());
    }

    #[test]
    fn eig_of_zero_matrix() {
        let e = sym_eig(&Matrix::zeros(4, 4)).unwrap();
        assert_eq!(e.eigenvalues, vec![0.0; 4]);
        assert_eq!(e.eigenvectors, Matrix::identity(4));
    }

    #[test]
    fn second_moment_small_cases() {
        let m = second_moment(&[[1.0, 0.0]]).unwrap();
        assert_eq!(m.data(), &[1.0, 0.0, 0.0, 0.0]);
        let m = second_moment(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        assert_eq!(m.data(), &[1.0, 0.0, 0.0, 0.0]);
        assert!(second_moment::<Vec<f64>>(&[]).is_err());
        assert!(second_moment(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn second_moment_matches_reference_loop() {
        let mut rng = stream_rng(5, 99, 1);
        let vs: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..4).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let m = second_moment(&vs).unwrap();
        let mut reference = [[0.0f64; 4]; 4];
        for v in &vs {
            for i in 0..4 {
                for j in 0..4 {
                    reference[i][j] += v[i] * v[j] / 100.0;
                }
            }
        }
        for i in 0..4 {
            for j in 0..4 {
                // sampling sigma of a product of unit normals is about 1/sqrt(n)
                let sigma = (if i == j { 2.0f64 } else { 1.0 }).sqrt() / 10.0;
                assert!((m.get(i, j) - reference[i][j]).abs() <= 3.0 * sigma);
                assert!((m.get(i, j) - reference[i][j]).abs() <= 1e-12);
            }
        }
        assert_eq!(m, m.transpose());
    }

    #[test]
    fn projector_examples() {
        let e1 = Matrix::from_columns(2, &[[1.0, 0.0]]).unwrap();
        assert_eq!(build_projector(&e1).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);
        assert_eq!(build_projector(&Matrix::zeros(3, 0)).unwrap(), Matrix::identity(3));
        let full = build_projector(&Matrix::identity(3)).unwrap();
        assert!(full.frobenius_norm() < 1e-15);
    }

    #[test]
    fn projector_rejects_non_orthonormal() {
        let u = Matrix::from_columns(2, &[[1.0, 0.0], [1.0, 0.0]]).unwrap();
        assert!(build_projector(&u).is_err());
        let u = Matrix::from_columns(2, &[[2.0, 0.0]]).unwrap();
        assert!(build_projector(&u).is_err());
    }

    #[test]
    fn project_examples() {
        let r = [1.0, -2.0, 0.5];
        assert_eq!(project(&Matrix::identity(3), &r).unwrap(), r.to_vec());
        assert_eq!(project(&Matrix::zeros(3, 3), &r).unwrap(), vec![0.0; 3]);
        assert!(project(&Matrix::identity(2), &r).is_err());
    }

    fn seeded_basis(n: usize, p: usize, seed: u64) -> Matrix {
        let e = sym_eig(&random_symmetric(n, seed)).unwrap();
        e.top_basis(p)
    }

    #[test]
    fn projector_rank_deficient_pythagoras() {
        let u = seeded_basis(6, 2, 21);
        let p = build_projector(&u).unwrap();
        let mut rng = stream_rng(21, 99, 2);
        for _ in 0..100 {
            let r: Vec<f64> = (0..6).map(|_| StandardNormal.sample(&mut rng)).collect();
            let pr = project(&p, &r).unwrap();
            let rest = sub_vec(&r, &pr);
            let lhs = dot(&r, &r);
            let rhs = dot(&pr, &pr) + dot(&rest, &rest);
            assert!((lhs - rhs).abs() <= 1e-10);
            assert!(norm(&pr) <= norm(&r) + 1e-12);
        }
        assert!((p.trace() - 4.0).abs() < 1e-8);
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(
            logits in proptest::collection::vec(-30.0f64..30.0, 1..12),
            c in -1e3f64..1e3,
        ) {
            let a = softmax_row(&logits).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|x| x + c).collect();
            let b = softmax_row(&shifted).unwrap();
            let total: f64 = a.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!(*x > 0.0);
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn eig_invariants(n in 1usize..10, seed in 0u64..500) {
            let a = random_symmetric(n, seed);
            let e = sym_eig(&a).unwrap();
            for w in e.eigenvalues.windows(2) {
                prop_assert!(w[0] >= w[1]);
            }
            for i in 0..n {
                let ci = e.eigenvectors.column(i);
                prop_assert!((norm(&ci) - 1.0).abs() <= 1e-10);
                for j in (i + 1)..n {
                    prop_assert!(dot(&ci, &e.eigenvectors.column(j)).abs() <= 1e-10);
                }
            }
            prop_assert!(e.reconstruction_residual(&a) <= 1e-8);
        }

        #[test]
        fn projector_invariants(n in 1usize..9, p_frac in 0.0f64..=1.0, seed in 0u64..500) {
            let p = ((n as f64) * p_frac).floor() as usize;
            let u = seeded_basis(n, p, seed);
            let proj = build_projector(&u).unwrap();
            prop_assert_eq!(&proj, &proj.transpose());
            let sq = proj.matmul(&proj).unwrap();
            prop_assert!(sq.sub(&proj).unwrap().frobenius_norm() <= 1e-10);
            prop_assert!((proj.trace() - (n - p) as f64).abs() <= 1e-8);
            for k in 0..p {
                let pu = proj.matvec(&u.column(k)).unwrap();
                prop_assert!(norm(&pu) <= 1e-10);
            }
            let mut rng = stream_rng(seed, 99, 3);
            for _ in 0..100 {
                let r: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
                prop_assert!(norm(&project(&proj, &r).unwrap()) <= norm(&r) + 1e-12);
            }
        }
    }
}
