//! Binary64 dense linear algebra: one-sided Jacobi SVD, Cholesky and
//! triangular inversion. The compression pipeline works in this precision and
//! only rounds back to binary32 when it writes factors into the model.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const JACOBI_MAX_SWEEPS: usize = 100;
pub const JACOBI_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_diag(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, v) in d.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.shape().len() != 2 {
            return Err(Error::Dimension(format!("expected a matrix, got {:?}", t.shape())));
        }
        Ok(Self {
            rows: t.shape()[0],
            cols: t.shape()[1],
            data: t.data().iter().map(|&v| v as f64).collect(),
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.rows, self.cols],
            self.data.iter().map(|&v| v as f32).collect(),
        )
        .expect("matrix extents are positive")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let src = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn add_diagonal(&mut self, v: f64) {
        for i in 0..self.rows.min(self.cols) {
            self[(i, i)] += v;
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Scales column `j` by `d[j]`.
    pub fn scale_cols(&self, d: &[f64]) -> Mat {
        let mut out = self.clone();
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(i, j)] *= d[j];
            }
        }
        out
    }

    /// Scales row `i` by `d[i]`.
    pub fn scale_rows(&self, d: &[f64]) -> Mat {
        let mut out = self.clone();
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(i, j)] *= d[i];
            }
        }
        out
    }

    pub fn columns(&self, range: std::ops::Range<usize>) -> Mat {
        let mut out = Mat::zeros(self.rows, range.len());
        for i in 0..self.rows {
            for (jj, j) in range.clone().enumerate() {
                out[(i, jj)] = self[(i, j)];
            }
        }
        out
    }

    pub fn row_block(&self, range: std::ops::Range<usize>) -> Mat {
        Mat {
            rows: range.len(),
            cols: self.cols,
            data: self.data[range.start * self.cols..range.end * self.cols].to_vec(),
        }
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0f64;
        for i in 0..self.rows {
            for j in 0..i {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Thin SVD `m = u · diag(s) · vt` with `p = min(rows, cols)`.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Mat,
    pub s: Vec<f64>,
    pub vt: Mat,
}

impl Svd {
    pub fn reconstruct(&self) -> Mat {
        self.u
            .scale_cols(&self.s)
            .matmul(&self.vt)
            .expect("svd factors are conformable")
    }
}

/// One-sided (Hestenes) Jacobi SVD. Singular values come back sorted
/// nonincreasing; columns for zero singular values are completed to an
/// orthonormal set.
pub fn svd(m: &Mat) -> Result<Svd> {
    if m.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("svd input is not finite".into()));
    }
    if m.rows < m.cols {
        let t = svd(&m.transpose())?;
        return Ok(Svd {
            u: t.vt.transpose(),
            s: t.s,
            vt: t.u.transpose(),
        });
    }
    let (rows, n) = (m.rows, m.cols);
    // Work on columns: store A column-major for contiguous rotations.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..rows).map(|i| m[(i, j)]).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut converged = false;
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0f64;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (a, b) = (&cols[p], &cols[q]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for i in 0..rows {
                        alpha += a[i] * a[i];
                        beta += b[i] * b[i];
                        gamma += a[i] * b[i];
                    }
                    (alpha, beta, gamma)
                };
                if gamma == 0.0 || alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let cosine = gamma.abs() / (alpha * beta).sqrt();
                off = off.max(cosine);
                if cosine < JACOBI_TOLERANCE {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut cols, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        if off < JACOBI_TOLERANCE {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "jacobi svd did not converge in {JACOBI_MAX_SWEEPS} sweeps"
        )));
    }

    let norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    let s_max = order.first().map(|&j| norms[j]).unwrap_or(0.0);
    let cutoff = s_max * 1e-13;
    let mut u = Mat::zeros(rows, n);
    let mut vt = Mat::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        if sigma > cutoff && sigma > 0.0 {
            for i in 0..rows {
                u[(i, k)] = cols[j][i] / sigma;
            }
            s.push(sigma);
        } else {
            s.push(0.0);
            missing.push(k);
        }
        for i in 0..n {
            vt[(k, i)] = v[j][i];
        }
    }
    complete_orthonormal_columns(&mut u, &missing);
    Ok(Svd { u, s, vt })
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let a = &mut left[p];
    let b = &mut right[0];
    for i in 0..a.len() {
        let x = a[i];
        let y = b[i];
        a[i] = c * x - s * y;
        b[i] = s * x + c * y;
    }
}

/// Fills the listed columns of `u` with unit vectors orthogonal to every other
/// column, by Gram–Schmidt over the standard basis.
fn complete_orthonormal_columns(u: &mut Mat, missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let rows = u.rows;
    let mut filled: Vec<usize> = (0..u.cols).filter(|j| !missing.contains(j)).collect();
    let mut candidate = 0;
    for &k in missing {
        while candidate < rows {
            let mut e = vec![0.0; rows];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for &j in &filled {
                    let proj: f64 = (0..rows).map(|i| u[(i, j)] * e[i]).sum();
                    for i in 0..rows {
                        e[i] -= proj * u[(i, j)];
                    }
                }
            }
            let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for i in 0..rows {
                    u[(i, k)] = e[i] / norm;
                }
                filled.push(k);
                break;
            }
        }
    }
}

/// Pivots below this fraction of the largest entry count as zero, so a
/// rank-deficient matrix is rejected rather than factored through roundoff.
pub const CHOLESKY_PIVOT_FLOOR: f64 = 1e-10;

/// Lower-triangular `l` with `l · lᵀ = m`.
pub fn cholesky(m: &Mat) -> Result<Mat> {
    if m.rows != m.cols {
        return Err(Error::Dimension(format!("cholesky of {}x{}", m.rows, m.cols)));
    }
    let scale = m.data.iter().fold(0f64, |a, v| a.max(v.abs())).max(1e-300);
    if m.max_asymmetry() > 1e-9 * scale {
        return Err(Error::Input("cholesky input is not symmetric".into()));
    }
    let n = m.rows;
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > CHOLESKY_PIVOT_FLOOR * scale) || !d.is_finite() {
            return Err(Error::Definiteness { pivot: j, value: d });
        }
        let dj = d.sqrt();
        l[(j, j)] = dj;
        for i in j + 1..n {
            let mut v = m[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / dj;
        }
    }
    Ok(l)
}

/// Inverse of a lower-triangular matrix by forward substitution.
pub fn lower_triangular_inverse(l: &Mat) -> Result<Mat> {
    let n = l.rows;
    if l.cols != n {
        return Err(Error::Dimension(format!("triangular inverse of {}x{}", n, l.cols)));
    }
    let mut inv = Mat::zeros(n, n);
    for col in 0..n {
        for i in col..n {
            let mut v = if i == col { 1.0 } else { 0.0 };
            for k in col..i {
                v -= l[(i, k)] * inv[(k, col)];
            }
            let d = l[(i, i)];
            if d == 0.0 {
                return Err(Error::Numeric(format!("zero on the diagonal at {i}")));
            }
            inv[(i, col)] = v / d;
        }
    }
    Ok(inv)
}

/// SVD of a binary32 matrix; returns `(U, S, V)` with `V` laid out `p × cols`.
pub fn svd_tensor(m: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let d = svd(&Mat::from_tensor(m)?)?;
    let s = Tensor::new(vec![d.s.len()], d.s.iter().map(|&v| v as f32).collect())?;
    Ok((d.u.to_tensor(), s, d.vt.to_tensor()))
}

pub fn cholesky_tensor(m: &Tensor) -> Result<Tensor> {
    Ok(cholesky(&Mat::from_tensor(m)?)?.to_tensor())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Gaussian, SeedStream};

    fn random(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut g = Gaussian::new(SeedStream::new(seed));
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| g.sample()).collect()).unwrap()
    }

    fn orthonormal_cols(u: &Mat) -> f64 {
        let g = u.transpose().matmul(u).unwrap();
        g.sub(&Mat::eye(u.cols())).data().iter().fold(0f64, |a, v| a.max(v.abs()))
    }

    #[test]
    fn identity_and_diagonal() {
        let d = svd(&Mat::eye(3)).unwrap();
        assert_eq!(d.s, vec![1.0, 1.0, 1.0]);
        let d = svd(&Mat::from_diag(&[3.0, 1.0])).unwrap();
        assert_eq!(d.s, vec![3.0, 1.0]);
        let d = svd(&Mat::from_diag(&[1.0, 3.0])).unwrap();
        assert_eq!(d.s, vec![3.0, 1.0]);
    }

    #[test]
    fn random_reconstruction_and_orthonormality() {
        for (r, c, seed) in [(6, 4, 1), (4, 6, 2), (9, 9, 3), (1, 5, 4)] {
            let m = random(r, c, seed);
            let d = svd(&m).unwrap();
            let rel = d.reconstruct().sub(&m).frobenius() / m.frobenius();
            assert!(rel < 1e-12, "rel {rel}");
            assert!(orthonormal_cols(&d.u) < 1e-10);
            assert!(orthonormal_cols(&d.vt.transpose()) < 1e-10);
            assert!(d.s.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn rank_deficient_still_orthonormal() {
        let a = random(5, 2, 11);
        let m = a.matmul(&a.transpose()).unwrap(); // rank 2, 5x5
        let d = svd(&m).unwrap();
        assert!(d.s[2] < 1e-10 * d.s[0]);
        assert!(orthonormal_cols(&d.u) < 1e-8);
        assert!(d.reconstruct().sub(&m).frobenius() < 1e-10 * m.frobenius());
    }

    #[test]
    fn zero_matrix() {
        let d = svd(&Mat::zeros(3, 2)).unwrap();
        assert_eq!(d.s, vec![0.0, 0.0]);
        assert!(orthonormal_cols(&d.u) < 1e-12);
    }

    #[test]
    fn rejects_non_finite() {
        let mut m = Mat::eye(2);
        m[(0, 1)] = f64::NAN;
        assert!(svd(&m).is_err());
    }

    #[test]
    fn cholesky_cases() {
        assert_eq!(cholesky(&Mat::eye(3)).unwrap(), Mat::eye(3));
        let m = Mat::from_vec(2, 2, vec![4.0, 2.0, 2.0, 3.0]).unwrap();
        let l = cholesky(&m).unwrap();
        assert_eq!(l[(0, 0)], 2.0);
        assert_eq!(l[(0, 1)], 0.0);
        assert_eq!(l[(1, 0)], 1.0);
        assert!((l[(1, 1)] - 2f64.sqrt()).abs() < 1e-15);

        let x = random(4, 10, 5);
        let g = x.matmul(&x.transpose()).unwrap();
        let l = cholesky(&g).unwrap();
        let back = l.matmul(&l.transpose()).unwrap();
        assert!(back.sub(&g).frobenius() / g.frobenius() < 1e-12);
    }

    #[test]
    fn cholesky_rejects_indefinite_and_asymmetric() {
        let m = Mat::from_vec(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(matches!(cholesky(&m), Err(Error::Definiteness { pivot: 1, .. })));
        let m = Mat::from_vec(2, 2, vec![1.0, 0.5, 0.0, 1.0]).unwrap();
        assert!(matches!(cholesky(&m), Err(Error::Input(_))));
    }

    #[test]
    fn cholesky_then_triangular_inverse_is_identity() {
        let x = random(6, 20, 8);
        let g = x.matmul(&x.transpose()).unwrap();
        let l = cholesky(&g).unwrap();
        let inv = lower_triangular_inverse(&l).unwrap();
        let id = l.matmul(&inv).unwrap();
        assert!(id.sub(&Mat::eye(6)).data().iter().all(|v| v.abs() < 1e-5));
    }

    #[test]
    fn tensor_wrappers() {
        let m = Tensor::from_rows(&[&[3.0, 0.0], &[0.0, 1.0]]);
        let (u, s, v) = svd_tensor(&m).unwrap();
        assert_eq!(s.data(), &[3.0, 1.0]);
        assert_eq!(u.shape(), &[2, 2]);
        assert_eq!(v.shape(), &[2, 2]);
        let l = cholesky_tensor(&Tensor::from_rows(&[&[4.0, 2.0], &[2.0, 3.0]])).unwrap();
        assert_eq!(l.data()[0], 2.0);
    }
}
