//! Dense vector and matrix helpers shared by the encoders, the mapping
//! network and the objectives.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

#[inline]
pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

pub fn normalized<T: Scalar>(a: &[T]) -> Vec<T> {
    let n = norm(a);
    if n == T::zero() {
        return a.to_vec();
    }
    a.iter().map(|&x| x / n).collect()
}

/// Vector-Jacobian product of `v -> v / |v|` at `v`, given the upstream
/// gradient with respect to the normalized output.
pub fn normalize_vjp<T: Scalar>(v: &[T], upstream: &[T]) -> Vec<T> {
    let n = norm(v);
    if n == T::zero() {
        return vec![T::zero(); v.len()];
    }
    let y_dot_g = dot(v, upstream) / n;
    v.iter().zip(upstream).map(|(&vi, &gi)| (gi - vi / n * y_dot_g) / n).collect()
}

pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn scale<T: Scalar>(alpha: T, x: &[T]) -> Vec<T> {
    x.iter().map(|&v| alpha * v).collect()
}

pub fn add<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

pub fn sub<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x - y).collect()
}

/// Elementwise mean of equally sized vectors.
pub fn mean_of<T: Scalar>(vs: &[Vec<T>]) -> Result<Vec<T>> {
    let first = vs.first().ok_or_else(|| Error::Shape("mean of an empty set of vectors".into()))?;
    let mut acc = vec![T::zero(); first.len()];
    for v in vs {
        if v.len() != acc.len() {
            return Err(Error::Shape(format!(
                "cannot average vectors of length {} and {}",
                acc.len(),
                v.len()
            )));
        }
        axpy(T::one(), v, &mut acc);
    }
    let n = T::lit(vs.len() as f64);
    Ok(acc.into_iter().map(|x| x / n).collect())
}

pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    dot(a, b) / (norm(a) * norm(b))
}

pub fn all_finite<T: Scalar>(v: &[T]) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `selfᵀ · y`
    pub fn t_matvec(&self, y: &[T]) -> Vec<T> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![T::zero(); self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr != T::zero() {
                axpy(yr, self.row(r), &mut out);
            }
        }
        out
    }

    /// `self += alpha · u vᵀ`
    pub fn add_outer(&mut self, alpha: T, u: &[T], v: &[T]) {
        for (r, &ur) in u.iter().enumerate() {
            let a = alpha * ur;
            if a == T::zero() {
                continue;
            }
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            axpy(a, v, row);
        }
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: crate::scalar::cast_vec(&self.data),
        }
    }
}

impl<T> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    fn index(&self, (r, c): (usize, usize)) -> &T {
        &self.data[r * self.cols + c]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        &mut self.data[r * self.cols + c]
    }
}

/// Gram-Schmidt orthonormalization of `k` random gaussian vectors in `R^n`,
/// optionally restricted to the coordinates in `allowed`.
pub fn random_orthonormal<R: Rng + ?Sized>(rng: &mut R, n: usize, k: usize, allowed: &[usize]) -> Vec<Vec<f64>> {
    assert!(k <= allowed.len(), "cannot draw {k} orthonormal vectors in {} dims", allowed.len());
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v = vec![0.0; n];
        for &i in allowed {
            let z: f64 = StandardNormal.sample(rng);
            v[i] = z;
        }
        for b in &basis {
            let p = dot(&v, b);
            axpy(-p, b, &mut v);
        }
        let nv = norm(&v);
        if nv > 1e-8 {
            basis.push(v.into_iter().map(|x| x / nv).collect());
        }
    }
    basis
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalize_vjp_matches_finite_differences() {
        let v: [f64; 3] = [0.3, -1.2, 0.7];
        let g = [0.5, 0.1, -0.4];
        let analytic = normalize_vjp(&v, &g);
        let h = 1e-6;
        for i in 0..3 {
            let mut p = v;
            let mut m = v;
            p[i] += h;
            m[i] -= h;
            let fd = (dot(&normalized(&p), &g) - dot(&normalized(&m), &g)) / (2.0 * h);
            assert!((fd - analytic[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn transpose_matvec_agrees_with_explicit_transpose() {
        let m = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(m.t_matvec(&[1.0, -1.0]), vec![-3.0, -3.0, -3.0]);
        assert_eq!(m.matvec(&[1.0, 0.0, 1.0]), vec![4.0, 10.0]);
    }

    #[test]
    fn orthonormal_basis_respects_allowed_coordinates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let allowed: Vec<usize> = (0..6).filter(|&i| i != 2).collect();
        let b = random_orthonormal(&mut rng, 6, 4, &allowed);
        for (i, u) in b.iter().enumerate() {
            assert_eq!(u[2], 0.0);
            for (j, w) in b.iter().enumerate() {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot(u, w) - expect).abs() < 1e-12);
            }
        }
    }
}
