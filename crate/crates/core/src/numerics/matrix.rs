use crate::error::{Error, Result};
use crate::numerics::{Real, Rng};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

/// Dense vector. Peephole weights and biases live here.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector<T> {
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "Matrix::from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "Matrix::from_rows",
                    left: (rows.len(), cols),
                    right: (1, r.len()),
                });
            }
            data.extend(r.iter().map(|&v| T::of(v)));
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// Standard product `self · other`.
    pub fn matmul(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != other.rows {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm_nn_acc(
            &self.data,
            self.rows,
            self.cols,
            &other.data,
            other.cols,
            &mut out.data,
        );
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl<T: Real> Vector<T> {
    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![T::zero(); len],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Self { data }
    }

    pub fn from_f64(values: &[f64]) -> Self {
        Self {
            data: values.iter().map(|&v| T::of(v)).collect(),
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn sigmoid(&self) -> Self {
        Self::from_vec(self.data.iter().map(|&x| sigmoid(x)).collect())
    }

    pub fn tanh(&self) -> Self {
        Self::from_vec(self.data.iter().map(|&x| x.tanh()).collect())
    }

    pub fn hadamard(&self, other: &Vector<T>) -> Result<Self> {
        if self.len() != other.len() {
            return Err(Error::Shape {
                op: "hadamard",
                left: (self.len(), 1),
                right: (other.len(), 1),
            });
        }
        Ok(Self::from_vec(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a * b)
                .collect(),
        ))
    }
}

/// Logistic function, evaluated on the side that cannot overflow.
#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Matrix with entries i.i.d. uniform in `[-scale, scale]`.
pub fn uniform_init<T: Real>(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Matrix<T> {
    assert!(scale > 0.0, "uniform_init scale must be positive");
    let data = (0..rows * cols)
        .map(|_| T::of(rng.uniform_range(-scale, scale)))
        .collect();
    Matrix { rows, cols, data }
}

const LANES: usize = 8;

#[inline(always)]
fn reduce_lanes<T: Real>(acc: &[T; LANES]) -> T {
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

/// Inner product with a fixed eight-lane accumulation order.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    reduce_lanes(&acc) + tail
}

/// Four inner products of `a` against `b0..b3`, each bit-identical to `dot`.
#[inline]
fn dot4<T: Real>(a: &[T], b0: &[T], b1: &[T], b2: &[T], b3: &[T]) -> [T; 4] {
    let n = a.len();
    let full = n - n % LANES;
    let mut acc = [[T::zero(); LANES]; 4];
    let mut i = 0;
    while i < full {
        let x = &a[i..i + LANES];
        let y0 = &b0[i..i + LANES];
        let y1 = &b1[i..i + LANES];
        let y2 = &b2[i..i + LANES];
        let y3 = &b3[i..i + LANES];
        for l in 0..LANES {
            acc[0][l] += x[l] * y0[l];
            acc[1][l] += x[l] * y1[l];
            acc[2][l] += x[l] * y2[l];
            acc[3][l] += x[l] * y3[l];
        }
        i += LANES;
    }
    let mut tail = [T::zero(); 4];
    for j in full..n {
        tail[0] += a[j] * b0[j];
        tail[1] += a[j] * b1[j];
        tail[2] += a[j] * b2[j];
        tail[3] += a[j] * b3[j];
    }
    [
        reduce_lanes(&acc[0]) + tail[0],
        reduce_lanes(&acc[1]) + tail[1],
        reduce_lanes(&acc[2]) + tail[2],
        reduce_lanes(&acc[3]) + tail[3],
    ]
}

/// `out[m×n] += a[m×k] · bᵀ` where `b` is `n×k`.
///
/// Every output entry is one `dot` of two contiguous rows, so the value of
/// `out[i][j]` does not depend on `m`, `n` or the blocking.
pub fn gemm_nt_acc<T: Real>(a: &[T], m: usize, k: usize, b: &[T], n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    if k == 0 {
        return;
    }
    let n4 = n - n % 4;
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        let mut j = 0;
        while j < n4 {
            let r = dot4(
                ar,
                &b[j * k..(j + 1) * k],
                &b[(j + 1) * k..(j + 2) * k],
                &b[(j + 2) * k..(j + 3) * k],
                &b[(j + 3) * k..(j + 4) * k],
            );
            orow[j] += r[0];
            orow[j + 1] += r[1];
            orow[j + 2] += r[2];
            orow[j + 3] += r[3];
            j += 4;
        }
        for j in n4..n {
            orow[j] += dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`, accumulated over `k` in increasing order.
pub fn gemm_nn_acc<T: Real>(a: &[T], m: usize, k: usize, b: &[T], n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == T::zero() {
                continue;
            }
            axpy(s, &b[p * n..(p + 1) * n], orow);
        }
    }
}

/// `out[m×n] += aᵀ · b` where `a` is `k×m` and `b` is `k×n`, accumulated over
/// `k` in increasing order.
pub fn gemm_tn_acc<T: Real>(a: &[T], k: usize, m: usize, b: &[T], n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let s = a[p * m + i];
            if s == T::zero() {
                continue;
            }
            axpy(s, brow, &mut out[i * n..(i + 1) * n]);
        }
    }
}

/// `y += s · x`.
#[inline]
pub fn axpy<T: Real>(s: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}
