//! Dense real tensors and the multilinear primitives the fusion layers are
//! built from.
//!
//! Storage is generalized column-major: the first index varies fastest, so
//! element `(i_1, ..., i_N)` (0-based) lives at `sum_k i_k * prod_{m<k} I_m`.
//! With this layout the mode-n unfolding follows the Kolda & Bader convention,
//! and the mode-1 unfolding of a CP tensor is `A1 (A3 ⊙ A2)^T`.
//!
//! Modes are 0-based throughout the API: the audio mode of a fusion tensor is
//! mode 1, the identity mode is mode 2.

use std::fmt;

use crate::error::{Error, Result};

/// Dimensions `(I_1, ..., I_N)` of a tensor. Always `N >= 1` and every
/// `I_n >= 1`.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(Error::InvalidShape {
                dims,
                reason: "order must be at least 1",
            });
        }
        if dims.contains(&0) {
            return Err(Error::InvalidShape {
                dims,
                reason: "every dimension must be positive",
            });
        }
        if dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).is_none() {
            return Err(Error::InvalidShape {
                dims,
                reason: "element count overflows",
            });
        }
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn order(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn dim(&self, mode: usize) -> usize {
        self.0[mode]
    }

    /// Column-major strides.
    pub(crate) fn strides(&self) -> Vec<usize> {
        let mut strides = Vec::with_capacity(self.0.len());
        let mut acc = 1;
        for &d in &self.0 {
            strides.push(acc);
            acc *= d;
        }
        strides
    }

    /// Split around `mode`: (product of dims before, dim at mode, product after).
    fn split(&self, mode: usize) -> (usize, usize, usize) {
        let left = self.0[..mode].iter().product();
        let right = self.0[mode + 1..].iter().product();
        (left, self.0[mode], right)
    }

    fn check_mode(&self, mode: usize) -> Result<()> {
        if mode >= self.order() {
            return Err(Error::ModeOutOfRange {
                mode,
                order: self.order(),
            });
        }
        Ok(())
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// An order-N array of `f64` in first-index-fastest layout.
///
/// Order-1 tensors double as vectors and order-2 tensors as matrices.
#[derive(Clone, PartialEq)]
pub struct DenseTensor {
    shape: Shape,
    data: Vec<f64>,
}

impl fmt::Debug for DenseTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DenseTensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl DenseTensor {
    /// Wraps flat column-major data. Rejects length mismatches and any NaN/Inf.
    pub fn from_flat(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::LengthMismatch {
                expected: shape.numel(),
                got: data.len(),
            });
        }
        if let Some(offset) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { offset });
        }
        Ok(DenseTensor { shape, data })
    }

    pub fn from_dims(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::from_flat(Shape::new(dims)?, data)
    }

    /// Internal constructor for results whose shape and finiteness follow
    /// from validated operands.
    pub(crate) fn from_parts(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        DenseTensor { shape, data }
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = vec![0.0; shape.numel()];
        Ok(DenseTensor { shape, data })
    }

    pub fn vector(values: &[f64]) -> Result<Self> {
        Self::from_dims(&[values.len()], values.to_vec())
    }

    /// Builds an `rows.len() x cols` matrix from row slices.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        let shape = Shape::new([nrows, ncols])?;
        let mut data = vec![0.0; nrows * ncols];
        for (i, row) in rows.iter().enumerate() {
            for (j, &x) in row.iter().enumerate() {
                data[i + nrows * j] = x;
            }
        }
        Self::from_flat(shape, data)
    }

    /// A single-column matrix.
    pub fn column(values: &[f64]) -> Result<Self> {
        Self::from_dims(&[values.len(), 1], values.to_vec())
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut t = Self::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i + n * i] = 1.0;
        }
        Ok(t)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn order(&self) -> usize {
        self.shape.order()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the flat storage. Callers are responsible for
    /// keeping entries finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.order() {
            return Err(Error::dims("index", self.dims(), index));
        }
        let mut offset = 0;
        let mut stride = 1;
        for (&i, &d) in index.iter().zip(self.dims()) {
            if i >= d {
                return Err(Error::dims("index", self.dims(), index));
            }
            offset += i * stride;
            stride *= d;
        }
        Ok(offset)
    }

    /// Element at a 0-based multi-index.
    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn set(&mut self, index: &[usize], value: f64) -> Result<()> {
        let offset = self.offset(index)?;
        self.data[offset] = value;
        Ok(())
    }

    /// Matrix element `(i, j)` without bounds beyond the slice check.
    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i + self.dims()[0] * j]
    }

    pub fn nrows(&self) -> usize {
        self.dims()[0]
    }

    pub fn ncols(&self) -> usize {
        self.dims().get(1).copied().unwrap_or(1)
    }

    /// Column `j` of a matrix as a contiguous slice.
    pub fn col(&self, j: usize) -> &[f64] {
        let r = self.nrows();
        &self.data[r * j..r * (j + 1)]
    }

    fn expect_order(&self, op: &'static str, order: usize) -> Result<()> {
        if self.order() != order {
            return Err(Error::OrderMismatch {
                op,
                expected: order,
                got: self.order(),
            });
        }
        Ok(())
    }

    /// Mode-n unfolding `X_(n)` of shape `I_n x prod_{k != n} I_k`.
    pub fn unfold(&self, mode: usize) -> Result<DenseTensor> {
        self.shape.check_mode(mode)?;
        let (left, dim, right) = self.shape.split(mode);
        let cols = left * right;
        let mut out = vec![0.0; self.data.len()];
        for r in 0..right {
            for i in 0..dim {
                let src = left * (i + dim * r);
                for l in 0..left {
                    out[i + dim * (l + left * r)] = self.data[src + l];
                }
            }
        }
        Ok(DenseTensor::from_parts(Shape::new([dim, cols])?, out))
    }

    /// Inverse of [`unfold`](Self::unfold): reshapes a mode-n unfolding back
    /// into a tensor of `shape`.
    pub fn fold(matrix: &DenseTensor, mode: usize, shape: &Shape) -> Result<DenseTensor> {
        matrix.expect_order("fold", 2)?;
        shape.check_mode(mode)?;
        let (left, dim, right) = shape.split(mode);
        let expected = [dim, left * right];
        if matrix.dims() != expected {
            return Err(Error::dims("fold", &expected, matrix.dims()));
        }
        let mut out = vec![0.0; matrix.data.len()];
        for r in 0..right {
            for i in 0..dim {
                let dst = left * (i + dim * r);
                for l in 0..left {
                    out[dst + l] = matrix.data[i + dim * (l + left * r)];
                }
            }
        }
        Ok(DenseTensor::from_parts(shape.clone(), out))
    }

    /// Mode-n vector product `X ×_n v`, an order `N-1` tensor.
    ///
    /// Contracting an order-1 tensor yields a length-1 vector holding the
    /// scalar.
    pub fn mode_n_vec_product(&self, mode: usize, v: &[f64]) -> Result<DenseTensor> {
        self.shape.check_mode(mode)?;
        let (left, dim, right) = self.shape.split(mode);
        if v.len() != dim {
            return Err(Error::dims("mode_n_vec_product", &[dim], &[v.len()]));
        }
        let mut out = vec![0.0; left * right];
        for r in 0..right {
            let dst = &mut out[left * r..left * (r + 1)];
            for (i, &vi) in v.iter().enumerate() {
                let src = &self.data[left * (i + dim * r)..left * (i + dim * r + 1)];
                for (o, &x) in dst.iter_mut().zip(src) {
                    *o += x * vi;
                }
            }
        }
        let mut dims: Vec<usize> = self.dims().to_vec();
        dims.remove(mode);
        if dims.is_empty() {
            dims.push(1);
        }
        Ok(DenseTensor::from_parts(Shape::new(dims)?, out))
    }

    /// Mode-n matrix product `X ×_n U` with `U` of shape `J x I_n`, computed
    /// through the unfolding: `(X ×_n U)_(n) = U X_(n)`.
    pub fn mode_n_matrix_product(&self, mode: usize, u: &DenseTensor) -> Result<DenseTensor> {
        self.shape.check_mode(mode)?;
        u.expect_order("mode_n_matrix_product", 2)?;
        if u.ncols() != self.shape.dim(mode) {
            return Err(Error::dims(
                "mode_n_matrix_product",
                &[u.nrows(), self.shape.dim(mode)],
                u.dims(),
            ));
        }
        let product = u.matmul(&self.unfold(mode)?)?;
        let mut dims = self.dims().to_vec();
        dims[mode] = u.nrows();
        DenseTensor::fold(&product, mode, &Shape::new(dims)?)
    }

    pub fn transpose(&self) -> Result<DenseTensor> {
        self.expect_order("transpose", 2)?;
        let (r, c) = (self.nrows(), self.ncols());
        let mut out = vec![0.0; r * c];
        for j in 0..c {
            for i in 0..r {
                out[j + c * i] = self.data[i + r * j];
            }
        }
        Ok(DenseTensor::from_parts(Shape::new([c, r])?, out))
    }

    pub fn matmul(&self, rhs: &DenseTensor) -> Result<DenseTensor> {
        self.expect_order("matmul", 2)?;
        rhs.expect_order("matmul", 2)?;
        let (m, k) = (self.nrows(), self.ncols());
        if rhs.nrows() != k {
            return Err(Error::dims("matmul", &[k, rhs.ncols()], rhs.dims()));
        }
        let n = rhs.ncols();
        let mut out = vec![0.0; m * n];
        for j in 0..n {
            let dst = &mut out[m * j..m * (j + 1)];
            for p in 0..k {
                let b = rhs.data[p + k * j];
                if b == 0.0 {
                    continue;
                }
                for (o, &a) in dst.iter_mut().zip(self.col(p)) {
                    *o += a * b;
                }
            }
        }
        Ok(DenseTensor::from_parts(Shape::new([m, n])?, out))
    }

    /// `A x` for a matrix `A`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.expect_order("matvec", 2)?;
        if x.len() != self.ncols() {
            return Err(Error::dims("matvec", &[self.ncols()], &[x.len()]));
        }
        let mut out = vec![0.0; self.nrows()];
        for (j, &xj) in x.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.col(j)) {
                *o += a * xj;
            }
        }
        Ok(out)
    }

    /// `A^T x` for a matrix `A`.
    pub fn t_matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.expect_order("t_matvec", 2)?;
        if x.len() != self.nrows() {
            return Err(Error::dims("t_matvec", &[self.nrows()], &[x.len()]));
        }
        Ok((0..self.ncols())
            .map(|j| self.col(j).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.squared_norm().sqrt()
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    /// Copies the sub-block starting at `start` with extents `dims`.
    pub fn slice(&self, start: &[usize], dims: &[usize]) -> Result<DenseTensor> {
        if start.len() != self.order()
            || dims.len() != self.order()
            || start.iter().zip(dims).zip(self.dims()).any(|((s, n), d)| s + n > *d)
        {
            return Err(Error::dims("slice", self.dims(), dims));
        }
        let shape = Shape::new(dims)?;
        let strides = self.shape.strides();
        let mut out = Vec::with_capacity(shape.numel());
        let mut idx = vec![0usize; dims.len()];
        for _ in 0..shape.numel() {
            let offset: usize = idx
                .iter()
                .zip(start)
                .zip(&strides)
                .map(|((i, s), st)| (i + s) * st)
                .sum();
            out.push(self.data[offset]);
            for (i, &d) in idx.iter_mut().zip(dims) {
                *i += 1;
                if *i < d {
                    break;
                }
                *i = 0;
            }
        }
        Ok(DenseTensor::from_parts(shape, out))
    }
}

/// Rank-1 tensor `v_1 ∘ v_2 ∘ ... ∘ v_N`.
pub fn outer_product(vs: &[&[f64]]) -> Result<DenseTensor> {
    if vs.is_empty() {
        return Err(Error::Empty("outer_product"));
    }
    let shape = Shape::new(vs.iter().map(|v| v.len()).collect::<Vec<_>>())?;
    let mut data = vec![1.0];
    for v in vs {
        let mut next = Vec::with_capacity(data.len() * v.len());
        for &x in v.iter() {
            next.extend(data.iter().map(|&p| p * x));
        }
        data = next;
    }
    Ok(DenseTensor::from_parts(shape, data))
}

/// Kronecker product of two matrices; block `(i, j)` is `A(i, j) B`.
pub fn kronecker(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    a.expect_order("kronecker", 2)?;
    b.expect_order("kronecker", 2)?;
    let (ia, ja) = (a.nrows(), a.ncols());
    let (ib, jb) = (b.nrows(), b.ncols());
    let rows = ia * ib;
    let mut out = vec![0.0; rows * ja * jb];
    for j1 in 0..ja {
        for j2 in 0..jb {
            let col = j1 * jb + j2;
            for i1 in 0..ia {
                let s = a.at(i1, j1);
                for i2 in 0..ib {
                    out[(i1 * ib + i2) + rows * col] = s * b.at(i2, j2);
                }
            }
        }
    }
    Ok(DenseTensor::from_parts(Shape::new([rows, ja * jb])?, out))
}

/// Khatri-Rao (columnwise Kronecker) product: column `k` is `A(:,k) ⊗ B(:,k)`.
pub fn khatri_rao(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    a.expect_order("khatri_rao", 2)?;
    b.expect_order("khatri_rao", 2)?;
    if a.ncols() != b.ncols() {
        return Err(Error::dims("khatri_rao", &[b.nrows(), a.ncols()], b.dims()));
    }
    let k = a.ncols();
    let rows = a.nrows() * b.nrows();
    let mut out = Vec::with_capacity(rows * k);
    for c in 0..k {
        for &x in a.col(c) {
            out.extend(b.col(c).iter().map(|&y| x * y));
        }
    }
    Ok(DenseTensor::from_parts(Shape::new([rows, k])?, out))
}

pub fn frobenius_norm(x: &DenseTensor) -> f64 {
    x.frobenius_norm()
}
