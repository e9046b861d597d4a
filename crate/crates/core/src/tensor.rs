//! Dense tensors in batch × height × width × channels layout.
//!
//! Activations are rank 4, pooled/dense activations rank 2. Convolution
//! kernels are `kh × kw × cin × cout`, depthwise kernels `kh × kw × c`.
//! The element type is configuration-wide: `f32` for ordinary runs, `f64`
//! for gradient-oracle work where finite differences need the headroom.

use crate::error::{Error, Result};

/// Element types tensors can hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

/// Scalar element of a [`Tensor`]: `f32` or `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    fn from_f64c(v: f64) -> Self {
        Self::from_f64(v).expect("literal out of range")
    }

    fn to_f64c(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;
}

/// Contiguous row-major dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n = checked_len(&shape)?;
        if n != data.len() {
            return Err(Error::op(
                "tensor",
                format!("shape {:?} implies {} elements, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = checked_len(&shape).expect("shape overflow");
        Tensor {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = checked_len(&shape).expect("shape overflow");
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Dimension `i` of the shape.
    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub fn fill(&mut self, value: T) {
        self.data.fill(value);
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n = checked_len(&shape)?;
        if n != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Flat offset of rank-4 index (n, y, x, c).
    #[inline(always)]
    pub fn off4(&self, n: usize, y: usize, x: usize, c: usize) -> usize {
        debug_assert_eq!(self.rank(), 4);
        ((n * self.shape[1] + y) * self.shape[2] + x) * self.shape[3] + c
    }

    #[inline(always)]
    pub fn at4(&self, n: usize, y: usize, x: usize, c: usize) -> T {
        self.data[self.off4(n, y, x, c)]
    }

    #[inline(always)]
    pub fn at2(&self, r: usize, c: usize) -> T {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn set4(&mut self, n: usize, y: usize, x: usize, c: usize, v: T) {
        let off = self.off4(n, y, x, c);
        self.data[off] = v;
    }

    pub fn set2(&mut self, r: usize, c: usize, v: T) {
        debug_assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        self.data[r * cols + c] = v;
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape != other.shape {
            return Err(Error::shape("add", &self.shape, &other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// `self += other` elementwise.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add_assign", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Debug-mode guard: forward kernels must not produce NaN/Inf from
    /// finite inputs.
    #[inline]
    pub fn debug_check_finite(&self, op: &str) {
        debug_assert!(self.all_finite(), "{op}: non-finite output");
    }

    /// Cast elementwise to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64c(v.to_f64c())).collect(),
        }
    }

    /// Slice `lo..hi` of the last dimension.
    pub fn slice_last(&self, lo: usize, hi: usize) -> Result<Tensor<T>> {
        let last = *self.shape.last().ok_or_else(|| Error::op("slice_last", "rank-0 tensor"))?;
        if lo >= hi || hi > last {
            return Err(Error::op(
                "slice_last",
                format!("range {lo}..{hi} out of bounds for last dim {last}"),
            ));
        }
        let width = hi - lo;
        let rows = self.data.len() / last;
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            let base = r * last;
            data.extend_from_slice(&self.data[base + lo..base + hi]);
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = width;
        Ok(Tensor { shape, data })
    }

    /// Concatenate along the last dimension; all leading dims must match.
    pub fn concat_last(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.rank() != other.rank()
            || self.rank() == 0
            || self.shape[..self.rank() - 1] != other.shape[..other.rank() - 1]
        {
            return Err(Error::shape("concat_last", &self.shape, &other.shape));
        }
        let a = *self.shape.last().unwrap();
        let b = *other.shape.last().unwrap();
        let rows = self.data.len() / a;
        let mut data = Vec::with_capacity(rows * (a + b));
        for r in 0..rows {
            data.extend_from_slice(&self.data[r * a..(r + 1) * a]);
            data.extend_from_slice(&other.data[r * b..(r + 1) * b]);
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = a + b;
        Ok(Tensor { shape, data })
    }

    /// `self[..., 0..w] += other` where `w` is `other`'s last dim.
    pub fn add_into_leading_channels(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.rank() != other.rank() || self.rank() == 0 {
            return Err(Error::shape("add_into_leading_channels", &self.shape, &other.shape));
        }
        let last = *self.shape.last().unwrap();
        let w = *other.shape.last().unwrap();
        if w > last || self.shape[..self.rank() - 1] != other.shape[..other.rank() - 1] {
            return Err(Error::shape("add_into_leading_channels", &self.shape, &other.shape));
        }
        let rows = self.data.len() / last;
        for r in 0..rows {
            let base = r * last;
            for (dst, &src) in self.data[base..base + w].iter_mut().zip(&other.data[r * w..(r + 1) * w]) {
                *dst = *dst + src;
            }
        }
        Ok(())
    }

    /// Copy rows `rows` of a batch tensor (leading dim indexes samples)
    /// into a new tensor with leading dim `rows.len()`.
    pub fn gather_rows(&self, rows: &[usize]) -> Tensor<T> {
        assert!(self.rank() >= 1);
        let row_len: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        let mut data = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            let start = r * row_len;
            data.extend_from_slice(&self.data[start..start + row_len]);
        }
        Tensor { shape, data }
    }
}

fn checked_len(shape: &[usize]) -> Result<usize> {
    let mut n: usize = 1;
    for &d in shape {
        if d == 0 {
            return Err(Error::op("tensor", format!("zero dim in shape {shape:?}")));
        }
        n = n
            .checked_mul(d)
            .ok_or_else(|| Error::op("tensor", format!("shape {shape:?} overflows")))?;
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        let err = Tensor::new(vec![2, 3], vec![0.0f32; 5]).unwrap_err();
        assert!(err.to_string().contains("6 elements"));
    }

    #[test]
    fn off4_is_nhwc() {
        let t = Tensor::<f32>::zeros(vec![2, 3, 4, 5]);
        assert_eq!(t.off4(0, 0, 0, 0), 0);
        assert_eq!(t.off4(0, 0, 0, 1), 1);
        assert_eq!(t.off4(0, 0, 1, 0), 5);
        assert_eq!(t.off4(0, 1, 0, 0), 20);
        assert_eq!(t.off4(1, 0, 0, 0), 60);
    }

    #[test]
    fn gather_rows_copies_samples() {
        let t = Tensor::new(vec![3, 2], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let g = t.gather_rows(&[2, 0]);
        assert_eq!(g.shape(), &[2, 2]);
        assert_eq!(g.data(), &[5.0, 6.0, 1.0, 2.0]);
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
    }
}
