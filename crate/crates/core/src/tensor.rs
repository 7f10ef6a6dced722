//! Dense row-major tensors.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor with a dynamic shape.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= PREVIEW {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " {:?}..", &self.data[..PREVIEW])
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_shape(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::Shape {
            op,
            detail: format!("dimensions must be positive, got {shape:?}"),
        });
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        check_shape("Tensor::new", &shape)?;
        if numel(&shape) != data.len() {
            return Err(Error::Shape {
                op: "Tensor::new",
                detail: format!(
                    "shape {shape:?} needs {} values, got {}",
                    numel(&shape),
                    data.len()
                ),
            });
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor from `f64` values, converting to `T`.
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::lit(x)).collect())
    }

    pub fn scalar(x: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![x],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "tensor dimensions must be positive: {shape:?}"
        );
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = numel(shape);
        assert!(n > 0, "tensor dimensions must be positive: {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_shape("reshape", shape)?;
        if numel(shape) != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn ensure_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.ensure_same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|x| x * k)
    }

    /// `a * self + b * other`
    pub fn lin_comb(&self, a: T, other: &Self, b: T) -> Result<Self> {
        self.zip_map(other, "lin_comb", |x, y| a * x + b * y)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.ensure_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize_lossy(self.len())
    }

    /// Population standard deviation over all elements.
    pub fn std(&self) -> T {
        self.mean_std().1
    }

    /// Population mean and standard deviation over all elements (two-pass).
    pub fn mean_std(&self) -> (T, T) {
        let mean = self.mean();
        let var = self
            .data
            .iter()
            .map(|&x| (x - mean) * (x - mean))
            .sum::<T>()
            / T::from_usize_lossy(self.len());
        (mean, var.sqrt())
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.ensure_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.ensure_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn mse(&self, other: &Self) -> Result<T> {
        self.ensure_same_shape(other, "mse")?;
        let s: T = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        Ok(s / T::from_usize_lossy(self.len()))
    }

    pub fn cosine(&self, other: &Self) -> Result<T> {
        let d = self.dot(other)?;
        Ok(d / (self.norm() * other.norm()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::from_f64(x.as_f64()).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    /// Number of elements in one slice along the leading axis.
    fn outer_stride(&self) -> usize {
        numel(&self.shape[1..])
    }

    /// Slice `index` along the leading axis, dropping that axis.
    pub fn outer(&self, index: usize) -> Result<Self> {
        if self.rank() < 2 {
            return Err(Error::Shape {
                op: "outer",
                detail: format!("need rank >= 2, got {:?}", self.shape),
            });
        }
        if index >= self.shape[0] {
            return Err(Error::Argument(format!(
                "index {index} out of range for leading axis {}",
                self.shape[0]
            )));
        }
        let s = self.outer_stride();
        Ok(Self {
            shape: self.shape[1..].to_vec(),
            data: self.data[index * s..(index + 1) * s].to_vec(),
        })
    }

    pub fn outer_iter(&self) -> impl Iterator<Item = Self> + '_ {
        let s = self.outer_stride();
        let inner = self.shape[1..].to_vec();
        self.data.chunks(s).map(move |c| Self {
            shape: inner.clone(),
            data: c.to_vec(),
        })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Argument("cannot stack an empty list".into()))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        let mut data = Vec::with_capacity(numel(&shape));
        for t in items {
            first.ensure_same_shape(t, "stack")?;
            data.extend_from_slice(&t.data);
        }
        Ok(Self { shape, data })
    }

    /// Concatenates along axis 1 (channels of an NCHW batch or of a CHW image
    /// with a leading axis).
    pub fn concat_axis1(a: &Self, b: &Self) -> Result<Self> {
        if a.rank() < 2 || a.rank() != b.rank() || a.shape[0] != b.shape[0] || a.shape[2..] != b.shape[2..] {
            return Err(Error::Dimension {
                op: "concat_axis1",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let n = a.shape[0];
        let sa = a.outer_stride();
        let sb = b.outer_stride();
        let mut data = Vec::with_capacity(a.len() + b.len());
        for i in 0..n {
            data.extend_from_slice(&a.data[i * sa..(i + 1) * sa]);
            data.extend_from_slice(&b.data[i * sb..(i + 1) * sb]);
        }
        let mut shape = a.shape.clone();
        shape[1] += b.shape[1];
        Ok(Self { shape, data })
    }

    /// Inverse of [`Tensor::concat_axis1`]: splits axis 1 at `at`.
    pub fn split_axis1(&self, at: usize) -> Result<(Self, Self)> {
        if self.rank() < 2 || at == 0 || at >= self.shape[1] {
            return Err(Error::Argument(format!(
                "cannot split axis 1 of {:?} at {at}",
                self.shape
            )));
        }
        let n = self.shape[0];
        let inner = numel(&self.shape[2..]);
        let s = self.outer_stride();
        let (wa, wb) = (at * inner, s - at * inner);
        let mut da = Vec::with_capacity(n * wa);
        let mut db = Vec::with_capacity(n * wb);
        for i in 0..n {
            let row = &self.data[i * s..(i + 1) * s];
            da.extend_from_slice(&row[..wa]);
            db.extend_from_slice(&row[wa..]);
        }
        let mut sa = self.shape.clone();
        sa[1] = at;
        let mut sb = self.shape.clone();
        sb[1] -= at;
        Ok((Self { shape: sa, data: da }, Self { shape: sb, data: db }))
    }

    /// Adds a leading axis of length one.
    pub fn unsqueeze0(&self) -> Self {
        let mut shape = vec![1];
        shape.extend_from_slice(&self.shape);
        Self {
            shape,
            data: self.data.clone(),
        }
    }
}
