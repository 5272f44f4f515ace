use crate::error::{check_dim, Result, VdtError};
use crate::scalar::Scalar;

/// A set of `len` points in `dim` dimensions stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Points<T> {
    dim: usize,
    data: Vec<T>,
}

impl<T: Scalar> Points<T> {
    pub fn new(dim: usize, data: Vec<T>) -> Result<Self> {
        if dim == 0 {
            return Err(VdtError::Input("point dimension must be positive".into()));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(VdtError::Input(format!(
                "{} coordinates do not form whole {dim}-dimensional points",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn zeros(dim: usize, len: usize) -> Self {
        Self { dim, data: vec![T::zero(); dim * len] }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            check_dim("point row", dim, r.as_ref().len())?;
            data.extend(r.as_ref().iter().map(|&v| T::of(v)));
        }
        Self::new(dim.max(1), data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Points gathered in the order of `indices`.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self { dim: self.dim, data }
    }

    pub fn cast<U: Scalar>(&self) -> Points<U> {
        Points { dim: self.dim, data: self.data.iter().map(|v| U::of(v.as_f64())).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for r in self.rows() {
            for (acc, v) in m.iter_mut().zip(r) {
                *acc += v.as_f64();
            }
        }
        let n = self.len().max(1) as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }
}

/// Points with optional integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub points: Points<T>,
    pub labels: Option<Vec<usize>>,
}

impl<T: Scalar> Sample<T> {
    pub fn unlabeled(points: Points<T>) -> Self {
        Self { points, labels: None }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub(crate) fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| {
        let d = x - y;
        acc + d * d
    })
}

pub(crate) fn norm<T: Scalar>(a: &[T]) -> T {
    a.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt()
}
