//! Dense row-major `f64` tensors.

use crate::error::{Error, Result};

/// Dense row-major real array. The data length always equals the product of
/// the shape extents.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// `[n, example_shape..]` batch. Unlike [`Tensor::new`], `n` may be 0.
    pub fn batch(n: usize, example_shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if n > 0 {
            let mut shape = vec![n];
            shape.extend_from_slice(example_shape);
            return Self::new(shape, data);
        }
        if !data.is_empty() || example_shape.contains(&0) {
            return Err(Error::Shape(format!(
                "empty batch of {example_shape:?} with {} values",
                data.len()
            )));
        }
        let mut shape = vec![0];
        shape.extend_from_slice(example_shape);
        Ok(Self { shape, data })
    }

    /// Number of entries along the leading axis.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Slice of the `i`-th entry along the leading axis.
    pub fn row(&self, i: usize) -> &[f64] {
        let stride = self.data.len() / self.rows().max(1);
        &self.data[i * stride..(i + 1) * stride]
    }

    /// Stack equally-shaped examples along a new leading axis.
    pub fn stack(examples: &[&[f64]], example_shape: &[usize]) -> Result<Self> {
        let per: usize = example_shape.iter().product();
        let mut data = Vec::with_capacity(per * examples.len());
        for e in examples {
            if e.len() != per {
                return Err(Error::Shape(format!(
                    "example of length {} does not match shape {example_shape:?}",
                    e.len()
                )));
            }
            data.extend_from_slice(e);
        }
        let mut shape = vec![examples.len()];
        shape.extend_from_slice(example_shape);
        Self::new(shape, data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Pairwise summation of equally sized vectors in a fixed order, so the
/// result does not depend on how the inputs were produced.
pub(crate) fn pairwise_sum(mut parts: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    if parts.is_empty() {
        return vec![0.0; len];
    }
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop().unwrap()
}
