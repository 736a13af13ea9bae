use crate::error::{Result, TensorError};
use crate::{Scalar, Shape};

/// Dense row-major tensor. Rank-4 tensors use the `(batch, height, width, channels)` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: impl Into<Shape>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.numel() != data.len() {
            return Err(TensorError::DataLength {
                op: "from_vec",
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Shape>, value: T) -> Self {
        let shape = shape.into();
        let data = vec![value; shape.numel()];
        Tensor { shape, data }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Shape>) -> Result<Self> {
        let shape = shape.into();
        if shape.numel() != self.data.len() {
            return Err(TensorError::DataLength {
                op: "reshape",
                shape,
                len: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(TensorError::shape("zip_map", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::shape("add_assign", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Sum of absolute values divided by the element count.
    pub fn l1_per_dim(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let s: f64 = self.data.iter().map(|x| x.as_f64().abs()).sum();
        s / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
        }
    }

    /// Flat offset of `(b, y, x, c)` in a rank-4 tensor.
    #[inline]
    pub fn offset4(&self, b: usize, y: usize, x: usize, c: usize) -> usize {
        let d = self.shape.dims();
        ((b * d[1] + y) * d[2] + x) * d[3] + c
    }

    #[inline]
    pub fn at4(&self, b: usize, y: usize, x: usize, c: usize) -> T {
        self.data[self.offset4(b, y, x, c)]
    }

    /// Copies batch entry `index` out of a rank-4 tensor as a batch of one.
    pub fn batch_entry(&self, index: usize) -> Result<Self> {
        let (b, h, w, c) = self.shape.nhwc()?;
        if index >= b {
            return Err(TensorError::invalid(
                "batch_entry",
                format!("index {index} out of {b}"),
            ));
        }
        let n = h * w * c;
        Ok(Tensor {
            shape: Shape::from([1, h, w, c]),
            data: self.data[index * n..(index + 1) * n].to_vec(),
        })
    }

    /// Stacks batch-of-one (or larger) rank-4 tensors along the batch axis.
    pub fn stack_batch(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid("stack_batch", "no tensors"))?;
        let (_, h, w, c) = first.shape.nhwc()?;
        let mut total = 0;
        let mut data = Vec::new();
        for p in parts {
            let (b, ph, pw, pc) = p.shape.nhwc()?;
            if (ph, pw, pc) != (h, w, c) {
                return Err(TensorError::shape("stack_batch", &first.shape, &p.shape));
            }
            total += b;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: Shape::from([total, h, w, c]),
            data,
        })
    }
}
