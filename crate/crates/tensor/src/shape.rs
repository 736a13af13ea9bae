use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};

/// Extents of a tensor, outermost first. Rank is at most 4.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub const MAX_RANK: usize = 4;

    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.len() > Self::MAX_RANK {
            return Err(TensorError::invalid(
                "shape",
                format!("rank {} exceeds {}", dims.len(), Self::MAX_RANK),
            ));
        }
        Ok(Shape(dims.to_vec()))
    }

    pub fn scalar() -> Self {
        Shape(Vec::new())
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Interprets a rank-4 shape as `(batch, height, width, channels)`.
    pub fn nhwc(&self) -> Result<(usize, usize, usize, usize)> {
        match self.0[..] {
            [b, h, w, c] => Ok((b, h, w, c)),
            _ => Err(TensorError::shape("nhwc", "[b, h, w, c]", self)),
        }
    }

    /// Last extent, or 1 for a scalar.
    pub fn channels(&self) -> usize {
        self.0.last().copied().unwrap_or(1)
    }
}

impl From<[usize; 4]> for Shape {
    fn from(d: [usize; 4]) -> Self {
        Shape(d.to_vec())
    }
}

impl From<[usize; 3]> for Shape {
    fn from(d: [usize; 3]) -> Self {
        Shape(d.to_vec())
    }
}

impl From<[usize; 2]> for Shape {
    fn from(d: [usize; 2]) -> Self {
        Shape(d.to_vec())
    }
}

impl From<[usize; 1]> for Shape {
    fn from(d: [usize; 1]) -> Self {
        Shape(d.to_vec())
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}
