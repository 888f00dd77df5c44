//! Shared value types: points in sample space and batches of samples.

use crate::error::{Error, Result};

/// A point in sample space, dimension 1 or 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    coords: Vec<f64>,
}

impl Point {
    /// Builds a point, rejecting non-finite coordinates and unsupported dimensions.
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() || coords.len() > 2 {
            return Err(Error::invalid(
                "point",
                format!("dimension must be 1 or 2, got {}", coords.len()),
            ));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite { context: "point coordinates" });
        }
        Ok(Point { coords })
    }

    /// One-dimensional point.
    pub fn scalar(x: f64) -> Result<Self> {
        Point::new(vec![x])
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// Internal constructor for values already known to be finite.
    pub(crate) fn from_parts(coords: Vec<f64>) -> Self {
        debug_assert!(coords.iter().all(|c| c.is_finite()));
        Point { coords }
    }
}

/// A batch of same-dimension samples stored flat, row-major.
#[derive(Debug, Clone)]
pub struct SampleBatch {
    dim: usize,
    data: Vec<f64>,
    /// Samples discarded because their trajectory left the integration domain.
    pub rejected: usize,
}

impl SampleBatch {
    pub fn new(dim: usize) -> Self {
        SampleBatch { dim, data: Vec::new(), rejected: 0 }
    }

    pub fn with_capacity(dim: usize, n: usize) -> Self {
        SampleBatch { dim, data: Vec::with_capacity(dim * n), rejected: 0 }
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

    pub fn push(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.dim, "sample row has wrong dimension");
        self.data.extend_from_slice(row);
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Extracts one coordinate across the batch.
    pub fn column(&self, j: usize) -> Vec<f64> {
        assert!(j < self.dim);
        self.data.iter().skip(j).step_by(self.dim).copied().collect()
    }

    /// The batch as a flat slice for 1-d data.
    pub fn scalars(&self) -> Result<&[f64]> {
        if self.dim != 1 {
            return Err(Error::DimensionMismatch { expected: 1, got: self.dim });
        }
        Ok(&self.data)
    }
}
