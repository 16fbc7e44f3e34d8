//! Minimal dense row-major containers used by the loss and objective code.

use alloc::vec;
use alloc::vec::Vec;

use crate::Error;

/// `rows × cols` row-major matrix. One row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, Error> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, Error> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape {
                    expected: cols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, and a 0-column matrix has no data anyway
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub(crate) fn check_same_shape(&self, other: &Matrix) -> Result<(), Error> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                expected: self.data.len(),
                found: other.data.len(),
            });
        }
        Ok(())
    }
}

/// A batch of `n` single-channel `height × width` spatial maps.
#[derive(Clone, Debug, PartialEq)]
pub struct MapBatch {
    n: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl MapBatch {
    pub fn new(n: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self, Error> {
        if data.len() != n * height * width {
            return Err(Error::Shape {
                expected: n * height * width,
                found: data.len(),
            });
        }
        Ok(Self {
            n,
            height,
            width,
            data,
        })
    }

    pub fn zeros(n: usize, height: usize, width: usize) -> Self {
        Self {
            n,
            height,
            width,
            data: vec![0.0; n * height * width],
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn map(&self, i: usize) -> &[f64] {
        let sz = self.height * self.width;
        &self.data[i * sz..(i + 1) * sz]
    }

    pub fn map_mut(&mut self, i: usize) -> &mut [f64] {
        let sz = self.height * self.width;
        &mut self.data[i * sz..(i + 1) * sz]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn l2_norm(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}
