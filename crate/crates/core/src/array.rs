//! Dense 2-D arrays of `f64` in row-major order.
//!
//! Every quantity in the model is a vector or matrix, so there is no
//! general N-D tensor type. Row vectors are `1 x c`, column vectors `r x 1`.

use crate::error::{HcdError, Result};
use serde::{Deserialize, Serialize};

/// A dense row-major matrix. Immutable by convention once handed to a tape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Array {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Array {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Array {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Array {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Builds an array from row-major data. Errors if the length does not
    /// match `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(HcdError::Contract(format!(
                "array data length {} does not match shape {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Array { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(HcdError::Contract(format!(
                    "ragged rows: expected width {}, found {}",
                    c,
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Array {
            rows: r,
            cols: c,
            data,
        }
        .validated()
    }

    fn validated(self) -> Result<Self> {
        if self.data.len() != self.rows * self.cols {
            return Err(HcdError::Contract("inconsistent array shape".into()));
        }
        Ok(self)
    }

    pub fn row_vec(data: Vec<f64>) -> Self {
        Array {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn col_vec(data: Vec<f64>) -> Self {
        Array {
            rows: data.len(),
            cols: 1,
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut a = Array::zeros(n, n);
        for i in 0..n {
            a.data[i * n + i] = 1.0;
        }
        a
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise map into a new array.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Array {
        Array {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Numerically stable logistic sigmoid, strictly inside (0, 1).
///
/// Inputs beyond +-30 are saturated before exponentiation so the result can
/// never round to exactly 0 or 1.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    let x = x.clamp(-30.0, 30.0);
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`] on (0, 1).
#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Array::from_vec(2, 2, vec![1.0, 2.0, 3.0]).is_err());
        let a = Array::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(a.get(1, 0), 3.0);
    }

    #[test]
    fn sigmoid_is_strictly_inside_unit_interval() {
        for &x in &[-1e9, -700.0, -31.0, 0.0, 31.0, 700.0, 1e9] {
            let y = sigmoid(x);
            assert!(y > 0.0 && y < 1.0, "sigmoid({x}) = {y}");
        }
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(3.0_f64.ln()) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn logit_inverts_sigmoid() {
        for &p in &[0.01, 0.3, 0.5, 0.9, 0.99] {
            assert!((sigmoid(logit(p)) - p).abs() < 1e-12);
        }
    }
}
