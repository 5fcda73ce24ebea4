//! Dense row-major matrices of `f64` with the kernels the tape records.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("data length {got} does not match shape {rows}x{cols}")]
    LengthMismatch { rows: usize, cols: usize, got: usize },
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("{op}: shapes {lr}x{lc} and {rr}x{rc} are incompatible")]
    ShapeMismatch {
        op: &'static str,
        lr: usize,
        lc: usize,
        rr: usize,
        rc: usize,
    },
    #[error("{op}: expected {expected}, got {rows}x{cols}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        rows: usize,
        cols: usize,
    },
    #[error("index ({r},{c}) out of bounds for {rows}x{cols}")]
    OutOfBounds {
        r: usize,
        c: usize,
        rows: usize,
        cols: usize,
    },
}

/// Two-dimensional tensor, row-major. Construction rejects NaN and infinities
/// so every tensor in a graph is finite by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::LengthMismatch {
                rows,
                cols,
                got: data.len(),
            });
        }
        for (index, &value) in data.iter().enumerate() {
            if !value.is_finite() {
                return Err(TensorError::NonFinite { index, value });
            }
        }
        Ok(Self { rows, cols, data })
    }

    /// Internal constructor for kernel outputs. Callers guarantee the length;
    /// finiteness of outputs follows from finite inputs for every kernel here
    /// except overflow in products, which training catches at the loss check.
    pub(crate) fn raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Result<Self, TensorError> {
        Self::new(rows, cols, vec![value; rows * cols])
    }

    pub fn scalar(value: f64) -> Result<Self, TensorError> {
        Self::new(1, 1, vec![value])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(TensorError::LengthMismatch {
                    rows: r,
                    cols: c,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(r, c, data)
    }

    pub fn from_column(values: &[f64]) -> Result<Self, TensorError> {
        Self::new(values.len(), 1, values.to_vec())
    }

    pub fn from_fn(
        rows: usize,
        cols: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self, TensorError> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::new(rows, cols, data)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> Result<f64, TensorError> {
        if r >= self.rows || c >= self.cols {
            return Err(TensorError::OutOfBounds {
                r,
                c,
                rows: self.rows,
                cols: self.cols,
            });
        }
        Ok(self.data[r * self.cols + c])
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) -> Result<(), TensorError> {
        if r >= self.rows || c >= self.cols {
            return Err(TensorError::OutOfBounds {
                r,
                c,
                rows: self.rows,
                cols: self.cols,
            });
        }
        self.data[r * self.cols + c] = value;
        Ok(())
    }

    /// Value of a 1x1 tensor.
    pub fn item(&self) -> Result<f64, TensorError> {
        if self.shape() != (1, 1) {
            return Err(TensorError::BadShape {
                op: "item",
                expected: "1x1",
                rows: self.rows,
                cols: self.cols,
            });
        }
        Ok(self.data[0])
    }

    pub fn column(&self, c: usize) -> Result<Vec<f64>, TensorError> {
        if c >= self.cols {
            return Err(TensorError::OutOfBounds {
                r: 0,
                c,
                rows: self.rows,
                cols: self.cols,
            });
        }
        Ok((0..self.rows)
            .map(|r| self.data[r * self.cols + c])
            .collect())
    }

    pub fn max_abs_diff(&self, other: &Tensor2) -> Result<f64, TensorError> {
        if self.shape() != other.shape() {
            return Err(self.shape_err("max_abs_diff", other));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    fn shape_err(&self, op: &'static str, other: &Tensor2) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            lr: self.rows,
            lc: self.cols,
            rr: other.rows,
            rc: other.cols,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor2 {
        Tensor2::raw(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(
        &self,
        other: &Tensor2,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor2, TensorError> {
        if self.shape() != other.shape() {
            return Err(self.shape_err(op, other));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor2::raw(self.rows, self.cols, data))
    }

    /// In-place `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor2) -> Result<(), TensorError> {
        if self.shape() != other.shape() {
            return Err(self.shape_err("axpy", other));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Tensor2) -> Result<Tensor2, TensorError> {
        if self.cols != other.rows {
            return Err(self.shape_err("matmul", other));
        }
        let mut out = Tensor2::zeros(self.rows, other.cols);
        gemm_into(1.0, self, false, other, false, 0.0, &mut out);
        Ok(out)
    }

    pub fn broadcast_add_row(&self, row: &Tensor2) -> Result<Tensor2, TensorError> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(self.shape_err("broadcast_add_row", row));
        }
        let mut data = self.data.clone();
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[r * self.cols + c] += row.data[c];
            }
        }
        Ok(Tensor2::raw(self.rows, self.cols, data))
    }

    /// Column sums as a 1 x cols tensor.
    pub fn col_sum(&self) -> Tensor2 {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c] += self.data[r * self.cols + c];
            }
        }
        Tensor2::raw(1, self.cols, out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Split along columns into the value half and the gate half.
    /// Errors when the column count is odd.
    pub fn glu(&self) -> Result<Tensor2, TensorError> {
        if self.cols % 2 != 0 {
            return Err(TensorError::BadShape {
                op: "glu",
                expected: "even column count",
                rows: self.rows,
                cols: self.cols,
            });
        }
        let h = self.cols / 2;
        let mut data = Vec::with_capacity(self.rows * h);
        for r in 0..self.rows {
            let base = r * self.cols;
            for c in 0..h {
                let a = self.data[base + c];
                let g = sigmoid(self.data[base + h + c]);
                data.push(a * g);
            }
        }
        Ok(Tensor2::raw(self.rows, h, data))
    }
}

/// `c = alpha * op(a) @ op(b) + beta * c` where `op` is optional transposition.
pub(crate) fn gemm_into(
    alpha: f64,
    a: &Tensor2,
    trans_a: bool,
    b: &Tensor2,
    trans_b: bool,
    beta: f64,
    c: &mut Tensor2,
) {
    let (m, k) = if trans_a {
        (a.cols, a.rows)
    } else {
        (a.rows, a.cols)
    };
    let (kb, n) = if trans_b {
        (b.cols, b.rows)
    } else {
        (b.rows, b.cols)
    };
    debug_assert_eq!(k, kb);
    debug_assert_eq!((c.rows, c.cols), (m, n));
    let (rsa, csa) = if trans_a {
        (1, a.cols as isize)
    } else {
        (a.cols as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, b.cols as isize)
    } else {
        (b.cols as isize, 1)
    };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
