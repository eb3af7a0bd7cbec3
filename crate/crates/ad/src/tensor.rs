//! Dense row-major tensors.
//!
//! Elements are stored as `f64` regardless of precision. A single-precision
//! tensor holds values that are exactly representable as `f32`: every kernel
//! computes in `f64` and rounds its result once, so each operation returns the
//! correctly rounded `f32` result of the `f64` computation.

use std::fmt;

use crate::error::{AdError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Precision {
    Single,
    #[default]
    Double,
}

impl Precision {
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::Single => v as f32 as f64,
            Precision::Double => v,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Precision::Single => f.write_str("single"),
            Precision::Double => f.write_str("double"),
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    precision: Precision,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({:?}, {}, ", self.shape, self.precision)?;
        if self.data.len() <= 16 {
            write!(f, "{:?})", self.data)
        } else {
            write!(f, "{:?} ...)", &self.data[..16])
        }
    }
}

/// Splits a shape around `axis` into (outer, extent, inner) strides.
fn around_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(AdError::BadAxis {
            op,
            axis,
            shape: shape.to_vec(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>, precision: Precision) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AdError::ElementCount {
                shape,
                len: data.len(),
                expected,
            });
        }
        Ok(Self::from_raw(shape, data, precision))
    }

    /// Builds a tensor without a length check, rounding to `precision`.
    pub(crate) fn from_raw(shape: Vec<usize>, mut data: Vec<f64>, precision: Precision) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if precision == Precision::Single {
            for v in &mut data {
                *v = precision.round(*v);
            }
        }
        Self {
            shape,
            data,
            precision,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::new(shape.to_vec(), data, Precision::Double)
    }

    pub fn from_rows(rows: &[Vec<f64>], precision: Precision) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(AdError::ShapeMismatch {
                op: "from_rows",
                lhs: vec![cols],
                rhs: vec![bad.len()],
            });
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data, precision)
    }

    pub fn full(shape: &[usize], value: f64, precision: Precision) -> Self {
        let n = shape.iter().product();
        Self::from_raw(shape.to_vec(), vec![value; n], precision)
    }

    pub fn zeros(shape: &[usize], precision: Precision) -> Self {
        Self::full(shape, 0.0, precision)
    }

    pub fn ones(shape: &[usize], precision: Precision) -> Self {
        Self::full(shape, 1.0, precision)
    }

    pub fn scalar(value: f64, precision: Precision) -> Self {
        Self::from_raw(vec![1], vec![value], precision)
    }

    pub fn eye(n: usize, precision: Precision) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::from_raw(vec![n, n], data, precision)
    }

    pub fn diag(values: &[f64], precision: Precision) -> Self {
        let n = values.len();
        let mut data = vec![0.0; n * n];
        for (i, v) in values.iter().enumerate() {
            data[i * n + i] = *v;
        }
        Self::from_raw(vec![n, n], data, precision)
    }

    /// Row-major one-hot matrix of shape `[labels.len(), n]`.
    pub fn one_hot(labels: &[usize], n: usize, precision: Precision) -> Result<Self> {
        let mut data = vec![0.0; labels.len() * n];
        for (row, &label) in labels.iter().enumerate() {
            if label >= n {
                return Err(AdError::InvalidArgument {
                    op: "one_hot",
                    detail: format!("label {label} out of range for {n} classes"),
                });
            }
            data[row * n + label] = 1.0;
        }
        Ok(Self::from_raw(vec![labels.len(), n], data, precision))
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

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        self.is_scalar().then(|| self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_precision(&self, precision: Precision) -> Self {
        Self::from_raw(self.shape.clone(), self.data.clone(), precision)
    }

    /// Element at a 2-D index.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[row * self.shape[1] + col]
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_raw(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
            self.precision,
        )
    }

    fn check_same(&self, op: &'static str, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(AdError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        if self.precision != other.precision {
            return Err(AdError::PrecisionMismatch {
                op,
                lhs: self.precision,
                rhs: other.precision,
            });
        }
        Ok(())
    }

    pub fn zip_with(&self, op: &'static str, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same(op, other)?;
        Ok(Self::from_raw(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            self.precision,
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_with("mul", other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let bad = || AdError::ShapeMismatch {
            op: "matmul",
            lhs: self.shape.clone(),
            rhs: other.shape.clone(),
        };
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(bad());
        }
        if self.precision != other.precision {
            return Err(AdError::PrecisionMismatch {
                op: "matmul",
                lhs: self.precision,
                rhs: other.precision,
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self::from_raw(vec![m, n], out, self.precision))
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(AdError::InvalidArgument {
                op: "transpose",
                detail: format!("expected a matrix, got shape {:?}", self.shape),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: out,
            precision: self.precision,
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(AdError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
            precision: self.precision,
        })
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        let (outer, len, inner) = around_axis("sum", &self.shape, axis)?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &self.data[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = 1;
        Ok(Self::from_raw(shape, out, self.precision))
    }

    /// Repeats an extent-1 `axis` `n` times.
    pub fn expand_axis(&self, axis: usize, n: usize) -> Result<Self> {
        let (outer, len, inner) = around_axis("expand", &self.shape, axis)?;
        if len != 1 {
            return Err(AdError::InvalidArgument {
                op: "expand",
                detail: format!("axis {axis} of {:?} must have extent 1", self.shape),
            });
        }
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            let src = &self.data[o * inner..(o + 1) * inner];
            for _ in 0..n {
                out.extend_from_slice(src);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = n;
        Ok(Self {
            shape,
            data: out,
            precision: self.precision,
        })
    }

    /// Largest element along `axis`, keeping it with extent 1.
    pub fn max_axis(&self, axis: usize) -> Result<Self> {
        let (outer, len, inner) = around_axis("max", &self.shape, axis)?;
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    let v = self.data[(o * len + a) * inner + i];
                    let d = &mut out[o * inner + i];
                    if v > *d {
                        *d = v;
                    }
                }
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = 1;
        Ok(Self {
            shape,
            data: out,
            precision: self.precision,
        })
    }

    pub fn softmax(&self, axis: usize) -> Result<Self> {
        let (outer, len, inner) = around_axis("softmax", &self.shape, axis)?;
        let mut out = vec![0.0; self.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let m = (0..len).map(|a| self.data[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for a in 0..len {
                    let e = (self.data[idx(a)] - m).exp();
                    out[idx(a)] = e;
                    total += e;
                }
                for a in 0..len {
                    out[idx(a)] /= total;
                }
            }
        }
        Ok(Self::from_raw(self.shape.clone(), out, self.precision))
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or(AdError::InvalidArgument {
            op: "concat",
            detail: "no operands".into(),
        })?;
        around_axis("concat", &first.shape, axis)?;
        for p in &parts[1..] {
            let off_axis_equal = p.shape.len() == first.shape.len()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !off_axis_equal {
                return Err(AdError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            if p.precision != first.precision {
                return Err(AdError::PrecisionMismatch {
                    op: "concat",
                    lhs: first.precision,
                    rhs: p.precision,
                });
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                out.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Self {
            shape,
            data: out,
            precision: first.precision,
        })
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let (outer, full, inner) = around_axis("slice", &self.shape, axis)?;
        if start + len > full {
            return Err(AdError::InvalidArgument {
                op: "slice",
                detail: format!("range {start}..{} exceeds extent {full}", start + len),
            });
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self {
            shape,
            data: out,
            precision: self.precision,
        })
    }

    /// Selects rows of a matrix (or first-axis slices) by index.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Self> {
        let n = self.rows();
        let width = self.numel() / n.max(1);
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            if r >= n {
                return Err(AdError::InvalidArgument {
                    op: "gather_rows",
                    detail: format!("row {r} out of range for {n} rows"),
                });
            }
            out.extend_from_slice(&self.data[r * width..(r + 1) * width]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Self {
            shape,
            data: out,
            precision: self.precision,
        })
    }

    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows())
            .map(|r| {
                let row = self.row(r);
                let mut best = 0;
                for (j, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}
