use crate::error::{shape_err, Error, Result};

use super::Real;

/// Dense row-major tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<R> {
    shape: Vec<usize>,
    data: Vec<R>,
    requires_grad: bool,
    grad: Option<Vec<R>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.contains(&0) {
        return shape_err(format!("extents must be positive, got {shape:?}"));
    }
    if numel(shape) != len {
        return shape_err(format!(
            "shape {shape:?} holds {} values but {len} were supplied",
            numel(shape)
        ));
    }
    Ok(())
}

impl<R: Real> Tensor<R> {
    pub fn new(shape: &[usize], data: Vec<R>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| R::from_f64(x)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape, vec![R::zero(); numel(shape)])
    }

    pub fn full(shape: &[usize], value: R) -> Result<Self> {
        Self::new(shape, vec![value; numel(shape)])
    }

    pub fn scalar(value: R) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<R> {
        self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[R]> {
        self.grad.as_deref()
    }

    /// Installs a gradient buffer; it must match the value shape.
    pub fn set_grad(&mut self, grad: Vec<R>) -> Result<()> {
        if grad.len() != self.data.len() {
            return shape_err(format!(
                "gradient of length {} for tensor of shape {:?}",
                grad.len(),
                self.shape
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Value at a multi-index.
    pub fn at(&self, index: &[usize]) -> R {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (&i, &e) in index.iter().zip(&self.shape) {
            assert!(i < e, "index {index:?} out of bounds for {:?}", self.shape);
            flat = flat * e + i;
        }
        self.data[flat]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_shape(shape, self.data.len())?;
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| S::from_f64(x.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self[:, cols]` for a rank-2 tensor.
    pub fn columns(&self, cols: std::ops::Range<usize>) -> Result<Self> {
        let [rows, width] = self.shape[..] else {
            return shape_err(format!("columns() needs a matrix, got {:?}", self.shape));
        };
        if cols.end > width || cols.is_empty() {
            return shape_err(format!("column range {cols:?} out of 0..{width}"));
        }
        let mut out = Vec::with_capacity(rows * cols.len());
        for r in 0..rows {
            out.extend_from_slice(&self.data[r * width + cols.start..r * width + cols.end]);
        }
        Self::new(&[rows, cols.len()], out)
    }

    /// `self[rows, :]` for a rank-2 tensor.
    pub fn rows(&self, rows: std::ops::Range<usize>) -> Result<Self> {
        let [height, width] = self.shape[..] else {
            return shape_err(format!("rows() needs a matrix, got {:?}", self.shape));
        };
        if rows.end > height || rows.is_empty() {
            return shape_err(format!("row range {rows:?} out of 0..{height}"));
        }
        Self::new(
            &[rows.len(), width],
            self.data[rows.start * width..rows.end * width].to_vec(),
        )
    }

    /// Plain matrix product of two rank-2 tensors, outside any tape.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let ([m, k], [k2, n]) = (&self.shape[..], &other.shape[..]) else {
            return shape_err("Tensor::matmul expects two matrices");
        };
        if k != k2 {
            return shape_err(format!(
                "inner extents differ: {:?} · {:?}",
                self.shape, other.shape
            ));
        }
        let mut out = vec![R::zero(); m * n];
        R::gemm(false, false, *m, *k, *n, &self.data, &other.data, &mut out, false);
        Self::new(&[*m, *n], out)
    }

    pub fn transpose(&self) -> Result<Self> {
        let [rows, cols] = self.shape[..] else {
            return shape_err(format!("transpose needs a matrix, got {:?}", self.shape));
        };
        let mut out = vec![R::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = self.data[r * cols + c];
            }
        }
        Self::new(&[cols, rows], out)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return shape_err(format!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }
}

/// Additive attention mask of `0` (keep) and `-inf` (drop) entries.
///
/// Shape is `rows × cols` with `rows` either 1 (broadcast over queries,
/// e.g. key padding) or the query count.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Mask {
    pub fn from_additive(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || values.len() != rows * cols {
            return shape_err(format!(
                "mask {rows}×{cols} with {} entries",
                values.len()
            ));
        }
        if let Some(v) = values.iter().find(|&&v| !(v == 0.0 || v == f64::NEG_INFINITY)) {
            return Err(Error::Input(format!(
                "mask entries must be 0 or -inf, found {v}"
            )));
        }
        Ok(Self { rows, cols, values })
    }

    /// Lower-triangular visibility: query `i` sees keys `0..=i`.
    pub fn causal(n: usize) -> Self {
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                values[i * n + j] = f64::NEG_INFINITY;
            }
        }
        Self {
            rows: n,
            cols: n,
            values,
        }
    }

    /// One row that hides every key flagged as padding.
    pub fn key_padding(pad: &[bool]) -> Self {
        Self {
            rows: 1,
            cols: pad.len(),
            values: pad
                .iter()
                .map(|&p| if p { f64::NEG_INFINITY } else { 0.0 })
                .collect(),
        }
    }

    /// Union of blocked entries, broadcasting a single-row mask.
    pub fn combine(&self, other: &Mask) -> Result<Mask> {
        if self.cols != other.cols {
            return shape_err(format!(
                "cannot combine masks over {} and {} keys",
                self.cols, other.cols
            ));
        }
        let rows = self.rows.max(other.rows);
        if (self.rows != rows && self.rows != 1) || (other.rows != rows && other.rows != 1) {
            return shape_err(format!("mask rows {} vs {}", self.rows, other.rows));
        }
        let mut values = vec![0.0; rows * self.cols];
        for r in 0..rows {
            for c in 0..self.cols {
                values[r * self.cols + c] = self.get(r, c) + other.get(r, c);
            }
        }
        Ok(Mask {
            rows,
            cols: self.cols,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Additive value for query `row`, key `col` (broadcasting one-row masks).
    pub fn get(&self, row: usize, col: usize) -> f64 {
        let r = if self.rows == 1 { 0 } else { row };
        self.values[r * self.cols + col]
    }

    pub fn is_blocked(&self, row: usize, col: usize) -> bool {
        self.get(row, col) == f64::NEG_INFINITY
    }

    pub fn blocked_count(&self) -> usize {
        self.values.iter().filter(|&&v| v == f64::NEG_INFINITY).count()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f64>::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f64>::new(&[0, 2], vec![]).is_err());
        let t = Tensor::<f64>::new(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
        assert_eq!(Tensor::scalar(1.0f32).rank(), 0);
    }

    #[test]
    fn grad_must_match_shape() {
        let mut t = Tensor::<f64>::zeros(&[3]).unwrap();
        assert!(t.set_grad(vec![0.0; 2]).is_err());
        t.set_grad(vec![1.0; 3]).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.0; 3]);
    }

    #[test]
    fn causal_masks() {
        assert_eq!(Mask::causal(1).values(), &[0.0]);
        assert_eq!(Mask::causal(2).values(), &[0.0, f64::NEG_INFINITY, 0.0, 0.0]);
        assert_eq!(Mask::causal(3).blocked_count(), 3);
        assert_eq!(Mask::causal(7).blocked_count(), 21);
    }

    #[test]
    fn combine_broadcasts_padding_rows() {
        let m = Mask::causal(3)
            .combine(&Mask::key_padding(&[false, false, true]))
            .unwrap();
        assert!(m.is_blocked(2, 2));
        assert!(!m.is_blocked(2, 1));
        assert!(m.is_blocked(0, 1));
        assert!(Mask::from_additive(1, 2, vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn slicing() {
        let t = Tensor::<f64>::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(t.columns(1..3).unwrap().data(), &[2., 3., 5., 6.]);
        assert_eq!(t.rows(1..2).unwrap().data(), &[4., 5., 6.]);
        assert_eq!(t.transpose().unwrap().data(), &[1., 4., 2., 5., 3., 6.]);
    }
}
