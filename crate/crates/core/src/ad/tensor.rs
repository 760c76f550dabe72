use serde::{Deserialize, Serialize};

use super::AdError;

/// Dense row-major matrix of `f64`.
///
/// Every tensor is rank two. Scalars are `1x1` and vectors are single rows,
/// which keeps broadcasting and reductions down to two axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: [usize; 2],
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: [usize; 2], data: Vec<f64>) -> Result<Self, AdError> {
        if shape[0] * shape[1] != data.len() {
            return Err(AdError::InvalidArgument(format!(
                "tensor of shape {:?} needs {} values, got {}",
                shape,
                shape[0] * shape[1],
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::full(rows, cols, 0.0)
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            shape: [rows, cols],
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: [1, 1],
            data: vec![value],
        }
    }

    pub fn row(values: &[f64]) -> Self {
        Self {
            shape: [1, values.len()],
            data: values.to_vec(),
        }
    }

    pub fn column(values: &[f64]) -> Self {
        Self {
            shape: [values.len(), 1],
            data: values.to_vec(),
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, AdError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(AdError::InvalidArgument("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new([rows.len(), cols], data)
    }

    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        let cols = self.shape[1];
        self.data[r * cols + c] = value;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    /// Value of a `1x1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn transpose(&self) -> Self {
        let [r, c] = self.shape;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Self {
            shape: [c, r],
            data,
        }
    }

    pub(crate) fn matmul(&self, other: &Self) -> Self {
        let [m, k] = self.shape;
        let n = other.shape[1];
        debug_assert_eq!(k, other.shape[0]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Self {
            shape: [m, n],
            data: out,
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Output shape of a two-axis broadcast, if the shapes are compatible.
pub(crate) fn broadcast_shape(a: [usize; 2], b: [usize; 2]) -> Option<[usize; 2]> {
    let dim = |x: usize, y: usize| {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    Some([dim(a[0], b[0])?, dim(a[1], b[1])?])
}

/// Expands `t` to `shape`; axes of extent one are repeated.
pub(crate) fn broadcast_to(t: &Tensor, shape: [usize; 2]) -> Tensor {
    if t.shape == shape {
        return t.clone();
    }
    let [r, c] = shape;
    let rs = usize::from(t.shape[0] != 1);
    let cs = usize::from(t.shape[1] != 1);
    let tc = t.shape[1];
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            data.push(t.data[(i * rs) * tc + j * cs]);
        }
    }
    Tensor { shape, data }
}

/// Sums `t` over the axes where `shape` has extent one; the adjoint of
/// [`broadcast_to`].
pub(crate) fn reduce_to(t: &Tensor, shape: [usize; 2]) -> Tensor {
    if t.shape == shape {
        return t.clone();
    }
    let [r, c] = t.shape;
    let mut out = Tensor::zeros(shape[0], shape[1]);
    let rs = usize::from(shape[0] != 1);
    let cs = usize::from(shape[1] != 1);
    for i in 0..r {
        for j in 0..c {
            out.data[(i * rs) * shape[1] + j * cs] += t.data[i * c + j];
        }
    }
    out
}

/// Applies `f` elementwise over the broadcast of `a` and `b`.
pub(crate) fn broadcast_zip(
    a: &Tensor,
    b: &Tensor,
    shape: [usize; 2],
    f: impl Fn(f64, f64) -> f64,
) -> Tensor {
    let [r, c] = shape;
    let (ars, acs) = (usize::from(a.shape[0] != 1), usize::from(a.shape[1] != 1));
    let (brs, bcs) = (usize::from(b.shape[0] != 1), usize::from(b.shape[1] != 1));
    let (ac, bc) = (a.shape[1], b.shape[1]);
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            let x = a.data[(i * ars) * ac + j * acs];
            let y = b.data[(i * brs) * bc + j * bcs];
            data.push(f(x, y));
        }
    }
    Tensor { shape, data }
}
