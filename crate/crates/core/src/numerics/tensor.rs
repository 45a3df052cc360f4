use super::{kernels, NumericsError, Result};

/// Dense row-major float64 array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumericsError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// `(rows, cols)` of a matrix; vectors are treated as a single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            [c] => Ok((1, *c)),
            _ => Err(NumericsError::Shape {
                op: "dims2",
                lhs: self.shape.clone(),
                rhs: vec![],
            }),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let shape_err = || NumericsError::Shape {
            op: "matmul",
            lhs: self.shape.clone(),
            rhs: other.shape.clone(),
        };
        let (m, k) = match self.shape.as_slice() {
            [m, k] => (*m, *k),
            _ => return Err(shape_err()),
        };
        let (k2, n) = match other.shape.as_slice() {
            [k2, n] => (*k2, *n),
            _ => return Err(shape_err()),
        };
        if k != k2 {
            return Err(shape_err());
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = match self.shape.as_slice() {
            [r, c] => (*r, *c),
            _ => {
                return Err(NumericsError::Shape {
                    op: "transpose",
                    lhs: self.shape.clone(),
                    rhs: vec![],
                })
            }
        };
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, n, inner) = axis_geometry(&self.shape, axis)?;
        if n == 0 {
            return Err(NumericsError::EmptyAxis { op: "softmax" });
        }
        let mut out = self.data.clone();
        let mut buf = vec![0.0; n];
        for o in 0..outer {
            for i in 0..inner {
                for j in 0..n {
                    buf[j] = self.data[(o * n + j) * inner + i];
                }
                kernels::softmax_in_place(&mut buf);
                for j in 0..n {
                    out[(o * n + j) * inner + i] = buf[j];
                }
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }
}

/// Splits a shape around `axis` into `(outer, extent, inner)`.
pub(crate) fn axis_geometry(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if shape.is_empty() && axis == 0 {
        return Ok((1, 1, 1));
    }
    if axis >= shape.len() {
        return Err(NumericsError::Axis {
            axis,
            shape: shape.to_vec(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let a = Tensor::identity(2);
        let b = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap(), b);
    }

    #[test]
    fn selector_row_matmul() {
        let a = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let b = Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert_eq!(
            err,
            NumericsError::Shape {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = crate::numerics::RngState::new(7);
        let a = Tensor::matrix(3, 4, (0..12).map(|_| rng.normal()).collect()).unwrap();
        let b = Tensor::matrix(4, 2, (0..8).map(|_| rng.normal()).collect()).unwrap();
        let c = a.matmul(&b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for p in 0..4 {
                    acc += a.data()[i * 4 + p] * b.data()[p * 2 + j];
                }
                assert!((c.data()[i * 2 + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let u = Tensor::vector(vec![0.0, 0.0, 0.0]).softmax(0).unwrap();
        for v in u.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let s = Tensor::vector(vec![2.0, 0.0]).softmax(0).unwrap();
        let e2 = 2f64.exp();
        assert!((s.data()[0] - e2 / (e2 + 1.0)).abs() < 1e-12);
        assert!((s.data()[0] - 0.8808).abs() < 1e-4);
        assert!((s.data()[1] - 0.1192).abs() < 1e-4);
        let big = Tensor::vector(vec![1000.0, 0.0]).softmax(0).unwrap();
        assert_eq!(big.data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_along_first_axis() {
        let t = Tensor::matrix(2, 2, vec![0.0, 1.0, 0.0, 3.0]).unwrap();
        let s = t.softmax(0).unwrap();
        assert!((s.data()[0] - 0.5).abs() < 1e-12);
        assert!((s.data()[1] + s.data()[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_empty_axis_is_error() {
        let t = Tensor::zeros(&[2, 0]);
        assert!(matches!(
            t.softmax(1),
            Err(NumericsError::EmptyAxis { .. })
        ));
    }
}
