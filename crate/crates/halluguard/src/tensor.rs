//! Dense row-major f64 tensors with an optional gradient buffer.
//!
//! This is deliberately minimal: no strides, no views, no broadcasting beyond
//! what the layers need. Values are validated to be finite at construction and
//! after every forward op, since a single NaN silently poisons training.

use crate::error::{Error, Result};
use crate::kernels;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} elements, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        kernels::ensure_finite(&data, "tensor construction")?;
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn rand_normal(rng: &mut Rng, shape: Vec<usize>, std: f64) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.normal() * std).collect();
        Tensor {
            shape,
            data,
            grad: None,
        }
    }

    pub fn rand_uniform(rng: &mut Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform(lo, hi)).collect();
        Tensor {
            shape,
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() requires a 2-D tensor");
        self.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() requires a 2-D tensor");
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn at2_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        let c = self.shape[1];
        &mut self.data[i * c + j]
    }

    // -- gradient buffer ------------------------------------------------

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated zeroed on first use.
    pub fn grad_mut(&mut self) -> &mut [f64] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub fn clear_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    // -- plain (non-autograd) math --------------------------------------

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let out = kernels::matmul(
            &self.data,
            self.shape[0],
            self.shape[1],
            &other.data,
            other.shape[1],
        );
        Tensor::new(vec![self.shape[0], other.shape[1]], out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.shape.len() {
            return Err(Error::invalid(format!(
                "softmax axis {} out of range for shape {:?}",
                axis, self.shape
            )));
        }
        kernels::ensure_finite(&self.data, "softmax input")?;
        let axis_len = self.shape[axis];
        // Lane stride layout: for each fixed (outer, inner) index pair, the
        // lane runs along `axis` with stride = product of dims after it.
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out = self.data.clone();
        let mut lane = vec![0.0; axis_len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * axis_len * inner + i;
                for (k, slot) in lane.iter_mut().enumerate() {
                    *slot = self.data[base + k * inner];
                }
                kernels::softmax_row(&mut lane);
                for (k, &v) in lane.iter().enumerate() {
                    out[base + k * inner] = v;
                }
            }
        }
        Tensor::new(self.shape.clone(), out)
    }

    /// Layer normalization over the last axis with an affine transform.
    /// Returns the normalized tensor and the (mean, variance) recorded per
    /// position, which attribution later needs to linearize the norm.
    pub fn layer_norm(&self, gain: &[f64], bias: &[f64], eps: f64) -> Result<(Tensor, Vec<(f64, f64)>)> {
        if eps <= 0.0 {
            return Err(Error::invalid(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let width = *self.shape.last().ok_or_else(|| Error::Shape("layer_norm on 0-d tensor".into()))?;
        if gain.len() != width || bias.len() != width {
            return Err(Error::Shape(format!(
                "layer_norm gain/bias length {} / {} vs width {}",
                gain.len(),
                bias.len(),
                width
            )));
        }
        let positions = self.data.len() / width;
        let mut out = vec![0.0; self.data.len()];
        let mut stats = Vec::with_capacity(positions);
        for p in 0..positions {
            let x = &self.data[p * width..(p + 1) * width];
            let (mean, var) =
                kernels::layer_norm_row(x, gain, bias, eps, &mut out[p * width..(p + 1) * width]);
            stats.push((mean, var));
        }
        Ok((Tensor::new(self.shape.clone(), out)?, stats))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_validates_shape_and_finiteness() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let t = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let s = t.softmax(0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);

        let t = Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap();
        let s = t.softmax(0).unwrap();
        assert!(s.data()[0] > 1.0 - 1e-12);
        assert!(s.data()[1] < 1e-12);
        assert!(s.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_matches_scalar_evaluation() {
        // exp(1..3)/sum, evaluated independently at high precision.
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let s = t.softmax(0).unwrap();
        let expect = [
            0.09003057317038046,
            0.24472847105479767,
            0.6652409557748219,
        ];
        for (got, want) in s.data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn softmax_sums_to_one_across_magnitudes() {
        let mut rng = Rng::new(31);
        for scale in [1.0, 10.0, 1e3] {
            let t = Tensor::rand_uniform(&mut rng, vec![4, 7], -scale, scale);
            let s = t.softmax(1).unwrap();
            for i in 0..4 {
                let sum: f64 = s.row(i).iter().sum();
                assert!((sum - 1.0).abs() < 1e-9, "sum {sum} at scale {scale}");
            }
        }
    }

    #[test]
    fn softmax_interior_axis() {
        let t = Tensor::new(vec![2, 2, 2], (0..8).map(|i| i as f64).collect()).unwrap();
        let s = t.softmax(1).unwrap();
        // Lanes along axis 1: elements (i, 0, k) and (i, 1, k).
        for i in 0..2 {
            for k in 0..2 {
                let a = s.data()[i * 4 + k];
                let b = s.data()[i * 4 + 2 + k];
                assert!((a + b - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_constant_input_is_zero() {
        let t = Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap();
        let (out, stats) = t.layer_norm(&[1.0; 3], &[0.0; 3], 1e-9).unwrap();
        for v in out.data() {
            assert!(v.abs() < 1e-3);
        }
        assert_eq!(stats[0].0, 1.0);
        assert!(stats[0].1.abs() < 1e-12);
    }

    #[test]
    fn layer_norm_already_normalized() {
        let t = Tensor::new(vec![2], vec![-1.0, 1.0]).unwrap();
        let (out, _) = t.layer_norm(&[1.0; 2], &[0.0; 2], 1e-12).unwrap();
        assert!((out.data()[0] + 1.0).abs() < 1e-6);
        assert!((out.data()[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_matches_scalar_evaluation() {
        // x=[0,2,4], gain=2, bias=1: mean 2, var 8/3, normalized ±sqrt(3/2).
        let t = Tensor::new(vec![3], vec![0.0, 2.0, 4.0]).unwrap();
        let eps = 1e-12;
        let (out, stats) = t.layer_norm(&[2.0; 3], &[1.0; 3], eps).unwrap();
        let scale = 2.0 / (8.0 / 3.0 + eps).sqrt();
        let expect = [1.0 - 2.0 * scale, 1.0, 1.0 + 2.0 * scale];
        for (got, want) in out.data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        assert_eq!(stats[0].0, 2.0);
        assert!((stats[0].1 - 8.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_zero_mean_unit_variance_before_affine() {
        let mut rng = Rng::new(77);
        let t = Tensor::rand_uniform(&mut rng, vec![5, 8], -3.0, 3.0);
        let (out, _) = t.layer_norm(&[1.0; 8], &[0.0; 8], 1e-9).unwrap();
        for i in 0..5 {
            let r = out.row(i);
            let mean: f64 = r.iter().sum::<f64>() / 8.0;
            let var: f64 = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_rejects_nonpositive_eps() {
        let t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(t.layer_norm(&[1.0; 2], &[0.0; 2], 0.0).is_err());
    }

    #[test]
    fn matmul_small_oracle() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::matrix(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }
}
