//! Dense n-dimensional `f64` arrays in row-major layout.
//!
//! All arithmetic is 64-bit and all operations are pure: inputs are borrowed
//! immutably and results are freshly allocated. Checkpoint and dataset files
//! store 32-bit floats; widening to f64 on load is exact.

use crate::error::{Error, Result};

/// Dense tensor: a shape and a flat row-major data buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data.len()` matches the shape product.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::Argument(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        if data.len() != expected {
            return Err(Error::Argument(format!(
                "data length {} does not match shape {:?} (product {})",
                data.len(),
                shape,
                expected
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![value; len],
        }
    }

    /// Rank-1 tensor from a slice.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// Same data viewed under a different shape with equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape,
            });
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|x| x * factor)
    }

    pub fn square(&self) -> Self {
        self.map(|x| x * x)
    }

    /// Elementwise square root.
    ///
    /// Entries in `[-1e-12, 0)` are treated as floating-point noise and
    /// clamped to 0; anything more negative is an error rather than a NaN.
    pub fn sqrt(&self) -> Result<Self> {
        if let Some(&bad) = self.data.iter().find(|&&x| x < -1e-12) {
            return Err(Error::Numerical(format!(
                "sqrt of negative value {bad} beyond tolerance"
            )));
        }
        Ok(self.map(|x| x.max(0.0).sqrt()))
    }

    pub fn clamp_min(&self, min: f64) -> Self {
        self.map(|x| x.max(min))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[p * n..(p + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                for (d, &b) in dst.iter_mut().zip(row) {
                    *d += a * b;
                }
            }
        }
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Valid (no padding, stride 1) cross-correlation with per-output-channel
    /// bias. Input is CHW, kernels are KCHW, bias has length K.
    pub fn conv2d_valid(&self, kernels: &Self, bias: &Self) -> Result<Self> {
        let err = || Error::ShapeMismatch {
            op: "conv2d_valid",
            left: self.shape.clone(),
            right: kernels.shape.clone(),
        };
        if self.rank() != 3 || kernels.rank() != 4 {
            return Err(err());
        }
        let (c_in, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        let (k_out, kc, kh, kw) = (
            kernels.shape[0],
            kernels.shape[1],
            kernels.shape[2],
            kernels.shape[3],
        );
        if kc != c_in || kh > h || kw > w {
            return Err(err());
        }
        if bias.rank() != 1 || bias.len() != k_out {
            return Err(Error::ShapeMismatch {
                op: "conv2d_valid bias",
                left: bias.shape.clone(),
                right: vec![k_out],
            });
        }
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let mut out = vec![0.0; k_out * oh * ow];
        for k in 0..k_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.data[k];
                    for c in 0..c_in {
                        for ky in 0..kh {
                            let in_row = &self.data[c * h * w + (oy + ky) * w + ox..];
                            let k_row =
                                &kernels.data[k * kc * kh * kw + c * kh * kw + ky * kw..][..kw];
                            for (kx, &kv) in k_row.iter().enumerate() {
                                acc += in_row[kx] * kv;
                            }
                        }
                    }
                    out[k * oh * ow + oy * ow + ox] = acc;
                }
            }
        }
        Ok(Self {
            shape: vec![k_out, oh, ow],
            data: out,
        })
    }
}
